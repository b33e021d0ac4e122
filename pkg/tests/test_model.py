import numpy as np
import pytest

from vrgadapter import rng
from vrgadapter.adapter import train_eps
from vrgadapter.bundle_io import SynthConfig, synth_generate
from vrgadapter.diagnostics import pipeline_grad_check
from vrgadapter.model import ModelConfig, VRGModel
from vrgadapter.numkernel import grad_check
from vrgadapter.trainer import TrainConfig, train


@pytest.mark.parametrize("seed", range(10))
def test_full_pipeline_gradients(seed):
    r = pipeline_grad_check(seed)
    assert r.passed, r.worst
    assert r.checked == 2 * (32 + 32) + 2 * 48


@pytest.mark.parametrize("kw", [{"fusion": "mean"}, {"alpha": 0.0}, {"normalize_zs": False, "logit_scale": 3.0},
                                {"use_aux": False}, {"layers": 1}, {"layers": 3, "lam": 1.3},
                                {"clamp_negative": False}])
def test_pipeline_gradients_across_configs(kw):
    b = synth_generate(SynthConfig(classes=5, train_per_class=2, test_per_class=1, descriptions=4,
                                   d_text=6, aux_dims=(5, 4), desc_noise=1.0, seed=1))
    model = VRGModel.from_bundle(b, ModelConfig(hidden=3, seed=1, **kw))
    for br in model.bank:
        br.delta.value = 0.1 * rng.normal(br.delta.shape, 1, br.name)
    tr = b.split("train")
    eps = train_eps(model.gauss.mu.shape, 1, 1)

    def loss():
        model.zero_grad()
        return model.loss_and_grad(tr.features, tr.labels, eps).loss

    r = grad_check(loss, model.params())
    assert r.passed, r.worst


def test_single_description_pipeline_equals_graph_adapter():
    b = synth_generate(SynthConfig(classes=6, descriptions=1, d_text=12, aux_dims=(8, 8), seed=4))
    stochastic = VRGModel.from_bundle(b, ModelConfig(seed=4))
    plain = VRGModel.from_bundle(b, ModelConfig(seed=4, graph_adapter=True))
    feats = b.split("test").features
    eps = train_eps(stochastic.gauss.mu.shape, 4, 3)
    assert stochastic.forward(feats, eps)[0].tobytes() == plain.forward(feats)[0].tobytes()
    assert stochastic.forward(feats, eps)[0].tobytes() == stochastic.forward(feats)[0].tobytes()


def test_single_description_training_matches_graph_adapter():
    b = synth_generate(SynthConfig(classes=6, descriptions=1, d_text=12, aux_dims=(8, 8), seed=4))
    a, ha = train(b, TrainConfig(epochs=5, batch_size=32, seed=4))
    g, hg = train(b, TrainConfig(epochs=5, batch_size=32, seed=4, graph_adapter=True))
    for x, y in zip(a.theta_mu + list(a.deltas.values()), g.theta_mu + list(g.deltas.values())):
        assert x.tobytes() == y.tobytes()
    assert [r["train_loss"] for r in ha] == [r["train_loss"] for r in hg]


def test_class_permutation_equivariance_of_fused_logits():
    b = synth_generate(SynthConfig(classes=5, train_per_class=3, descriptions=4, d_text=8,
                                   aux_dims=(6,), seed=7))
    perm = np.random.default_rng(0).permutation(5)
    inv = np.argsort(perm)
    pb = synth_generate(SynthConfig(classes=5, train_per_class=3, descriptions=4, d_text=8,
                                    aux_dims=(6,), seed=7))
    pb.text_desc = b.text_desc[perm]
    for sp in pb.splits.values():
        sp.labels = inv[sp.labels].astype(np.int32)
    m = VRGModel.from_bundle(b, ModelConfig(seed=0))
    mp = VRGModel.from_bundle(pb, ModelConfig(seed=0))
    feats = b.split("test").features
    np.testing.assert_allclose(mp.forward(feats)[0], m.forward(feats)[0][:, perm], atol=1e-12)
