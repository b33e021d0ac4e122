import math

import numpy as np
import pytest

from vrgadapter.branches import zero_shot_logits
from vrgadapter.bundle_io import Split, SynthConfig, synth_generate
from vrgadapter.errors import ConfigError, DataError, NumericalError
from vrgadapter.fusion import fuse
from vrgadapter.model import ModelConfig, VRGModel
from vrgadapter.numkernel import Param
from vrgadapter.trainer import AdamState, TrainConfig, adamw_step, cosine_lr, evaluate, train
from vrgadapter.vrkg import estimate_class_gaussians


@pytest.fixture(scope="module")
def small_bundle():
    return synth_generate(SynthConfig(classes=4, train_per_class=5, test_per_class=6, descriptions=3,
                                      d_text=8, aux_dims=(6, 5), seed=2))


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)
    lrs = [cosine_lr(s, 37, 1.0) for s in range(38)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigError):
        cosine_lr(5, 4, 1.0)


def _param(values, grad):
    p = Param(np.array(values, dtype=float))
    p.grad = np.array(grad, dtype=float)
    return p


def test_adamw_null_update():
    p = _param([1.0, -2.0], [0.0, 0.0])
    adamw_step([p], AdamState.zeros([p]), 1e-3, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adamw_first_step_moves_by_lr():
    p = _param([1.0, -2.0, 0.5], [3.0, -0.01, 1e3])
    adamw_step([p], AdamState.zeros([p]), 1e-3, TrainConfig(weight_decay=0.0))
    # bias-corrected m/sqrt(v) = g/|g| up to eps
    np.testing.assert_allclose(p.value, [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3], atol=1e-9)


def test_adamw_decoupled_decay():
    p = _param([1.0, -2.0], [0.0, 0.0])
    adamw_step([p], AdamState.zeros([p]), 1e-3, TrainConfig(weight_decay=0.01))
    np.testing.assert_allclose(p.value, np.array([1.0, -2.0]) * (1 - 1e-3 * 0.01), rtol=1e-15)


def test_adamw_matches_reference_loop():
    g = np.random.default_rng(0)
    p = Param(g.normal(size=3))
    state = AdamState.zeros([p])
    cfg = TrainConfig()
    theta, m, v = p.value.copy(), np.zeros(3), np.zeros(3)
    for t in range(1, 6):
        grad = g.normal(size=3)
        p.grad = grad.copy()
        adamw_step([p], state, 1e-2, cfg)
        m = 0.9 * m + 0.1 * grad
        v = 0.999 * v + 0.001 * grad ** 2
        theta = theta - 1e-2 * ((m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8) + 0.01 * theta)
    np.testing.assert_allclose(p.value, theta, rtol=1e-13)


def test_adamw_rejects_nonfinite_gradient():
    p = _param([1.0], [np.inf])
    with pytest.raises(NumericalError):
        adamw_step([p], AdamState.zeros([p]), 1e-3, TrainConfig())


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0.0}, {"batch_size": 0}, {"beta1": 1.0},
                                {"alpha": 1.2}, {"lam": 0.0}, {"layers": 0}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_train_reports_per_epoch_records(small_bundle):
    ckpt, hist = train(small_bundle, TrainConfig(epochs=3, batch_size=7))
    assert [r["epoch"] for r in hist] == [0, 1, 2, 3]
    assert hist[-1]["step"] == 3 * math.ceil(20 / 7)  # partial last batch kept
    assert set(hist[1]) == {"epoch", "step", "lr", "train_loss", "train_acc"}
    assert len(ckpt.theta_mu) == 2 and set(ckpt.deltas) == {"aux1", "aux2"}
    assert ckpt.config["epochs"] == 3


def test_train_deterministic(small_bundle):
    cfg = TrainConfig(epochs=4, batch_size=8, deterministic=True, seed=5)
    a, ha = train(small_bundle, cfg)
    b, hb = train(small_bundle, cfg)
    for x, y in zip(a.theta_mu + a.theta_var + list(a.deltas.values()),
                    b.theta_mu + b.theta_var + list(b.deltas.values())):
        assert x.tobytes() == y.tobytes()
    assert ha == hb


def test_no_aux_training(small_bundle):
    ckpt, _ = train(small_bundle, TrainConfig(epochs=2, use_aux=False))
    assert ckpt.deltas == {}
    assert 0.0 <= evaluate(ckpt, small_bundle)["accuracy"] <= 1.0


def test_evaluate_missing_split(small_bundle):
    ckpt, _ = train(small_bundle, TrainConfig(epochs=1))
    with pytest.raises(DataError):
        evaluate(ckpt, small_bundle, "val")


def test_untrained_alpha_one_matches_frozen_baseline(small_bundle):
    cfg = ModelConfig(alpha=1.0)
    model = VRGModel.from_bundle(small_bundle, cfg)
    ckpt = model.to_checkpoint()
    got = evaluate(ckpt, small_bundle)

    # independent: cosine scores against description means + raw prototype dots, kurtosis fusion
    te, tr = small_bundle.split("test"), small_bundle.split("train")
    mu = estimate_class_gaussians(small_bundle.text_desc).mu
    p_zs = zero_shot_logits(te.features["clip"], mu)
    p_aux = []
    for name in small_bundle.aux_branches:
        f = tr.features[name].astype(float)
        proto = np.stack([f[tr.labels == i].mean(0) for i in range(small_bundle.C)])
        p_aux.append(te.features[name].astype(float) @ proto.T)
    fused, _ = fuse(p_zs, p_aux, cfg.fusion_config())
    assert got["accuracy"] == float(np.mean(fused.argmax(1) == te.labels))


def test_alpha_one_no_aux_invariant_to_theta(small_bundle):
    cfg = TrainConfig(alpha=1.0, use_aux=False, epochs=1)
    ckpt, _ = train(small_bundle, cfg)
    base = evaluate(ckpt, small_bundle)
    ckpt.theta_mu = [t * -5 + 1 for t in ckpt.theta_mu]
    ckpt.theta_var = [t * 3 for t in ckpt.theta_var]
    assert evaluate(ckpt, small_bundle) == base


def test_random_labels_score_chance():
    C = 5
    b = synth_generate(SynthConfig(classes=C, train_per_class=8, test_per_class=200, descriptions=4,
                                   d_text=16, aux_dims=(16,), seed=9))
    ckpt, _ = train(b, TrainConfig(epochs=5))
    te = b.split("test")
    shuffled = np.random.default_rng(0).integers(0, C, size=te.n).astype(np.int32)
    b.splits["test"] = Split(te.features, shuffled)
    acc = evaluate(ckpt, b)["accuracy"]
    se = math.sqrt((1 / C) * (1 - 1 / C) / te.n)
    assert abs(acc - 1 / C) <= 3 * se


def test_loss_decreases_by_epoch_five():
    for seed in range(10):
        b = synth_generate(SynthConfig(seed=seed, mixing_seed=1000 + seed))
        _, hist = train(b, TrainConfig(epochs=5, seed=seed))
        assert hist[5]["train_loss"] < hist[0]["train_loss"], seed


def test_checkpoint_reload_preserves_predictions(small_bundle, tmp_path):
    from vrgadapter.bundle_io import load_checkpoint, save_checkpoint

    ckpt, _ = train(small_bundle, TrainConfig(epochs=3))
    save_checkpoint(ckpt, tmp_path / "ck")
    assert evaluate(load_checkpoint(tmp_path / "ck"), small_bundle) == evaluate(ckpt, small_bundle)


def test_model_rejects_mismatched_checkpoint(small_bundle):
    from vrgadapter.errors import FormatError

    ckpt = VRGModel.from_bundle(small_bundle, ModelConfig()).to_checkpoint()
    ckpt.deltas.pop("aux2")
    with pytest.raises(FormatError):
        evaluate(ckpt, small_bundle)
