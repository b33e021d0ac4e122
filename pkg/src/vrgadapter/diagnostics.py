"""Whole-pipeline checks: finite-difference gradient audit, component ablation
and per-class dumps for external plotting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np

from vrgadapter import rng
from vrgadapter.adapter import train_eps
from vrgadapter.branches import zero_shot_logits
from vrgadapter.bundle_io import Checkpoint, EmbeddingBundle, SynthConfig, synth_generate
from vrgadapter.model import ModelConfig, VRGModel
from vrgadapter.numkernel import GradCheckReport, grad_check
from vrgadapter.trainer import TrainConfig, evaluate, train
from vrgadapter.vrkg import estimate_class_gaussians


def gradcheck_instance(seed: int = 0) -> tuple[VRGModel, dict, np.ndarray, np.ndarray]:
    """Small pipeline (C=6, D=8, hidden=4, M=5, K=2) with nonzero residuals and fixed eps.

    Description noise is large so the variance path carries O(1e-3) values
    rather than sitting on the sqrt kink at zero.
    """
    bundle = synth_generate(SynthConfig(classes=6, train_per_class=2, test_per_class=1, descriptions=5,
                                        d_text=8, aux_dims=(8, 8), desc_noise=1.0, seed=seed))
    model = VRGModel.from_bundle(bundle, ModelConfig(hidden=4, seed=seed))
    for b in model.bank:
        b.delta.value = 0.1 * rng.normal(b.delta.shape, seed, "gradcheck", b.name)
    tr = bundle.split("train")
    eps = train_eps(model.gauss.mu.shape, seed, 1)
    return model, tr.features, tr.labels.astype(np.int64), eps


def pipeline_grad_check(seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    model, feats, labels, eps = gradcheck_instance(seed)

    def loss() -> float:
        model.zero_grad()
        return model.loss_and_grad(feats, labels, eps).loss

    return grad_check(loss, model.params(), h=h, tol=tol, seed=seed)


def zero_shot_accuracy(bundle: EmbeddingBundle, split: str = "test") -> float:
    """Untrained baseline: cosine scores against the mean description embedding."""
    sp = bundle.split(split)
    mu = estimate_class_gaussians(bundle.text_desc).mu
    pred = zero_shot_logits(sp.features[bundle.zero_shot_branch], mu).argmax(axis=1)
    return float(np.mean(pred == sp.labels))


@dataclass
class AblationResult:
    seeds: list[int]
    full: list[float]
    no_umf: list[float]
    zero_shot: list[float]

    def means(self) -> dict[str, float]:
        return {"full": float(np.mean(self.full)), "no_umf": float(np.mean(self.no_umf)),
                "zero_shot": float(np.mean(self.zero_shot))}

    @property
    def ordered(self) -> bool:
        m = self.means()
        return m["full"] >= m["no_umf"] >= m["zero_shot"]


def ablation(seeds=range(10), synth: SynthConfig | None = None, cfg: TrainConfig | None = None) -> AblationResult:
    """Full model vs plain-average fusion vs untrained zero-shot, one bundle per seed."""
    synth = synth or SynthConfig()
    cfg = cfg or TrainConfig()
    base = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    res = AblationResult([], [], [], [])
    for s in seeds:
        bundle = synth_generate(SynthConfig(**{**{f.name: getattr(synth, f.name) for f in fields(SynthConfig)},
                                               "seed": s, "mixing_seed": 1000 + s}))
        full, _ = train(bundle, TrainConfig(**{**base, "seed": s}))
        mean, _ = train(bundle, TrainConfig(**{**base, "seed": s, "fusion": "mean"}))
        res.seeds.append(s)
        res.full.append(evaluate(full, bundle)["accuracy"])
        res.no_umf.append(evaluate(mean, bundle)["accuracy"])
        res.zero_shot.append(zero_shot_accuracy(bundle))
    return res


def inspect_rows(ckpt: Checkpoint, bundle: EmbeddingBundle) -> list[dict]:
    """Per-class norms of the initial and final Gaussians, W_t, and adjacency rows."""
    model = VRGModel.from_checkpoint(bundle, ckpt)
    W_t, cache = model.text_prototypes()
    out = cache.out
    names = bundle.class_names or [str(i) for i in range(bundle.C)]
    rows = []
    for i in range(bundle.C):
        row = {
            "class": i, "name": names[i],
            "mu0_norm": float(np.linalg.norm(model.gauss.mu[i])),
            "var0_sum": float(model.gauss.var[i].sum()),
            "muL_norm": float(np.linalg.norm(out.mu[i])),
            "varL_sum": float(out.var[i].sum()),
            "w_norm": float(np.linalg.norm(W_t[i])),
            "degree": float(model.graph.deg[i]),
        }
        row.update({f"adj_{j}": float(model.graph.A[i, j]) for j in range(bundle.C)})
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
