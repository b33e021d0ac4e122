"""AdamW + cosine decay over {theta_mu, theta_var, W_delta}, evaluation, sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from vrgadapter import numkernel
from vrgadapter.adapter import train_eps
from vrgadapter.bundle_io import Checkpoint, EmbeddingBundle
from vrgadapter.errors import ConfigError, NumericalError
from vrgadapter.fusion import softmax_ce
from vrgadapter.model import ModelConfig, VRGModel
from vrgadapter.numkernel import Param
from vrgadapter.rng import Stream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig(ModelConfig):
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    deterministic: bool = False

    def __post_init__(self):
        super().__post_init__()
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{f.name: getattr(self, f.name) for f in fields(ModelConfig)})


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ConfigError(f"need 0 <= step <= total_steps, total_steps >= 1 (got {step}, {total_steps})")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros(cls, params: Sequence[Param]) -> "AdamState":
        return cls(0, [np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


def adamw_step(params: Sequence[Param], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for {p.name or 'param'} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value -= lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * p.value)


def _batch(feats: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in feats.items()}


def train(bundle: EmbeddingBundle, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train on ``bundle``'s train split. Returns the final checkpoint and one
    metrics record per epoch; record 0 is the untrained model."""
    with numkernel.deterministic(cfg.deterministic):
        model = VRGModel.from_bundle(bundle, cfg.model_config())
        train_split = bundle.split("train")
        feats = {k: numkernel.as_tensor(v) for k, v in train_split.features.items()}
        labels = train_split.labels.astype(np.int64)
        n = len(labels)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        total = steps_per_epoch * cfg.epochs
        params = model.params()
        state = AdamState.zeros(params)
        C, D = model.gauss.mu.shape

        history = []
        lv = softmax_ce(model.forward(feats, train_eps((C, D), cfg.seed, 0))[0], labels)
        history.append(_record(0, 0, cosine_lr(0, total, cfg.lr), lv.loss,
                               float(np.mean(lv.probs.argmax(1) == labels))))
        for epoch in range(1, cfg.epochs + 1):
            order = Stream(cfg.seed, "shuffle", epoch).permutation(n)
            loss_sum, correct = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                lr = cosine_lr(state.step, total, cfg.lr)
                model.zero_grad()
                eps = train_eps((C, D), cfg.seed, state.step + 1)
                lv = model.loss_and_grad(_batch(feats, idx), labels[idx], eps)
                if not math.isfinite(lv.loss):
                    raise NumericalError(f"loss diverged at epoch {epoch}")
                adamw_step(params, state, lr, cfg)
                loss_sum += lv.loss * len(idx)
                correct += int(np.sum(lv.probs.argmax(1) == labels[idx]))
            rec = _record(epoch, state.step, cosine_lr(state.step, total, cfg.lr), loss_sum / n, correct / n)
            history.append(rec)
            log.debug("epoch %d loss %.6f acc %.4f", epoch, rec["train_loss"], rec["train_acc"])
            if on_epoch is not None:
                on_epoch(rec)
        ckpt = model.to_checkpoint({f.name: getattr(cfg, f.name) for f in fields(TrainConfig)})
    return ckpt, history


def _record(epoch, step, lr, loss, acc) -> dict:
    return {"epoch": epoch, "step": step, "lr": lr, "train_loss": loss, "train_acc": acc}


def evaluate(ckpt: Checkpoint, bundle: EmbeddingBundle, split: str = "test",
             deterministic: bool = False) -> dict:
    """Eval-mode (eps = 0) accuracy, per-class accuracy and mean CE on ``split``."""
    sp = bundle.split(split)
    with numkernel.deterministic(deterministic):
        model = VRGModel.from_checkpoint(bundle, ckpt)
        fused, _ = model.forward(sp.features)
    return _metrics(fused, sp.labels, bundle.C)


def _metrics(logits: np.ndarray, labels: np.ndarray, C: int) -> dict:
    labels = labels.astype(np.int64)
    lv = softmax_ce(logits, labels)
    pred = logits.argmax(axis=1)
    hit = pred == labels
    per_class = [float(hit[labels == i].mean()) if np.any(labels == i) else None for i in range(C)]
    return {"accuracy": float(hit.mean()), "per_class_accuracy": per_class,
            "mean_loss": lv.loss, "n": int(len(labels))}


def sweep(bundle: EmbeddingBundle, cfg: TrainConfig, lambdas: Sequence[float], betas: Sequence[float],
          split: str = "val") -> list[dict]:
    """Train once per (lambda, beta) and report accuracy on ``split``."""
    rows = []
    for lam in lambdas:
        for beta in betas:
            run_cfg = TrainConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(TrainConfig)},
                                     "lam": lam, "beta": beta})
            ckpt, _ = train(bundle, run_cfg)
            m = evaluate(ckpt, bundle, split, cfg.deterministic)
            rows.append({"lambda": lam, "beta": beta, "split": split, "accuracy": m["accuracy"],
                         "mean_loss": m["mean_loss"]})
    return rows
