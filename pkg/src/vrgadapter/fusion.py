"""Kurtosis confidence weights, dynamic logit fusion, softmax and cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vrgadapter.errors import ConfigError, DataError, DimensionError
from vrgadapter.numkernel import as_tensor

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class FusionConfig:
    lam: float = 0.4
    beta: float = 0.5
    detach_kappa: bool = False
    mode: str = "kurtosis"  # or "mean": plain average of all branch logits

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be > 0, got {self.lam}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.mode not in ("kurtosis", "mean"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")


def _moments(p: np.ndarray):
    d = p - p.mean(axis=-1, keepdims=True)
    sigma = np.sqrt((d * d).mean(axis=-1, keepdims=True))
    s = np.maximum(sigma, SIGMA_FLOOR)
    k4 = ((d / s) ** 4).mean(axis=-1, keepdims=True)
    return d, sigma, s, k4


def kurtosis_weight(p, lam: float) -> np.ndarray:
    """Normalized kurtosis raised to ``lam``, one value per row of ``p``.

    Uses the population standard deviation floored at 1e-12, so a constant
    row standardizes to zeros and gets weight 0. Returns shape ``p.shape[:-1]``.
    """
    p = as_tensor(p)
    if p.shape[-1] < 2:
        raise DimensionError("kurtosis needs at least two logits per row")
    _, _, _, k4 = _moments(p)
    return (k4 ** lam)[..., 0]


def kurtosis_backward(p, lam: float, d_kappa) -> np.ndarray:
    """d(loss)/d(p) given d(loss)/d(kappa) per row. Constant rows get zero gradient."""
    p = as_tensor(p)
    C = p.shape[-1]
    d, sigma, s, k4 = _moments(p)
    live = (sigma > 0) & (k4 > 0)
    safe_k4 = np.where(live, k4, 1.0)
    safe_sigma = np.where(live, sigma, 1.0)
    dk_dk4 = lam * safe_k4 ** (lam - 1.0)
    m4 = (d ** 4).mean(axis=-1, keepdims=True)
    # k4 = m4 / s^4 with s = sigma on live rows and d sigma / d d_j = d_j / (C sigma)
    d_d = 4.0 * d ** 3 / (C * s ** 4) - 4.0 * m4 / s ** 5 * d / (C * safe_sigma)
    g = np.asarray(d_kappa)[..., None] * dk_dk4 * d_d
    g = g - g.mean(axis=-1, keepdims=True)
    return np.where(live, g, 0.0)


@dataclass
class FusionCache:
    p_zs: np.ndarray
    p_aux: list[np.ndarray]
    k_zs: np.ndarray | None
    k_aux: list[np.ndarray]


def fuse(p_zs, p_aux: list, cfg: FusionConfig) -> tuple[np.ndarray, FusionCache]:
    p_zs = as_tensor(p_zs)
    p_aux = [as_tensor(p) for p in p_aux]
    for p in p_aux:
        if p.shape != p_zs.shape:
            raise DimensionError(f"branch logits {p.shape} != zero-shot logits {p_zs.shape}")
    if cfg.mode == "mean":
        out = (p_zs + sum(p_aux)) / (1 + len(p_aux))
        return out, FusionCache(p_zs, p_aux, None, [])
    k_zs = kurtosis_weight(p_zs, cfg.lam)
    k_aux = [kurtosis_weight(p, cfg.lam) for p in p_aux]
    out = k_zs[:, None] * p_zs
    if p_aux:
        bias = sum(k[:, None] * p for k, p in zip(k_aux, p_aux))
        out = out + cfg.beta * bias
    return out, FusionCache(p_zs, p_aux, k_zs, k_aux)


def fuse_backward(cache: FusionCache, d_out, cfg: FusionConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Gradients wrt the zero-shot logits and each auxiliary branch's logits."""
    if cfg.mode == "mean":
        w = 1.0 / (1 + len(cache.p_aux))
        return w * d_out, [w * d_out for _ in cache.p_aux]
    d_zs = cache.k_zs[:, None] * d_out
    if not cfg.detach_kappa:
        d_zs = d_zs + kurtosis_backward(cache.p_zs, cfg.lam, (d_out * cache.p_zs).sum(axis=1))
    d_aux = []
    for k, p in zip(cache.k_aux, cache.p_aux):
        g = cfg.beta * d_out
        d_p = k[:, None] * g
        if not cfg.detach_kappa:
            d_p = d_p + kurtosis_backward(p, cfg.lam, (g * p).sum(axis=1))
        d_aux.append(d_p)
    return d_zs, d_aux


@dataclass
class LossValue:
    loss: float
    probs: np.ndarray
    grad: np.ndarray  # d(mean loss)/d(logits)


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, labels) -> LossValue:
    """Max-shifted softmax and batch-mean cross-entropy with its logit gradient."""
    z = as_tensor(logits)
    labels = np.asarray(labels)
    B, C = z.shape
    if labels.shape != (B,):
        raise DimensionError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(B)
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return LossValue(loss, probs, grad / B)
