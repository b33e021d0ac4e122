"""Class nodes as diagonal Gaussians and the cosine class-similarity graph."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vrgadapter.errors import DegenerateInputError, DimensionError
from vrgadapter.numkernel import as_tensor, check_finite


@dataclass(frozen=True)
class ClassGaussian:
    mu: np.ndarray  # [C, D]
    var: np.ndarray  # [C, D], biased (divide by M)

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class KnowledgeGraph:
    A: np.ndarray
    deg: np.ndarray
    A_hat: np.ndarray


def estimate_class_gaussians(text_desc) -> ClassGaussian:
    """Per-class mean and biased diagonal variance of the M description embeddings.

    ``text_desc`` has shape [C, M, D].
    """
    t = check_finite(as_tensor(text_desc), "description embeddings")
    if t.ndim != 3 or t.shape[1] < 1:
        raise DimensionError(f"expected [C, M, D] with M >= 1, got {t.shape}")
    mu = t.mean(axis=1)
    dev = t - mu[:, None, :]
    var = (dev * dev).mean(axis=1)
    return ClassGaussian(mu, var)


def build_adjacency(mu, clamp_negative: bool = True) -> KnowledgeGraph:
    """Cosine adjacency between class means with symmetric degree normalization.

    Negative similarities are clamped to 0 unless ``clamp_negative`` is False,
    in which case a nonpositive degree raises :class:`DegenerateInputError`.
    """
    mu = as_tensor(mu)
    if mu.ndim != 2:
        raise DimensionError(f"expected [C, D] means, got {mu.shape}")
    norms = np.sqrt((mu * mu).sum(axis=1))
    if np.any(norms == 0):
        bad = np.flatnonzero(norms == 0).tolist()
        raise DegenerateInputError(f"zero-norm class mean(s) at rows {bad}")
    unit = mu / norms[:, None]
    # elementwise product then a per-pair sum keeps every entry's summation
    # order independent of the class ordering (exact permutation equivariance)
    A = (unit[:, None, :] * unit[None, :, :]).sum(axis=2)
    if clamp_negative:
        A = np.maximum(A, 0.0)
    np.fill_diagonal(A, 1.0)
    deg = np.array([math.fsum(row) for row in A])
    if np.any(deg <= 0):
        raise DegenerateInputError("nonpositive node degree; enable negative clamping")
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    A_hat = A * (d_inv_sqrt[:, None] * d_inv_sqrt[None, :])
    return KnowledgeGraph(A, deg, A_hat)
