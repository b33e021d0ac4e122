"""Per-branch logits: zero-shot scores against the adapted text prototypes and
auxiliary scores against frozen class-mean prototypes plus learnable residuals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vrgadapter.errors import DataError, DegenerateInputError, DimensionError
from vrgadapter.numkernel import Param, as_tensor, matmul


@dataclass
class AuxBranch:
    name: str
    proto: np.ndarray  # frozen [C, D_k]
    delta: Param  # learnable [C, D_k], zero at init

    @property
    def weights(self) -> np.ndarray:
        return self.proto + self.delta.value


@dataclass
class BranchBank:
    branches: list[AuxBranch] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.branches)

    def __iter__(self):
        return iter(self.branches)

    def __getitem__(self, k) -> AuxBranch:
        return self.branches[k]

    def params(self) -> list[Param]:
        return [b.delta for b in self.branches]


def class_means(feats, labels, num_classes: int) -> np.ndarray:
    """Mean feature per class from a flat [N, D] array and integer labels."""
    feats = as_tensor(feats)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"classes without training samples: {missing}")
    return np.stack([feats[labels == i].mean(axis=0) for i in range(num_classes)])


def build_prototypes(train_feats: dict[str, tuple[np.ndarray, np.ndarray]], num_classes: int) -> BranchBank:
    """Build one frozen prototype classifier per auxiliary branch.

    ``train_feats`` maps branch name to ``(features [N, D_k], labels [N])``.
    """
    bank = BranchBank()
    for name, (feats, labels) in train_feats.items():
        proto = class_means(feats, labels, num_classes)
        bank.branches.append(AuxBranch(name, proto, Param(np.zeros_like(proto), name=f"delta.{name}")))
    return bank


def _row_normalize(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((x * x).sum(axis=1))
    if np.any(norms == 0):
        raise DegenerateInputError(f"zero-norm row in {what}")
    return x / norms[:, None], norms


def zero_shot_logits(f_clip, W_t, normalize: bool = True, scale: float = 1.0) -> np.ndarray:
    f_clip, W_t = as_tensor(f_clip), as_tensor(W_t)
    if f_clip.shape[1] != W_t.shape[1]:
        raise DimensionError(f"feature dim {f_clip.shape[1]} != prototype dim {W_t.shape[1]}")
    if normalize:
        f_clip, _ = _row_normalize(f_clip, "zero-shot features")
        W_t, _ = _row_normalize(W_t, "text prototypes")
    return scale * matmul(f_clip, W_t.T)


def zero_shot_backward(f_clip, W_t, d_logits, normalize: bool = True, scale: float = 1.0) -> np.ndarray:
    """d(loss)/d(W_t) for :func:`zero_shot_logits`."""
    f_clip, W_t = as_tensor(f_clip), as_tensor(W_t)
    d_logits = scale * d_logits
    if not normalize:
        return matmul(d_logits.T, f_clip)
    f_hat, _ = _row_normalize(f_clip, "zero-shot features")
    w_hat, w_norm = _row_normalize(W_t, "text prototypes")
    d_what = matmul(d_logits.T, f_hat)
    radial = (d_what * w_hat).sum(axis=1, keepdims=True)
    return (d_what - radial * w_hat) / w_norm[:, None]


def aux_logits(f_aux, branch: AuxBranch) -> np.ndarray:
    f_aux = as_tensor(f_aux)
    if f_aux.ndim != 2 or f_aux.shape[1] != branch.proto.shape[1]:
        raise DimensionError(
            f"branch {branch.name!r}: feature dim {f_aux.shape[-1]} != prototype dim {branch.proto.shape[1]}")
    return matmul(f_aux, branch.weights.T)


def aux_backward(f_aux, branch: AuxBranch, d_logits) -> None:
    branch.delta.grad += matmul(d_logits.T, as_tensor(f_aux))
