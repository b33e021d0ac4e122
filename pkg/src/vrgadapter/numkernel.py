"""Dense float64 kernels with hand-written backward rules, plus a
central-difference gradient checker used as the oracle for all of them.

Tensors are plain ``numpy.ndarray`` (row-major float64). Learnable tensors are
wrapped in :class:`Param`, which carries a same-shaped ``grad`` buffer.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from vrgadapter.errors import ConfigError, DimensionError, NumericalError
from vrgadapter.rng import Stream

SQRT_GRAD_FLOOR = 1e-6

_DETERMINISTIC = False


@contextlib.contextmanager
def deterministic(flag: bool = True) -> Iterator[None]:
    """Route matmul through a fixed-order loop instead of BLAS while active."""
    global _DETERMINISTIC
    prev, _DETERMINISTIC = _DETERMINISTIC, flag
    try:
        yield
    finally:
        _DETERMINISTIC = prev


def is_deterministic() -> bool:
    return _DETERMINISTIC


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    name: str = ""

    def __post_init__(self):
        self.value = as_tensor(self.value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    if _DETERMINISTIC:
        # einsum without optimize never dispatches to BLAS; k is summed in order
        return np.einsum("ik,kj->ij", a, b, optimize=False)
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return matmul(d_out, b.T), matmul(a.T, d_out)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(np.float64)


_ACTIVATIONS = {"elu": (elu, elu_grad), "relu": (relu, relu_grad)}


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    try:
        fn, _ = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    # relu would silently map NaN to 0, so the input is guarded too
    return check_finite(fn(check_finite(x, f"{kind} input")), kind)


def activation_backward(kind: str, x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient wrt the pre-activation ``x``."""
    return d_out * _ACTIVATIONS[kind][1](x)


def sqrt_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    # clamped so that zero variance yields a finite gradient
    return d_out * 0.5 / np.maximum(np.sqrt(x), SQRT_GRAD_FLOOR)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    per_param: dict[str, float]
    worst: tuple[str, tuple[int, ...], float, float] | None = None


def grad_check(
    f: Callable[[], float],
    params: Sequence[Param],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradient written by ``f`` against central differences.

    ``f()`` must return the scalar loss and leave d(loss)/d(param) in each
    ``param.grad``; it is called once for the analytic pass, then twice per
    checked coordinate with that coordinate nudged by ``+-h``. Params with more
    than ``max_coords`` entries are checked on a seeded random subsample of
    exactly ``max_coords`` coordinates.
    """
    for p in params:
        p.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise NumericalError("grad_check: objective is not finite")
    analytic = [p.grad.copy() for p in params]

    worst_err, worst, checked = 0.0, None, 0
    per_param: dict[str, float] = {}
    for pi, (p, g) in enumerate(zip(params, analytic)):
        name = p.name or f"param{pi}"
        size = p.value.size
        if size > max_coords:
            coords = Stream(seed, "grad_check", pi).permutation(size)[:max_coords]
        else:
            coords = np.arange(size)
        flat = p.value.reshape(-1)
        p_err = 0.0
        for c in coords:
            c = int(c)
            orig = flat[c]
            flat[c] = orig + h
            fp = f()
            flat[c] = orig - h
            fm = f()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"grad_check: objective not finite near {name}[{c}]")
            num = (fp - fm) / (2.0 * h)
            ana = float(g.reshape(-1)[c])
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            checked += 1
            p_err = max(p_err, err)
            if worst is None or err > worst_err:
                worst_err = err
                worst = (name, tuple(int(i) for i in np.unravel_index(c, p.value.shape)), ana, num)
        per_param[name] = p_err
    # leave grads as the analytic pass computed them
    for p, g in zip(params, analytic):
        p.grad = g
    return GradCheckReport(worst_err, worst_err < tol, checked, per_param, worst)
