"""Gaussian graph convolution, reparameterized sampling and residual blending.

The forward pass returns an :class:`AdapterCache`; :func:`adapter_backward`
consumes it together with d(loss)/d(W_t) and accumulates into the Params.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vrgadapter import rng
from vrgadapter.errors import ConfigError, DimensionError, InvariantError
from vrgadapter.numkernel import (
    Param,
    activation,
    activation_backward,
    check_finite,
    matmul,
    matmul_backward,
    sqrt_backward,
)
from vrgadapter.vrkg import ClassGaussian, KnowledgeGraph

DEFAULT_ALPHA = 0.7
DEFAULT_HIDDEN = 16
DEFAULT_LAYERS = 2


@dataclass
class AdapterParams:
    theta_mu: list[Param]
    theta_var: list[Param]
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.theta_mu or len(self.theta_mu) != len(self.theta_var):
            raise ConfigError("need L >= 1 matching mean and variance weight matrices")
        for tm, tv in zip(self.theta_mu, self.theta_var):
            if tm.shape != tv.shape:
                raise DimensionError(f"mean/variance weights differ: {tm.shape} vs {tv.shape}")
        for a, b in zip(self.theta_mu, self.theta_mu[1:]):
            if a.shape[1] != b.shape[0]:
                raise DimensionError(f"layer dims do not chain: {a.shape} -> {b.shape}")
        if self.theta_mu[0].shape[0] != self.theta_mu[-1].shape[1]:
            raise DimensionError("adapter must map D_text back to D_text")

    @property
    def num_layers(self) -> int:
        return len(self.theta_mu)

    @property
    def dims(self) -> list[int]:
        return [self.theta_mu[0].shape[0]] + [t.shape[1] for t in self.theta_mu]

    def params(self) -> list[Param]:
        return [*self.theta_mu, *self.theta_var]

    @classmethod
    def init(cls, d_text: int, hidden: int = DEFAULT_HIDDEN, layers: int = DEFAULT_LAYERS,
             alpha: float = DEFAULT_ALPHA, seed: int = 0) -> "AdapterParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for both paths."""
        if layers < 1:
            raise ConfigError("layers must be >= 1")
        dims = [d_text] + [hidden] * (layers - 1) + [d_text]
        theta_mu, theta_var = [], []
        for l, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            bound = 1.0 / np.sqrt(d_in)
            theta_mu.append(Param(rng.uniform((d_in, d_out), seed, "init", "theta_mu", l,
                                              low=-bound, high=bound), name=f"theta_mu.{l}"))
            theta_var.append(Param(rng.uniform((d_in, d_out), seed, "init", "theta_var", l,
                                               low=-bound, high=bound), name=f"theta_var.{l}"))
        return cls(theta_mu, theta_var, alpha)


@dataclass
class LayerState:
    mu: np.ndarray
    var: np.ndarray


@dataclass
class AdapterCache:
    A_hat: np.ndarray
    mu0: np.ndarray
    inputs: list[LayerState] = field(default_factory=list)  # layer inputs, l = 0..L-1
    pre_mu: list[np.ndarray] = field(default_factory=list)
    pre_var: list[np.ndarray | None] = field(default_factory=list)
    out: LayerState | None = None  # layer L
    eps: np.ndarray | None = None
    deterministic: bool = False

    def layers(self) -> list[LayerState]:
        return [*self.inputs, self.out]


def propagate_layer(mu_in, var_in, A_hat, theta_mu, theta_var):
    """One Gaussian graph-convolution layer: ELU on the mean path, ReLU on variances."""
    mu_out = activation("elu", matmul(matmul(A_hat, mu_in), theta_mu))
    var_out = activation("relu", matmul(matmul(A_hat, var_in), theta_var))
    return mu_out, var_out


def sample_z(mu_L, var_L, eps) -> np.ndarray:
    if np.any(var_L < 0):
        raise InvariantError("negative variance passed to the sampler")
    if mu_L.shape != var_L.shape or eps.shape != mu_L.shape:
        raise DimensionError(f"sampler shapes differ: {mu_L.shape}, {var_L.shape}, {eps.shape}")
    return mu_L + eps * np.sqrt(var_L)


def blend(mu0, z, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * mu0 + (1.0 - alpha) * z


def train_eps(shape, seed: int, step: int) -> np.ndarray:
    """One standard-normal draw per class and coordinate, keyed by (seed, step)."""
    return rng.normal(shape, seed, "eps", step)


def adapter_forward(gauss: ClassGaussian, graph: KnowledgeGraph, params: AdapterParams,
                    eps=None, deterministic: bool = False) -> tuple[np.ndarray, AdapterCache]:
    """Map class Gaussians to text prototypes W_t [C, D].

    ``eps`` of shape [C, D] selects train mode; ``None`` is eval mode (the
    distribution mean). ``deterministic=True`` drops the variance path
    altogether, giving the plain graph adapter on class means.
    """
    A_hat = graph.A_hat
    mu, var = gauss.mu, gauss.var
    if mu.shape[1] != params.dims[0]:
        raise DimensionError(f"text dim {mu.shape[1]} != adapter input dim {params.dims[0]}")
    cache = AdapterCache(A_hat=A_hat, mu0=mu, deterministic=deterministic)
    for tm, tv in zip(params.theta_mu, params.theta_var):
        cache.inputs.append(LayerState(mu, var))
        a = matmul(matmul(A_hat, mu), tm.value)
        cache.pre_mu.append(a)
        mu = activation("elu", a)
        if deterministic:
            cache.pre_var.append(None)
        else:
            b = matmul(matmul(A_hat, var), tv.value)
            cache.pre_var.append(b)
            var = activation("relu", b)
    if deterministic:
        var = np.zeros_like(mu)
    cache.out = LayerState(mu, var)
    if deterministic or eps is None:
        z = mu
    else:
        cache.eps = np.asarray(eps, dtype=np.float64)
        z = sample_z(mu, var, cache.eps)
    W_t = blend(cache.mu0, z, params.alpha)
    return check_finite(W_t, "text prototypes"), cache


def adapter_backward(cache: AdapterCache, params: AdapterParams, d_W: np.ndarray) -> None:
    """Accumulate d(loss)/d(theta) given d(loss)/d(W_t). The class Gaussians are constants."""
    d_mu = (1.0 - params.alpha) * d_W
    d_var = None
    if cache.eps is not None and not cache.deterministic:
        d_var = sqrt_backward(cache.out.var, d_mu * cache.eps)
    A_hat = cache.A_hat
    for l in reversed(range(params.num_layers)):
        x = cache.inputs[l]
        tm, tv = params.theta_mu[l], params.theta_var[l]
        d_a = activation_backward("elu", cache.pre_mu[l], d_mu)
        ax = matmul(A_hat, x.mu)
        d_ax, d_tm = matmul_backward(ax, tm.value, d_a)
        tm.grad += d_tm
        d_mu = matmul(A_hat.T, d_ax)
        if d_var is not None:
            d_b = activation_backward("relu", cache.pre_var[l], d_var)
            av = matmul(A_hat, x.var)
            d_av, d_tv = matmul_backward(av, tv.value, d_b)
            tv.grad += d_tv
            d_var = matmul(A_hat.T, d_av)
