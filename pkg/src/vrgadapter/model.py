"""Full pipeline: class Gaussians -> graph adapter -> branch logits -> fusion -> CE."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from vrgadapter.adapter import AdapterParams, adapter_backward, adapter_forward
from vrgadapter.branches import (
    BranchBank,
    aux_backward,
    aux_logits,
    build_prototypes,
    zero_shot_backward,
    zero_shot_logits,
)
from vrgadapter.bundle_io import Checkpoint, EmbeddingBundle
from vrgadapter.errors import ConfigError, FormatError
from vrgadapter.fusion import FusionConfig, LossValue, fuse, fuse_backward, softmax, softmax_ce
from vrgadapter.numkernel import Param, as_tensor
from vrgadapter.vrkg import ClassGaussian, KnowledgeGraph, build_adjacency, estimate_class_gaussians


@dataclass
class ModelConfig:
    alpha: float = 0.7
    lam: float = 0.4
    beta: float = 0.5
    layers: int = 2
    hidden: int = 16
    use_aux: bool = True
    fusion: str = "kurtosis"
    detach_kappa: bool = False
    normalize_zs: bool = True
    logit_scale: float = 1.0
    clamp_negative: bool = True
    graph_adapter: bool = False  # drop the variance path (deterministic graph adapter)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.layers < 1 or self.hidden < 1:
            raise ConfigError("layers and hidden must be >= 1")
        self.fusion_config()

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.lam, self.beta, self.detach_kappa, self.fusion)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ForwardCache:
    feats: dict[str, np.ndarray]
    W_t: np.ndarray
    adapter: object
    fusion: object


class VRGModel:
    def __init__(self, gauss: ClassGaussian, graph: KnowledgeGraph, adapter: AdapterParams,
                 bank: BranchBank, cfg: ModelConfig, zero_shot_branch: str = "clip"):
        self.gauss = gauss
        self.graph = graph
        self.adapter = adapter
        self.bank = bank
        self.cfg = cfg
        self.zero_shot_branch = zero_shot_branch
        self.fusion_cfg = cfg.fusion_config()

    @classmethod
    def from_bundle(cls, bundle: EmbeddingBundle, cfg: ModelConfig) -> "VRGModel":
        gauss = estimate_class_gaussians(bundle.text_desc)
        graph = build_adjacency(gauss.mu, clamp_negative=cfg.clamp_negative)
        adapter = AdapterParams.init(bundle.D_text, cfg.hidden, cfg.layers, cfg.alpha, cfg.seed)
        bank = BranchBank()
        if cfg.use_aux and bundle.aux_branches:
            train = bundle.split("train")
            bank = build_prototypes({b: (train.features[b], train.labels) for b in bundle.aux_branches},
                                    bundle.C)
        return cls(gauss, graph, adapter, bank, cfg, bundle.zero_shot_branch)

    @classmethod
    def from_checkpoint(cls, bundle: EmbeddingBundle, ckpt: Checkpoint) -> "VRGModel":
        cfg = ModelConfig.from_dict(ckpt.config)
        model = cls.from_bundle(bundle, cfg)
        if len(ckpt.theta_mu) != model.adapter.num_layers:
            raise FormatError("checkpoint layer count does not match its config")
        for p, v in zip(model.adapter.theta_mu + model.adapter.theta_var, ckpt.theta_mu + ckpt.theta_var):
            if p.shape != v.shape:
                raise FormatError(f"{p.name}: checkpoint shape {v.shape} != expected {p.shape}")
            p.value = as_tensor(v).copy()
        if set(ckpt.deltas) != {b.name for b in model.bank}:
            raise FormatError(f"checkpoint residuals {sorted(ckpt.deltas)} do not match bundle aux branches")
        for b in model.bank:
            if ckpt.deltas[b.name].shape != b.delta.shape:
                raise FormatError(f"delta.{b.name}: shape mismatch")
            b.delta.value = as_tensor(ckpt.deltas[b.name]).copy()
        return model

    def to_checkpoint(self, extra_config: dict | None = None) -> Checkpoint:
        config = self.cfg.to_dict() | (extra_config or {})
        return Checkpoint(
            [p.value.copy() for p in self.adapter.theta_mu],
            [p.value.copy() for p in self.adapter.theta_var],
            {b.name: b.delta.value.copy() for b in self.bank},
            config,
        )

    def params(self) -> list[Param]:
        return self.adapter.params() + self.bank.params()

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def text_prototypes(self, eps=None):
        return adapter_forward(self.gauss, self.graph, self.adapter, eps=eps,
                               deterministic=self.cfg.graph_adapter)

    def branch_logits(self, feats: dict[str, np.ndarray], W_t) -> tuple[np.ndarray, list[np.ndarray]]:
        cfg = self.cfg
        p_zs = zero_shot_logits(feats[self.zero_shot_branch], W_t, cfg.normalize_zs, cfg.logit_scale)
        p_aux = [aux_logits(feats[b.name], b) for b in self.bank]
        return p_zs, p_aux

    def forward(self, feats: dict[str, np.ndarray], eps=None) -> tuple[np.ndarray, ForwardCache]:
        """Fused logits [B, C]. ``eps`` [C, D] selects train-mode sampling."""
        feats = {k: as_tensor(v) for k, v in feats.items()}
        W_t, a_cache = self.text_prototypes(eps)
        p_zs, p_aux = self.branch_logits(feats, W_t)
        fused, f_cache = fuse(p_zs, p_aux, self.fusion_cfg)
        return fused, ForwardCache(feats, W_t, a_cache, f_cache)

    def backward(self, cache: ForwardCache, d_fused: np.ndarray) -> None:
        cfg = self.cfg
        d_zs, d_aux = fuse_backward(cache.fusion, d_fused, self.fusion_cfg)
        for b, d in zip(self.bank, d_aux):
            aux_backward(cache.feats[b.name], b, d)
        d_W = zero_shot_backward(cache.feats[self.zero_shot_branch], cache.W_t, d_zs,
                                 cfg.normalize_zs, cfg.logit_scale)
        adapter_backward(cache.adapter, self.adapter, d_W)

    def loss_and_grad(self, feats, labels, eps=None) -> LossValue:
        """Mean CE over the batch; gradients are accumulated into ``params()``."""
        fused, cache = self.forward(feats, eps)
        lv = softmax_ce(fused, labels)
        self.backward(cache, lv.grad)
        return lv

    def predict_proba(self, feats) -> np.ndarray:
        fused, _ = self.forward(feats)
        return softmax(fused)
