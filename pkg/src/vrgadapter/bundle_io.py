"""On-disk container for embedding bundles and checkpoints, and the synthetic
bundle generator.

A container is a directory holding ``manifest.json`` plus one raw
little-endian, row-major ``.bin`` file per array::

    {"version": 1,
     "arrays": [{"name", "shape", "dtype": "f32" | "f64" | "i32",
                 "file", "byte_order": "little"}, ...],
     "meta": {...}}

Bundles carry ``meta.kind == "bundle"``; checkpoints ``"checkpoint"``.
Feature arrays are float32; checkpoints store float64 so trained parameters
round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vrgadapter import rng
from vrgadapter.errors import ConfigError, DataError, FormatError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4")}


# -- container -----------------------------------------------------------------

def _file_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def write_container(path, arrays: dict[str, tuple[np.ndarray, str]], meta: dict,
                    extra_files: dict[str, str] | None = None) -> None:
    """Write arrays (name -> (array, dtype tag)) atomically: temp dir, then rename.

    ``extra_files`` maps side-file names to text written alongside the manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = []
        for name, (arr, tag) in arrays.items():
            data = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
            fname = _file_name(name)
            (tmp / fname).write_bytes(data.tobytes(order="C"))
            entries.append({"name": name, "shape": list(data.shape), "dtype": tag,
                            "file": fname, "byte_order": "little"})
        manifest = {"version": FORMAT_VERSION, "arrays": entries, "meta": meta}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        for fname, text in (extra_files or {}).items():
            (tmp / fname).write_text(text, encoding="utf-8")
        _replace_dir(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _replace_dir(src: Path, dst: Path) -> None:
    if dst.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{dst.name}.old.", dir=dst.parent))
        os.replace(dst, old / "x")
        os.replace(src, dst)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(src, dst)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise FormatError(f"{path}: missing {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{mpath}: invalid JSON ({e})") from None
    if not isinstance(manifest, dict):
        raise FormatError(f"{mpath}: manifest must be a JSON object")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{mpath}: unsupported format version {manifest.get('version')!r}")
    entries, meta = manifest.get("arrays"), manifest.get("meta")
    if not isinstance(entries, list) or not isinstance(meta, dict):
        raise FormatError(f"{mpath}: 'arrays' must be a list and 'meta' an object")
    arrays = {}
    for e in entries:
        try:
            name, shape, tag, fname = e["name"], e["shape"], e["dtype"], e["file"]
            order = e.get("byte_order", "little")
        except (KeyError, TypeError, AttributeError):
            raise FormatError(f"{mpath}: malformed array entry {e!r}") from None
        if not isinstance(name, str):
            raise FormatError(f"{mpath}: array name must be a string, got {name!r}")
        if not isinstance(tag, str) or tag not in _DTYPES:
            raise FormatError(f"{name}: unsupported dtype {tag!r}")
        if order != "little":
            raise FormatError(f"{name}: unsupported byte order {order!r}")
        if (not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape)
                or not isinstance(fname, str) or Path(fname).name != fname):
            raise FormatError(f"{name}: bad shape or file entry")
        fpath = path / fname
        if not fpath.is_file():
            raise FormatError(f"{name}: missing file {fname}")
        raw = fpath.read_bytes()
        dtype = _DTYPES[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != expected:
            raise FormatError(f"{name}: {fname} holds {len(raw)} bytes, shape {shape} needs {expected}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        if tag != "i32" and not np.all(np.isfinite(arr)):
            raise DataError(f"{name}: non-finite values")
        arrays[name] = arr.astype(dtype.newbyteorder("="))
    return arrays, meta


# -- bundles -------------------------------------------------------------------

@dataclass
class Split:
    features: dict[str, np.ndarray]  # branch name -> [n, dim]
    labels: np.ndarray  # int32 [n]

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass
class EmbeddingBundle:
    """Cached description embeddings and per-branch visual features.

    ``branches[0]`` is the zero-shot branch and must have ``dim == D_text``;
    the rest are auxiliary branches.
    """

    text_desc: np.ndarray  # [C, M, D_text]
    branches: list[dict]  # [{"name", "dim"}]
    splits: dict[str, Split]
    class_names: list[str] | None = None
    extra_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def C(self) -> int:
        return self.text_desc.shape[0]

    @property
    def M(self) -> int:
        return self.text_desc.shape[1]

    @property
    def D_text(self) -> int:
        return self.text_desc.shape[2]

    @property
    def zero_shot_branch(self) -> str:
        return self.branches[0]["name"]

    @property
    def aux_branches(self) -> list[str]:
        return [b["name"] for b in self.branches[1:]]

    def split(self, name: str) -> Split:
        try:
            return self.splits[name]
        except KeyError:
            raise DataError(f"bundle has no split {name!r} (have {sorted(self.splits)})") from None

    def validate(self) -> None:
        if self.text_desc.ndim != 3 or min(self.text_desc.shape) < 1:
            raise FormatError(f"text_desc must be [C, M, D] with all dims >= 1, got {self.text_desc.shape}")
        if not np.all(np.isfinite(self.text_desc)):
            raise DataError("text_desc: non-finite values")
        if not self.branches:
            raise FormatError("bundle needs at least the zero-shot branch")
        names = [b["name"] for b in self.branches]
        if len(set(names)) != len(names):
            raise FormatError(f"duplicate branch names {names}")
        if self.branches[0]["dim"] != self.D_text:
            raise FormatError(f"zero-shot branch dim {self.branches[0]['dim']} != D_text {self.D_text}")
        if self.class_names is not None and len(self.class_names) != self.C:
            raise FormatError("class_names length != C")
        for sname, sp in self.splits.items():
            if sp.labels.ndim != 1:
                raise FormatError(f"{sname}: labels must be a vector")
            if sp.n and (sp.labels.min() < 0 or sp.labels.max() >= self.C):
                raise DataError(f"{sname}: labels must lie in [0, {self.C})")
            for b in self.branches:
                f = sp.features.get(b["name"])
                if f is None:
                    raise FormatError(f"{sname}: missing features for branch {b['name']!r}")
                if f.shape != (sp.n, b["dim"]):
                    raise FormatError(f"{sname}/{b['name']}: shape {f.shape} != ({sp.n}, {b['dim']})")
                if not np.all(np.isfinite(f)):
                    raise DataError(f"{sname}/{b['name']}: non-finite values")


def save_bundle(bundle: EmbeddingBundle, path) -> None:
    arrays = {"text_desc": (bundle.text_desc, "f32")}
    for sname, sp in bundle.splits.items():
        for b in bundle.branches:
            arrays[f"{sname}/{b['name']}"] = (sp.features[b["name"]], "f32")
        arrays[f"{sname}/labels"] = (sp.labels, "i32")
    meta = {
        "kind": "bundle",
        "C": bundle.C, "M": bundle.M, "D_text": bundle.D_text,
        "branches": bundle.branches,
        "splits": {s: sp.n for s, sp in bundle.splits.items()},
        **({"class_names": bundle.class_names} if bundle.class_names is not None else {}),
        **bundle.extra_meta,
    }
    write_container(path, arrays, meta)


def load_bundle(path) -> EmbeddingBundle:
    arrays, meta = read_container(path)
    if meta.get("kind", "bundle") != "bundle":
        raise FormatError(f"{path}: not a bundle (kind={meta.get('kind')!r})")
    try:
        C, M, D = int(meta["C"]), int(meta["M"]), int(meta["D_text"])
        branches = [{"name": str(b["name"]), "dim": int(b["dim"])} for b in meta["branches"]]
        split_names = list(meta["splits"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}: meta must declare C, M, D_text, branches and splits") from None
    text_desc = _need(arrays, "text_desc")
    if text_desc.shape != (C, M, D):
        raise FormatError(f"text_desc shape {text_desc.shape} != declared {(C, M, D)}")
    splits = {}
    for s in split_names:
        feats = {b["name"]: _need(arrays, f"{s}/{b['name']}") for b in branches}
        splits[s] = Split(feats, _need(arrays, f"{s}/labels"))
    known = {"kind", "C", "M", "D_text", "branches", "splits", "class_names"}
    extra = {k: v for k, v in meta.items() if k not in known}
    return EmbeddingBundle(text_desc, branches, splits, meta.get("class_names"), extra)


def _need(arrays: dict, name: str) -> np.ndarray:
    if name not in arrays:
        raise FormatError(f"manifest lacks array {name!r}")
    return arrays[name]


# -- checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    theta_mu: list[np.ndarray]
    theta_var: list[np.ndarray]
    deltas: dict[str, np.ndarray]  # aux branch name -> W_delta
    config: dict  # alpha, lambda, beta, layers, hidden, seed, ...

    def validate(self) -> None:
        if len(self.theta_mu) != len(self.theta_var) or not self.theta_mu:
            raise FormatError("checkpoint needs L >= 1 matching theta_mu/theta_var arrays")
        layers = self.config.get("layers")
        if layers is not None and layers != len(self.theta_mu):
            raise FormatError(f"config says {layers} layers, checkpoint holds {len(self.theta_mu)}")


def save_checkpoint(ckpt: Checkpoint, path, extra_files: dict[str, str] | None = None) -> None:
    ckpt.validate()
    arrays = {}
    for l, (tm, tv) in enumerate(zip(ckpt.theta_mu, ckpt.theta_var)):
        arrays[f"theta_mu/{l}"] = (tm, "f64")
        arrays[f"theta_var/{l}"] = (tv, "f64")
    for name, d in ckpt.deltas.items():
        arrays[f"delta/{name}"] = (d, "f64")
    meta = {"kind": "checkpoint", "layers": len(ckpt.theta_mu), "aux_branches": list(ckpt.deltas),
            "config": ckpt.config, "prng": rng.ALGORITHM}
    write_container(path, arrays, meta, extra_files)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    try:
        L = int(meta["layers"])
        aux = [str(a) for a in meta["aux_branches"]]
        config = dict(meta["config"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}: checkpoint meta must declare layers, aux_branches, config") from None
    ckpt = Checkpoint(
        [_need(arrays, f"theta_mu/{l}") for l in range(L)],
        [_need(arrays, f"theta_var/{l}") for l in range(L)],
        {a: _need(arrays, f"delta/{a}") for a in aux},
        config,
    )
    ckpt.validate()
    return ckpt


# -- synthetic bundles ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    classes: int = 10
    train_per_class: int = 16
    test_per_class: int = 16
    val_per_class: int = 0
    descriptions: int = 8
    d_text: int = 32
    aux_dims: tuple[int, ...] = (32, 32)
    desc_noise: float = 0.2
    vis_noise: float = 0.25
    mixing_seed: int = 1
    seed: int = 0

    def __post_init__(self):
        counts = [self.classes, self.train_per_class, self.test_per_class, self.descriptions, self.d_text]
        if min(counts) < 1 or self.val_per_class < 0 or any(d < 1 for d in self.aux_dims):
            raise ConfigError("synthetic counts and dims must be >= 1")
        if self.desc_noise < 0 or self.vis_noise < 0:
            raise ConfigError("noise scales must be >= 0")


def synth_centers(cfg: SynthConfig) -> np.ndarray:
    """The generating class centers: standard normal rows projected onto the unit sphere."""
    c = rng.normal((cfg.classes, cfg.d_text), cfg.seed, "synth", "centers")
    return c / np.sqrt((c * c).sum(axis=1, keepdims=True))


def synth_mixing(cfg: SynthConfig, k: int) -> np.ndarray:
    """Fixed [d_text, dim] map for auxiliary branch ``k`` (1-based)."""
    dim = cfg.aux_dims[k - 1]
    return rng.normal((cfg.d_text, dim), cfg.mixing_seed, "synth", "mixing", k) / np.sqrt(cfg.d_text)


def synth_generate(cfg: SynthConfig) -> EmbeddingBundle:
    """Deterministic stand-in for LLM descriptions and cached encoder features.

    Descriptions are ``center + desc_noise * N(0, I)`` re-projected onto the
    sphere. The zero-shot branch sees ``center + vis_noise * N(0, I)``;
    auxiliary branch ``k`` sees ``(center + vis_noise * N(0, I)) @ R_k`` with
    its own noise draw and a fixed random map ``R_k``.
    """
    C, D = cfg.classes, cfg.d_text
    centers = synth_centers(cfg)
    desc = centers[:, None, :] + cfg.desc_noise * rng.normal((C, cfg.descriptions, D), cfg.seed, "synth", "desc")
    desc = desc / np.sqrt((desc * desc).sum(axis=2, keepdims=True))

    branches = [{"name": "clip", "dim": D}]
    branches += [{"name": f"aux{k}", "dim": d} for k, d in enumerate(cfg.aux_dims, start=1)]
    maps = {"clip": None} | {f"aux{k}": synth_mixing(cfg, k) for k in range(1, len(cfg.aux_dims) + 1)}

    splits = {}
    for sname, per in (("train", cfg.train_per_class), ("val", cfg.val_per_class), ("test", cfg.test_per_class)):
        if per == 0:
            continue
        labels = np.repeat(np.arange(C), per).astype(np.int32)
        feats = {}
        for b in branches:
            x = centers[labels] + cfg.vis_noise * rng.normal((len(labels), D), cfg.seed, "synth", sname, b["name"])
            R = maps[b["name"]]
            feats[b["name"]] = (x if R is None else np.einsum("nd,dk->nk", x, R, optimize=False)).astype(np.float32)
        splits[sname] = Split(feats, labels)
    meta = {"prng": rng.ALGORITHM, "synth": {k: list(v) if isinstance(v, tuple) else v
                                             for k, v in asdict(cfg).items()}}
    return EmbeddingBundle(desc.astype(np.float32), branches, splits, None, meta)
