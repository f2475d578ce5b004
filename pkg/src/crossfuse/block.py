"""Point-wise cross-layer attention ("cross-fusion").

The target map ``x_p`` is refined at each pixel ``k`` as

    y_p[k]  = sum_j f(theta(x_p[k]), phi_j(ref_j[k])) * phi_j(ref_j[k])
    x'_p    = alpha(y_p) + x_p

where every reference ``ref_j`` is the hierarchy map ``x_j`` resized to the
target resolution and passed through stride-1 dilated max pooling. ``theta``,
``phi_j`` and ``alpha`` are bias-free 1x1 convolutions; ``alpha`` starts at
zero so a freshly built block is an exact identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor
from .tensorfile import read_tensor, write_tensor

CORRELATIONS = ("embedded_gaussian", "sigmoid", "dot_product")

# short names used on the command line and in ablation grids
CORRELATION_ALIASES = {
    "gaussian": "embedded_gaussian",
    "embedded_gaussian": "embedded_gaussian",
    "sigmoid": "sigmoid",
    "dot": "dot_product",
    "dot_product": "dot_product",
}


@dataclass
class FeatureHierarchy:
    maps: list[Tensor]
    target_index: int

    def __post_init__(self):
        if not self.maps:
            raise ContractViolation("FeatureHierarchy needs at least one map")
        if not 0 <= self.target_index < len(self.maps):
            raise ContractViolation(f"target_index {self.target_index} out of range for {len(self.maps)} maps")
        lead = self.maps[0].dims[:-3]
        for j, m in enumerate(self.maps):
            if m.data.ndim < 3 or m.dims[:-3] != lead:
                raise ContractViolation(f"level {j}: dims {m.dims} inconsistent with level 0 dims {self.maps[0].dims}")

    @property
    def target(self) -> Tensor:
        return self.maps[self.target_index]

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class CrossFusionConfig:
    correlation: str = "embedded_gaussian"
    pool_kernel: int = 5
    pool_dilation: int = 3
    embed_ratio: Fraction = field(default_factory=lambda: Fraction(1, 2))

    def __post_init__(self):
        self.correlation = CORRELATION_ALIASES.get(self.correlation, self.correlation)
        if self.correlation not in CORRELATIONS:
            raise ContractViolation(f"unknown correlation {self.correlation!r}; expected one of {CORRELATIONS}")
        T._check_pool(self.pool_kernel, self.pool_dilation)
        self.embed_ratio = Fraction(self.embed_ratio)
        if self.embed_ratio <= 0:
            raise ContractViolation(f"embed_ratio must be positive, got {self.embed_ratio}")

    def embed_channels(self, target_channels: int) -> int:
        """Bottleneck width: floor(C_p * ratio), at least 1."""
        return max(1, math.floor(target_channels * self.embed_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_ratio"] = str(self.embed_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrossFusionConfig":
        d = dict(d)
        if "embed_ratio" in d:
            d["embed_ratio"] = Fraction(d["embed_ratio"])
        return cls(**d)


@dataclass
class BlockParams:
    w_theta: Tensor
    w_phi: list[Tensor]
    w_alpha: Tensor

    @classmethod
    def init(cls, channels: Sequence[int], target_index: int, cfg: CrossFusionConfig,
             rng: np.random.Generator, dtype=None, std: float = 0.01) -> "BlockParams":
        """Gaussian(0, std) embeddings and an all-zero output projection."""
        dtype = dtype or T.default_dtype()
        cp = channels[target_index]
        ce = cfg.embed_channels(cp)
        w_theta = Tensor(rng.normal(0.0, std, (ce, cp)), dtype=dtype, name="w_theta", requires_grad=True)
        w_phi = [Tensor(rng.normal(0.0, std, (ce, c)), dtype=dtype, name=f"w_phi{j}", requires_grad=True)
                 for j, c in enumerate(channels)]
        w_alpha = Tensor(np.zeros((cp, ce)), dtype=dtype, name="w_alpha", requires_grad=True)
        return cls(w_theta, w_phi, w_alpha)

    def tensors(self) -> list[Tensor]:
        return [self.w_theta, *self.w_phi, self.w_alpha]

    def named(self) -> dict[str, Tensor]:
        out = {"w_theta": self.w_theta}
        out.update({f"w_phi{j}": w for j, w in enumerate(self.w_phi)})
        out["w_alpha"] = self.w_alpha
        return out

    def save(self, directory: str | Path, cfg: CrossFusionConfig | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"tensors": {}, "n_refs": len(self.w_phi)}
        for name, t in self.named().items():
            fname = f"{name}.cft"
            write_tensor(directory / fname, t.data)
            manifest["tensors"][name] = {"file": fname, "dims": list(t.dims)}
        if cfg is not None:
            manifest["config"] = cfg.to_dict()
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path, dtype=None) -> "BlockParams":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        dtype = dtype or T.default_dtype()

        def get(name):
            return Tensor(read_tensor(directory / manifest["tensors"][name]["file"]), dtype=dtype,
                          name=name, requires_grad=True)

        return cls(get("w_theta"), [get(f"w_phi{j}") for j in range(manifest["n_refs"])], get("w_alpha"))


def assemble_references(h: FeatureHierarchy, cfg: CrossFusionConfig) -> list[Tensor]:
    """Resize every level to the target resolution, then dilated-max-pool it."""
    hp, wp = h.target.dims[-2:]
    return [T.dilated_max_pool(T.resize_bilinear(m, hp, wp), cfg.pool_kernel, cfg.pool_dilation) for m in h.maps]


def correlate(query_emb: Tensor, key_embs: Sequence[Tensor], kind: str) -> Tensor:
    """Per-pixel attention weights ``[..., N, H, W]`` over the N references."""
    if not key_embs:
        raise ContractViolation("correlate: empty key list")
    kind = CORRELATION_ALIASES.get(kind, kind)
    logits = T.stack([T.channel_dot(query_emb, k) for k in key_embs], axis=-3)
    if kind == "embedded_gaussian":
        return T.softmax_axis(logits, axis=-3)
    if kind == "sigmoid":
        return T.sigmoid_map(logits)
    if kind == "dot_product":
        return T.divide(logits, len(key_embs))
    raise ContractViolation(f"correlate: unknown correlation {kind!r}")


def fuse(weights: Tensor, key_embs: Sequence[Tensor]) -> Tensor:
    """``y[c] = sum_j weights[j] * key_embs[j][c]`` at every pixel."""
    n = weights.dims[-3]
    if n != len(key_embs):
        raise ContractViolation(f"fuse: {n} weight maps but {len(key_embs)} embeddings")
    terms = [T.mul_map(k, T.select(weights, j, axis=-3)) for j, k in enumerate(key_embs)]
    return terms[0] if n == 1 else T.add_n(terms)


def check_params(h: FeatureHierarchy, params: BlockParams) -> None:
    cp = h.target.dims[-3]
    ce = params.w_theta.dims[0]
    if params.w_theta.dims != (ce, cp):
        raise ContractViolation(f"w_theta dims {params.w_theta.dims} do not match target level "
                                f"{h.target_index} with {cp} channels")
    if len(params.w_phi) != len(h):
        raise ContractViolation(f"{len(params.w_phi)} phi embeddings for {len(h)} hierarchy levels")
    for j, (w, m) in enumerate(zip(params.w_phi, h.maps)):
        if w.dims != (ce, m.dims[-3]):
            raise ContractViolation(f"level {j}: w_phi{j} dims {w.dims} do not match map channels {m.dims[-3]}")
    if params.w_alpha.dims != (cp, ce):
        raise ContractViolation(f"w_alpha dims {params.w_alpha.dims}, expected {(cp, ce)}")


def cross_fusion_forward(h: FeatureHierarchy, params: BlockParams, cfg: CrossFusionConfig) -> Tensor:
    check_params(h, params)
    x_p = h.target
    refs = assemble_references(h, cfg)
    query = T.conv1x1(x_p, params.w_theta)
    keys = [T.conv1x1(r, w) for r, w in zip(refs, params.w_phi)]
    y = fuse(correlate(query, keys, cfg.correlation), keys)
    return T.add(T.conv1x1(y, params.w_alpha), x_p)


def block_param_count(params: BlockParams) -> int:
    return sum(t.data.size for t in params.tensors())


def block_flops(h: FeatureHierarchy | Sequence[tuple[int, int, int]], cfg: CrossFusionConfig,
                target_index: int | None = None) -> int:
    """Multiply-accumulate estimate for one sample.

    ``h`` may be a hierarchy or a list of per-level ``(C, H, W)``. Counts
    the theta/phi/alpha embeddings, correlation and fusion products, pooling
    comparisons (k*k - 1 per output) and resize arithmetic (4 MACs per
    output value of every level not already at target size).
    """
    if isinstance(h, FeatureHierarchy):
        shapes = [tuple(m.dims[-3:]) for m in h.maps]
        target_index = h.target_index
    else:
        shapes = [tuple(s) for s in h]
    cp, hp, wp = shapes[target_index]
    ce = cfg.embed_channels(cp)
    pix = hp * wp
    n = len(shapes)
    flops = ce * cp * pix                                  # theta
    flops += sum(ce * c for c, _, _ in shapes) * pix       # phi_j
    flops += cp * ce * pix                                 # alpha
    flops += 2 * n * ce * pix                              # correlation + fusion
    flops += (cfg.pool_kernel ** 2 - 1) * sum(c for c, _, _ in shapes) * pix
    flops += sum(4 * c * pix for c, hh, ww in shapes if (hh, ww) != (hp, wp))
    return flops
