"""End-to-end gradient verification of the fusion block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .block import BlockParams, CrossFusionConfig, FeatureHierarchy, assemble_references, cross_fusion_forward
from .tensor import GradCheckResult, Tensor

GRADCHECK_TOLERANCE = 1e-4
LATTICE_SPACING = 0.05


@dataclass
class GradCheckInstance:
    hierarchy: FeatureHierarchy
    params: BlockParams
    config: CrossFusionConfig
    probe: np.ndarray

    def loss(self) -> Tensor:
        return T.weighted_sum(cross_fusion_forward(self.hierarchy, self.params, self.config), self.probe)

    def tensors(self) -> list[Tensor]:
        return [*self.hierarchy.maps, *self.params.tensors()]


def default_channels(levels: int) -> list[int]:
    """``[8, 16, 16]`` for three levels; the first level is half as wide as the rest."""
    if levels == 1:
        return [16]
    return [8] + [16] * (levels - 1)


def pool_margin(h: FeatureHierarchy, cfg: CrossFusionConfig) -> float:
    """Smallest gap between the best and second-best tap over all pooled outputs."""
    if cfg.pool_kernel == 1:
        return float("inf")
    hp, wp = h.target.dims[-2:]
    margin = float("inf")
    for m in h.maps:
        x = T.resize_bilinear(m, hp, wp).data
        r = (cfg.pool_kernel - 1) // 2 * cfg.pool_dilation
        xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)], constant_values=-np.inf)
        taps = np.stack([xp[..., r + dy:r + dy + hp, r + dx:r + dx + wp]
                         for dy, dx in T._tap_offsets(cfg.pool_kernel, cfg.pool_dilation)])
        taps = np.sort(taps, axis=0)
        gap = taps[-1] - taps[-2]
        margin = min(margin, float(np.min(np.where(np.isfinite(gap), gap, np.inf))))
    return margin


def lattice_map(rng: np.random.Generator, channels: int, size: int, factor: int,
                spacing: float = LATTICE_SPACING) -> np.ndarray:
    """Map whose bilinear downsample by ``factor`` is a permuted lattice.

    Each channel of the ``size x size`` resized map holds a random
    permutation of ``spacing * (0..size*size-1)`` (centred), so any two taps
    differ by at least ``spacing``. For ``factor > 1`` the two-by-two source
    pixels that feed an output get zero-sum jitter around the lattice value;
    all other source pixels are free Gaussian noise.
    """
    n = size * size
    base = np.stack([rng.permutation(n) for _ in range(channels)]).reshape(channels, size, size)
    base = (base - (n - 1) / 2) * spacing
    if factor == 1:
        return base
    out = rng.standard_normal((channels, size * factor, size * factor))
    lo = factor // 2 - 1
    a, b = rng.uniform(-0.5, 0.5, (2, channels, size, size))
    for dy, dx, jit in ((0, 0, a), (0, 1, b), (1, 0, -b), (1, 1, -a)):
        out[:, lo + dy::factor, lo + dx::factor] = base + jit
    return out


def make_instance(kind: str, levels: int = 3, size: int = 6, channels: list[int] | None = None,
                  seed: int = 0, eps: float = 1e-3, pool: tuple[int, int] = (5, 3)) -> GradCheckInstance:
    """Random 64-bit hierarchy + block with non-zero ``w_alpha``.

    Level ``j`` has spatial size ``size * 2**(levels-1-j)``; the last level is
    the target. Maps come from :func:`lattice_map`, so every pooled output
    has a winning tap ahead of the runner-up by about ``LATTICE_SPACING``,
    far beyond what an ``eps`` perturbation can move it.
    """
    channels = channels or default_channels(levels)
    if len(channels) != levels:
        raise ValueError(f"{len(channels)} channel counts for {levels} levels")
    cfg = CrossFusionConfig(correlation=kind, pool_kernel=pool[0], pool_dilation=pool[1])
    rng = np.random.default_rng(seed)
    maps = [Tensor(lattice_map(rng, c, size, 2 ** (levels - 1 - j)), dtype=np.float64, name=f"x{j}")
            for j, c in enumerate(channels)]
    h = FeatureHierarchy(maps, levels - 1)
    if pool_margin(h, cfg) <= 20 * eps:
        raise RuntimeError(f"pooling margin {pool_margin(h, cfg):.2e} too small for eps={eps}")
    cp = channels[-1]
    ce = cfg.embed_channels(cp)

    def w(shape, name):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape), dtype=np.float64, name=name)

    params = BlockParams(w((ce, cp), "w_theta"), [w((ce, c), f"w_phi{j}") for j, c in enumerate(channels)],
                         w((cp, ce), "w_alpha"))
    probe = rng.standard_normal((cp, size, size))
    return GradCheckInstance(h, params, cfg, probe)


def block_gradcheck(kind: str, levels: int = 3, size: int = 6, channels: list[int] | None = None,
                    eps: float = 1e-3, seed: int = 0) -> GradCheckResult:
    inst = make_instance(kind, levels, size, channels, seed, eps)
    return T.grad_check(inst.loss, inst.tensors(), eps)


def references_for(inst: GradCheckInstance) -> list[Tensor]:
    return assemble_references(inst.hierarchy, inst.config)
