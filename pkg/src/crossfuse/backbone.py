"""Toy three-stage CNN with named taps and a pluggable fusion point.

Each stage opens with a 3x3 stride-2 convolution and continues with
``x + relu(conv3x3(x))`` residual blocks. Taps follow the ResNet naming used
for cross-fusion integration:

* ``s2_last`` / ``s3_last`` / ``s4_last``: input of the last block of a stage
* ``s4_first``: input of the first block of stage 4

``s4_last`` is the fusion target. Its refined version replaces it, so the
final stage-4 block and the head run on the fused map. The head is a 1x1
convolution to class logits followed by bilinear upsampling to input size.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .baselines import fuse_addition, fuse_concat, init_projections
from .block import BlockParams, CrossFusionConfig, FeatureHierarchy, block_flops, cross_fusion_forward
from .tensor import ContractViolation, Tensor
from .tensorfile import read_tensor, write_tensor

TAP_NAMES = ("s2_last", "s3_last", "s4_first", "s4_last")
TARGET_TAP = "s4_last"
DEFAULT_TAPS = ("s3_last", "s4_first", "s4_last")
STRATEGIES = ("none", "addition", "concat", "cross")
NUM_CLASSES = 3
STAGE_NAMES = ("s2", "s3", "s4")


@dataclass
class BackboneConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: list[int] = field(default_factory=lambda: [2, 2, 3])
    input_channels: int = 1

    def __post_init__(self):
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ContractViolation("backbone has exactly three stages (s2, s3, s4)")
        if self.blocks_per_stage[2] < 2:
            raise ContractViolation("stage 4 needs >= 2 blocks so s4_first and s4_last differ")
        if min(self.blocks_per_stage) < 1 or min(self.stage_channels) < 1:
            raise ContractViolation("stage channels and block counts must be positive")

    def tap_channels(self) -> dict[str, int]:
        c2, c3, c4 = self.stage_channels
        return {"s2_last": c2, "s3_last": c3, "s4_first": c4, "s4_last": c4}


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_backbone(cfg: BackboneConfig, seed: int, dtype=None) -> dict[str, Tensor]:
    """Backbone and head weights; depends only on ``(cfg, seed)``.

    Stage-entry convolutions use Kaiming-uniform fan-in init. Residual
    branches are scaled by ``1/sqrt(total blocks)`` and the head starts at
    N(0, 0.01) so that, without normalisation layers, activations stay
    bounded through the residual stack.
    """
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng([seed, 0])
    params: dict[str, Tensor] = {}
    branch_scale = 1.0 / np.sqrt(sum(cfg.blocks_per_stage))

    def put(name, arr):
        params[name] = Tensor(arr, dtype=dtype, name=name, requires_grad=True)

    cin = cfg.input_channels
    for s, (c, nb) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
        st = STAGE_NAMES[s]
        put(f"{st}.entry.w", _kaiming_uniform(rng, (c, cin, 3, 3), cin * 9))
        put(f"{st}.entry.b", np.zeros(c))
        for k in range(nb):
            put(f"{st}.block{k}.w", branch_scale * _kaiming_uniform(rng, (c, c, 3, 3), c * 9))
            put(f"{st}.block{k}.b", np.zeros(c))
        cin = c
    put("head.w", rng.normal(0.0, 0.01, (NUM_CLASSES, cin)))
    put("head.b", np.zeros(NUM_CLASSES))
    return params


@dataclass
class ModelBundle:
    config: BackboneConfig
    params: dict[str, Tensor]
    strategy: str = "none"
    fusion_config: CrossFusionConfig | None = None
    reference_taps: tuple[str, ...] = DEFAULT_TAPS
    block: BlockParams | None = None
    projections: list[Tensor] | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"unknown fusion strategy {self.strategy!r}; expected one of {STRATEGIES}")
        self.reference_taps = tuple(t for t in TAP_NAMES if t in self.reference_taps)

    @property
    def target_index(self) -> int:
        return self.reference_taps.index(TARGET_TAP)

    def fusion_tensors(self) -> list[Tensor]:
        if self.strategy == "cross":
            return self.block.tensors()
        if self.strategy in ("addition", "concat"):
            return list(self.projections)
        return []

    def tensors(self) -> list[Tensor]:
        return list(self.params.values()) + self.fusion_tensors()

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.strategy == "cross":
            out.update({f"block.{k}": v for k, v in self.block.named().items()})
        elif self.strategy in ("addition", "concat"):
            out.update({f"fusion.{t.name}": t for t in self.projections})
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def fusion_param_count(self) -> int:
        return sum(t.data.size for t in self.fusion_tensors())

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, t in self.named_tensors().items():
            fname = name.replace(".", "_") + ".cft"
            write_tensor(directory / fname, t.data)
            files[name] = {"file": fname, "dims": list(t.dims)}
        manifest = {
            "backbone": asdict(self.config),
            "strategy": self.strategy,
            "reference_taps": list(self.reference_taps),
            "fusion_config": self.fusion_config.to_dict() if self.fusion_config else None,
            "tensors": files,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path, dtype=None) -> "ModelBundle":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        dtype = dtype or T.default_dtype()
        tensors = {name: Tensor(read_tensor(directory / info["file"]), dtype=dtype, name=name, requires_grad=True)
                   for name, info in m["tensors"].items()}
        params = {k: v for k, v in tensors.items() if not k.startswith(("block.", "fusion."))}
        fcfg = CrossFusionConfig.from_dict(m["fusion_config"]) if m["fusion_config"] else None
        bundle = cls(BackboneConfig(**m["backbone"]), params, m["strategy"], fcfg, tuple(m["reference_taps"]))
        if bundle.strategy == "cross":
            n = len(bundle.reference_taps)
            bundle.block = BlockParams(tensors["block.w_theta"], [tensors[f"block.w_phi{j}"] for j in range(n)],
                                       tensors["block.w_alpha"])
            for t in bundle.block.tensors():
                t.name = t.name.removeprefix("block.")
        elif bundle.strategy in ("addition", "concat"):
            bundle.projections = sorted((v for k, v in tensors.items() if k.startswith("fusion.")),
                                        key=lambda t: (len(t.name), t.name))
            for t in bundle.projections:
                t.name = t.name.removeprefix("fusion.")
        return bundle


def build_bundle(cfg: BackboneConfig | None = None, seed: int = 0, strategy: str = "none",
                 fusion_config: CrossFusionConfig | None = None,
                 reference_taps: Sequence[str] = DEFAULT_TAPS, dtype=None) -> ModelBundle:
    cfg = cfg or BackboneConfig()
    bundle = ModelBundle(cfg, init_backbone(cfg, seed, dtype))
    if strategy == "none":
        return bundle
    return insert_block(bundle, fusion_config or CrossFusionConfig(), reference_taps, strategy=strategy,
                        seed=seed, dtype=dtype)


def insert_block(bundle: ModelBundle, cfg: CrossFusionConfig, reference_taps: Sequence[str] = DEFAULT_TAPS,
                 strategy: str = "cross", seed: int = 0, dtype=None) -> ModelBundle:
    """Return a bundle sharing ``bundle``'s backbone weights with a fusion stage at ``s4_last``.

    Fusion weights come from their own random stream, so bundles built from
    the same seed share every backbone weight regardless of strategy.
    """
    taps = tuple(reference_taps)
    if not taps:
        raise ContractViolation("reference taps must be non-empty")
    unknown = [t for t in taps if t not in TAP_NAMES]
    if unknown:
        raise ContractViolation(f"unknown tap name(s) {unknown}; valid taps are {TAP_NAMES}")
    if TARGET_TAP not in taps:
        raise ContractViolation(f"reference taps must include the fusion target {TARGET_TAP!r}")
    if strategy not in STRATEGIES or strategy == "none":
        raise ContractViolation(f"insert_block needs a fusion strategy from {STRATEGIES[1:]}, got {strategy!r}")
    taps = tuple(t for t in TAP_NAMES if t in taps)
    dtype = dtype or bundle.params["head.w"].dtype
    chans = [bundle.config.tap_channels()[t] for t in taps]
    target = taps.index(TARGET_TAP)
    out = ModelBundle(bundle.config, bundle.params, strategy, cfg, taps)
    if strategy == "cross":
        out.block = BlockParams.init(chans, target, cfg, np.random.default_rng([seed, 1]), dtype=dtype)
    else:
        out.projections = init_projections(chans, target, strategy, dtype=dtype)
    return out


def apply_fusion(bundle: ModelBundle, h: FeatureHierarchy) -> Tensor:
    if bundle.strategy == "cross":
        return cross_fusion_forward(h, bundle.block, bundle.fusion_config)
    if bundle.strategy == "addition":
        return fuse_addition(h, bundle.projections, bundle.fusion_config)
    if bundle.strategy == "concat":
        return fuse_concat(h, bundle.projections[0], bundle.fusion_config)
    return h.target


def _block(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(x, T.relu(T.add_bias(T.conv2d(x, w), b)))


def forward_with_taps(bundle: ModelBundle, image: Tensor | np.ndarray) -> tuple[FeatureHierarchy, Tensor]:
    """Run the backbone on ``[..., C_in, H, W]``; return the tap hierarchy and ``[..., 3, H, W]`` logits.

    The hierarchy holds the pre-fusion maps of the bundle's reference taps
    (``DEFAULT_TAPS`` for a bundle without fusion).
    """
    if not isinstance(image, Tensor):
        image = Tensor(image, dtype=bundle.params["head.w"].dtype)
    cfg = bundle.config
    if image.data.ndim < 3 or image.dims[-3] != cfg.input_channels:
        raise ContractViolation(f"image dims {image.dims} do not match {cfg.input_channels} input channel(s)")
    h, w = image.dims[-2:]
    if h % 8 or w % 8:
        raise ContractViolation(f"input size {h}x{w} must be a multiple of 8")
    p = bundle.params
    taps: dict[str, Tensor] = {}
    x = image
    refined = None
    for s, nb in enumerate(cfg.blocks_per_stage):
        st = STAGE_NAMES[s]
        x = T.relu(T.add_bias(T.conv2d(x, p[f"{st}.entry.w"], stride=2), p[f"{st}.entry.b"]))
        for k in range(nb):
            if k == 0:
                taps[f"{st}_first"] = x
            if k == nb - 1:
                taps[f"{st}_last"] = x
                if st == "s4":
                    ref_taps = bundle.reference_taps if bundle.strategy != "none" else DEFAULT_TAPS
                    hier = FeatureHierarchy([taps[t] for t in ref_taps], ref_taps.index(TARGET_TAP))
                    refined = apply_fusion(bundle, hier)
                    x = refined
            x = _block(x, p[f"{st}.block{k}.w"], p[f"{st}.block{k}.b"])
    logits = T.add_bias(T.conv1x1(x, p["head.w"]), p["head.b"])
    return hier, T.resize_bilinear(logits, h, w)


def backbone_flops(cfg: BackboneConfig, height: int = 64, width: int = 64) -> int:
    """Multiply-accumulates of the backbone and head for one sample (no fusion)."""
    flops = 0
    cin, hh, ww = cfg.input_channels, height, width
    for c, nb in zip(cfg.stage_channels, cfg.blocks_per_stage):
        hh, ww = (hh - 1) // 2 + 1, (ww - 1) // 2 + 1
        flops += c * cin * 9 * hh * ww
        flops += nb * c * c * 9 * hh * ww
        cin = c
    flops += NUM_CLASSES * cin * hh * ww
    flops += 4 * NUM_CLASSES * height * width
    return flops


def fusion_flops(bundle: ModelBundle, height: int = 64, width: int = 64) -> int:
    if bundle.strategy == "none":
        return 0
    chans = bundle.config.tap_channels()
    res = {"s2": height // 2, "s3": height // 4, "s4": height // 8}
    resw = {"s2": width // 2, "s3": width // 4, "s4": width // 8}
    shapes = [(chans[t], res[t[:2]], resw[t[:2]]) for t in bundle.reference_taps]
    if bundle.strategy == "cross":
        return block_flops(shapes, bundle.fusion_config, bundle.target_index)
    cp, hp, wp = shapes[bundle.target_index]
    pix = hp * wp
    flops = sum(cp * c for c, _, _ in shapes) * pix
    flops += (bundle.fusion_config.pool_kernel ** 2 - 1) * sum(c for c, _, _ in shapes) * pix
    flops += sum(4 * c * pix for c, hh, ww in shapes if (hh, ww) != (hp, wp))
    return flops
