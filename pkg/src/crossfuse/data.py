"""Synthetic dent/hole segmentation task.

Images are a smooth low-frequency background plus Gaussian noise with 1-5
non-overlapping circular blobs. Both classes share a shallow radial
darkening; holes add a darker core whose extra contrast is
``CORE_GAP * (1 - class_similarity)``. Radii are log-uniform over
``scale_range`` so one image set mixes tiny and large defects of the same
class.

Labels: 0 background, 1 dent-like, 2 hole-like.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import interp_matrix
from .tensorfile import TensorFileError, read_tensor, write_tensor

BACKGROUND, DENT, HOLE = 0, 1, 2
CLASS_NAMES = ("background", "dent", "hole")

BASE_LEVEL = 0.65
TEXTURE_AMPLITUDE = 0.08
TEXTURE_GRID = 4
DEPTH_RANGE = (0.10, 0.25)
CORE_GAP = 0.30
# radial profile breakpoints, as fractions of the blob radius
PLATEAU_END = 0.7   # shared darkening is flat up to here, cosine taper to 1.0
CORE_END = 0.3      # hole core is flat up to here, cosine taper to CORE_TAPER
CORE_TAPER = 0.45
BLOB_MARGIN = 2.0
PLACEMENT_TRIES = 100
PLACEMENT_ROUNDS = 20


class DatasetError(ValueError):
    pass


@dataclass
class GenConfig:
    image_size: int = 64
    samples: int = 100
    scale_range: tuple[float, float] = (2.0, 20.0)
    class_similarity: float = 0.8
    noise_sigma: float = 0.05
    seed: int = 0
    blob_count: tuple[int, int] = (1, 5)

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.blob_count = tuple(int(v) for v in self.blob_count)
        lo, hi = self.scale_range
        if lo < 1 or hi < lo or hi > self.image_size / 2:
            raise ValueError(f"scale_range {self.scale_range} must satisfy 1 <= min <= max <= image_size/2")
        if not 0.0 <= self.class_similarity <= 1.0:
            raise ValueError(f"class_similarity must be in [0, 1], got {self.class_similarity}")
        if self.noise_sigma < 0 or self.samples < 0 or self.image_size < 8:
            raise ValueError("noise_sigma and samples must be non-negative, image_size >= 8")
        if not 0 <= self.blob_count[0] <= self.blob_count[1]:
            raise ValueError(f"blob_count {self.blob_count} must be an ordered non-negative pair")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["blob_count"] = list(self.blob_count)
        return d


@dataclass
class Blob:
    cy: int
    cx: int
    radius: float
    label: int
    depth: float


@dataclass
class SyntheticSample:
    image: np.ndarray           # [1, H, W] in [0, 1]
    mask: np.ndarray            # [H, W] integer labels
    blobs: list[Blob] = field(default_factory=list)


def sample_seeds(cfg: GenConfig) -> list[int]:
    """Independent per-sample seeds derived from the master seed."""
    ss = np.random.SeedSequence(cfg.seed)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(cfg.samples)]


def background_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (TEXTURE_GRID, TEXTURE_GRID))
    m = interp_matrix(TEXTURE_GRID, size)
    smooth = m @ coarse @ m.T
    return BASE_LEVEL + TEXTURE_AMPLITUDE * smooth / max(np.abs(smooth).max(), 1e-12)


def _taper(t: np.ndarray, flat_end: float, zero_at: float) -> np.ndarray:
    u = np.clip((t - flat_end) / (zero_at - flat_end), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * u))


def blob_profile(dist: np.ndarray, blob: Blob, class_similarity: float) -> np.ndarray:
    """Darkening (positive = darker) a blob applies at distance ``dist`` from its centre."""
    t = dist / blob.radius
    dark = blob.depth * _taper(t, PLATEAU_END, 1.0) * (t < 1.0)
    if blob.label == HOLE:
        dark = dark + CORE_GAP * (1.0 - class_similarity) * _taper(t, CORE_END, CORE_TAPER)
    return dark


def _place(rng: np.random.Generator, radii: np.ndarray, size: int) -> list[tuple[int, int]] | None:
    order = np.argsort(-radii, kind="stable")
    for _ in range(PLACEMENT_ROUNDS):
        placed: dict[int, tuple[int, int]] = {}
        ok = True
        for i in order:
            for _ in range(PLACEMENT_TRIES):
                cy, cx = (int(v) for v in rng.integers(0, size, 2))
                if all(np.hypot(cy - py, cx - px) >= radii[i] + radii[j] + BLOB_MARGIN
                       for j, (py, px) in placed.items()):
                    placed[i] = (cy, cx)
                    break
            else:
                ok = False
                break
        if ok:
            return [placed[i] for i in range(len(radii))]
    return None


def gen_sample(cfg: GenConfig, rng: np.random.Generator | int) -> SyntheticSample:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = cfg.image_size
    bg = background_texture(rng, n)
    noise = rng.normal(0.0, 1.0, (n, n))
    count = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    lo, hi = np.log(cfg.scale_range[0]), np.log(cfg.scale_range[1])
    radii = np.exp(rng.uniform(lo, hi, count))
    labels = rng.integers(DENT, HOLE + 1, count)
    depths = rng.uniform(*DEPTH_RANGE, count)
    # if the blobs cannot be packed, drop the last-drawn one and retry
    centres = _place(rng, radii, n)
    while centres is None:
        radii, labels, depths = radii[:-1], labels[:-1], depths[:-1]
        centres = _place(rng, radii, n)

    yy, xx = np.mgrid[0:n, 0:n]
    image = bg.copy()
    mask = np.zeros((n, n), dtype=np.int64)
    blobs = []
    for (cy, cx), r, lab, d in zip(centres, radii, labels, depths):
        blob = Blob(cy, cx, float(r), int(lab), float(d))
        dist = np.hypot(yy - cy, xx - cx)
        image -= blob_profile(dist, blob, cfg.class_similarity)
        mask[dist < r] = lab
        blobs.append(blob)
    image = np.clip(image + cfg.noise_sigma * noise, 0.0, 1.0)
    return SyntheticSample(image[None].astype(np.float32), mask, blobs)


def class_pixel_counts(mask: np.ndarray) -> list[int]:
    return [int(c) for c in np.bincount(np.asarray(mask, dtype=np.int64).ravel(), minlength=3)[:3]]


def gen_dataset(cfg: GenConfig, out_dir: str | Path) -> dict:
    """Write ``manifest.json`` plus ``NNNN_img.cft`` / ``NNNN_mask.cft`` per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    totals = [0, 0, 0]
    for i, seed in enumerate(sample_seeds(cfg)):
        s = gen_sample(cfg, seed)
        img_name, mask_name = f"{i:04d}_img.cft", f"{i:04d}_mask.cft"
        write_tensor(out / img_name, s.image)
        write_tensor(out / mask_name, s.mask.astype(np.float32))
        counts = class_pixel_counts(s.mask)
        totals = [a + b for a, b in zip(totals, counts)]
        entries.append({"index": i, "seed": seed, "image": img_name, "mask": mask_name,
                        "class_pixels": counts, "blobs": len(s.blobs)})
    manifest = {"format": "crossfuse-dataset/1", "config": cfg.to_dict(), "class_pixels": totals,
                "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise DatasetError(f"{path / 'manifest.json'}: missing manifest") from e


def load_dataset(path: str | Path) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(image [1,H,W] float32, mask [H,W] int64)`` in manifest order.

    Every file is checked against the manifest; a mismatch raises
    ``DatasetError`` naming the file.
    """
    path = Path(path)
    manifest = read_manifest(path)
    n = manifest["config"]["image_size"]
    for entry in manifest["samples"]:
        img_file, mask_file = path / entry["image"], path / entry["mask"]
        try:
            img = read_tensor(img_file)
            mask_f = read_tensor(mask_file)
        except (FileNotFoundError, TensorFileError) as e:
            raise DatasetError(f"{e}") from e
        if img.shape != (1, n, n):
            raise DatasetError(f"{img_file.name}: dims {img.shape}, manifest says (1, {n}, {n})")
        if mask_f.shape != (n, n):
            raise DatasetError(f"{mask_file.name}: dims {mask_f.shape}, manifest says ({n}, {n})")
        mask = mask_f.astype(np.int64)
        if class_pixel_counts(mask) != entry["class_pixels"]:
            raise DatasetError(f"{mask_file.name}: class pixel counts {class_pixel_counts(mask)} "
                               f"disagree with manifest {entry['class_pixels']}")
        yield img, mask


def load_arrays(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Whole dataset as stacked arrays ``([S,1,H,W], [S,H,W])``."""
    manifest = read_manifest(path)
    n = manifest["config"]["image_size"]
    pairs = list(load_dataset(path))
    if not pairs:
        return np.zeros((0, 1, n, n), np.float32), np.zeros((0, n, n), np.int64)
    imgs, masks = zip(*pairs)
    return np.stack(imgs), np.stack(masks)
