"""Training, evaluation and ablation grids for the fusion strategies."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import tensor as T
from .backbone import (DEFAULT_TAPS, NUM_CLASSES, BackboneConfig, ModelBundle, backbone_flops, build_bundle,
                       forward_with_taps, fusion_flops)
from .block import CrossFusionConfig
from .data import load_arrays
from .tensor import ComputationRecord, SGD

log = logging.getLogger(__name__)

REPORT_SCHEMA = "crossfuse-report/1"
TRAIN_FRACTION = 0.8
PARAM_BUDGET = 0.08
FLOP_BUDGET = 0.05

# detector AP of each variant on a public benchmark, kept for side-by-side
# printing next to the desk-scale mIoU; never used for gating
REFERENCE_AP = {
    "correlation": {"embedded_gaussian": 36.7, "sigmoid": 36.6, "dot_product": 36.1, "baseline": 34.9},
    "strategy": {"cross": 36.7, "addition": 36.2, "concat": 36.1},
    "pool": {"1x1": 34.7, "3x3": 35.8, "5x2": 36.2, "5x3": 36.7, "5x4": 36.6},
}


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    batch: int = 8
    seed: int = 0
    strategy: str = "cross"
    fusion: CrossFusionConfig = field(default_factory=CrossFusionConfig)
    reference_taps: tuple[str, ...] = DEFAULT_TAPS
    class_weights: str | list[float] = "inverse"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.fusion, dict):
            self.fusion = CrossFusionConfig.from_dict(self.fusion)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.reference_taps = tuple(self.reference_taps)
        if self.epochs < 0 or self.batch < 1 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid training config: epochs={self.epochs} batch={self.batch} "
                             f"lr={self.lr} momentum={self.momentum}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = self.fusion.to_dict()
        d["reference_taps"] = list(self.reference_taps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class Metrics:
    per_class_iou: list[float]
    miou: float
    pixel_accuracy: float
    loss_curve: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    images: np.ndarray      # [S, 1, H, W]
    masks: np.ndarray       # [S, H, W]

    def __len__(self) -> int:
        return len(self.images)


def split_dataset(images: np.ndarray, masks: np.ndarray, train_fraction: float = TRAIN_FRACTION) -> tuple[Split, Split]:
    """First ``train_fraction`` of samples (by index) train, the rest test."""
    n_train = int(round(len(images) * train_fraction))
    return Split(images[:n_train], masks[:n_train]), Split(images[n_train:], masks[n_train:])


def load_splits(path: str | Path) -> tuple[Split, Split]:
    return split_dataset(*load_arrays(path))


def inverse_frequency_weights(masks: np.ndarray) -> list[float]:
    counts = np.bincount(masks.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES].astype(np.float64)
    w = counts.sum() / (NUM_CLASSES * np.maximum(counts, 1.0))
    return [float(v) for v in w]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, labels: np.ndarray, k: int = NUM_CLASSES) -> np.ndarray:
    """``cm[true, predicted]`` pixel counts."""
    idx = labels.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=k * k).reshape(k, k)


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    """IoU = TP / (TP + FP + FN); a class absent from both prediction and labels scores 1."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), 1.0)
    total = cm.sum()
    acc = float(tp.sum() / total) if total else 1.0
    return Metrics([float(v) for v in iou], float(iou.mean()), acc)


def predict(bundle: ModelBundle, images: np.ndarray, batch: int = 50) -> np.ndarray:
    dtype = bundle.params["head.w"].dtype
    out = []
    for i in range(0, len(images), batch):
        _, logits = forward_with_taps(bundle, T.Tensor(images[i:i + batch], dtype=dtype))
        out.append(logits.data.argmax(axis=-3))
    if not out:
        return np.zeros((0,) + images.shape[-2:], dtype=np.int64)
    return np.concatenate(out)


def evaluate(bundle: ModelBundle, data: Split) -> Metrics:
    return metrics_from_confusion(confusion_matrix(predict(bundle, data.images), data.masks))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    metrics: dict
    initial_metrics: dict
    per_epoch: list[dict]
    params: dict
    flops: dict
    params_unchanged: bool
    status: str = "ok"
    abort: dict | None = None
    cell: dict | None = None
    wall_ms: float = 0.0
    schema: str = REPORT_SCHEMA

    def to_dict(self, strip_timing: bool = False) -> dict:
        d = asdict(self)
        if strip_timing:
            d.pop("wall_ms")
        return d

    def to_json(self, strip_timing: bool = False) -> str:
        return json.dumps(self.to_dict(strip_timing), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise SchemaError(f"unsupported report schema {d.get('schema')!r}, expected {REPORT_SCHEMA!r}")
        return cls(**d)


def overhead_summary(bundle: ModelBundle, height: int = 64, width: int = 64) -> tuple[dict, dict]:
    base_params = sum(t.data.size for t in bundle.params.values())
    fusion_params = bundle.fusion_param_count()
    base_flops = backbone_flops(bundle.config, height, width)
    f_flops = fusion_flops(bundle, height, width)
    p_ratio = fusion_params / base_params
    f_ratio = f_flops / base_flops
    params = {"total": base_params + fusion_params, "baseline": base_params, "fusion": fusion_params,
              "overhead": p_ratio, "within_budget": p_ratio < PARAM_BUDGET}
    flops = {"total": base_flops + f_flops, "baseline": base_flops, "fusion": f_flops,
             "overhead": f_ratio, "within_budget": f_ratio < FLOP_BUDGET}
    return params, flops


def make_bundle(run: TrainConfig, dtype=None) -> ModelBundle:
    return build_bundle(run.backbone, run.seed, run.strategy, run.fusion, run.reference_taps, dtype=dtype)


def _snapshot(bundle: ModelBundle) -> list[np.ndarray]:
    return [t.data.copy() for t in bundle.tensors()]


def train(run: TrainConfig, train_data: Split, test_data: Split | None = None,
          bundle: ModelBundle | None = None) -> tuple[RunReport, ModelBundle]:
    """Minimise class-weighted pixel cross-entropy with momentum SGD.

    Mini-batch order comes from ``seed``; backbone weights come from ``seed``
    too, so two configs differing only in fusion strategy see the same data
    order and the same shared-layer initialisation.
    """
    if len(train_data) == 0:
        raise ValueError("training split is empty")
    t0 = time.perf_counter()
    test_data = test_data if test_data is not None else train_data
    bundle = bundle or make_bundle(run)
    params = bundle.tensors()
    initial = _snapshot(bundle)
    weights = inverse_frequency_weights(train_data.masks) if run.class_weights == "inverse" else list(run.class_weights)
    opt = SGD(params, run.lr, run.momentum, run.clip_norm)
    dtype = params[0].dtype
    h, w = train_data.images.shape[-2:]
    p_info, f_info = overhead_summary(bundle, h, w)

    init_metrics = evaluate(bundle, test_data)
    per_epoch: list[dict] = []
    loss_curve: list[float] = []
    status, abort = "ok", None
    order_rng = np.random.default_rng([run.seed, 2])
    final = init_metrics
    for epoch in range(run.epochs):
        perm = order_rng.permutation(len(train_data))
        losses = []
        for step, i in enumerate(range(0, len(perm), run.batch)):
            idx = np.sort(perm[i:i + run.batch])
            x = T.Tensor(train_data.images[idx], dtype=dtype)
            with ComputationRecord() as rec:
                _, logits = forward_with_taps(bundle, x)
                loss = T.cross_entropy(logits, train_data.masks[idx], weights)
            value = float(loss.data)
            if not math.isfinite(value):
                status, abort = "aborted", {"epoch": epoch, "step": step, "loss": repr(value)}
                log.warning("non-finite loss at epoch %d step %d", epoch, step)
                break
            rec.backward(loss)
            opt.step()
            losses.append(value)
        if status != "ok":
            break
        loss_curve.append(float(np.mean(losses)))
        entry = {"epoch": epoch, "train_loss": loss_curve[-1]}
        if (epoch + 1) % run.eval_every == 0 or epoch == run.epochs - 1:
            final = evaluate(bundle, test_data)
            entry["test"] = final.to_dict()
        per_epoch.append(entry)
        log.info("epoch %d loss %.4f mIoU %.4f", epoch, loss_curve[-1], final.miou)

    final.loss_curve = loss_curve
    unchanged = all(np.array_equal(a, t.data) for a, t in zip(initial, bundle.tensors()))
    report = RunReport(config=run.to_dict(), metrics=final.to_dict(), initial_metrics=init_metrics.to_dict(),
                       per_epoch=per_epoch, params=p_info, flops=f_info, params_unchanged=unchanged,
                       status=status, abort=abort, wall_ms=(time.perf_counter() - t0) * 1e3)
    return report, bundle


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------

CELL_KEYS = ("strategy", "correlation", "pool", "taps")


@dataclass
class GridSpec:
    cells: list[dict]
    seeds: int = 5
    master_seed: int = 0
    base: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        cells = d.pop("cells", None)
        axes = d.pop("axes", None)
        if (cells is None) == (axes is None):
            raise ValueError("grid spec needs exactly one of 'cells' or 'axes'")
        if axes is not None:
            keys = list(axes)
            cells = [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]
        spec = cls(cells=[dict(c) for c in cells], **d)
        for i, c in enumerate(spec.cells):
            c.setdefault("id", f"c{i:02d}")
        if spec.seeds < 1:
            raise ValueError("grid needs at least one seed per cell")
        return spec

    def seed_list(self) -> list[int]:
        state = np.random.SeedSequence(self.master_seed).generate_state(self.seeds)
        return [int(s) for s in state]

    def to_dict(self) -> dict:
        return asdict(self)


def cell_config(base: dict, cell: dict, seed: int) -> TrainConfig:
    cfg = copy.deepcopy(base)
    fusion = dict(cfg.pop("fusion", {}))
    for k, v in cell.items():
        if k == "id":
            continue
        if k == "correlation":
            fusion["correlation"] = v
        elif k == "pool":
            fusion["pool_kernel"], fusion["pool_dilation"] = int(v[0]), int(v[1])
        elif k == "taps":
            cfg["reference_taps"] = list(v)
        elif k == "embed_ratio":
            fusion["embed_ratio"] = v
        else:
            cfg[k] = v
    cfg["fusion"] = fusion
    cfg["seed"] = seed
    return TrainConfig.from_dict(cfg)


_worker_data: tuple[Split, Split] | None = None


def _init_worker(path: str) -> None:
    global _worker_data
    _worker_data = load_splits(path)


def _run_job(job: tuple[int, int, dict, dict, int]) -> dict:
    ci, si, base, cell, seed = job
    return _run_cell(ci, si, base, cell, seed, *_worker_data)


def _run_cell(ci: int, si: int, base: dict, cell: dict, seed: int, train_data: Split, test_data: Split) -> dict:
    run = cell_config(base, cell, seed)
    report, _ = train(run, train_data, test_data)
    report.cell = {"id": cell["id"], "index": ci, "seed_index": si, "axes": {k: v for k, v in cell.items() if k != "id"}}
    return report.to_dict()


def ablate(grid: GridSpec | dict, data: str | Path | tuple[Split, Split], jobs: int = 1) -> list[RunReport]:
    """One report per (cell, seed), ordered by cell then seed.

    Every cell uses the same seed list, hence the same data order and the
    same backbone initialisation per seed. A cell whose run aborts is
    recorded with ``status == "aborted"`` and the grid carries on.
    """
    if isinstance(grid, dict):
        grid = GridSpec.from_dict(grid)
    seeds = grid.seed_list()
    jobs_list = [(ci, si, grid.base, cell, seed) for ci, cell in enumerate(grid.cells) for si, seed in enumerate(seeds)]
    if jobs > 1 and isinstance(data, (str, Path)):
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(str(data),)) as ex:
            results = list(ex.map(_run_job, jobs_list))
    else:
        splits = load_splits(data) if isinstance(data, (str, Path)) else data
        results = []
        for job in jobs_list:
            log.info("cell %s seed %d", job[3]["id"], job[1])
            results.append(_run_cell(*job, *splits))
    results.sort(key=lambda r: (r["cell"]["index"], r["cell"]["seed_index"]))
    return [RunReport.from_dict(r) for r in results]


def aggregate(reports: Iterable[RunReport]) -> list[dict]:
    """Per-cell mean and sample standard deviation (ddof=1) of test metrics."""
    groups: dict[tuple, list[RunReport]] = {}
    for r in reports:
        key = (r.cell["index"], r.cell["id"]) if r.cell else (0, "run")
        groups.setdefault(key, []).append(r)
    rows = []
    for (_, cid), rs in sorted(groups.items()):
        ok = [r for r in rs if r.status == "ok"]
        miou = np.array([r.metrics["miou"] for r in ok], dtype=np.float64)
        per_class = np.array([r.metrics["per_class_iou"] for r in ok], dtype=np.float64).reshape(-1, NUM_CLASSES)
        rows.append({
            "cell_id": cid,
            "axes": rs[0].cell["axes"] if rs[0].cell else {},
            "runs": len(rs),
            "aborted": len(rs) - len(ok),
            "miou_mean": float(miou.mean()) if len(ok) else float("nan"),
            "miou_std": float(miou.std(ddof=1)) if len(ok) > 1 else 0.0,
            "per_class_iou_mean": [float(v) for v in per_class.mean(axis=0)] if len(ok) else [float("nan")] * 3,
            "params": rs[0].params["total"],
            "flops": rs[0].flops["total"],
        })
    return rows


CSV_COLUMNS = ["cell_id", "strategy", "correlation", "pool_kernel", "pool_dilation", "taps", "seed", "status",
               "miou", "iou_background", "iou_dent", "iou_hole", "params", "flops", "wall_ms"]


def reports_to_csv(reports: Sequence[RunReport], strip_timing: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    ordered = sorted(reports, key=lambda r: ((r.cell or {}).get("index", 0), (r.cell or {}).get("seed_index", 0)))
    for r in ordered:
        c = r.config
        iou = r.metrics["per_class_iou"]
        writer.writerow([
            (r.cell or {}).get("id", "run"), c["strategy"], c["fusion"]["correlation"],
            c["fusion"]["pool_kernel"], c["fusion"]["pool_dilation"], "+".join(c["reference_taps"]),
            c["seed"], r.status, f"{r.metrics['miou']:.6f}", f"{iou[0]:.6f}", f"{iou[1]:.6f}", f"{iou[2]:.6f}",
            r.params["total"], r.flops["total"], "" if strip_timing else f"{r.wall_ms:.0f}",
        ])
    return buf.getvalue()


def summary_table(reports: Sequence[RunReport]) -> str:
    rows = aggregate(reports)
    lines = [f"{'cell':<14}{'strategy':<10}{'correlation':<19}{'pool':<7}{'taps':<34}"
             f"{'mIoU':>16}{'dent':>8}{'hole':>8}{'params':>9}{'MMAC':>8}"]
    lines.append("-" * len(lines[0]))
    by_id = {}
    for r in reports:
        by_id.setdefault((r.cell or {}).get("id", "run"), r)
    for row in rows:
        c = by_id[row["cell_id"]].config
        pool = "off" if c["fusion"]["pool_kernel"] == 1 else f"{c['fusion']['pool_kernel']}x{c['fusion']['pool_dilation']}"
        corr = c["fusion"]["correlation"] if c["strategy"] == "cross" else "-"
        taps = "-" if c["strategy"] == "none" else ",".join(c["reference_taps"])
        pc = row["per_class_iou_mean"]
        lines.append(f"{row['cell_id']:<14}{c['strategy']:<10}{corr:<19}{pool:<7}{taps:<34}"
                     f"{row['miou_mean']:>9.4f}±{row['miou_std']:.4f}{pc[1]:>8.4f}{pc[2]:>8.4f}"
                     f"{row['params']:>9}{row['flops'] / 1e6:>8.2f}")
    return "\n".join(lines)


def load_reports(paths: Iterable[str | Path]) -> list[RunReport]:
    """Read RunReport JSON files; a directory contributes every ``*.json`` it holds."""
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            d = json.loads(f.read_text())
            if isinstance(d, dict) and "reports" in d:
                if d.get("schema") != REPORT_SCHEMA:
                    raise SchemaError(f"{f}: unsupported schema {d.get('schema')!r}, expected {REPORT_SCHEMA!r}")
                out.extend(RunReport.from_dict(x) for x in d["reports"])
            elif isinstance(d, list):
                out.extend(RunReport.from_dict(x) for x in d)
            elif "schema" in d or "metrics" in d:
                out.append(RunReport.from_dict(d))
    return out


def grid_to_jsonable(reports: Sequence[RunReport], strip_timing: bool = False) -> list[dict[str, Any]]:
    return [r.to_dict(strip_timing) for r in reports]
