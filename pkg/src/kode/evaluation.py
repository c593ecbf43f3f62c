"""Long-horizon rollout evaluation, metrics and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, uncenter
from .koopman import LiftedLinearModel
from .plant import Pattern
from .trainer import Checkpoint, predict_windows

REPORT_HEADER = ["model", "pattern", "windows", "MDE", "FDE", "MAE", "FAE", "failures"]
SERIES_HEADER = ["step", "mean_dist", "mean_heading_err"]
AGGREGATE = "all"


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(x, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    return np.where(w == -math.pi, math.pi, w)


def step_errors(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Planar distance (m) and absolute wrapped heading error (rad) per step; shapes (..., H)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    dist = np.hypot(pred[..., 0] - gt[..., 0], pred[..., 1] - gt[..., 1])
    head = np.abs(wrap_angle(pred[..., 2] - gt[..., 2]))
    return dist, head


def metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """MDE/FDE in metres and MAE/FAE in degrees for one (H, >=3) sequence pair."""
    dist, head = step_errors(pred, gt)
    if dist.ndim != 1 or len(dist) == 0:
        raise ValueError("metrics expects a single non-empty sequence")
    return {"MDE": float(dist.mean()), "FDE": float(dist[-1]),
            "MAE": float(np.degrees(head.mean())), "FAE": float(np.degrees(head[-1]))}


@dataclass
class PatternRow:
    windows: int
    MDE: float
    FDE: float
    MAE: float
    FAE: float
    failures: int


@dataclass
class MetricsReport:
    model: str
    horizon: int
    rows: dict[str, PatternRow]
    series: np.ndarray  # (H, 2): mean distance, mean heading error in degrees
    extra: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> PatternRow:
        return self.rows[AGGREGATE]

    @property
    def failure_rate(self) -> float:
        agg = self.aggregate
        total = agg.windows + agg.failures
        return agg.failures / total if total else 0.0


def _row(dist: np.ndarray, head: np.ndarray, failures: int) -> PatternRow:
    if len(dist) == 0:
        nan = float("nan")
        return PatternRow(0, nan, nan, nan, nan, failures)
    return PatternRow(len(dist), float(dist.mean()), float(dist[:, -1].mean()),
                      float(np.degrees(head.mean())), float(np.degrees(head[:, -1].mean())), failures)


def report_from_predictions(model: str, pred: np.ndarray, gt: np.ndarray, patterns) -> MetricsReport:
    """Per-pattern and aggregate metrics; non-finite rollouts are counted as failures."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    patterns = np.asarray(patterns, dtype=np.intp)
    ok = np.all(np.isfinite(pred), axis=(1, 2))
    with np.errstate(invalid="ignore", over="ignore"):
        dist, head = step_errors(np.where(ok[:, None, None], pred, 0.0), gt)
    rows = {}
    for p in Pattern:
        m = patterns == p
        rows[p.label] = _row(dist[m & ok], head[m & ok], int(np.sum(m & ~ok)))
    rows[AGGREGATE] = _row(dist[ok], head[ok], int(np.sum(~ok)))
    h = pred.shape[1]
    if ok.any():
        series = np.stack([dist[ok].mean(axis=0), np.degrees(head[ok].mean(axis=0))], axis=1)
    else:
        series = np.full((h, 2), np.nan)
    return MetricsReport(model, h, rows, series)


def model_name(model) -> str:
    if isinstance(model, Checkpoint):
        return model.extra.get("name", "deep-koopman")
    return model.name


def predict(model, ds: Dataset, traj_idx, anchor_idx, h_e: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Global-frame predictions and ground truth (N, H, 6) plus patterns for the given windows."""
    batch = ds.batch(traj_idx, anchor_idx, h_e)
    hist = batch.lift_histories[batch.lift_index[:, 0]]
    if isinstance(model, Checkpoint):
        local = predict_windows(model, hist, batch.controls, batch.patterns)
    elif isinstance(model, LiftedLinearModel):
        local = model.predict(hist[:, -1, :], batch.controls)
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    pred = uncenter(local, batch.anchor_pose[:, None, :])
    gt = uncenter(batch.states[:, 1:], batch.anchor_pose[:, None, :])
    return pred, gt, batch.patterns


def evaluate_model(model, ds: Dataset, split: str = "val", h_e: int | None = None,
                   name: str | None = None) -> MetricsReport:
    """Roll every non-overlapping window of ``split`` out for ``h_e`` steps and score it."""
    h_e = h_e or ds.h_e
    if h_e < 1:
        raise ValueError("horizon must be at least 1")
    ks, ts = ds.eval_windows(split, h_e)
    if len(ks) == 0:
        raise ValueError(f"split {split!r} has no windows of horizon {h_e}")
    pred, gt, patterns = predict(model, ds, ks, ts, h_e)
    return report_from_predictions(name or model_name(model), pred, gt, patterns)


def emit_report(reports: list[MetricsReport], out_dir: str | Path) -> list[Path]:
    """Write ``report.csv`` plus one ``series_<model>.csv`` per report."""
    if not reports:
        raise ValueError("no reports to write")
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(REPORT_HEADER)
            for r in reports:
                for pattern, row in r.rows.items():
                    w.writerow([r.model, pattern, row.windows, repr(row.MDE), repr(row.FDE),
                                repr(row.MAE), repr(row.FAE), row.failures])
        written.append(path)
        for r in reports:
            path = out / f"series_{r.model}.csv"
            with open(path, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(SERIES_HEADER)
                for i, (d, h) in enumerate(r.series, start=1):
                    w.writerow([i, repr(float(d)), repr(float(h))])
            written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or out}: {exc.strerror}") from None
    return written


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
