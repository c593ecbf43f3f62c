"""Simulated dataset: generation, windowing, frame re-centering, normalisation, persistence."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .plant import (N_CONTROL, N_STATE, ExcitationConfig, Pattern, PlantParams, Trajectory,
                    generate_excitation, simulate_batch)

log = logging.getLogger(__name__)

CSV_HEADER = ["t", "px", "py", "az", "vx", "vy", "wz",
              "Tfl", "Tfr", "Tml", "Tmr", "Trl", "Trr",
              "dfl", "dfr", "dml", "dmr", "drl", "drr"]
MANIFEST = "manifest.json"
FORMAT_VERSION = 1

# Share of training windows per pattern (c1..c5); COR and LAM are deliberately rare.
DEFAULT_PATTERN_SHARE = (0.43, 0.026, 0.256, 0.032, 0.256)


class DatasetError(RuntimeError):
    """A persisted dataset is missing, malformed or fails its checksum."""


@dataclass
class NormalizationSpec:
    """Per-channel affine map of controls onto [0, 1]."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.float64)
        self.high = np.asarray(self.high, dtype=np.float64)
        if self.low.shape != (N_CONTROL,) or self.high.shape != (N_CONTROL,):
            raise ValueError("normalization bounds must cover all 12 control channels")
        if np.any(self.high <= self.low):
            bad = np.flatnonzero(self.high <= self.low).tolist()
            raise ValueError(f"degenerate normalization channels {bad} (max <= min)")

    @classmethod
    def from_excitation(cls, cfg: ExcitationConfig) -> "NormalizationSpec":
        # Symmetric bounds keep zero torque / straight steer at the 0.5 midpoint.
        low = np.r_[np.full(6, -cfg.torque_max), np.full(6, -math.pi)]
        high = np.r_[np.full(6, cfg.torque_max), np.full(6, math.pi)]
        return cls(low, high)

    def normalize(self, u: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(u) - self.low) / (self.high - self.low), 0.0, 1.0)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return self.low + np.asarray(x) * (self.high - self.low)

    def to_dict(self) -> dict:
        return {"min": self.low.tolist(), "max": self.high.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(d["min"], d["max"])


@dataclass
class Window:
    history: np.ndarray  # (H_p+1, 6), local frame, last row is the anchor state
    controls: np.ndarray  # (H_e, 12), raw units
    targets: np.ndarray  # (H_e, 6), local frame
    pattern: Pattern
    anchor_pose: np.ndarray  # (2,) global px, py of the anchor state


def recenter(history: np.ndarray, targets: np.ndarray):
    """Shift positions so the last history state sits at the origin.

    Returns ``(history_local, targets_local, anchor_pose)``; heading and velocities
    are left untouched.
    """
    history = np.array(history, dtype=np.float64)
    targets = np.array(targets, dtype=np.float64)
    anchor = history[-1, :2].copy()
    history[..., :2] -= anchor
    targets[..., :2] -= anchor
    return history, targets, anchor


def uncenter(states: np.ndarray, anchor_pose: np.ndarray) -> np.ndarray:
    out = np.array(states, dtype=np.float64)
    out[..., :2] += anchor_pose
    return out


def window(traj: Trajectory, h_p: int, h_e: int, stride: int = 1) -> list[Window]:
    """Cut a trajectory into re-centred windows anchored at h_p, h_p+stride, ..."""
    n = len(traj.states)
    out = []
    for t in range(h_p, n - h_e, stride):
        hist, targ, anchor = recenter(traj.states[t - h_p:t + 1], traj.states[t + 1:t + h_e + 1])
        out.append(Window(hist, traj.controls[t:t + h_e].copy(), targ, traj.pattern, anchor))
    return out


def anchors(n_states: int, h_p: int, h_e: int, stride: int) -> np.ndarray:
    return np.arange(h_p, n_states - h_e, stride)


# ---------------------------------------------------------------------------
# batches for training and evaluation


@dataclass
class Batch:
    """Everything a model needs for a set of windows, with shared states lifted once.

    ``lift_histories`` holds every distinct state the batch touches together with
    its own history, each re-centred on itself; ``lift_index[b, i]`` points at the
    entry for state ``anchor_b + i``.
    """

    lift_histories: np.ndarray  # (U, H_p+1, 6)
    lift_index: np.ndarray  # (B, H_e+1)
    states: np.ndarray  # (B, H_e+1, 6) anchor frame, row 0 = anchor state
    controls: np.ndarray  # (B, H_e, 12) normalised
    raw_controls: np.ndarray  # (B, H_e, 12)
    patterns: np.ndarray  # (B,)
    anchor_pose: np.ndarray  # (B, 2)

    def __len__(self) -> int:
        return len(self.patterns)

    @property
    def horizon(self) -> int:
        return self.controls.shape[1]


def make_batch(trajs: list[Trajectory], traj_idx, anchor_idx, h_p: int, h_e: int,
               norm: NormalizationSpec) -> Batch:
    traj_idx = np.asarray(traj_idx, dtype=np.intp)
    anchor_idx = np.asarray(anchor_idx, dtype=np.intp)
    steps = np.arange(h_e + 1)
    keys: dict[tuple[int, int], int] = {}
    hists = []
    lift_index = np.empty((len(traj_idx), h_e + 1), dtype=np.intp)
    states = np.empty((len(traj_idx), h_e + 1, N_STATE))
    raw = np.empty((len(traj_idx), h_e, N_CONTROL))
    patterns = np.empty(len(traj_idx), dtype=np.intp)
    for b, (k, a) in enumerate(zip(traj_idx, anchor_idx)):
        tr = trajs[k]
        if a < h_p or a + h_e >= len(tr.states):
            raise IndexError(f"anchor {a} out of range for trajectory {k}")
        seg = tr.states[a:a + h_e + 1]
        states[b] = seg
        states[b, :, :2] -= seg[0, :2]
        raw[b] = tr.controls[a:a + h_e]
        patterns[b] = int(tr.pattern)
        for i in steps:
            key = (int(k), int(a + i))
            j = keys.get(key)
            if j is None:
                j = len(hists)
                keys[key] = j
                hists.append(tr.states[a + i - h_p:a + i + 1])
            lift_index[b, i] = j
    hist = np.array(hists, dtype=np.float64)
    hist[..., :2] -= hist[:, -1:, :2]
    anchor_pose = np.stack([trajs[k].states[a, :2] for k, a in zip(traj_idx, anchor_idx)])
    return Batch(hist, lift_index, states, norm.normalize(raw), raw, patterns, anchor_pose)


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class DatasetConfig:
    n_train_windows: int = 20000
    windows_per_traj: int = 200
    val_fraction: float = 0.1
    h_p: int = 0
    h_e: int = 100
    dt: float = 0.01
    pattern_share: tuple = DEFAULT_PATTERN_SHARE
    seed: int = 0

    def __post_init__(self):
        if len(self.pattern_share) != 5 or any(s < 0 for s in self.pattern_share):
            raise ValueError("pattern_share needs five nonnegative entries")
        if self.n_train_windows < 1 or self.windows_per_traj < 1 or self.h_e < 1 or self.h_p < 0:
            raise ValueError("window counts and horizons must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class Dataset:
    dt: float
    h_p: int
    h_e: int
    plant: PlantParams
    excitation: ExcitationConfig
    normalization: NormalizationSpec
    seed: int
    trajectories: list[Trajectory]
    names: list[str]
    splits: dict[str, list[int]]
    train_ranges: dict[int, tuple[int, int]] = field(default_factory=dict)

    def train_windows(self) -> tuple[np.ndarray, np.ndarray]:
        """(trajectory index, anchor) of every training window, stride 1."""
        ks, ts = [], []
        for k in self.splits["train"]:
            lo, hi = self.train_ranges.get(k, (self.h_p, len(self.trajectories[k].states) - self.h_e))
            ks.append(np.full(hi - lo, k))
            ts.append(np.arange(lo, hi))
        if not ks:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        return np.concatenate(ks).astype(np.intp), np.concatenate(ts).astype(np.intp)

    def eval_windows(self, split: str = "val", h_e: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Non-overlapping windows (stride = horizon) over whole trajectories of ``split``."""
        h_e = h_e or self.h_e
        ks, ts = [], []
        for k in self.splits[split]:
            a = anchors(len(self.trajectories[k].states), self.h_p, h_e, h_e)
            ks.append(np.full(len(a), k))
            ts.append(a)
        if not ks:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        return np.concatenate(ks).astype(np.intp), np.concatenate(ts).astype(np.intp)

    def pattern_counts(self) -> np.ndarray:
        """Training window count per pattern (V_1..V_5)."""
        ks, _ = self.train_windows()
        pats = np.array([int(self.trajectories[k].pattern) for k in ks], dtype=np.intp)
        return np.bincount(pats, minlength=5)

    def batch(self, traj_idx, anchor_idx, h_e: int | None = None) -> Batch:
        return make_batch(self.trajectories, traj_idx, anchor_idx, self.h_p, h_e or self.h_e,
                          self.normalization)

    def windows(self, split: str = "val", stride: int | None = None) -> list[Window]:
        out = []
        for k in self.splits[split]:
            out.extend(window(self.trajectories[k], self.h_p, self.h_e, stride or self.h_e))
        return out

    def one_step_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(s_t, u_t, s_{t+1}) at every training anchor, positions relative to s_t.

        Controls are normalised exactly as the deep model sees them.
        """
        ks, ts = self.train_windows()
        if len(ks) == 0:
            z = np.zeros((0, N_STATE))
            return z, np.zeros((0, N_CONTROL)), z
        s = np.stack([self.trajectories[k].states[t] for k, t in zip(ks, ts)])
        s_next = np.stack([self.trajectories[k].states[t + 1] for k, t in zip(ks, ts)])
        u = np.stack([self.trajectories[k].controls[t] for k, t in zip(ks, ts)])
        s_next[:, :2] -= s[:, :2]
        s = s.copy()
        s[:, :2] = 0.0
        return s, self.normalization.normalize(u), s_next

    def subset(self, n_windows: int, rng: np.random.Generator) -> "Dataset":
        """Copy with training ranges shortened so at most ``n_windows`` training windows remain."""
        ks, _ = self.train_windows()
        total = len(ks)
        if n_windows >= total:
            return self
        keep = n_windows / total
        ranges = {}
        left = n_windows
        train = list(self.splits["train"])
        for j, k in enumerate(train):
            lo, hi = self.train_ranges.get(k, (self.h_p, len(self.trajectories[k].states) - self.h_e))
            m = min(hi - lo, left) if j == len(train) - 1 else min(hi - lo, left, max(1, int(round((hi - lo) * keep))))
            if m <= 0:
                continue
            start = int(rng.integers(lo, hi - m + 1))
            ranges[k] = (start, start + m)
            left -= m
        splits = dict(self.splits)
        splits["train"] = [k for k in train if k in ranges]
        return Dataset(self.dt, self.h_p, self.h_e, self.plant, self.excitation, self.normalization,
                       self.seed, self.trajectories, self.names, splits, ranges)

    # ------------------------------------------------------------------
    # persistence

    def manifest(self, checksums: dict[str, str] | None = None) -> dict:
        counts = self.pattern_counts()
        return {
            "format": FORMAT_VERSION,
            "dt": self.dt,
            "plant": self.plant.to_dict(),
            "excitation": self.excitation.to_dict(),
            "patterns": {p.name: int(counts[p]) for p in Pattern},
            "normalization": self.normalization.to_dict(),
            "splits": {s: [self.names[k] for k in ks] for s, ks in self.splits.items()},
            "seed": self.seed,
            "h_p": self.h_p,
            "h_e": self.h_e,
            "trajectories": {
                self.names[k]: {"pattern": self.trajectories[k].pattern.name,
                                "train_range": list(self.train_ranges[k]) if k in self.train_ranges else None,
                                "sha256": (checksums or {}).get(self.names[k])}
                for k in range(len(self.trajectories))
            },
        }

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checksums = {}
        for name, tr in zip(self.names, self.trajectories):
            path = out / f"{name}.csv"
            write_trajectory_csv(path, tr)
            checksums[name] = _sha256(path)
        (out / MANIFEST).write_text(json.dumps(self.manifest(checksums), indent=2), encoding="utf-8")
        return out

    @classmethod
    def load(cls, in_dir: str | Path) -> "Dataset":
        root = Path(in_dir)
        mpath = root / MANIFEST
        if not mpath.is_file():
            raise DatasetError(f"missing manifest: {mpath}")
        try:
            m = json.loads(mpath.read_text(encoding="utf-8"))
            names = list(m["trajectories"])
            dt = float(m["dt"])
            plant = PlantParams.from_dict(m["plant"])
            exc = m["excitation"]
            exc["torque_offset"] = tuple(exc["torque_offset"])
            excitation = ExcitationConfig(**exc)
            norm = NormalizationSpec.from_dict(m["normalization"])
        except (KeyError, TypeError, ValueError) as exc_:
            raise DatasetError(f"malformed manifest {mpath}: {exc_}") from None
        trajs, ranges = [], {}
        for k, name in enumerate(names):
            info = m["trajectories"][name]
            path = root / f"{name}.csv"
            if not path.is_file():
                raise DatasetError(f"missing trajectory file: {path}")
            if info.get("sha256") and _sha256(path) != info["sha256"]:
                raise DatasetError(f"checksum mismatch: {path}")
            trajs.append(read_trajectory_csv(path, Pattern[info["pattern"]], dt))
            if info.get("train_range") is not None:
                ranges[k] = tuple(info["train_range"])
        index = {n: k for k, n in enumerate(names)}
        splits = {s: [index[n] for n in ns] for s, ns in m["splits"].items()}
        ds = cls(dt, int(m["h_p"]), int(m["h_e"]), plant, excitation, norm, int(m["seed"]),
                 trajs, names, splits, ranges)
        counts = ds.pattern_counts()
        if any(int(m["patterns"][p.name]) != int(counts[p]) for p in Pattern):
            raise DatasetError(f"pattern counts in {mpath} do not match stored windows")
        return ds


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_trajectory_csv(path: str | Path, traj: Trajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        n = len(traj.states)
        for i in range(n):
            row = [repr(float(i * traj.dt))] + [repr(float(x)) for x in traj.states[i]]
            if i < n - 1:
                row += [repr(float(x)) for x in traj.controls[i]]
            else:
                row += [""] * N_CONTROL
            w.writerow(row)


def read_trajectory_csv(path: str | Path, pattern: Pattern, dt: float) -> Trajectory:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise DatasetError(f"bad header in {path}")
    body = rows[1:]
    try:
        states = np.array([[float(x) for x in r[1:7]] for r in body])
        controls = np.array([[float(x) for x in r[7:19]] for r in body[:-1]]).reshape(-1, N_CONTROL)
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"malformed row in {path}: {exc}") from None
    return Trajectory(dt=dt, pattern=pattern, states=states, controls=controls)


# ---------------------------------------------------------------------------
# generation


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, run_index])


def simulate_runs(patterns: list[Pattern], plant: PlantParams, excitation: ExcitationConfig,
                  dt: float, seed: int, first_index: int = 0, threads: int = 1,
                  chunk: int = 32) -> list[Trajectory]:
    """Simulate one run per entry of ``patterns``, starting at rest at the origin.

    Run ``i`` draws its excitation from the stream ``(seed, first_index + i)``;
    runs that diverge are redrawn from a fresh stream.
    """
    n_steps = int(round(excitation.duration / dt))
    out: list[Trajectory | None] = [None] * len(patterns)
    stream = {i: first_index + i for i in range(len(patterns))}
    spare = first_index + 1_000_000
    todo = list(range(len(patterns)))
    while todo:
        controls = np.stack([generate_excitation(patterns[i], excitation, run_rng(seed, stream[i]), dt,
                                                 n_steps, plant) for i in todo])
        groups = [todo[j:j + chunk] for j in range(0, len(todo), chunk)]

        def work(group):
            rows = [todo.index(i) for i in group]
            return simulate_batch(np.zeros((len(group), N_STATE)), controls[rows], plant, dt)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(work, groups))
        else:
            results = [work(g) for g in groups]
        retry = []
        for group, (states, valid) in zip(groups, results):
            for row, i in enumerate(group):
                if valid[row]:
                    out[i] = Trajectory(dt, patterns[i], states[row], controls[todo.index(i)])
                else:
                    log.warning("run %d diverged; redrawing", stream[i])
                    stream[i] = spare
                    spare += 1
                    retry.append(i)
        todo = retry
    return out  # type: ignore[return-value]


def _split_counts(total: int, shares) -> list[int]:
    shares = np.asarray(shares, dtype=np.float64)
    raw = total * shares / shares.sum()
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts))[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def build_dataset(cfg: DatasetConfig, plant: PlantParams | None = None,
                  excitation: ExcitationConfig | None = None, threads: int = 1) -> Dataset:
    """Simulate, split by trajectory and select contiguous training windows."""
    plant = plant or PlantParams()
    excitation = excitation or ExcitationConfig()
    n_states = int(round(excitation.duration / cfg.dt)) + 1
    per_traj = min(cfg.windows_per_traj, n_states - cfg.h_e - cfg.h_p)
    if per_traj < 1:
        raise ValueError("runs too short for a single window")
    window_counts = _split_counts(cfg.n_train_windows, cfg.pattern_share)
    patterns, roles = [], []
    for pat, nw in zip(Pattern, window_counts):
        if nw == 0:
            continue
        n_train = math.ceil(nw / per_traj)
        n_val = max(1, round(n_train * cfg.val_fraction / (1 - cfg.val_fraction)))
        patterns += [pat] * (n_train + n_val)
        roles += [("train", nw)] * n_train + [("val", 0)] * n_val
    trajs = simulate_runs(patterns, plant, excitation, cfg.dt, cfg.seed, threads=threads)

    rng = np.random.default_rng([cfg.seed, 7])
    splits = {"train": [], "val": []}
    ranges: dict[int, tuple[int, int]] = {}
    left = dict(zip(Pattern, window_counts))
    for k, (tr, (role, _)) in enumerate(zip(trajs, roles)):
        splits[role].append(k)
        if role == "train":
            m = min(per_traj, left[tr.pattern])
            lo, hi = cfg.h_p, n_states - cfg.h_e
            start = int(rng.integers(lo, hi - m + 1))
            ranges[k] = (start, start + m)
            left[tr.pattern] -= m
    names = [f"{tr.pattern.label}_{tr.pattern.name.lower()}_{k:04d}" for k, tr in enumerate(trajs)]
    return Dataset(cfg.dt, cfg.h_p, cfg.h_e, plant, excitation,
                   NormalizationSpec.from_excitation(excitation), cfg.seed, trajs, names, splits, ranges)


def build_eval_dataset(runs_per_pattern, seed: int, plant: PlantParams | None = None,
                       excitation: ExcitationConfig | None = None, dt: float = 0.01, h_p: int = 0,
                       h_e: int = 100, threads: int = 1) -> Dataset:
    """Independent held-out runs, all placed in the ``test`` split.

    ``runs_per_pattern`` is an int (same for every pattern) or five counts.
    """
    plant = plant or PlantParams()
    excitation = excitation or ExcitationConfig()
    counts = [runs_per_pattern] * len(Pattern) if np.isscalar(runs_per_pattern) else list(runs_per_pattern)
    if len(counts) != len(Pattern):
        raise ValueError("need one run count per pattern")
    patterns = [p for p, n in zip(Pattern, counts) for _ in range(int(n))]
    trajs = simulate_runs(patterns, plant, excitation, dt, seed, threads=threads)
    names = [f"{tr.pattern.label}_{tr.pattern.name.lower()}_{k:04d}" for k, tr in enumerate(trajs)]
    return Dataset(dt, h_p, h_e, plant, excitation, NormalizationSpec.from_excitation(excitation), seed,
                   trajs, names, {"train": [], "test": list(range(len(trajs)))}, {})
