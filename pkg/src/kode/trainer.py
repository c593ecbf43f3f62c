"""Optimisation loop, checkpoint files and frozen-encoder adaptation."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoder as enc
from . import koopman as kp
from . import losses as L
from .dataset import Batch, Dataset, NormalizationSpec
from .diffcore import Graph, ParamStore
from .plant import N_CONTROL, N_STATE

log = logging.getLogger(__name__)

MAGIC = b"KODE1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch: int = 128
    lr0: float = 1e-3
    weight_decay: float = 1e-5
    lr_decay: float = 0.9
    decay_every: int = 10
    h_single: int = 1
    h_multi: int = 100
    seed: int = 0
    clip_norm: float = 5.0
    # Consecutive training windows drawn together; shared states are lifted once.
    block: int = 16
    n_ops: int = kp.N_PATTERNS
    # "global": normalise L_g by the training set's per-axis max reference
    # discrepancy; "window": by each window's own max.
    geometry_scale: str = "global"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    losses: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        for name in ("epochs", "batch", "h_single", "h_multi", "block", "decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not (self.lr0 > 0 and self.weight_decay >= 0 and self.clip_norm > 0):
            raise ValueError("lr0 and clip_norm must be positive, weight_decay nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.n_ops not in (1, kp.N_PATTERNS):
            raise ValueError(f"n_ops must be 1 or {kp.N_PATTERNS}")
        if self.geometry_scale not in ("global", "window"):
            raise ValueError("geometry_scale must be 'global' or 'window'")

    def lr_at(self, epoch: int) -> float:
        return lr_at(epoch, self.lr0, self.lr_decay, self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["losses"] = self.losses.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "losses" in d:
            d["losses"] = L.LossWeights(**d["losses"])
        return cls(**d)


def lr_at(epoch: int, lr0: float = 1e-3, decay: float = 0.9, every: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return lr0 * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with decoupled weight decay over a named subset of a ParamStore.

    Names in ``sparse_names`` hold a stack of independent members along the
    first axis (the operator bank). A member whose gradient is all zero was
    not used by the batch; it keeps its parameters and moments and has its
    own step count for bias correction.
    """

    def __init__(self, names, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 decay_names=(), sparse_names=()):
        self.names = list(names)
        self.decay = set(decay_names)
        self.sparse = set(sparse_names)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0

    def step(self, store: ParamStore, lr: float, weight_decay: float = 0.0) -> bool:
        grads = [store.grads[n] for n in self.names]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in zip(self.names, grads):
            p = store.values[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.steps[name] = np.zeros(p.shape[0] if name in self.sparse else 1, dtype=np.int64)
            if name in self.sparse:
                rows = np.flatnonzero(np.any(g.reshape(len(g), -1) != 0.0, axis=1))
                for r in rows:
                    self._update(name, r, p, g, lr, weight_decay)
            else:
                self._update(name, slice(None), p, g, lr, weight_decay)
        return True

    def _update(self, name, idx, p, g, lr, weight_decay):
        b1, b2 = self.beta1, self.beta2
        count = self.steps[name]
        k = 0 if isinstance(idx, slice) else idx
        count[k] += 1
        t = int(count[k])
        m, v = self.m[name], self.v[name]
        m[idx] = b1 * m[idx] + (1.0 - b1) * g[idx]
        v[idx] = b2 * v[idx] + (1.0 - b2) * g[idx] * g[idx]
        if weight_decay and name in self.decay:
            p[idx] -= lr * weight_decay * p[idx]
        p[idx] -= lr * (m[idx] / (1.0 - b1 ** t)) / (np.sqrt(v[idx] / (1.0 - b2 ** t)) + self.eps)


def clip_gradients(store: ParamStore, names, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(store.grads[n] ** 2)) for n in names))
    if total > max_norm and np.isfinite(total):
        scale = max_norm / total
        for n in names:
            store.grads[n] *= scale
    return total


def decayed_names(store: ParamStore) -> list[str]:
    """Dense encoder weights only; embeddings, norms, biases and the bank are exempt."""
    return [n for n in store.names(enc.PREFIX) if n.endswith(".w")]


# ---------------------------------------------------------------------------
# model container and checkpoints


@dataclass
class Checkpoint:
    store: ParamStore
    encoder: enc.EncoderConfig
    normalization: NormalizationSpec
    pattern_counts: np.ndarray
    dt: float
    train: TrainConfig = field(default_factory=TrainConfig)
    epoch: int = 0
    history: list = field(default_factory=list)
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_ops(self) -> int:
        return kp.bank_size(self.store)

    def copy(self) -> "Checkpoint":
        return replace(self, store=self.store.copy(), pattern_counts=self.pattern_counts.copy(),
                       history=[dict(h) for h in self.history], extra=dict(self.extra))

    def encoder_arrays(self) -> dict[str, np.ndarray]:
        return {n: self.store.values[n] for n in self.store.names(enc.PREFIX)}


def new_checkpoint(enc_cfg: enc.EncoderConfig, ds: Dataset, cfg: TrainConfig) -> Checkpoint:
    store = ParamStore()
    enc.init_encoder(store, enc_cfg, np.random.default_rng([cfg.seed, 1]))
    kp.init_bank(store, enc_cfg.d, cfg.n_ops)
    return Checkpoint(store, enc_cfg, ds.normalization, ds.pattern_counts(), ds.dt, cfg)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    arrays = []
    offset = 0
    names = list(ckpt.store.names())
    for n in names:
        v = ckpt.store.values[n]
        arrays.append({"name": n, "shape": list(v.shape), "dtype": "f32", "offset": offset})
        offset += v.size * 4
    header = {
        "arrays": arrays,
        "config": {"encoder": ckpt.encoder.to_dict(), "train": ckpt.train.to_dict(), "dt": ckpt.dt},
        "normalization": ckpt.normalization.to_dict(),
        "pattern_counts": [int(c) for c in ckpt.pattern_counts],
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "extra": ckpt.extra,
    }
    blob = json.dumps(header).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.store.values[n], dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    if data[:5] != MAGIC or len(data) < 9:
        raise CheckpointError(f"{path}: not a KODE1 checkpoint")
    (n,) = struct.unpack("<I", data[5:9])
    try:
        header = json.loads(data[9:9 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(data)[9 + n:]
    store = ParamStore()
    for a in header["arrays"]:
        if a["dtype"] != "f32":
            raise CheckpointError(f"{path}: unsupported dtype {a['dtype']!r} for {a['name']}")
        count = int(np.prod(a["shape"], dtype=np.int64))
        end = a["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {a['name']}")
        arr = np.frombuffer(payload[a["offset"]:end], dtype="<f4").astype(np.float64)
        store.add(a["name"], arr.reshape(a["shape"]))
    cfg = header["config"]
    return Checkpoint(
        store=store,
        encoder=enc.EncoderConfig.from_dict(cfg["encoder"]),
        normalization=NormalizationSpec.from_dict(header["normalization"]),
        pattern_counts=np.asarray(header["pattern_counts"], dtype=np.int64),
        dt=cfg["dt"],
        train=TrainConfig.from_dict(cfg["train"]),
        epoch=header["epoch"],
        history=header["history"],
        rng_state=header["rng_state"],
        extra=header.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# forward passes


def forward(store: ParamStore, enc_cfg: enc.EncoderConfig, batch: Batch, graph: Graph | None,
            frozen_encoder: bool = False):
    """Teacher-forced embeddings, rollout embeddings and target embeddings for a batch."""
    n, h1 = batch.lift_index.shape
    feats = enc.lift_features(store, enc_cfg, batch.lift_histories, None if frozen_encoder else graph)
    gathered = dc.reshape(dc.take(feats, batch.lift_index.reshape(-1), axis=0), (n, h1, enc_cfg.n_features))
    target_z = dc.concat([batch.states, gathered], axis=-1)
    a, b = kp.bank_tensors(store, graph)
    idx = kp.operator_index(batch.patterns, a.shape[0])
    a_b, b_b = dc.take(a, idx, axis=0), dc.take(b, idx, axis=0)
    ss_z = kp.evolve(target_z[:, :-1, :], batch.controls, a_b, b_b)
    ro_z = kp.rollout(target_z[:, 0, :], batch.controls, a_b, b_b)
    return ss_z, ro_z, target_z


def batch_loss(ckpt: Checkpoint, batch: Batch, graph: Graph | None, weights: L.LossWeights,
               counts=None, reg_weight: float = 0.0, frozen_encoder: bool = False):
    ss_z, ro_z, target_z = forward(ckpt.store, ckpt.encoder, batch, graph, frozen_encoder)
    kappa = L.pattern_weights(ckpt.pattern_counts if counts is None else counts, batch.patterns)
    scale = ckpt.extra.get("geometry_scale")
    loss = L.total_loss(ss_z, ro_z, target_z, batch.states, kappa, ckpt.dt, weights, scale)
    if reg_weight:
        a, b = kp.bank_tensors(ckpt.store, graph)
        loss = loss + L.operator_reg(a, b) * reg_weight
    return loss


def predict_windows(ckpt: Checkpoint, histories: np.ndarray, controls: np.ndarray,
                    patterns: np.ndarray) -> np.ndarray:
    """Local-frame rollouts (N, H, 6) from re-centred histories and normalised controls."""
    z0 = enc.lift_numpy(ckpt.store, ckpt.encoder, histories)
    a = ckpt.store.values[kp.PREFIX + "A"]
    b = ckpt.store.values[kp.PREFIX + "B"]
    idx = kp.operator_index(patterns, a.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        return kp.decode(kp.rollout(z0, controls, a[idx], b[idx]).value)


def validation_metrics(ckpt: Checkpoint, ds: Dataset, split: str = "val", h_e: int | None = None) -> dict:
    ks, ts = ds.eval_windows(split, h_e)
    if len(ks) == 0:
        return {"MDE": float("nan"), "MAE": float("nan")}
    batch = ds.batch(ks, ts, h_e)
    pred = predict_windows(ckpt, batch.lift_histories[batch.lift_index[:, 0]], batch.controls, batch.patterns)
    gt = batch.states[:, 1:]
    dist = np.linalg.norm(pred[..., :2] - gt[..., :2], axis=-1)
    dh = np.abs(np.angle(np.exp(1j * (pred[..., 2] - gt[..., 2]))))
    ok = np.all(np.isfinite(pred), axis=(1, 2))
    if not ok.any():
        return {"MDE": float("inf"), "MAE": float("inf")}
    return {"MDE": float(dist[ok].mean()), "MAE": float(np.degrees(dh[ok].mean()))}


# ---------------------------------------------------------------------------
# training


def batch_order(n_windows: int, batch: int, block: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches assembled from runs of ``block`` consecutive windows."""
    starts = np.arange(0, n_windows, block)
    rng.shuffle(starts)
    order = np.concatenate([np.arange(s, min(s + block, n_windows)) for s in starts]) if n_windows else starts
    return [order[i:i + batch] for i in range(0, n_windows, batch)]


def training_geometry_scale(ds: Dataset, h_e: int) -> list[float]:
    """Per-axis max reference discrepancy over every interval a training window covers."""
    out = np.zeros(3)
    ks, ts = ds.train_windows()
    for k in np.unique(ks):
        t = ts[ks == k]
        seg = ds.trajectories[k].states[t.min():t.max() + h_e + 1]
        out = np.maximum(out, L.geometry_scale(seg, ds.dt))
    return out.tolist()


@dataclass
class TrainResult:
    last: Checkpoint
    best: Checkpoint
    history: list


def _run(ckpt: Checkpoint, ds: Dataset, cfg: TrainConfig, names: list[str], decay: list[str],
         counts: np.ndarray, reg_weight: float, out_dir: Path | None, tag: str,
         score_start: bool = False) -> TrainResult:
    if ds.h_e < cfg.h_multi:
        raise ValueError(f"dataset horizon {ds.h_e} is shorter than h_multi={cfg.h_multi}")
    rng = np.random.default_rng([cfg.seed, 2])
    bank = [n for n in names if n.startswith(kp.PREFIX)]
    opt = Adam(names, cfg.beta1, cfg.beta2, cfg.adam_eps, decay, sparse_names=bank)
    frozen = not any(n.startswith(enc.PREFIX) for n in names)
    if cfg.geometry_scale == "global":
        ckpt.extra["geometry_scale"] = training_geometry_scale(ds, cfg.h_multi)
    else:
        ckpt.extra.pop("geometry_scale", None)
    ks, ts = ds.train_windows()
    if len(ks) == 0:
        raise TrainingError("dataset has no training windows")
    best = ckpt.copy()
    best_mde = float("inf")
    history = list(ckpt.history)
    if score_start:
        # The starting point competes for "best", so adaptation can never make the pick worse.
        val = validation_metrics(ckpt, ds, "val", cfg.h_multi)
        history.append({"epoch": 0, "lr": 0.0, "train_loss": float("nan"), "val_MDE": val["MDE"],
                        "val_MAE": val["MAE"], "skipped": 0, "seconds": 0.0})
        best_mde = val["MDE"]
        log.info("%s epoch 0 val MDE %.4f MAE %.3f", tag, val["MDE"], val["MAE"])
        best.history = list(history)
        if out_dir is not None:
            save_checkpoint(best, out_dir / "best.kode")
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        t0 = time.perf_counter()
        total = 0.0
        batches = batch_order(len(ks), cfg.batch, cfg.block, rng)
        for bi, sel in enumerate(batches):
            batch = ds.batch(ks[sel], ts[sel], cfg.h_multi)
            ckpt.store.zero_grad()
            graph = Graph()
            loss = batch_loss(ckpt, batch, graph, cfg.losses, counts, reg_weight, frozen)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {bi}")
            graph.backward(loss)
            clip_gradients(ckpt.store, names, cfg.clip_norm)
            opt.step(ckpt.store, lr, cfg.weight_decay)
            total += value
        ckpt.epoch = epoch + 1
        val = validation_metrics(ckpt, ds, "val", cfg.h_multi)
        rec = {"epoch": epoch + 1, "lr": lr, "train_loss": total / len(batches),
               "val_MDE": val["MDE"], "val_MAE": val["MAE"], "skipped": opt.skipped,
               "seconds": round(time.perf_counter() - t0, 3)}
        history.append(rec)
        ckpt.history = list(history)
        log.info("%s epoch %d loss %.5f val MDE %.4f MAE %.3f", tag, epoch + 1, rec["train_loss"],
                 val["MDE"], val["MAE"])
        if val["MDE"] < best_mde:
            best_mde = val["MDE"]
            best = ckpt.copy()
            if out_dir is not None:
                save_checkpoint(best, out_dir / "best.kode")
    ckpt.rng_state = rng.bit_generator.state
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "last.kode")
    return TrainResult(ckpt, best, history)


def train(ds: Dataset, cfg: TrainConfig = TrainConfig(), enc_cfg: enc.EncoderConfig | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Pretrain encoder and operator bank from scratch."""
    enc_cfg = enc_cfg or enc.EncoderConfig(h_p=ds.h_p)
    if enc_cfg.h_p != ds.h_p:
        raise ValueError(f"encoder history {enc_cfg.h_p} does not match dataset history {ds.h_p}")
    ckpt = new_checkpoint(enc_cfg, ds, cfg)
    names = list(ckpt.store.names())
    out = Path(out_dir) if out_dir is not None else None
    return _run(ckpt, ds, cfg, names, decayed_names(ckpt.store), ckpt.pattern_counts, 0.0, out, "train")


def adapt_s2r(pretrained: Checkpoint, ds: Dataset, cfg: TrainConfig | None = None,
              out_dir: str | Path | None = None, freeze_encoder: bool = True) -> TrainResult:
    """Re-fit the operator bank on new-plant data with the encoder frozen."""
    cfg = cfg or pretrained.train
    a = pretrained.store.values[kp.PREFIX + "A"]
    b = pretrained.store.values[kp.PREFIX + "B"]
    if a.shape[1] != pretrained.encoder.d or b.shape[2] != N_CONTROL or pretrained.encoder.d <= N_STATE:
        raise ValueError("pretrained checkpoint dimensions are inconsistent")
    if pretrained.encoder.h_p != ds.h_p:
        raise ValueError(f"checkpoint history {pretrained.encoder.h_p} does not match dataset history {ds.h_p}")
    ckpt = pretrained.copy()
    ckpt.train = cfg
    ckpt.normalization = ds.normalization
    ckpt.pattern_counts = ds.pattern_counts()
    ckpt.history = []
    ckpt.epoch = 0
    if freeze_encoder:
        names = ckpt.store.names(kp.PREFIX)
        decay: list[str] = []
    else:
        names = list(ckpt.store.names())
        decay = decayed_names(ckpt.store)
    out = Path(out_dir) if out_dir is not None else None
    return _run(ckpt, ds, cfg, names, decay, ckpt.pattern_counts, cfg.losses.reg_weight, out, "adapt",
                score_start=True)
