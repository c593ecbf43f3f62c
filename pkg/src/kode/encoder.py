"""Dual-branch lifting encoder.

A state history is mapped to an embedding ``z = [s_t ; z_feat]``. The first six
entries are the current (local-frame) state copied verbatim, which is what lets
a constant selection matrix act as the decoder. ``z_feat`` is a learned
projection of the sum of two branches:

* attention branch: per-channel Fourier features -> shared MLP -> mean over
  time -> self-attention over the six state tokens -> a zero-initialised query
  cross-attending to those tokens;
* skip branch: a shallow MLP on the flattened raw history.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, ParamStore, Tensor
from .plant import N_STATE

PREFIX = "enc."


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 16
    d_model: int = 16
    heads: int = 4
    ff: int = 64
    n_enc: int = 2
    n_dec: int = 2
    k_f: int = 8
    h_p: int = 0
    skip_hidden: int = 64
    # Per-channel factor applied before the Fourier encoding (raw by default).
    fourier_scale: tuple = (1.0,) * N_STATE

    def __post_init__(self):
        if self.d <= N_STATE:
            raise ValueError(f"embedding dimension {self.d} must exceed the state dimension {N_STATE}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if len(self.fourier_scale) != N_STATE:
            raise ValueError("fourier_scale needs one entry per state channel")

    @property
    def n_features(self) -> int:
        return self.d - N_STATE

    @property
    def fourier_dim(self) -> int:
        return 2 * self.k_f + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fourier_scale"] = list(self.fourier_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "fourier_scale" in d:
            d["fourier_scale"] = tuple(d["fourier_scale"])
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters


def _dense(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
           bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(n_in)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(n_out))


def _norm(store: ParamStore, name: str, n: int) -> None:
    store.add(f"{name}.g", np.ones(n))
    store.add(f"{name}.b", np.zeros(n))


def init_encoder(store: ParamStore, cfg: EncoderConfig, rng: np.random.Generator) -> ParamStore:
    dm = cfg.d_model
    p = PREFIX
    _dense(store, p + "feat1", cfg.fourier_dim, dm, rng)
    _dense(store, p + "feat2", dm, dm, rng)
    store.add(p + "pos", rng.normal(0.0, 0.02, size=(N_STATE, dm)))
    for i in range(cfg.n_enc):
        q = f"{p}enc{i}."
        _norm(store, q + "ln1", dm)
        _dense(store, q + "q", dm, dm, rng)
        # No key bias: softmax is invariant to it, so its gradient is identically zero.
        _dense(store, q + "k", dm, dm, rng, bias=False)
        _dense(store, q + "v", dm, dm, rng)
        _dense(store, q + "out", dm, dm, rng)
        _norm(store, q + "ln2", dm)
        _dense(store, q + "ff1", dm, cfg.ff, rng)
        _dense(store, q + "ff2", cfg.ff, dm, rng)
    _norm(store, p + "enc_ln", dm)
    store.add(p + "z0", np.zeros(dm))
    for i in range(cfg.n_dec):
        q = f"{p}dec{i}."
        _norm(store, q + "ln1", dm)
        _dense(store, q + "q", dm, dm, rng)
        _dense(store, q + "k", dm, dm, rng, bias=False)
        _dense(store, q + "v", dm, dm, rng)
        _dense(store, q + "out", dm, dm, rng)
        _norm(store, q + "ln2", dm)
        _dense(store, q + "ff1", dm, cfg.ff, rng)
        _dense(store, q + "ff2", cfg.ff, dm, rng)
    _norm(store, p + "dec_ln", dm)
    _dense(store, p + "skip1", N_STATE * (cfg.h_p + 1), cfg.skip_hidden, rng)
    _dense(store, p + "skip2", cfg.skip_hidden, dm, rng)
    _dense(store, p + "proj", dm, cfg.n_features, rng)
    return store


class _Params:
    """Resolves parameter names to graph leaves (or constants when no graph is given)."""

    def __init__(self, store: ParamStore, graph: Graph | None):
        self.store = store
        self.graph = graph
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is None:
            if self.graph is None:
                t = Tensor(self.store.values[name])
            else:
                t = self.graph.param(self.store, name)
            self._cache[name] = t
        return t


def _linear(P: _Params, name: str, x) -> Tensor:
    y = dc.matmul(x, P[name + ".w"])
    return y + P[name + ".b"] if name + ".b" in P.store else y


def _ln(P: _Params, name: str, x) -> Tensor:
    return dc.layer_norm(x, P[name + ".g"], P[name + ".b"])


def _ffn(P: _Params, block: str, x) -> Tensor:
    return _linear(P, block + "ff2", dc.gelu(_linear(P, block + "ff1", x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, dm = x.shape
    return dc.transpose(dc.reshape(x, (n, t, heads, dm // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, t, dh = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (n, t, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, weights_out: list | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on (N, T, d_model) inputs."""
    qh, kh, vh = (_split_heads(x, heads) for x in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    w = dc.softmax(dc.matmul(qh, dc.swapaxes(kh, -1, -2)) * scale)
    if weights_out is not None:
        weights_out.append(w.value)
    return _merge_heads(dc.matmul(w, vh))


# ---------------------------------------------------------------------------
# stages


def fourier_encode(x, k_f: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k = 0..k_f-1, appended on a new last axis."""
    x = np.asarray(x, dtype=np.float64)
    ang = x[..., None] * ((2.0 ** np.arange(k_f)) * math.pi)
    return np.concatenate([x[..., None], np.sin(ang), np.cos(ang)], axis=-1)


def extract_features(P: _Params, cfg: EncoderConfig, history: np.ndarray) -> Tensor:
    """(N, T, 6) local-frame histories -> (N, 6, d_model) per-channel features."""
    scaled = history * np.asarray(cfg.fourier_scale)
    enc = fourier_encode(scaled, cfg.k_f)  # (N, T, 6, 2k+1)
    h = dc.gelu(_linear(P, PREFIX + "feat1", enc))
    h = _linear(P, PREFIX + "feat2", h)
    return dc.mean(h, axis=1)


def interact(P: _Params, cfg: EncoderConfig, feats, weights_out: list | None = None) -> Tensor:
    """Add state position embeddings, then pre-norm self-attention blocks over the six tokens."""
    x = feats + P[PREFIX + "pos"]
    for i in range(cfg.n_enc):
        q = f"{PREFIX}enc{i}."
        h = _ln(P, q + "ln1", x)
        a = attention(_linear(P, q + "q", h), _linear(P, q + "k", h), _linear(P, q + "v", h), cfg.heads,
                      weights_out)
        x = x + _linear(P, q + "out", a)
        x = x + _ffn(P, q, _ln(P, q + "ln2", x))
    return _ln(P, PREFIX + "enc_ln", x)


def aggregate(P: _Params, cfg: EncoderConfig, tokens, weights_out: list | None = None) -> Tensor:
    """A single learnable query cross-attends to the state tokens; returns (N, d_model)."""
    n = tokens.shape[0]
    dm = cfg.d_model
    memory = tokens + P[PREFIX + "pos"]
    q = dc.reshape(P[PREFIX + "z0"], (1, 1, dm)) + np.zeros((n, 1, dm))
    for i in range(cfg.n_dec):
        p = f"{PREFIX}dec{i}."
        query = _linear(P, p + "q", _ln(P, p + "ln1", q))
        a = attention(query, _linear(P, p + "k", memory), _linear(P, p + "v", memory), cfg.heads, weights_out)
        q = q + _linear(P, p + "out", a)
        q = q + _ffn(P, p, _ln(P, p + "ln2", q))
    return dc.reshape(_ln(P, PREFIX + "dec_ln", q), (n, dm))


def skip_branch(P: _Params, cfg: EncoderConfig, history: np.ndarray) -> Tensor:
    flat = history.reshape(history.shape[0], -1)
    return _linear(P, PREFIX + "skip2", dc.gelu(_linear(P, PREFIX + "skip1", flat)))


def lift_features(store: ParamStore, cfg: EncoderConfig, history: np.ndarray,
                  graph: Graph | None = None) -> Tensor:
    """Learned part of the embedding, (N, d - 6), for re-centred histories (N, h_p+1, 6)."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3 or history.shape[1:] != (cfg.h_p + 1, N_STATE):
        raise ValueError(f"expected histories of shape (N, {cfg.h_p + 1}, {N_STATE}), got {history.shape}")
    P = _Params(store, graph)
    trans = aggregate(P, cfg, interact(P, cfg, extract_features(P, cfg, history)))
    z = _linear(P, PREFIX + "proj", trans + skip_branch(P, cfg, history))
    if not np.all(np.isfinite(z.value)):
        raise FloatingPointError("non-finite activation in encoder")
    return z


def lift(store: ParamStore, cfg: EncoderConfig, history: np.ndarray, graph: Graph | None = None,
         current: np.ndarray | None = None) -> Tensor:
    """Full embedding (N, d): the current state followed by learned features.

    ``current`` overrides the state copied into the first six entries (used to
    express a state in another window's anchor frame); by default it is the last
    history row.
    """
    history = np.asarray(history, dtype=np.float64)
    feats = lift_features(store, cfg, history, graph)
    s = history[:, -1, :] if current is None else np.asarray(current, dtype=np.float64)
    return dc.concat([s, feats], axis=-1)


def lift_numpy(store: ParamStore, cfg: EncoderConfig, history: np.ndarray,
               current: np.ndarray | None = None, chunk: int = 4096) -> np.ndarray:
    """Gradient-free lift in chunks."""
    history = np.asarray(history, dtype=np.float64)
    out = []
    for i in range(0, len(history), chunk):
        cur = None if current is None else current[i:i + chunk]
        out.append(lift(store, cfg, history[i:i + chunk], None, cur).value)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.d))
