"""End-to-end finite-difference check: lift -> operator bank rollout -> total loss."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import encoder as enc
from . import koopman as kp
from . import losses as L
from .dataset import NormalizationSpec, make_batch, simulate_runs
from .diffcore import Graph, ParamStore, gradient_check
from .plant import Pattern
from .trainer import forward


def random_parameters(enc_cfg: enc.EncoderConfig, rng: np.random.Generator, n_ops: int = kp.N_PATTERNS,
                      spread: float = 0.1, bank_spread: float = 0.02) -> ParamStore:
    """Encoder at init plus a perturbed bank and non-trivial norms/queries, so every path carries gradient."""
    store = ParamStore()
    enc.init_encoder(store, enc_cfg, rng)
    kp.init_bank(store, enc_cfg.d, n_ops)
    for name in store.names():
        if name.startswith(kp.PREFIX):
            store.values[name] += bank_spread * rng.normal(size=store.values[name].shape)
        elif name.endswith((".g", ".b", "z0")):
            store.values[name] += spread * rng.normal(size=store.values[name].shape)
    return store


def pipeline_gradcheck(cfg, n_windows: int = 4, horizon: int = 10, n_coords: int = 200, seed: int = 0,
                       step: float = 1e-4) -> float:
    """Worst relative gradient error of the batch loss w.r.t. all parameters (64-bit)."""
    rng = np.random.default_rng([seed, 9])
    dt = cfg.dataset.dt
    h_p = cfg.encoder.h_p
    n_steps = h_p + horizon + 20
    exc = replace(cfg.excitation, duration=n_steps * dt)
    patterns = [Pattern(int(p)) for p in rng.permutation(len(Pattern))[:n_windows]]
    patterns += [Pattern(int(p)) for p in rng.integers(0, len(Pattern), max(0, n_windows - len(patterns)))]
    trajs = simulate_runs(patterns, cfg.plant, exc, dt, seed)
    anchors = rng.integers(h_p, n_steps - horizon, size=n_windows)
    batch = make_batch(trajs, np.arange(n_windows), anchors, h_p, horizon,
                       NormalizationSpec.from_excitation(exc))
    store = random_parameters(cfg.encoder, rng)
    counts = np.array([100, 7, 40, 9, 40])
    kappa = L.pattern_weights(counts, batch.patterns)
    weights = cfg.train.losses
    # Same normalisation the trainer uses: the max over whole runs, not just the windows.
    scale = np.max([L.geometry_scale(tr.states, dt) for tr in trajs], axis=0)

    def loss_fn(graph: Graph):
        ss_z, ro_z, target_z = forward(store, cfg.encoder, batch, graph)
        return L.total_loss(ss_z, ro_z, target_z, batch.states, kappa, dt, weights, scale)

    return gradient_check(loss_fn, store, step=step, n_coords=n_coords, rng=rng)
