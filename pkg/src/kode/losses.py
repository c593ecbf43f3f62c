"""Training losses: state, feature and geometric consistency, plus the operator regulariser.

All per-window losses take batched inputs with time on axis -2 and return one
value per window, so batch weighting happens in :func:`total_loss`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .koopman import decode


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 0.01
    beta: float = 0.1
    eta: float = 0.05
    eps: float = 1e-6
    reg_weight: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def mean_norm(err) -> Tensor:
    """Mean over time of the per-step Euclidean norm; (..., H, n) -> (...)."""
    return dc.mean(dc.norm(err, axis=-1), axis=-1)


def state_loss(single_step, rollout_pred, targets) -> Tensor:
    """Teacher-forced plus rollout state error, each a mean of per-step norms."""
    return mean_norm(dc.as_tensor(single_step) - targets) + mean_norm(dc.as_tensor(rollout_pred) - targets)


def feature_loss(single_step_z, rollout_z, target_z) -> Tensor:
    """Same structure as :func:`state_loss` in embedding space; gradients reach the targets too."""
    return state_loss(single_step_z, rollout_z, target_z)


def geometry_discrepancy(states, dt: float) -> Tensor:
    """Per-interval violations of planar rigid-body pose kinematics.

    ``states`` has shape (..., L+1, 6). Returns (..., L, 3) holding
    |dpx/dt - (vx cos a - vy sin a)|, |dpy/dt - (vx sin a + vy cos a)| and
    |da/dt - wz|, with the rates taken over each interval and the velocities at
    its start.
    """
    s = dc.as_tensor(states)
    if s.shape[-2] < 2:
        raise ValueError("geometry discrepancy needs at least two states")
    cur = s[..., :-1, :]
    rate = (s[..., 1:, :3] - cur[..., :3]) * (1.0 / dt)
    a, vx, vy, wz = cur[..., 2:3], cur[..., 3:4], cur[..., 4:5], cur[..., 5:6]
    c, si = dc.cos(a), dc.sin(a)
    ex = rate[..., 0:1] - (vx * c - vy * si)
    ey = rate[..., 1:2] - (vx * si + vy * c)
    ea = rate[..., 2:3] - wz
    return dc.abs_(dc.concat([ex, ey, ea], axis=-1))


def temporal_weights(n_intervals: int) -> np.ndarray:
    """r_t = 1 + (t/L)^2 for t = 1..L."""
    t = np.arange(1, n_intervals + 1, dtype=np.float64)
    return 1.0 + (t / n_intervals) ** 2


def temporal_weight(t: int, n_intervals: int) -> float:
    return 1.0 + (t / n_intervals) ** 2


def geometry_scale(gt_states, dt: float) -> np.ndarray:
    """Per-axis max of the reference discrepancy over every window and step given."""
    ref = geometry_discrepancy(np.asarray(gt_states, dtype=np.float64), dt).value
    return ref.reshape(-1, 3).max(axis=0)


def geometry_loss(pred_states, gt_states, dt: float, weights: LossWeights = LossWeights(),
                  scale=None) -> Tensor:
    """Excess kinematic violation of predictions over the ground truth's own.

    Both inputs are (..., L+1, 6) sequences whose first row is the anchor state.
    Excess is normalised by ``scale + eps`` (a per-axis array) or, when ``scale``
    is None, by the per-window max of the reference discrepancy.
    """
    gt = np.asarray(gt_states.value if isinstance(gt_states, Tensor) else gt_states, dtype=np.float64)
    ref = geometry_discrepancy(gt, dt).value  # (..., L, 3)
    if scale is None:
        denom = ref.max(axis=-2, keepdims=True) + weights.eps
    else:
        denom = np.asarray(scale, dtype=np.float64) + weights.eps
    excess = dc.relu(geometry_discrepancy(pred_states, dt) - ref) * (1.0 / denom)
    axis_w = np.array([1.0, 1.0, weights.lambda_g])
    n = ref.shape[-2]
    r = temporal_weights(n)[:, None]
    return dc.sum_(excess * (r * axis_w), axis=(-2, -1)) * (1.0 / n)


def pattern_weight(counts, c: int) -> float:
    """kappa = ln(sum V + 1) / ln(V_c + 1)."""
    counts = np.asarray(counts, dtype=np.float64)
    v_c = counts[int(c)]
    if v_c < 1:
        raise ValueError(f"pattern {int(c)} has no training data")
    return math.log(counts.sum() + 1.0) / math.log(v_c + 1.0)


def pattern_weights(counts, patterns) -> np.ndarray:
    table = {}
    out = np.empty(len(patterns))
    for i, c in enumerate(np.asarray(patterns, dtype=np.intp)):
        if c not in table:
            table[c] = pattern_weight(counts, c)
        out[i] = table[c]
    return out


def window_losses(ss_z, ro_z, target_z, states, dt: float, weights: LossWeights,
                  geo_scale=None) -> dict[str, Tensor]:
    """Per-window loss terms.

    ``ss_z`` and ``ro_z`` are (B, H, D) teacher-forced and rollout embeddings,
    ``target_z`` is (B, H+1, D) with the anchor embedding in row 0 and
    ``states`` is (B, H+1, 6) ground truth in the anchor frame.
    """
    target_next = dc.as_tensor(target_z)[:, 1:, :]
    gt_next = states[:, 1:, :]
    l_s = state_loss(decode(ss_z), decode(ro_z), gt_next)
    l_f = feature_loss(ss_z, ro_z, target_next)
    pred_seq = dc.concat([states[:, :1, :], decode(ro_z)], axis=1)
    l_g = geometry_loss(pred_seq, states, dt, weights, geo_scale)
    total = l_s + l_f * weights.beta + l_g * weights.eta
    return {"state": l_s, "feature": l_f, "geometry": l_g, "window": total}


def weighted_mean(per_window, kappa: np.ndarray) -> Tensor:
    kappa = np.asarray(kappa, dtype=np.float64)
    return dc.sum_(dc.as_tensor(per_window) * kappa) * (1.0 / kappa.sum())


def total_loss(ss_z, ro_z, target_z, states, kappa, dt: float, weights: LossWeights = LossWeights(),
               geo_scale=None) -> Tensor:
    """Batch loss: sum_b kappa_b (L_s + beta L_f + eta L_g) / sum_b kappa_b."""
    return weighted_mean(window_losses(ss_z, ro_z, target_z, states, dt, weights, geo_scale)["window"], kappa)


def operator_reg(a, b) -> Tensor:
    """|A|_F + |B|_F, summed over bank members when a leading bank axis is present."""
    a = dc.as_tensor(a)
    b = dc.as_tensor(b)
    if a.ndim == 2:
        a = dc.reshape(a, (1,) + a.shape)
        b = dc.reshape(b, (1,) + b.shape)
    fa = dc.norm(dc.reshape(a, (a.shape[0], -1)), axis=-1)
    fb = dc.norm(dc.reshape(b, (b.shape[0], -1)), axis=-1)
    return dc.sum_(fa + fb)
