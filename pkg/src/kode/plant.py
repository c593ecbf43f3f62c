"""Planar rigid-body model of a six-wheel, all-wheel-steer electric truck.

State ``s = [px, py, az, vx, vy, wz]``: global CoG position, unwrapped heading,
body-frame velocities and yaw rate. Control ``u = [T_fl, T_fr, T_ml, T_mr,
T_rl, T_rr, d_fl, d_fr, d_ml, d_mr, d_rl, d_rr]``: wheel drive torques (N m)
and steering angles (rad).

All functions accept a leading batch axis so that many runs integrate in one
vectorised pass; rows never interact.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

N_STATE = 6
N_CONTROL = 12
N_WHEEL = 6
GRAVITY = 9.81
STATE_NAMES = ("px", "py", "az", "vx", "vy", "wz")
WHEEL_NAMES = ("fl", "fr", "ml", "mr", "rl", "rr")
MAX_SUBSTEP = 5e-4
DIVERGENCE_LIMIT = 1e6


class Pattern(enum.IntEnum):
    """Driving patterns c1..c5; values index the operator bank."""

    FRO = 0  # front-rear opposite
    COR = 1  # counter rotation ("tank turn")
    RWL = 2  # rear wheels locked
    LAM = 3  # lateral motion
    CRM = 4  # crab motion

    @property
    def label(self) -> str:
        return f"c{self.value + 1}"

    @classmethod
    def parse(cls, text: str) -> "Pattern":
        t = text.strip().upper()
        if t.startswith("C") and t[1:].isdigit():
            return cls(int(t[1:]) - 1)
        return cls[t]


@dataclass(frozen=True)
class PlantParams:
    m_sprung: float = 4455.0
    m_unsprung: float = 1050.0
    m_load: float = 5000.0
    track: float = 2.030
    d_fm: float = 3.250
    d_fr: float = 6.500
    wheel_radius: float = 0.5
    yaw_inertia: float | None = None
    cornering_stiffness: float = 1.0e5
    mu: float = 0.85
    v_eps: float = 0.1
    body_length: float = 8.0
    body_width: float = 2.5

    def __post_init__(self):
        if self.yaw_inertia is None:
            iz = self.mass * (self.body_length ** 2 + self.body_width ** 2) / 12.0
            object.__setattr__(self, "yaw_inertia", iz)
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"plant parameter {name} must be positive, got {value}")

    @property
    def mass(self) -> float:
        return self.m_sprung + self.m_unsprung + self.m_load

    @property
    def wheel_x(self) -> np.ndarray:
        # CoG sits on the middle axle.
        a = self.d_fm
        b = self.d_fr - self.d_fm
        return np.array([a, a, 0.0, 0.0, -b, -b])

    @property
    def wheel_y(self) -> np.ndarray:
        h = 0.5 * self.track
        return np.array([h, -h, h, -h, h, -h])

    @property
    def force_cap(self) -> float:
        return self.mu * self.mass * GRAVITY / N_WHEEL

    def perturbed(self, mass_scale: float = 1.0, stiffness_scale: float = 1.0) -> "PlantParams":
        """Scale total mass (through the payload, inertia follows) and cornering stiffness."""
        m_load = self.m_load + (mass_scale - 1.0) * self.mass
        return replace(self, m_load=m_load, yaw_inertia=None,
                       cornering_stiffness=self.cornering_stiffness * stiffness_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlantParams":
        return cls(**d)


def _wheel_sum(a: np.ndarray) -> np.ndarray:
    # Fixed order, pairing wheels that are point-symmetric about the CoG, so that
    # symmetric force layouts cancel exactly and results do not depend on batching.
    return ((a[..., 0] + a[..., 5]) + (a[..., 1] + a[..., 4])) + (a[..., 2] + a[..., 3])


def wheel_forces(s: np.ndarray, u: np.ndarray, p: PlantParams) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame force components (..., 6) for each wheel after the friction cap."""
    vx, vy, wz = s[..., 3:4], s[..., 4:5], s[..., 5:6]
    torque, steer = u[..., :N_WHEEL], u[..., N_WHEEL:]
    xw, yw = p.wheel_x, p.wheel_y
    vwx = vx - wz * yw
    vwy = vy + wz * xw
    ch, sh = np.cos(steer), np.sin(steer)
    v_long = vwx * ch + vwy * sh
    v_lat = -vwx * sh + vwy * ch
    # Equals steer - atan2(vwy, vwx) when rolling forward; stays restoring in reverse.
    slip = -np.arctan2(v_lat, np.abs(v_long))
    speed = np.sqrt(vwx * vwx + vwy * vwy)
    f_lat = p.cornering_stiffness * slip * np.minimum(1.0, speed / p.v_eps)
    f_drive = torque / p.wheel_radius
    mag = np.sqrt(f_drive * f_drive + f_lat * f_lat)
    cap = p.force_cap
    scale = np.where(mag > cap, cap / np.where(mag > 0, mag, 1.0), 1.0)
    f_drive = f_drive * scale
    f_lat = f_lat * scale
    fx = f_drive * ch - f_lat * sh
    fy = f_drive * sh + f_lat * ch
    return fx, fy


def derivatives(s: np.ndarray, u: np.ndarray, p: PlantParams) -> np.ndarray:
    """Time derivative of the state; accepts (6,) / (12,) or batched (..., 6) / (..., 12)."""
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    az, vx, vy, wz = s[..., 2], s[..., 3], s[..., 4], s[..., 5]
    fx, fy = wheel_forces(s, u, p)
    m = p.mass
    moment = _wheel_sum(p.wheel_x * fy - p.wheel_y * fx)
    ca, sa = np.cos(az), np.sin(az)
    out = np.empty(np.broadcast_shapes(s.shape, u.shape[:-1] + (N_STATE,)))
    out[..., 0] = vx * ca - vy * sa
    out[..., 1] = vx * sa + vy * ca
    out[..., 2] = wz
    out[..., 3] = _wheel_sum(fx) / m + wz * vy
    out[..., 4] = _wheel_sum(fy) / m - wz * vx
    out[..., 5] = moment / p.yaw_inertia
    return out


def substeps_for(dt: float, max_substep: float = MAX_SUBSTEP) -> int:
    return max(1, int(math.ceil(dt / max_substep - 1e-9)))


def step_rk4(s, u, p: PlantParams, dt: float, max_substep: float = MAX_SUBSTEP) -> np.ndarray:
    """Advance by ``dt`` with classical RK4, control held, substeps no longer than ``max_substep``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.array(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n = substeps_for(dt, max_substep)
    h = dt / n
    for _ in range(n):
        k1 = derivatives(x, u, p)
        k2 = derivatives(x + 0.5 * h * k1, u, p)
        k3 = derivatives(x + 0.5 * h * k2, u, p)
        k4 = derivatives(x + h * k3, u, p)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


@dataclass
class Trajectory:
    dt: float
    pattern: Pattern
    states: np.ndarray  # (n+1, 6)
    controls: np.ndarray  # (n, 12)
    valid: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(self.states) != len(self.controls) + 1:
            raise ValueError(f"{len(self.states)} states but {len(self.controls)} controls")

    def __len__(self) -> int:
        return len(self.states)


def simulate_batch(s0: np.ndarray, controls: np.ndarray, p: PlantParams, dt: float,
                   max_substep: float = MAX_SUBSTEP) -> tuple[np.ndarray, np.ndarray]:
    """Integrate ``k`` runs at once.

    ``s0`` is (k, 6), ``controls`` is (k, n, 12). Returns states (k, n+1, 6) and
    a validity mask (k,); a run that diverges or goes non-finite is frozen and
    flagged invalid.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    k, n = controls.shape[:2]
    states = np.empty((k, n + 1, N_STATE))
    states[:, 0] = s0
    valid = np.isfinite(s0).all(axis=1)
    x = s0.copy()
    for i in range(n):
        nxt = step_rk4(x, controls[:, i], p, dt, max_substep)
        bad = ~np.isfinite(nxt).all(axis=1) | (np.abs(nxt) > DIVERGENCE_LIMIT).any(axis=1)
        if bad.any():
            valid &= ~bad
            nxt[bad] = x[bad]
        x = nxt
        states[:, i + 1] = x
    return states, valid


def simulate(s0, controls, p: PlantParams, dt: float, pattern: Pattern = Pattern.FRO,
             max_substep: float = MAX_SUBSTEP) -> Trajectory:
    """Integrate a single run; ``valid`` is False if it diverged."""
    controls = np.asarray(controls, dtype=np.float64)
    if controls.ndim != 2 or len(controls) == 0:
        raise ValueError("controls must be a non-empty (n, 12) array")
    states, valid = simulate_batch(np.asarray(s0, dtype=np.float64)[None], controls[None], p, dt,
                                   max_substep)
    return Trajectory(dt=dt, pattern=Pattern(pattern), states=states[0], controls=controls,
                      valid=bool(valid[0]))


# ---------------------------------------------------------------------------
# excitation


@dataclass(frozen=True)
class ExcitationConfig:
    torque_max: float = 600.0
    steer_amp: float = 0.5
    freq_min: float = 0.05
    freq_max: float = 0.5
    max_components: int = 3
    torque_offset: tuple[float, float] = (0.0, 450.0)
    steer_offset: float = 0.15
    duration: float = 20.0
    steer_margin: float = 1e-3

    def __post_init__(self):
        if not (self.torque_max > 0 and self.steer_amp > 0 and 0 < self.freq_min <= self.freq_max
                and self.max_components >= 1 and self.duration > 0):
            raise ValueError(f"invalid excitation config {self}")
        lo, hi = self.torque_offset
        if not (-self.torque_max <= lo <= hi <= self.torque_max):
            raise ValueError("torque_offset must lie inside [-torque_max, torque_max]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["torque_offset"] = list(self.torque_offset)
        return d


def _sinusoid_sum(t: np.ndarray, amp: float, offset: float, cfg: ExcitationConfig,
                  rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(1, cfg.max_components + 1))
    weights = rng.dirichlet(np.ones(n))
    out = np.full_like(t, offset)
    for w in weights:
        f = rng.uniform(cfg.freq_min, cfg.freq_max)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        out += amp * w * rng.uniform(0.5, 1.0) * np.sin(2.0 * math.pi * f * t + phase)
    return out


def project_pattern(pattern: Pattern, torque: np.ndarray, steer: np.ndarray,
                    cfg: ExcitationConfig, p: PlantParams | None = None) -> np.ndarray:
    """Map scalar torque/steer signals (n,) onto the pattern's 12-channel constraint set."""
    n = len(torque)
    tq = np.clip(torque, -cfg.torque_max, cfg.torque_max)
    u = np.zeros((n, N_CONTROL))
    u[:, :N_WHEEL] = tq[:, None]
    m = cfg.steer_margin
    if pattern == Pattern.FRO:
        d = np.clip(steer, -math.pi / 2 + m, math.pi / 2 - m)
        u[:, 6:8] = d[:, None]
        u[:, 10:12] = -d[:, None]
    elif pattern == Pattern.COR:
        u[:, 2] = -tq  # T_ml
        d = np.clip(steer, math.pi / 2 + m, math.pi - m)
        u[:, 6] = d
        u[:, 10] = -d
        u[:, 7] = math.pi - d
        u[:, 11] = d - math.pi
    elif pattern == Pattern.RWL:
        d = np.clip(steer, -math.pi / 2 + m, math.pi / 2 - m)
        u[:, 6:8] = d[:, None]
        u[:, 8:10] = np.arctan(d / 2.0)[:, None]
    elif pattern == Pattern.LAM:
        u[:, 6:] = math.pi / 2
    elif pattern == Pattern.CRM:
        d = np.clip(steer, -math.pi / 2 + m, math.pi / 2 - m)
        u[:, 6:] = d[:, None]
    else:  # pragma: no cover
        raise ValueError(pattern)
    check_pattern(pattern, u, cfg.torque_max)
    return u


def check_pattern(pattern: Pattern, u: np.ndarray, torque_max: float = np.inf, tol: float = 1e-12) -> None:
    """Raise AssertionError if any row of ``u`` violates the pattern's rules."""
    T, d = u[:, :N_WHEEL], u[:, N_WHEEL:]
    assert np.all(np.abs(T) <= torque_max + tol), "torque bound violated"
    assert np.all(np.abs(d) <= math.pi + tol), "steer bound violated"
    if pattern == Pattern.COR:
        t = T[:, 0]
        for j in (1, 3, 4, 5):
            assert np.allclose(T[:, j], t, rtol=0, atol=tol), "COR torque rule"
        assert np.allclose(T[:, 2], -t, rtol=0, atol=tol), "COR middle-left torque rule"
        delta = d[:, 0]
        assert np.all(delta > math.pi / 2), "COR steer must exceed pi/2"
        assert np.allclose(d[:, 4], -delta, atol=tol) and np.allclose(d[:, 1], math.pi - delta, atol=tol)
        assert np.allclose(d[:, 5], delta - math.pi, atol=tol) and np.all(d[:, 2:4] == 0)
        return
    assert np.all(T == T[:, :1]), f"{pattern.name}: all torques must be equal"
    if pattern == Pattern.FRO:
        assert np.all(d[:, 0] == d[:, 1]) and np.all(d[:, 4] == -d[:, 0]) and np.all(d[:, 5] == -d[:, 0])
        assert np.all(d[:, 2:4] == 0)
    elif pattern == Pattern.RWL:
        assert np.all(d[:, 0] == d[:, 1]) and np.all(d[:, 4:6] == 0)
        assert np.allclose(d[:, 2], np.arctan(d[:, 0] / 2), atol=tol) and np.all(d[:, 2] == d[:, 3])
    elif pattern == Pattern.LAM:
        assert np.all(d == math.pi / 2)
    elif pattern == Pattern.CRM:
        assert np.all(d == d[:, :1]) and np.all(np.abs(d) < math.pi / 2)


def generate_excitation(pattern: Pattern, cfg: ExcitationConfig, rng: np.random.Generator,
                        dt: float = 0.01, n_steps: int | None = None,
                        p: PlantParams | None = None) -> np.ndarray:
    """Sinusoidal torque/steer excitation projected onto ``pattern``; returns (n, 12)."""
    pattern = Pattern(pattern)
    n = n_steps if n_steps is not None else int(round(cfg.duration / dt))
    t = np.arange(n) * dt
    offset = rng.uniform(*cfg.torque_offset)
    torque = _sinusoid_sum(t, cfg.torque_max - abs(offset), offset, cfg, rng)
    if pattern == Pattern.COR:
        # Centre the steer swing on the angle that is tangent to the rotation circle.
        p = p if p is not None else PlantParams()
        base = math.pi - math.atan2(p.d_fm, 0.5 * p.track)
        steer = _sinusoid_sum(t, cfg.steer_amp, base, cfg, rng)
    else:
        steer = _sinusoid_sum(t, cfg.steer_amp, rng.uniform(-cfg.steer_offset, cfg.steer_offset), cfg, rng)
    return project_pattern(pattern, torque, steer, cfg)
