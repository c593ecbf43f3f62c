"""Lifted linear dynamics: operator bank, rollout, fixed decoder and least-squares baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, ParamStore, Tensor
from .plant import N_CONTROL, N_STATE, Pattern

PREFIX = "kp."
N_PATTERNS = len(Pattern)
RIDGE = 1e-8


class UnstableRollout(FloatingPointError):
    pass


class RankDeficient(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# operator bank


def init_bank(store: ParamStore, d: int, n_ops: int = N_PATTERNS, n_control: int = N_CONTROL) -> ParamStore:
    """Every operator starts as identity dynamics with no control effect."""
    if n_ops not in (1, N_PATTERNS):
        raise ValueError(f"bank size must be 1 or {N_PATTERNS}, got {n_ops}")
    store.add(PREFIX + "A", np.broadcast_to(np.eye(d), (n_ops, d, d)).copy())
    store.add(PREFIX + "B", np.zeros((n_ops, d, n_control)))
    return store


def bank_size(store: ParamStore) -> int:
    return store.values[PREFIX + "A"].shape[0]


def operator_index(patterns, n_ops: int) -> np.ndarray:
    """Map driving patterns to bank slots; a single-operator bank shares slot 0."""
    patterns = np.asarray(patterns, dtype=np.intp)
    if np.any((patterns < 0) | (patterns >= N_PATTERNS)):
        raise ValueError(f"pattern index out of range: {patterns}")
    return patterns if n_ops == N_PATTERNS else np.zeros_like(patterns)


def one_hot(patterns, n: int = N_PATTERNS) -> np.ndarray:
    patterns = np.asarray(patterns, dtype=np.intp)
    return np.eye(n)[patterns]


def select(bank_a: np.ndarray, bank_b: np.ndarray, pattern: int) -> tuple[np.ndarray, np.ndarray]:
    return bank_a[int(pattern)], bank_b[int(pattern)]


def contract(onehot: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Gate a bank with one-hot pattern codes: sum_i C_i K_i."""
    return np.tensordot(onehot, bank, axes=(-1, 0))


def bank_tensors(store: ParamStore, graph: Graph | None) -> tuple[Tensor, Tensor]:
    if graph is None:
        return Tensor(store.values[PREFIX + "A"]), Tensor(store.values[PREFIX + "B"])
    return graph.param(store, PREFIX + "A"), graph.param(store, PREFIX + "B")


# ---------------------------------------------------------------------------
# evolution


def evolve(z, u, a, b) -> Tensor:
    """A z + B u for row-vector batches; ``a``/``b`` may carry a leading batch axis."""
    return _apply(a, z) + _apply(b, u)


def _apply(m, x) -> Tensor:
    m = dc.as_tensor(m)
    x = dc.as_tensor(x)
    if m.ndim == 2:
        return dc.matmul(x, dc.transpose(m))
    # per-sample operators: (B, n, k) acting on (B, ..., k)
    squeeze = x.ndim == 2
    xs = dc.reshape(x, (x.shape[0], 1, x.shape[1])) if squeeze else x
    out = dc.matmul(xs, dc.swapaxes(m, -1, -2))
    return dc.reshape(out, (x.shape[0], m.shape[1])) if squeeze else out


def rollout(z0, controls, a, b) -> Tensor:
    """Iterate ``evolve`` over controls of shape (B, H, N_c); returns (B, H, D) (z_{t+1..t+H})."""
    controls = dc.as_tensor(controls)
    bu = _apply(b, controls)  # (B, H, D)
    z = dc.as_tensor(z0)
    a = dc.as_tensor(a)
    steps = []
    for i in range(controls.shape[1]):
        z = _apply(a, z) + bu[:, i, :]
        steps.append(dc.reshape(z, (z.shape[0], 1, z.shape[1])))
    return dc.concat(steps, axis=1)


def rollout_closed_form(z0: np.ndarray, controls: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """z_{t+H} = A^H z_t + sum_{i=1..H} A^{i-1} B u_{t+H-i}, for every H up to the horizon.

    Single operator, unbatched: ``z0`` (D,), ``controls`` (H, N_c). Returns (H, D).
    """
    h = len(controls)
    d = len(z0)
    powers = np.empty((h + 1, d, d))
    powers[0] = np.eye(d)
    for i in range(1, h + 1):
        powers[i] = powers[i - 1] @ a
    bu = controls @ b.T  # (H, D)
    out = np.empty((h, d))
    for n in range(1, h + 1):
        acc = powers[n] @ z0
        for i in range(1, n + 1):
            acc = acc + powers[i - 1] @ bu[n - i]
        out[n - 1] = acc
    return out


def rollout_numpy(z0: np.ndarray, controls: np.ndarray, a: np.ndarray, b: np.ndarray,
                  check: bool = False) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        out = rollout(z0, controls, a, b).value
    if check and not np.all(np.isfinite(out)):
        raise UnstableRollout("rollout produced non-finite values")
    return out


def decode(z):
    """Fixed decoder: the first N_s coordinates."""
    if isinstance(z, Tensor):
        return z[..., :N_STATE]
    return np.asarray(z)[..., :N_STATE]


def spectral_radius(a: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(a))))


# ---------------------------------------------------------------------------
# kernel lifting and least-squares fits

KERNELS = ("thinplate", "gaussian", "invquad", "invmultquad")


def _thinplate(r, eps):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, r * r * np.log(np.where(r > 0, r, 1.0)), 0.0)


def _gaussian(r, eps):
    return np.exp(-(eps * r) ** 2)


def _invquad(r, eps):
    return 1.0 / (1.0 + (eps * r) ** 2)


def _invmultquad(r, eps):
    return 1.0 / np.sqrt(1.0 + (eps * r) ** 2)


_PHI = {"thinplate": _thinplate, "gaussian": _gaussian, "invquad": _invquad, "invmultquad": _invmultquad}


@dataclass
class KernelSpec:
    kind: str
    centers: np.ndarray  # (n_centers, 6)
    eps: float = 1.0

    def __post_init__(self):
        if self.kind not in _PHI:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if len(self.centers) < 1:
            raise ValueError("kernel needs at least one center")
        if not self.eps > 0:
            raise ValueError("kernel width must be positive")

    @property
    def dim(self) -> int:
        return self.centers.shape[1] + len(self.centers)

    @classmethod
    def from_samples(cls, kind: str, states: np.ndarray, n_centers: int, rng: np.random.Generator) -> "KernelSpec":
        """Random centers drawn from ``states``; width from the median pairwise distance."""
        idx = rng.choice(len(states), size=min(n_centers, len(states)), replace=False)
        centers = np.asarray(states, dtype=np.float64)[np.sort(idx)]
        dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        med = np.median(dist[np.triu_indices(len(centers), 1)]) if len(centers) > 1 else 0.0
        return cls(kind, centers, 1.0 / med if med > 0 else 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "centers": self.centers.tolist(), "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["kind"], np.asarray(d["centers"]), d["eps"])


def kernel_lift(s: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """concat(s, phi(|s - c_j|)) along the last axis."""
    s = np.asarray(s, dtype=np.float64)
    r = np.linalg.norm(s[..., None, :] - spec.centers, axis=-1)
    return np.concatenate([s, _PHI[spec.kind](r, spec.eps)], axis=-1)


@dataclass
class FitInfo:
    rank: int
    n_columns: int
    ridge: float
    residual: float


def edmd_fit(z: np.ndarray, u: np.ndarray, z_next: np.ndarray, ridge: float | None = RIDGE):
    """Least-squares (A, B) minimising sum |z_next - A z - B u|^2.

    Full-rank problems are solved by QR-backed ``lstsq``. A rank-deficient design
    falls back to ridge-regularised normal equations, or raises if ``ridge`` is None.
    Returns ``(A, B, FitInfo)``.
    """
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    z_next = np.asarray(z_next, dtype=np.float64)
    x = np.concatenate([z, u], axis=1)
    n, k = x.shape
    rank = int(np.linalg.matrix_rank(x))
    used = 0.0
    if rank == k and n >= k:
        theta = np.linalg.lstsq(x, z_next, rcond=None)[0]
    else:
        if ridge is None:
            raise RankDeficient(f"design matrix has rank {rank} < {k} columns and ridge is disabled")
        used = ridge
        theta = np.linalg.solve(x.T @ x + ridge * np.eye(k), x.T @ z_next)
    resid = float(np.sum((z_next - x @ theta) ** 2))
    d = z.shape[1]
    return theta[:d].T.copy(), theta[d:].T.copy(), FitInfo(rank, k, used, resid)


def linear_ls_fit(s: np.ndarray, u: np.ndarray, s_next: np.ndarray, ridge: float | None = RIDGE):
    return edmd_fit(s, u, s_next, ridge)


@dataclass
class LiftedLinearModel:
    """A fitted baseline: optional kernel lift followed by one linear operator."""

    kind: str  # "edmd-kernel" or "linear-ls"
    a: np.ndarray
    b: np.ndarray
    kernel: KernelSpec | None = None

    @property
    def name(self) -> str:
        return f"edmd-{self.kernel.kind}" if self.kernel is not None else "linear-ls"

    def lift(self, s: np.ndarray) -> np.ndarray:
        return kernel_lift(s, self.kernel) if self.kernel is not None else np.asarray(s, dtype=np.float64)

    def predict(self, s0: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """(B, 6) local anchor states and (B, H, N_c) controls -> (B, H, 6) predicted states."""
        z = self.lift(s0)
        with np.errstate(over="ignore", invalid="ignore"):
            return decode(rollout(z, controls, self.a, self.b).value)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "A": self.a.tolist(), "B": self.b.tolist(),
                "kernel": self.kernel.to_dict() if self.kernel is not None else None}

    @classmethod
    def from_dict(cls, d: dict) -> "LiftedLinearModel":
        kern = KernelSpec.from_dict(d["kernel"]) if d.get("kernel") else None
        return cls(d["kind"], np.asarray(d["A"]), np.asarray(d["B"]), kern)


def fit_baseline(s: np.ndarray, u: np.ndarray, s_next: np.ndarray, kernel: str | None = None,
                 n_centers: int = 10, rng: np.random.Generator | None = None) -> LiftedLinearModel:
    """Fit linear-ls (``kernel=None``) or EDMD with the named kernel on one-step pairs."""
    if kernel is None:
        a, b, _ = linear_ls_fit(s, u, s_next)
        return LiftedLinearModel("linear-ls", a, b)
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = KernelSpec.from_samples(kernel, s, n_centers, rng)
    a, b, _ = edmd_fit(kernel_lift(s, spec), u, kernel_lift(s_next, spec))
    return LiftedLinearModel("edmd-kernel", a, b, spec)


def stable_random_system(n: int, m: int, rng: np.random.Generator, radius: float = 0.9):
    """Random (A, B) with spectral radius ``radius``; used for recovery checks."""
    a = rng.normal(size=(n, n))
    a *= radius / max(spectral_radius(a), 1e-12)
    return a, rng.normal(size=(n, m))


__all__ = [
    "KERNELS", "FitInfo", "KernelSpec", "LiftedLinearModel", "RankDeficient", "UnstableRollout",
    "bank_size", "bank_tensors", "contract", "decode", "edmd_fit", "evolve", "fit_baseline", "init_bank",
    "kernel_lift", "linear_ls_fit", "one_hot", "operator_index", "rollout", "rollout_closed_form",
    "rollout_numpy", "select", "spectral_radius", "stable_random_system",
]
