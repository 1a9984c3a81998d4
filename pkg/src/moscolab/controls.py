"""Matrix-valued coefficient controls: construction, box projection and class checks.

Entries live on cells, shape ``(nx-1, ny-1, 2, 2)``.  A diagonal control of
solenoidal type is stored through two axis profiles: ``a11`` depends on the cell
row only and ``a22`` on the cell column only, so each row of the matrix has zero
discrete divergence by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec


class InfeasibleControlError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClassParams:
    p: float
    alpha: float
    beta: float
    xi1: float | np.ndarray = 0.0
    xi2: float | np.ndarray = np.inf

    def __post_init__(self):
        if not 2.0 <= self.p <= 4.0:
            raise ValueError(f"p={self.p} outside the supported range [2, 4]")
        if not 0.0 < self.alpha <= self.beta:
            raise ValueError(f"need 0 < alpha <= beta, got alpha={self.alpha}, beta={self.beta}")
        xi1, xi2 = np.asarray(self.xi1, float), np.asarray(self.xi2, float)
        if np.any(xi1 < 0) or np.any(xi1 > xi2):
            raise ValueError("need 0 <= xi1 <= xi2")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    def diagonal_bounds(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell interval for diagonal entries: [max(alpha, xi1), min(beta, xi2)]."""
        shape = grid.cell_shape
        lo = np.maximum(self.alpha, np.broadcast_to(np.asarray(self.xi1, float), shape))
        hi = np.minimum(self.beta, np.broadcast_to(np.asarray(self.xi2, float), shape))
        return lo, hi

    def offdiagonal_bounds(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        shape = grid.cell_shape
        lo = np.maximum(-self.beta, np.broadcast_to(np.asarray(self.xi1, float), shape))
        hi = np.minimum(self.beta, np.broadcast_to(np.asarray(self.xi2, float), shape))
        return lo, hi

    def to_dict(self) -> dict:
        def enc(v):
            v = np.asarray(v, float)
            if v.ndim == 0:
                return float(v) if np.isfinite(v) else None
            return v.tolist()
        return {"p": self.p, "alpha": self.alpha, "beta": self.beta, "xi1": enc(self.xi1), "xi2": enc(self.xi2)}


@dataclass(frozen=True, eq=False)
class ControlField:
    grid: GridSpec
    form: str
    entries: np.ndarray
    profiles: tuple[np.ndarray, np.ndarray] | None = None
    offsets: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.form not in ("diagonal", "symmetric"):
            raise ValueError(f"unknown control form {self.form!r}")
        e = np.array(self.entries, dtype=float)
        if e.shape != (*self.grid.cell_shape, 2, 2):
            raise ValueError(f"entries shape {e.shape} does not match cells {self.grid.cell_shape}")
        if not np.array_equal(e[..., 0, 1], e[..., 1, 0]):
            raise ValueError("control matrix must be symmetric")
        if self.form == "diagonal" and np.any(e[..., 0, 1] != 0.0):
            raise ValueError("diagonal control with nonzero off-diagonal entries")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def a11(self) -> np.ndarray:
        return self.entries[..., 0, 0]

    @property
    def a12(self) -> np.ndarray:
        return self.entries[..., 0, 1]

    @property
    def a22(self) -> np.ndarray:
        return self.entries[..., 1, 1]

    @property
    def is_diagonal(self) -> bool:
        return self.form == "diagonal"

    @property
    def is_solenoidal_param(self) -> bool:
        return self.profiles is not None

    def parameter_vector(self) -> np.ndarray:
        if self.profiles is None:
            raise ValueError("control has no reduced profile parametrization")
        return np.concatenate(self.profiles)

    # -- serialization ---------------------------------------------------
    def to_dict(self, params: ClassParams | None = None) -> dict:
        out: dict = {"form": self.form, "grid": self.grid.to_dict()}
        if self.profiles is not None:
            out["profile1"] = self.profiles[0].tolist()
            out["profile2"] = self.profiles[1].tolist()
            if self.offsets is not None:
                out["offset1"] = self.offsets[0].tolist()
                out["offset2"] = self.offsets[1].tolist()
        else:
            out["entries"] = self.entries.tolist()
        if params is not None:
            out["params"] = params.to_dict()
        return out

    def to_bytes(self) -> bytes:
        """Little-endian float64, cells row-major, entries a11, a12, a21, a22 per cell."""
        return np.ascontiguousarray(self.entries, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, grid: GridSpec, form: str = "symmetric") -> "ControlField":
        e = np.frombuffer(data, dtype="<f8").reshape(*grid.cell_shape, 2, 2).astype(float)
        return cls(grid, form, e)


def identity_control(grid: GridSpec, scale: float = 1.0) -> ControlField:
    p1 = np.full(grid.ny - 1, float(scale))
    p2 = np.full(grid.nx - 1, float(scale))
    return _diag_from_profiles(grid, p1, p2, None)


def _diag_from_profiles(grid, p1, p2, offsets) -> ControlField:
    e = np.zeros((*grid.cell_shape, 2, 2))
    e[..., 0, 0] = p1[None, :]
    e[..., 1, 1] = p2[:, None]
    if offsets is not None:
        e[..., 0, 0] += offsets[0]
        e[..., 1, 1] += offsets[1]
    p1 = np.array(p1, float)
    p2 = np.array(p2, float)
    p1.setflags(write=False)
    p2.setflags(write=False)
    return ControlField(grid, "diagonal", e, (p1, p2), offsets)


def divergence_offsets(grid: GridSpec, q1: np.ndarray, q2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cell offsets whose row divergences equal the nodal targets ``q1``, ``q2``.

    ``a11`` gets ``h * sum_{i' <= i} q1[i', j]`` so its backward difference along
    x1 reproduces ``q1`` at interior nodes; likewise ``a22`` along x2.
    """
    h = grid.h
    q1 = np.broadcast_to(np.asarray(q1, float), grid.shape)
    q2 = np.broadcast_to(np.asarray(q2, float), grid.shape)
    off1 = np.zeros(grid.cell_shape)
    off2 = np.zeros(grid.cell_shape)
    off1[1:, :] = h * np.cumsum(q1[1:-1, :-1], axis=0)
    off2[:, 1:] = h * np.cumsum(q2[:-1, 1:-1], axis=1)
    return off1, off2


def profile_bounds(grid: GridSpec, params: ClassParams,
                   offsets: tuple[np.ndarray, np.ndarray] | None = None):
    """Feasible intervals of the two profiles: intersections over each cell row/column."""
    lo, hi = params.diagonal_bounds(grid)
    o1, o2 = offsets if offsets is not None else (0.0, 0.0)
    lo1, hi1 = (lo - o1).max(axis=0), (hi - o1).min(axis=0)
    lo2, hi2 = (lo - o2).max(axis=1), (hi - o2).min(axis=1)
    return (lo1, hi1), (lo2, hi2)


def make_diagonal_control(profile1, profile2, grid: GridSpec, params: ClassParams,
                          div_target: tuple[np.ndarray, np.ndarray] | None = None) -> ControlField:
    """Diagonal control with ``a11 = profile1(x2)`` and ``a22 = profile2(x1)``.

    Profiles are clamped into their feasible intervals.  ``div_target`` optionally
    prescribes nonzero nodal row divergences through fixed offsets.
    """
    p1 = np.broadcast_to(np.asarray(profile1, float), (grid.ny - 1,)).copy()
    p2 = np.broadcast_to(np.asarray(profile2, float), (grid.nx - 1,)).copy()
    offsets = divergence_offsets(grid, *div_target) if div_target is not None else None
    (lo1, hi1), (lo2, hi2) = profile_bounds(grid, params, offsets)
    bad = np.flatnonzero(lo1 > hi1).tolist() + [("col", int(i)) for i in np.flatnonzero(lo2 > hi2)]
    if bad:
        raise InfeasibleControlError(f"empty feasible interval for profile entries {bad}")
    return _diag_from_profiles(grid, np.clip(p1, lo1, hi1), np.clip(p2, lo2, hi2), offsets)


def project_box(U: ControlField, params: ClassParams) -> ControlField:
    """Cellwise clamp into the admissible box; reduced profiles are clamped when present."""
    if U.profiles is not None:
        (lo1, hi1), (lo2, hi2) = profile_bounds(U.grid, params, U.offsets)
        p1, p2 = np.clip(U.profiles[0], lo1, hi1), np.clip(U.profiles[1], lo2, hi2)
        if np.array_equal(p1, U.profiles[0]) and np.array_equal(p2, U.profiles[1]):
            return U
        return _diag_from_profiles(U.grid, p1, p2, U.offsets)
    lo, hi = params.diagonal_bounds(U.grid)
    e = U.entries.copy()
    e[..., 0, 0] = np.clip(e[..., 0, 0], lo, hi)
    e[..., 1, 1] = np.clip(e[..., 1, 1], lo, hi)
    if U.form == "symmetric":
        olo, ohi = params.offdiagonal_bounds(U.grid)
        off = np.clip(e[..., 0, 1], olo, ohi)
        e[..., 0, 1] = e[..., 1, 0] = off
    if np.array_equal(e, U.entries):
        return U
    return ControlField(U.grid, U.form, e)


@dataclass
class ClassReport:
    growth_ok: bool
    monotone_ok: bool
    coercive_ok: bool
    growth_margin: float
    monotone_margin: float
    coercive_margin: float
    n_samples: int
    seed: int
    violating_cell: tuple[int, int] | None = None

    @property
    def ok(self) -> bool:
        return self.growth_ok and self.monotone_ok and self.coercive_ok

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["violating_cell"] = list(self.violating_cell) if self.violating_cell is not None else None
        d["ok"] = self.ok
        return d


def _signed_pow(v: np.ndarray, p: float) -> np.ndarray:
    return np.abs(v) ** (p - 2.0) * v


def check_class(U: ControlField, params: ClassParams, n_samples: int = 1000, seed: int = 0,
                tol: float = 1e-10) -> ClassReport:
    """Sample the growth, monotonicity and coercivity conditions cellwise."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    p, alpha, beta = params.p, params.alpha, params.beta
    A = U.entries.reshape(-1, 2, 2)
    absmax = np.abs(A).max(axis=(1, 2))
    growth_margin = float(beta - absmax.max())
    violating = None
    if growth_margin < 0:
        k = int(np.argmax(absmax))
        violating = tuple(int(v) for v in np.unravel_index(k, U.grid.cell_shape))

    rng = np.random.default_rng(seed)
    zeta = rng.uniform(-1.0, 1.0, size=(n_samples, 2))
    eta = rng.uniform(-1.0, 1.0, size=(n_samples, 2))
    mono, coer = np.inf, np.inf
    chunk = max(1, 4_000_000 // max(len(A), 1))
    for s in range(0, n_samples, chunk):
        z, e = zeta[s:s + chunk], eta[s:s + chunk]
        d = z - e
        v = _signed_pow(z, p) - _signed_pow(e, p)
        mono = min(mono, float(np.einsum("si,cij,sj->cs", d, A, v).min()))
        holder = (np.abs(z) ** p).sum(axis=1)
        coer = min(coer, float((np.einsum("si,cij,sj->cs", z, A, _signed_pow(z, p)) - alpha * holder).min()))
    return ClassReport(growth_margin >= 0, mono >= -tol, coer >= -tol,
                       growth_margin, mono, coer, n_samples, seed, violating)


def row_divergence(U: ControlField) -> tuple[np.ndarray, np.ndarray]:
    """Discrete weak divergence of each matrix row at interior nodes.

    Uses the transpose of the cell forward-difference gradient, so a row field
    ``(a_i1, a_i2)`` has divergence ``(a_i1[i,j]-a_i1[i-1,j])/h + (a_i2[i,j]-a_i2[i,j-1])/h``.
    """
    h = U.grid.h
    out = []
    for r in range(2):
        c1, c2 = U.entries[..., r, 0], U.entries[..., r, 1]
        div = np.zeros(U.grid.shape)
        div[1:-1, 1:-1] = (c1[1:, 1:] - c1[:-1, 1:]) / h + (c2[1:, 1:] - c2[1:, :-1]) / h
        out.append(div)
    return out[0], out[1]


def control_from_dict(d: dict, grid: GridSpec, params: ClassParams) -> ControlField:
    if "entries" in d:
        return ControlField(grid, d.get("form", "symmetric"), np.asarray(d["entries"], float))
    p1 = d.get("profile1", 1.0)
    p2 = d.get("profile2", 1.0)
    return make_diagonal_control(p1, p2, grid, params)

