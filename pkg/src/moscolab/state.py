"""Finite-difference solver for the monotone Dirichlet problem

    -div(U [(grad y)^{p-2}] grad y) + |y|^{p-2} y = f  in the domain,  y = 0 outside.

The discrete gradient is the forward difference on each cell (x-edge on the
cell's bottom side, y-edge on its left side).  The discrete operator ``A_h`` is
the weak form tested against nodal indicator functions, scaled by ``h^2``; for
``p = 2`` and ``U = I`` it is ``h^2`` times the 5-point ``-Delta_h + 1``.  Values
outside the domain are hard zeros, so every nodal array is its own zero extension.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .controls import ClassParams, ControlField
from .geometry import GridDomain, GridSpec


class SolverError(RuntimeError):
    def __init__(self, message: str, last_residual: float = float("nan")):
        super().__init__(message)
        self.last_residual = last_residual


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-9
    max_iter: int = 200
    mu: float = 1e-8          # Jacobian regularization of |t|^{p-2}, residual stays exact
    armijo: float = 1e-4
    min_step: float = 1e-10


@dataclass
class SolverStats:
    method: str = ""
    iterations: int = 0
    residual_norm: float = 0.0
    threshold: float = 0.0
    energies: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class StateField:
    grid: GridSpec
    domain: GridDomain
    values: np.ndarray
    stats: SolverStats = field(default_factory=SolverStats, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if np.any(v[~self.domain.mask] != 0.0):
            raise ValueError("state must vanish outside the domain")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, domain: GridDomain) -> "StateField":
        return cls(domain.grid, domain, np.zeros(domain.grid.shape))

    @classmethod
    def from_values(cls, domain: GridDomain, values) -> "StateField":
        """Zero-extend ``values`` from the domain."""
        return cls(domain.grid, domain, np.where(domain.mask, values, 0.0))


@dataclass(frozen=True, eq=False)
class EllipticProblem:
    U: ControlField
    f: np.ndarray
    domain: GridDomain
    params: ClassParams
    options: SolverOptions = SolverOptions()

    def __post_init__(self):
        f = np.broadcast_to(np.asarray(self.f, float), self.domain.grid.shape).copy()
        if not np.all(np.isfinite(f)):
            raise ValueError("forcing must be finite")
        if self.U.grid != self.domain.grid:
            raise ValueError("control and domain live on different grids")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)

    @property
    def h(self) -> float:
        return self.domain.grid.h

    @property
    def p(self) -> float:
        return self.params.p


# ---------------------------------------------------------------------------
# discrete calculus
# ---------------------------------------------------------------------------

def cell_gradient(y: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    return (y[1:, :-1] - y[:-1, :-1]) / h, (y[:-1, 1:] - y[:-1, :-1]) / h


def gradient_transpose(s1: np.ndarray, s2: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros((s1.shape[0] + 1, s1.shape[1] + 1))
    out[1:, :-1] += s1 / h
    out[:-1, :-1] -= s1 / h
    out[:-1, 1:] += s2 / h
    out[:-1, :-1] -= s2 / h
    return out


def spow(v: np.ndarray, p: float) -> np.ndarray:
    """Signed power |v|^{p-2} v."""
    return v if p == 2 else np.abs(v) ** (p - 2.0) * v


def _values(y) -> np.ndarray:
    return y.values if isinstance(y, StateField) else np.asarray(y, float)


def lp_norm(v, p: float, h: float) -> float:
    return float((h * h * np.sum(np.abs(_values(v)) ** p)) ** (1.0 / p))


def wp_norm(y, p: float, h: float | None = None) -> float:
    """Discrete W^{1,p} norm: cell forward differences plus nodal values, h^2-weighted."""
    if h is None:
        if not isinstance(y, StateField):
            raise ValueError("grid spacing required for raw arrays")
        h = y.grid.h
    v = _values(y)
    d1, d2 = cell_gradient(v, h)
    total = h * h * (np.sum(np.abs(d1) ** p) + np.sum(np.abs(d2) ** p) + np.sum(np.abs(v) ** p))
    return float(total ** (1.0 / p))


def u_norm(U: ControlField, y, p: float) -> float:
    """Control-weighted equivalent norm (int (U[(grad y)^{p-2}] grad y, grad y) + int |y|^p)^{1/p}."""
    h = U.grid.h
    v = _values(y)
    d1, d2 = cell_gradient(v, h)
    w1, w2 = spow(d1, p), spow(d2, p)
    flux1 = U.a11 * w1 + U.a12 * w2
    flux2 = U.a12 * w1 + U.a22 * w2
    total = h * h * (np.sum(flux1 * d1 + flux2 * d2) + np.sum(np.abs(v) ** p))
    return float(max(total, 0.0) ** (1.0 / p))


def apply_operator(U: ControlField, y: np.ndarray, p: float, mask: np.ndarray) -> np.ndarray:
    """A_h(U, y) without the forcing term, zero outside ``mask``."""
    h = U.grid.h
    d1, d2 = cell_gradient(y, h)
    w1, w2 = spow(d1, p), spow(d2, p)
    flux1 = U.a11 * w1 + U.a12 * w2
    flux2 = U.a12 * w1 + U.a22 * w2
    r = h * h * (gradient_transpose(flux1, flux2, h) + spow(y, p))
    return np.where(mask, r, 0.0)


def assemble_residual(prob: EllipticProblem, y) -> np.ndarray:
    """Nodal weak-form residual A_h(U, y) - h^2 f; exactly zero outside the domain."""
    v = _values(y)
    r = apply_operator(prob.U, v, prob.p, prob.domain.mask) - prob.h ** 2 * prob.f
    return np.where(prob.domain.mask, r, 0.0)


def energy(prob: EllipticProblem, y) -> float:
    """Convex potential whose gradient is ``assemble_residual`` (diagonal controls)."""
    if not prob.U.is_diagonal:
        raise NotImplementedError("energy is only defined for diagonal controls")
    p, h = prob.p, prob.h
    v = _values(y)
    d1, d2 = cell_gradient(v, h)
    grad_part = np.sum(prob.U.a11 * np.abs(d1) ** p + prob.U.a22 * np.abs(d2) ** p)
    return float(h * h * ((grad_part + np.sum(np.abs(v) ** p)) / p - np.sum(prob.f * v * prob.domain.mask)))


# ---------------------------------------------------------------------------
# sparse assembly on the free nodes
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=32)
def _difference_matrices(nx: int, ny: int, h: float, mask_bytes: bytes):
    mask = np.frombuffer(mask_bytes, dtype=bool).reshape(nx, ny)
    node_id = -np.ones((nx, ny), dtype=np.int64)
    free = np.flatnonzero(mask.ravel())
    node_id.ravel()[free] = np.arange(len(free))
    ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    ci, cj = ci.ravel(), cj.ravel()
    cell = np.arange(len(ci))
    ncell = len(ci)

    def build(plus_i, plus_j):
        rows, cols, vals = [], [], []
        for (ii, jj), sgn in (((plus_i, plus_j), 1.0 / h), ((ci, cj), -1.0 / h)):
            ids = node_id[ii, jj]
            keep = ids >= 0
            rows.append(cell[keep])
            cols.append(ids[keep])
            vals.append(np.full(keep.sum(), sgn))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(ncell, len(free)))

    D1 = build(ci + 1, cj)
    D2 = build(ci, cj + 1)
    return D1, D2, free


def _matrices(domain: GridDomain):
    g = domain.grid
    return _difference_matrices(g.nx, g.ny, g.h, np.ascontiguousarray(domain.mask).tobytes())


def _weighted_operator(domain, c11, c12, c21, c22, mass):
    """h^2 (D^T C D + diag(mass)) on the free nodes, C the cellwise 2x2 weights."""
    D1, D2, free = _matrices(domain)
    h2 = domain.grid.h ** 2
    dg = lambda c: sp.diags(np.ravel(c))
    K = D1.T @ dg(c11) @ D1 + D2.T @ dg(c22) @ D2
    if np.any(c12 != 0) or np.any(c21 != 0):
        K = K + D1.T @ dg(c12) @ D2 + D2.T @ dg(c21) @ D1
    K = K + sp.diags(np.broadcast_to(mass, (len(free),)))
    return (h2 * K).tocsr()


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def _threshold(prob: EllipticProblem) -> float:
    fmax = float(np.max(np.abs(prob.f[prob.domain.mask]), initial=0.0))
    return prob.options.tol * prob.h ** 2 * max(1.0, fmax)


def _scatter(domain: GridDomain, free: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros(domain.grid.shape)
    out.ravel()[free] = x
    return out


def _cg(K, b, atol, x0=None, maxiter=None):
    M = sp.diags(1.0 / K.diagonal())
    x, info = spla.cg(K, b, x0=x0, rtol=0.0, atol=atol, M=M, maxiter=maxiter or 20 * K.shape[0])
    return x, info


def _solve_linear(prob: EllipticProblem, stats: SolverStats) -> np.ndarray:
    dom, U = prob.domain, prob.U
    D1, D2, free = _matrices(dom)
    K = _weighted_operator(dom, U.a11, U.a12, U.a12, U.a22, 1.0)
    b = prob.h ** 2 * prob.f.ravel()[free]
    thr = stats.threshold
    x = np.zeros(len(free))
    stats.method = "cg"
    for _ in range(5):
        r = b - K @ x
        if np.max(np.abs(r), initial=0.0) <= thr:
            break
        dx, _info = _cg(K, r, atol=0.5 * thr)
        x = x + dx
        stats.iterations += 1
    else:
        stats.method = "cg+direct"
        x = spla.spsolve(K.tocsc(), b)
    return _scatter(dom, free, x)


def _ray_start(prob: EllipticProblem, y: np.ndarray) -> np.ndarray:
    """Rescale ``y`` to the energy minimizer along its ray (exact for p-homogeneous parts)."""
    p, h = prob.p, prob.h
    d1, d2 = cell_gradient(y, h)
    e = np.sum(prob.U.a11 * np.abs(d1) ** p + prob.U.a22 * np.abs(d2) ** p) + np.sum(np.abs(y) ** p)
    if prob.U.a12.any():
        e = u_norm(prob.U, y, p) ** p / (h * h)
    fy = np.sum(prob.f * y)
    if e <= 0 or fy <= 0:
        return y
    return y * (fy / e) ** (1.0 / (p - 1.0))


def _newton(prob: EllipticProblem, y: np.ndarray, stats: SolverStats) -> np.ndarray:
    p, h, opts, U = prob.p, prob.h, prob.options, prob.U
    dom = prob.domain
    _, _, free = _matrices(dom)
    stats.method = "newton"
    J = energy(prob, y)
    stats.energies.append(J)
    for it in range(opts.max_iter):
        R = assemble_residual(prob, y)
        rn = float(np.max(np.abs(R)))
        stats.residual_norm = rn
        if rn <= stats.threshold:
            return y
        d1, d2 = cell_gradient(y, h)
        reg = lambda t: (p - 1.0) * (t * t + opts.mu ** 2) ** ((p - 2.0) / 2.0)
        H = _weighted_operator(dom, U.a11 * reg(d1), 0.0, 0.0, U.a22 * reg(d2), reg(y.ravel()[free]))
        g = R.ravel()[free]
        try:
            d = spla.spsolve(H.tocsc(), -g)
            ok = np.all(np.isfinite(d)) and float(g @ d) < 0.0
        except RuntimeError:
            ok = False
        if not ok:
            stats.method = "newton+gd"
            d = -g / (h * h)
        dfull = _scatter(dom, free, d)
        slope = float(g @ d)
        t = 1.0
        if -slope > 1e-12 * max(1.0, abs(J)):
            while t >= opts.min_step:
                trial = y + t * dfull
                Jt = energy(prob, trial)
                if Jt <= J + opts.armijo * t * slope:
                    break
                t *= 0.5
            else:
                raise SolverError(f"line search failed at iteration {it}", rn)
        else:
            # predicted decrease below energy roundoff: damp on the residual instead
            r2 = np.linalg.norm(R)
            while t >= opts.min_step:
                trial = y + t * dfull
                if np.linalg.norm(assemble_residual(prob, trial)) < r2:
                    break
                t *= 0.5
            else:
                raise SolverError(f"residual damping failed at iteration {it}", rn)
            Jt = energy(prob, trial)
        y, J = trial, Jt
        stats.energies.append(Jt)
        stats.iterations = it + 1
    R = assemble_residual(prob, y)
    stats.residual_norm = float(np.max(np.abs(R)))
    if stats.residual_norm <= stats.threshold:
        return y
    raise SolverError(f"Newton did not converge in {opts.max_iter} iterations", stats.residual_norm)


def _picard(prob: EllipticProblem, y: np.ndarray, stats: SolverStats) -> np.ndarray:
    """Frozen-weight iteration preconditioning the exact residual (general symmetric U)."""
    p, h, opts, U = prob.p, prob.h, prob.options, prob.U
    dom = prob.domain
    _, _, free = _matrices(dom)
    stats.method = "picard"
    reg = lambda t: (t * t + opts.mu ** 2) ** ((p - 2.0) / 2.0)
    for it in range(opts.max_iter):
        R = assemble_residual(prob, y)
        rn = float(np.max(np.abs(R)))
        stats.residual_norm = rn
        if rn <= stats.threshold:
            return y
        d1, d2 = cell_gradient(y, h)
        w1, w2 = reg(d1), reg(d2)
        L = _weighted_operator(dom, U.a11 * w1, U.a12 * w2, U.a12 * w1, U.a22 * w2, reg(y.ravel()[free]))
        d = _scatter(dom, free, spla.spsolve(L.tocsc(), -R.ravel()[free]))
        t = 1.0
        while t >= opts.min_step:
            trial = y + t * d
            if np.linalg.norm(assemble_residual(prob, trial)) < np.linalg.norm(R):
                break
            t *= 0.5
        else:
            raise SolverError(f"Picard damping failed at iteration {it}", rn)
        y = trial
        stats.iterations = it + 1
    raise SolverError(f"Picard did not converge in {opts.max_iter} iterations", stats.residual_norm)


def solve_state(prob: EllipticProblem, y0=None) -> StateField:
    """Solve A_h(U, y) = h^2 f on the domain nodes to the configured tolerance."""
    dom = prob.domain
    stats = SolverStats(threshold=_threshold(prob))
    f_on = prob.f[dom.mask]
    if dom.n_nodes == 0 or not np.any(f_on) and y0 is None:
        stats.method = "trivial"
        return StateField(dom.grid, dom, np.zeros(dom.grid.shape), stats)
    if prob.p == 2:
        y = _solve_linear(prob, stats)
    else:
        if y0 is None:
            lin = EllipticProblem(prob.U, prob.f, dom, ClassParams(2.0, prob.params.alpha, prob.params.beta),
                                  prob.options)
            y = _ray_start(prob, _solve_linear(lin, SolverStats(threshold=_threshold(lin))))
        else:
            y = np.where(dom.mask, _values(y0), 0.0)
        y = _newton(prob, y, stats) if prob.U.is_diagonal else _picard(prob, y, stats)
    y = np.where(dom.mask, y, 0.0)
    stats.residual_norm = float(np.max(np.abs(assemble_residual(prob, y))))
    if stats.residual_norm > stats.threshold:
        raise SolverError("state residual above tolerance", stats.residual_norm)
    return StateField(dom.grid, dom, y, stats)


# ---------------------------------------------------------------------------
# a priori estimate
# ---------------------------------------------------------------------------

def apriori_constant(p: float, alpha: float) -> float:
    """Young-inequality constant C with ||y||^p <= C ||f||_q^q given coercivity min(alpha, 1)."""
    q = p / (p - 1.0)
    m = min(alpha, 1.0)
    return (2.0 / (q * m)) * (p * m / 2.0) ** (-q / p)


@dataclass
class AprioriReport:
    lhs: float
    rhs: float
    constant: float
    slack: float
    ok: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def apriori_check(y: StateField, f, params: ClassParams) -> AprioriReport:
    p, q = params.p, params.q
    h = y.grid.h
    fv = np.where(y.domain.mask, np.broadcast_to(np.asarray(f, float), y.grid.shape), 0.0)
    lhs = wp_norm(y, p) ** p
    C = apriori_constant(p, params.alpha)
    rhs = C * lp_norm(fv, q, h) ** q
    return AprioriReport(lhs, rhs, C, rhs - lhs, lhs <= rhs * (1 + 1e-12))


__all__ = [
    "SolverError", "SolverOptions", "SolverStats", "StateField", "EllipticProblem",
    "cell_gradient", "gradient_transpose", "lp_norm", "wp_norm", "u_norm", "apply_operator",
    "assemble_residual", "energy", "solve_state", "apriori_constant", "apriori_check", "AprioriReport",
]
