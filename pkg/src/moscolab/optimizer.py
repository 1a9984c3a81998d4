"""Tracking-type optimal control over solenoidal diagonal coefficient fields.

The control is parametrized by two axis profiles: ``a11`` varies along x2 only
(one value per cell row) and ``a22`` along x1 only (one value per cell column),
so each row of U is divergence-free by construction (or has the prescribed
divergence when fixed offsets are present).
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .controls import ClassParams, ControlField, divergence_offsets, make_diagonal_control, profile_bounds
from .geometry import GridDomain
from .hammerstein import HammersteinOptions, HammersteinSolution, KernelSpec, apply_B, solve_hammerstein
from .state import (EllipticProblem, SolverError, SolverOptions, StateField, _matrices, _weighted_operator,
                    cell_gradient, solve_state)


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 200
    tol: float = 1e-8
    gradient: str = "auto"          # auto | fd | adjoint
    fd_step: float = 1e-5
    armijo: float = 1e-4
    min_step: float = 1e-12
    threads: int = 1
    initial: tuple | None = None    # (profile1, profile2); defaults to the box midpoint
    state_tol: float = 1e-11
    hammerstein_tol: float = 1e-11


@dataclass(frozen=True, eq=False)
class OcpProblem:
    domain: GridDomain
    params: ClassParams
    f: np.ndarray
    g: np.ndarray
    z_d: np.ndarray
    kernel: KernelSpec
    div_target: tuple | None = None
    options: OptimizerOptions = OptimizerOptions()

    def __post_init__(self):
        shape = self.domain.grid.shape
        for name in ("f", "g", "z_d"):
            v = np.broadcast_to(np.asarray(getattr(self, name), float), shape).copy()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def p(self) -> float:
        return self.params.p

    @property
    def grid(self):
        return self.domain.grid

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        off = divergence_offsets(self.grid, *self.div_target) if self.div_target is not None else None
        (lo1, hi1), (lo2, hi2) = profile_bounds(self.grid, self.params, off)
        return np.concatenate([lo1, lo2]), np.concatenate([hi1, hi2])

    def active(self) -> np.ndarray:
        """Parameters whose profile line meets a domain node (others cannot affect the cost)."""
        m = self.domain.mask
        return np.concatenate([m[:, :-1].any(axis=0), m[:-1, :].any(axis=1)])

    def initial_point(self) -> np.ndarray:
        lo, hi = self.bounds()
        if self.options.initial is not None:
            x = np.concatenate([np.ravel(self.options.initial[0]), np.ravel(self.options.initial[1])])
            return np.clip(np.asarray(x, float), lo, hi)
        return 0.5 * (lo + hi)

    def split(self, x) -> tuple[np.ndarray, np.ndarray]:
        n1 = self.grid.ny - 1
        return x[:n1], x[n1:]


@dataclass(eq=False)
class Triplet:
    U: ControlField
    y: StateField
    z: HammersteinSolution
    value: float


@dataclass(eq=False)
class OcpResult:
    U_opt: ControlField
    y_opt: StateField
    z_opt: HammersteinSolution
    value: float
    x_opt: np.ndarray
    iterates: list[float] = field(default_factory=list)
    kkt_residual: float = float("nan")
    stalled: bool = False
    converged: bool = False
    n_evals: int = 0

    def to_dict(self) -> dict:
        return {"value": self.value, "kkt_residual": self.kkt_residual, "iterates": list(self.iterates),
                "stalled": self.stalled, "converged": self.converged, "n_evals": self.n_evals,
                "parameters": self.x_opt.tolist()}


def eval_cost(z, z_d, p: float, domain: GridDomain) -> float:
    zv = z.z if isinstance(z, HammersteinSolution) else np.asarray(z, float)
    h = domain.grid.h
    return float(h * h * np.sum(np.abs(np.where(domain.mask, zv - z_d, 0.0)) ** p))


class ReducedObjective:
    """x -> cost of the composed maps U(x) -> y(U) -> z(y), with a per-point cache."""

    def __init__(self, prob: OcpProblem):
        self.prob = prob
        self.cache: dict[bytes, Triplet] = {}
        self.n_evals = 0

    def triplet(self, x) -> Triplet:
        x = np.ascontiguousarray(x, dtype=float)
        key = x.tobytes()
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        prob = self.prob
        o = prob.options
        try:
            U = make_diagonal_control(*prob.split(x), prob.grid, prob.params, prob.div_target)
            y = solve_state(EllipticProblem(U, prob.f, prob.domain, prob.params, SolverOptions(tol=o.state_tol)))
            z = solve_hammerstein(y, prob.g, prob.kernel, prob.p, prob.domain,
                                  HammersteinOptions(tol=o.hammerstein_tol), check_uniqueness=False)
        except SolverError as e:
            raise SolverError(f"{e} (parameters {x.tolist()})", e.last_residual) from e
        t = Triplet(U, y, z, eval_cost(z, prob.z_d, prob.p, prob.domain))
        self.cache[key] = t
        self.n_evals += 1
        return t

    def __call__(self, x) -> float:
        return self.triplet(x).value


def reduced_objective(x, prob: OcpProblem) -> tuple[float, Triplet]:
    t = ReducedObjective(prob).triplet(x)
    return t.value, t


def fd_gradient(x, prob: OcpProblem, step: float | None = None, objective: ReducedObjective | None = None,
                threads: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences on active coordinates; one-sided (flagged) next to the bounds."""
    J = objective or ReducedObjective(prob)
    h = prob.options.fd_step if step is None else step
    x = np.asarray(x, float)
    lo, hi = prob.bounds()
    act = prob.active()
    one_sided = np.zeros(len(x), dtype=bool)
    jobs = []
    for k in np.flatnonzero(act):
        up, dn = x.copy(), x.copy()
        if x[k] + h <= hi[k] and x[k] - h >= lo[k]:
            up[k] += h
            dn[k] -= h
            jobs.append((k, up, dn, 2 * h))
        elif x[k] + h <= hi[k]:
            up[k] += h
            one_sided[k] = True
            jobs.append((k, up, x.copy(), h))
        else:
            dn[k] -= h
            one_sided[k] = True
            jobs.append((k, x.copy(), dn, h))

    def diff(job, obj=J):
        k, up, dn, w = job
        return (obj(up) - obj(dn)) / w

    n = threads if threads is not None else prob.options.threads
    if n > 1:
        # workers use private caches; results come back in coordinate order
        with ThreadPoolExecutor(max_workers=n) as ex:
            vals = list(ex.map(lambda job: diff(job, ReducedObjective(prob)), jobs))
    else:
        vals = [diff(job) for job in jobs]
    grad = np.zeros(len(x))
    for (k, *_), v in zip(jobs, vals):
        grad[k] = v
    return grad, one_sided


def adjoint_gradient_p2(x, prob: OcpProblem, objective: ReducedObjective | None = None) -> np.ndarray:
    """Exact gradient of the discrete reduced cost for p = 2 via two adjoint solves."""
    if prob.p != 2:
        raise NotImplementedError("adjoint gradient is only available for p = 2")
    J = objective or ReducedObjective(prob)
    t = J.triplet(x)
    dom, k = prob.domain, prob.kernel
    m = dom.mask
    h = dom.grid.h
    _, _, free = _matrices(dom)
    n = len(free)

    def scatter(v):
        out = np.zeros(dom.grid.shape)
        out.ravel()[free] = v
        return out

    # cost -> z:  (I + B) mu = dJ/dz,  dJ/dy = -B mu
    rz = np.where(m, 2.0 * h * h * (t.z.z - prob.z_d), 0.0).ravel()[free]
    IB = spla.LinearOperator((n, n), matvec=lambda v: v + apply_B(k, scatter(v), dom).ravel()[free], dtype=float)
    mu, info = spla.cg(IB, rz, rtol=1e-14, atol=0.0, maxiter=10 * n + 100)
    if info != 0:
        mu = spla.gmres(IB, rz, rtol=1e-14, atol=0.0)[0]
    ry = -apply_B(k, scatter(mu), dom).ravel()[free]
    # z -> y:  A lam = dJ/dy with A = h^2 (D^T U D + I)
    U = t.U
    A = _weighted_operator(dom, U.a11, 0.0, 0.0, U.a22, 1.0)
    lam = scatter(spla.spsolve(A.tocsc(), ry))
    l1, l2 = cell_gradient(lam, h)
    y1, y2 = cell_gradient(t.y.values, h)
    g11 = -h * h * l1 * y1
    g22 = -h * h * l2 * y2
    return np.concatenate([g11.sum(axis=0), g22.sum(axis=1)])


def _gradient(x, prob, J):
    mode = prob.options.gradient
    if mode == "adjoint" or (mode == "auto" and prob.p == 2):
        return adjoint_gradient_p2(x, prob, J)
    return fd_gradient(x, prob, objective=J)[0]


def _result(t: Triplet, x, J: ReducedObjective, **kw) -> OcpResult:
    return OcpResult(t.U, t.y, t.z, t.value, np.array(x, float), n_evals=J.n_evals, **kw)


def optimize(prob: OcpProblem) -> OcpResult:
    """Projected gradient descent with Armijo backtracking and Barzilai-Borwein trial steps."""
    o = prob.options
    lo, hi = prob.bounds()
    if np.any(lo > hi):
        raise ValueError("empty feasible box")
    proj = lambda v: np.clip(v, lo, hi)
    J = ReducedObjective(prob)
    x = proj(prob.initial_point())
    fx = J(x)
    iterates = [fx]
    kkt = float("nan")
    stalled = converged = False
    x_prev = g_prev = None
    for _ in range(o.max_iter):
        g = _gradient(x, prob, J)
        kkt = float(np.max(np.abs(x - proj(x - g)), initial=0.0))
        if kkt <= o.tol:
            converged = True
            break
        if x_prev is not None:
            s, yv = x - x_prev, g - g_prev
            sy = float(s @ yv)
            t = float(s @ s) / sy if sy > 0 else 1.0 / max(float(np.max(np.abs(g))), 1e-300)
        else:
            t = 1.0 / max(float(np.max(np.abs(g))), 1e-300)
        while t >= o.min_step:
            xt = proj(x - t * g)
            ft = J(xt)
            if ft <= fx + o.armijo * float(g @ (xt - x)) and ft <= fx:
                break
            t *= 0.5
        else:
            stalled = True
            break
        x_prev, g_prev = x, g
        x, fx = xt, ft
        iterates.append(fx)
        if np.array_equal(x, x_prev):
            converged = True
            break
    else:
        g = _gradient(x, prob, J)
        kkt = float(np.max(np.abs(x - proj(x - g)), initial=0.0))
        converged = kkt <= o.tol
    return _result(J.triplet(x), x, J, iterates=iterates, kkt_residual=kkt, stalled=stalled, converged=converged)


def brute_force_small(prob: OcpProblem, resolution: int) -> OcpResult:
    """Exhaustive tensor-grid search over the active parameters (inactive ones stay at the start point)."""
    act = np.flatnonzero(prob.active())
    if len(act) > 3:
        raise ValueError(f"brute force supports at most 3 active parameters, got {len(act)}")
    if not 1 <= resolution <= 64:
        raise ValueError("resolution must be in [1, 64]")
    lo, hi = prob.bounds()
    x0 = prob.initial_point()
    axes = [np.linspace(lo[k], hi[k], resolution) for k in act]
    J = ReducedObjective(prob)
    best_x, best_v = x0, float("inf")
    values = []
    for pt in itertools.product(*axes):
        x = x0.copy()
        x[act] = pt
        v = J(x)
        values.append(v)
        if v < best_v:
            best_x, best_v = x, v
    return _result(J.triplet(best_x), best_x, J, iterates=values, converged=True)


__all__ = ["OptimizerOptions", "OcpProblem", "OcpResult", "ReducedObjective", "eval_cost", "reduced_objective",
           "fd_gradient", "adjoint_gradient_p2", "optimize", "brute_force_small"]
