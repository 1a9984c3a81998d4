"""Hammerstein equation z + B F(y, z) = g with a Gaussian-plus-ridge kernel B
and F(y, z) = |y|^{p-2} y + |z|^{p-2} z, plus numerical probes of the
monotonicity-type properties this F is known to have.

All pairings and norms are h^2-weighted sums over the domain nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .geometry import GridDomain
from .state import StateField, spow


class HammersteinError(RuntimeError):
    def __init__(self, message: str, last_residual: float = float("nan")):
        super().__init__(message)
        self.last_residual = last_residual


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian_ridge"
    sigma: float = 0.1
    c: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if self.kind not in ("gaussian_ridge", "scaled_identity"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.delta > 0:
            raise ValueError("ridge delta must be positive")
        if self.kind == "gaussian_ridge" and not (self.sigma > 0 and self.c >= 0):
            raise ValueError("gaussian kernel needs sigma > 0 and c >= 0")

    @classmethod
    def scaled_identity(cls, delta: float) -> "KernelSpec":
        return cls("scaled_identity", sigma=1.0, c=0.0, delta=delta)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "c": self.c, "delta": self.delta}


@dataclass(frozen=True)
class HammersteinOptions:
    tol: float = 1e-9
    max_iter: int = 100
    min_step: float = 1e-12
    fixed_point_iter: int = 5000


@dataclass(eq=False)
class HammersteinSolution:
    z: np.ndarray
    residual_norm: float
    newton_iters: int
    uniqueness_gap: float = float("nan")
    method: str = "newton"
    residual_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"residual_norm": self.residual_norm, "newton_iters": self.newton_iters,
                "uniqueness_gap": self.uniqueness_gap, "method": self.method}


def _vals(v) -> np.ndarray:
    return v.values if isinstance(v, StateField) else np.asarray(v, float)


def pairing(u, v, domain: GridDomain) -> float:
    h = domain.grid.h
    return float(h * h * np.sum(np.where(domain.mask, _vals(u) * _vals(v), 0.0)))


def lp_on(v, p: float, domain: GridDomain) -> float:
    h = domain.grid.h
    return float((h * h * np.sum(np.where(domain.mask, np.abs(_vals(v)), 0.0) ** p)) ** (1.0 / p))


def _kernel_factors(k: KernelSpec, domain: GridDomain):
    g = domain.grid
    x = g.box[0] + g.h * np.arange(g.nx)
    y = g.box[1] + g.h * np.arange(g.ny)
    s2 = 2.0 * k.sigma ** 2
    return np.exp(-(x[:, None] - x[None, :]) ** 2 / s2), np.exp(-(y[:, None] - y[None, :]) ** 2 / s2)


def apply_B(k: KernelSpec, w, domain: GridDomain, _factors=None) -> np.ndarray:
    """(Bw)_i = c h^2 sum_j exp(-|x_i - x_j|^2 / 2 sigma^2) w_j + delta w_i over domain nodes."""
    m = domain.mask
    wm = np.where(m, _vals(w), 0.0)
    out = k.delta * wm
    if k.kind == "gaussian_ridge" and k.c != 0.0:
        Kx, Ky = _factors if _factors is not None else _kernel_factors(k, domain)
        out = out + k.c * domain.grid.h ** 2 * np.where(m, Kx @ wm @ Ky.T, 0.0)
    return out


def eval_F(y, z, p: float) -> np.ndarray:
    return spow(_vals(y), p) + spow(_vals(z), p)


def _residual(z, Fy, g, k, domain, p, factors):
    return np.where(domain.mask, z + apply_B(k, Fy + spow(z, p), domain, factors) - g, 0.0)


def _newton(z, Fy, g, k, domain, p, opts, factors, hist):
    m = domain.mask
    idx = np.flatnonzero(m.ravel())
    n = len(idx)

    def scatter(v):
        out = np.zeros(domain.grid.shape)
        out.ravel()[idx] = v
        return out

    R = _residual(z, Fy, g, k, domain, p, factors)
    rn = float(np.max(np.abs(R)))
    hist.append(rn)
    it = 0
    polished = False
    while it < opts.max_iter:
        if rn <= opts.tol:
            if polished:
                return z, rn, it
            polished = True
        it += 1
        D = (p - 1.0) * np.abs(z.ravel()[idx]) ** (p - 2.0) if p != 2 else np.ones(n)

        def matvec(v):
            return v + apply_B(k, scatter(D * v), domain, factors).ravel()[idx]

        J = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
        b = -R.ravel()[idx]
        # inexact Newton: the inner tolerance follows the outer residual
        d, _info = spla.gmres(J, b, rtol=max(1e-12, 1e-2 * min(1e-2, rn)), atol=0.0,
                              restart=min(n, 60), maxiter=200)
        if not np.all(np.isfinite(d)):
            raise HammersteinError("Jacobian solve failed", rn)
        dfull = scatter(d)
        t = 1.0
        r2 = np.linalg.norm(R)
        while t >= opts.min_step:
            trial = z + t * dfull
            Rt = _residual(trial, Fy, g, k, domain, p, factors)
            if np.linalg.norm(Rt) < r2:
                break
            t *= 0.5
        else:
            if rn <= opts.tol:
                return z, rn, it
            raise HammersteinError("Newton damping failed", rn)
        z, R = trial, Rt
        rn = float(np.max(np.abs(R)))
        hist.append(rn)
    if rn <= opts.tol:
        return z, rn, it
    raise HammersteinError(f"Newton did not converge in {opts.max_iter} iterations", rn)


def _fixed_point(z, Fy, g, k, domain, p, opts, factors, hist):
    R = _residual(z, Fy, g, k, domain, p, factors)
    omega = 1.0
    for it in range(opts.fixed_point_iter):
        rn = float(np.max(np.abs(R)))
        hist.append(rn)
        if rn <= opts.tol:
            return z, rn, it
        while omega >= opts.min_step:
            trial = z - omega * R
            Rt = _residual(trial, Fy, g, k, domain, p, factors)
            if np.linalg.norm(Rt) < np.linalg.norm(R):
                z, R = trial, Rt
                omega = min(1.0, 2.0 * omega)
                break
            omega *= 0.5
        else:
            raise HammersteinError("fixed-point damping failed", rn)
    raise HammersteinError("fixed-point iteration did not converge", float(np.max(np.abs(R))))


def _solve_from(z0, Fy, g, k, domain, p, opts, factors):
    hist: list[float] = []
    try:
        z, rn, it = _newton(z0, Fy, g, k, domain, p, opts, factors, hist)
        method = "newton"
    except HammersteinError:
        z, rn, it = _fixed_point(z0, Fy, g, k, domain, p, opts, factors, hist)
        method = "fixed_point"
    return z, rn, it, method, hist


def solve_hammerstein(y, g, k: KernelSpec, p: float, domain: GridDomain | None = None,
                      opts: HammersteinOptions = HammersteinOptions(), z0=None,
                      check_uniqueness: bool = True) -> HammersteinSolution:
    """Solve z + B F(y, z) = g on the domain nodes; zero outside."""
    if domain is None:
        if not isinstance(y, StateField):
            raise ValueError("domain required when y is a raw array")
        domain = y.domain
    m = domain.mask
    g = np.where(m, np.broadcast_to(np.asarray(g, float), domain.grid.shape), 0.0)
    if not np.all(np.isfinite(g)):
        raise ValueError("g must be finite")
    Fy = np.where(m, spow(_vals(y), p), 0.0)
    factors = _kernel_factors(k, domain) if k.kind == "gaussian_ridge" and k.c != 0 else None
    start = np.zeros(domain.grid.shape) if z0 is None else np.where(m, _vals(z0), 0.0)
    z, rn, it, method, hist = _solve_from(start, Fy, g, k, domain, p, opts, factors)
    sol = HammersteinSolution(z, rn, it, method=method, residual_history=hist)
    if check_uniqueness:
        z2, *_ = _solve_from(g.copy(), Fy, g, k, domain, p, opts, factors)
        sol.uniqueness_gap = lp_on(z - z2, p, domain)
    return sol


# ---------------------------------------------------------------------------
# a priori bound and identities
# ---------------------------------------------------------------------------

def lambda_bound(y, g, p: float, domain: GridDomain) -> float:
    """Bound on ||z||_p for any solution, valid for every positive semidefinite B.

    Pairing the equation with F and using <B F, F> >= 0 gives <F, z> <= <F, g>;
    Hoelder then yields P(t) = t^p - a t^{p-1} - b t - a b <= 0 at t = ||z||_p with
    a = ||g||_p and b = ||y||_p^{p-1}.  P has exactly one positive root, found by bisection.
    """
    a = lp_on(g, p, domain)
    b = lp_on(y, p, domain) ** (p - 1.0)
    P = lambda t: t ** p - a * t ** (p - 1.0) - b * t - a * b
    if a == 0.0 and b == 0.0:
        return 0.0
    lo, hi = 0.0, max(1.0, a + b + 1.0)
    while P(hi) <= 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if P(mid) <= 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return hi


@dataclass
class EnergyIdentity:
    lhs: float
    rhs: float
    rel_error: float


def energy_identity(y, z, g, k: KernelSpec, p: float, domain: GridDomain) -> EnergyIdentity:
    """<F, z> + <F, B F> against <F, g> at a solution."""
    F = np.where(domain.mask, eval_F(y, z, p), 0.0)
    lhs = pairing(F, z, domain) + pairing(F, apply_B(k, F, domain), domain)
    rhs = pairing(F, g, domain)
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return EnergyIdentity(lhs, rhs, abs(lhs - rhs) / scale)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class MonotonicityReport:
    p: float
    n_pairs: int
    worst_margin: float
    margins: np.ndarray = field(repr=False)
    ok: bool = True
    usbv: str = "satisfied by monotonicity (C_y = 0)"

    def to_dict(self) -> dict:
        return {"p": self.p, "n_pairs": self.n_pairs, "worst_margin": self.worst_margin,
                "ok": self.ok, "usbv": self.usbv}


def monotonicity_margin(y, z1, z2, p: float, domain: GridDomain) -> float:
    lhs = pairing(eval_F(y, z1, p) - eval_F(y, z2, p), _vals(z1) - _vals(z2), domain)
    return lhs - 2.0 ** (2.0 - p) * lp_on(_vals(z1) - _vals(z2), p, domain) ** p


def monotonicity_probe(y, pairs: int, p: float, domain: GridDomain | None = None, seed: int = 0,
                       scale: float = 1.0, extra=(), tol: float = 1e-10) -> MonotonicityReport:
    """Check <F(y,z1) - F(y,z2), z1 - z2> >= 2^{2-p} ||z1 - z2||_p^p on seeded pairs."""
    if pairs < 1:
        raise ValueError("need at least one pair")
    if domain is None:
        domain = y.domain
    rng = np.random.default_rng(seed)
    m = domain.mask
    margins = []
    for _ in range(pairs):
        z1 = np.where(m, rng.uniform(-scale, scale, m.shape), 0.0)
        z2 = np.where(m, rng.uniform(-scale, scale, m.shape), 0.0)
        margins.append(monotonicity_margin(y, z1, z2, p, domain))
    for z1, z2 in extra:
        margins.append(monotonicity_margin(y, z1, z2, p, domain))
    margins = np.array(margins)
    worst = float(margins.min())
    return MonotonicityReport(p, len(margins), worst, margins, worst >= -tol)


@dataclass
class MAReport:
    pairings: np.ndarray
    limit_pairing: float
    a_ok: bool
    m_status: str
    strong_errors: np.ndarray

    def to_dict(self) -> dict:
        return {"pairings": self.pairings.tolist(), "limit_pairing": self.limit_pairing,
                "a_ok": self.a_ok, "m_status": self.m_status, "strong_errors": self.strong_errors.tolist()}


def ma_property_probe(y_seq, z_seq, y, z, p: float, domain: GridDomain,
                      tol: float = 1e-8, strong_tol: float = 1e-6) -> MAReport:
    """Finite-sequence surrogate of the M- and A-properties of F.

    A: the tail minimum of <F(y_k, z_k), z_k> is at least the limit pairing.
    M: if the tail pairings reach the limit pairing, the last iterate must be strongly close.
    """
    n = len(z_seq)
    if n < 4 or len(y_seq) != n:
        raise ValueError("need matching sequences of length >= 4")
    pk = np.array([pairing(eval_F(yk, zk, p), zk, domain) for yk, zk in zip(y_seq, z_seq)])
    lim = pairing(eval_F(y, z, p), z, domain)
    tail = pk[n - max(1, n // 4):]
    a_ok = bool(tail.min() >= lim - tol)
    errs = np.array([lp_on(_vals(zk) - _vals(z), p, domain) for zk in z_seq])
    if np.max(np.abs(tail - lim)) <= tol:
        m_status = "pass" if errs[-1] <= strong_tol else "fail"
    else:
        m_status = "vacuous"
    return MAReport(pk, lim, a_ok, m_status, errs)


__all__ = [
    "KernelSpec", "HammersteinOptions", "HammersteinSolution", "HammersteinError", "apply_B", "eval_F",
    "solve_hammerstein", "lambda_bound", "energy_identity", "monotonicity_probe", "monotonicity_margin",
    "ma_property_probe", "pairing", "lp_on",
]
