import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from moscolab.controls import ClassParams, ControlField, identity_control, make_diagonal_control
from moscolab.geometry import GridDomain, GridSpec, rasterize
from moscolab.state import (EllipticProblem, SolverError, SolverOptions, StateField, apply_operator,
                            apriori_check, apriori_constant, assemble_residual, energy, solve_state, wp_norm)


def box(n):
    g = GridSpec(n, n)
    return g, rasterize({"shape": "box_interior", "margin_cells": 1}, g)


def random_diag(grid, params, rng):
    return make_diagonal_control(rng.uniform(params.alpha, params.beta, grid.ny - 1),
                                 rng.uniform(params.alpha, params.beta, grid.nx - 1), grid, params)


def random_state(dom, rng, scale=1.0):
    return np.where(dom.mask, scale * rng.normal(size=dom.grid.shape), 0.0)


def bisect(fun, lo, hi):
    """Plain bisection to machine precision, independent of the package."""
    flo = fun(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = fun(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= 1e-17:
            break
    return 0.5 * (lo + hi)


def test_wp_norm_examples():
    g = GridSpec(257, 257)
    assert wp_norm(np.zeros(g.shape), 2.0, g.h) == 0.0
    X, _ = g.coords()
    assert abs(wp_norm(X, 2.0, g.h) - math.sqrt(4 / 3)) <= 2 * g.h
    rng = np.random.default_rng(0)
    y = rng.normal(size=(9, 9))
    assert wp_norm(-2 * y, 2.0, 1 / 8) == 2 * wp_norm(y, 2.0, 1 / 8)
    assert wp_norm(3 * y, 3.0, 1 / 8) == pytest.approx(3 * wp_norm(y, 3.0, 1 / 8), rel=1e-14)
    with pytest.raises(ValueError):
        wp_norm(y, 2.0)


def test_state_field_invariants():
    g, d = box(5)
    with pytest.raises(ValueError):
        StateField(g, d, np.ones(g.shape))
    s = StateField.from_values(d, np.ones(g.shape))
    assert s.values[0, 0] == 0.0 and s.values[2, 2] == 1.0
    with pytest.raises(ValueError):
        s.values[2, 2] = 3.0


def test_residual_zero_data():
    g, d = box(9)
    prob = EllipticProblem(identity_control(g), 0.0, d, ClassParams(3.0, 1.0, 1.0))
    assert not assemble_residual(prob, np.zeros(g.shape)).any()


def test_residual_five_point_stencil():
    g, d = box(5)
    h = g.h
    rng = np.random.default_rng(1)
    y, f = random_state(d, rng), rng.normal(size=g.shape)
    r = assemble_residual(EllipticProblem(identity_control(g), f, d, ClassParams(2.0, 1.0, 1.0)), y)
    expected = np.zeros(g.shape)
    for i in range(1, 4):
        for j in range(1, 4):
            lap = 4 * y[i, j] - y[i + 1, j] - y[i - 1, j] - y[i, j + 1] - y[i, j - 1]
            expected[i, j] = lap + h * h * (y[i, j] - f[i, j])
    np.testing.assert_allclose(r, expected, rtol=0, atol=1e-14)


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_energy_gradient_matches_residual(p):
    g = GridSpec(11, 11)
    d = rasterize({"shape": "disk", "center": [0.5, 0.5], "radius": 0.4}, g)
    rng = np.random.default_rng(2)
    P = ClassParams(p, 0.5, 2.0)
    prob = EllipticProblem(random_diag(g, P, rng), rng.normal(size=g.shape), d, P)
    y = random_state(d, rng)
    r = assemble_residual(prob, y)
    assert energy(prob, np.zeros(g.shape)) == 0.0
    nodes = np.argwhere(d.mask)
    eps = 1e-5
    for i, j in nodes[rng.choice(len(nodes), 20, replace=False)]:
        e = np.zeros(g.shape)
        e[i, j] = eps
        fd = (energy(prob, y + e) - energy(prob, y - e)) / (2 * eps)
        assert abs(fd - r[i, j]) <= 1e-6 * max(abs(r[i, j]), np.abs(r).max())


def test_energy_requires_diagonal():
    g, d = box(5)
    e = np.zeros((4, 4, 2, 2))
    e[..., 0, 0] = e[..., 1, 1] = 1.0
    e[..., 0, 1] = e[..., 1, 0] = 0.2
    prob = EllipticProblem(ControlField(g, "symmetric", e), 1.0, d, ClassParams(2.0, 0.5, 2.0))
    with pytest.raises(NotImplementedError):
        energy(prob, np.zeros(g.shape))


def test_zero_forcing_gives_zero():
    g, d = box(9)
    y = solve_state(EllipticProblem(identity_control(g), 0.0, d, ClassParams(3.0, 1.0, 1.0)))
    assert not y.values.any()


@pytest.mark.parametrize("a11,a22,f", [(1.0, 1.0, 1.0), (1.5, 0.7, 2.5), (2.0, 0.5, -0.3)])
def test_single_node_p4_matches_bisection(a11, a22, f):
    g = GridSpec(3, 3)
    d = GridDomain(g, np.pad(np.ones((1, 1), bool), 1))
    h = g.h
    P = ClassParams(4.0, 0.5, 2.0)
    U = make_diagonal_control([a11, a11], [a22, a22], g, P)
    y = solve_state(EllipticProblem(U, f, d, P, SolverOptions(tol=1e-13)))
    # one interior node: two cells see +c/h and two see -c/h in the x1 and x2 directions
    scalar = lambda c: (2 * a11 + 2 * a22) * abs(c / h) ** 3 * np.sign(c) / h + abs(c) ** 3 * np.sign(c) - f
    c = bisect(scalar, -10.0, 10.0)
    assert abs(y.values[1, 1] - c) <= 1e-10
    if (a11, a22, f) == (1.0, 1.0, 1.0):
        assert abs(c - (1 / 65) ** (1 / 3)) <= 1e-14


def test_single_node_p2_closed_form():
    g = GridSpec(3, 3)
    d = GridDomain(g, np.pad(np.ones((1, 1), bool), 1))
    P = ClassParams(2.0, 0.5, 2.0)
    U = make_diagonal_control([1.5, 1.5], [0.7, 0.7], g, P)
    y = solve_state(EllipticProblem(U, 2.0, d, P, SolverOptions(tol=1e-13)))
    h2 = g.h ** 2
    assert y.values[1, 1] == pytest.approx(h2 * 2.0 / (2 * 1.5 + 2 * 0.7 + h2), rel=1e-13)


def manufactured_error(n, p=2.0):
    g, d = box(n)
    X, Y = g.coords()
    ystar = np.sin(np.pi * X) * np.sin(np.pi * Y)
    f = (2 * np.pi ** 2 + 1) * ystar
    y = solve_state(EllipticProblem(identity_control(g), f, d, ClassParams(p, 1.0, 1.0),
                                    SolverOptions(tol=1e-12)))
    return math.sqrt(g.h ** 2 * np.sum((y.values - ystar * d.mask) ** 2)), y, f


def test_manufactured_second_order():
    e1, _, _ = manufactured_error(33)
    e2, _, _ = manufactured_error(65)
    assert e1 <= 1.0 * (1 / 32) ** 2
    assert 3.5 <= e1 / e2 <= 4.5


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_solver_residual_postcondition(p):
    g = GridSpec(33, 33)
    d = rasterize({"shape": "disk", "center": [0.5, 0.5], "radius": 0.4}, g)
    rng = np.random.default_rng(5)
    P = ClassParams(p, 0.5, 2.0)
    prob = EllipticProblem(random_diag(g, P, rng), rng.uniform(-2, 2, g.shape), d, P)
    y = solve_state(prob)
    assert np.abs(assemble_residual(prob, y)).max() <= y.stats.threshold
    assert y.stats.threshold == pytest.approx(1e-9 * g.h ** 2 * max(1.0, np.abs(prob.f[d.mask]).max()))


@pytest.mark.parametrize("p", [3.0, 4.0])
def test_newton_energy_nonincreasing(p):
    g, d = box(33)
    P = ClassParams(p, 1.0, 1.0)
    prob = EllipticProblem(identity_control(g), 5.0, d, P)
    y = solve_state(prob)
    E = np.array(y.stats.energies)
    assert len(E) >= 2
    assert np.all(np.diff(E) <= 1e-14 * np.abs(E[:-1]))
    assert y.stats.method.startswith("newton")


def test_picard_for_symmetric_control():
    g, d = box(17)
    e = np.zeros((16, 16, 2, 2))
    e[..., 0, 0], e[..., 1, 1] = 1.5, 1.0
    e[..., 0, 1] = e[..., 1, 0] = 0.4
    P = ClassParams(3.0, 0.5, 2.0)
    prob = EllipticProblem(ControlField(g, "symmetric", e), 3.0, d, P)
    y = solve_state(prob)
    assert y.stats.method == "picard"
    assert np.abs(assemble_residual(prob, y)).max() <= y.stats.threshold


def test_nonconvergence_carries_residual():
    g, d = box(17)
    prob = EllipticProblem(identity_control(g), 50.0, d, ClassParams(4.0, 1.0, 1.0), SolverOptions(max_iter=1))
    with pytest.raises(SolverError) as err:
        solve_state(prob)
    assert err.value.last_residual > 0


def test_solver_deterministic():
    g, d = box(33)
    rng = np.random.default_rng(9)
    P = ClassParams(3.0, 0.5, 2.0)
    prob = EllipticProblem(random_diag(g, P, rng), rng.normal(size=g.shape), d, P)
    a, b = solve_state(prob), solve_state(prob)
    assert a.values.tobytes() == b.values.tobytes()


@pytest.mark.parametrize("p", [3.0, 4.0])
def test_uniqueness_from_two_starts(p):
    g, d = box(17)
    rng = np.random.default_rng(11)
    P = ClassParams(p, 0.5, 2.0)
    prob = EllipticProblem(random_diag(g, P, rng), 2.0, d, P, SolverOptions(tol=1e-10))
    a = solve_state(prob)
    b = solve_state(prob, y0=random_state(d, rng, 0.5))
    assert wp_norm(a.values - b.values, p, g.h) <= 10 * 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([2.0, 2.5, 3.0, 4.0]))
def test_discrete_monotonicity_and_coercivity(seed, p):
    rng = np.random.default_rng(seed)
    g, d = box(9)
    P = ClassParams(p, 0.3, 2.0)
    U = random_diag(g, P, rng)
    m = min(P.alpha, 1.0)
    for _ in range(4):
        y1, y2 = random_state(d, rng), random_state(d, rng)
        A1, A2 = apply_operator(U, y1, p, d.mask), apply_operator(U, y2, p, d.mask)
        assert np.sum((A1 - A2) * (y1 - y2)) >= -1e-10
        assert np.sum(A1 * y1) >= m * wp_norm(y1, p, g.h) ** p - 1e-10


def test_apriori_constant_and_examples():
    assert apriori_constant(2.0, 1.0) == pytest.approx(1.0)
    assert apriori_constant(2.0, 0.5) == pytest.approx(4.0)
    g, d = box(9)
    z = solve_state(EllipticProblem(identity_control(g), 0.0, d, ClassParams(3.0, 1.0, 1.0)))
    rep = apriori_check(z, 0.0, ClassParams(3.0, 1.0, 1.0))
    assert rep.ok and rep.lhs == 0.0 and rep.slack == 0.0
    _, y, f = manufactured_error(33, p=3.0)
    rep = apriori_check(y, f, ClassParams(3.0, 1.0, 1.0))
    assert rep.ok and rep.slack > 0


def test_apriori_constant_covers_scalar_bound():
    # with ||f|| = 1 the coercivity bound m t^p <= t caps t at its positive root; C must cover t^p
    for p in (2.0, 3.0, 4.0):
        for alpha in (0.25, 1.0, 3.0):
            m, q = min(alpha, 1.0), p / (p - 1.0)
            t = brentq(lambda s: m * s ** p - s, 1e-9 + m ** (-1 / (p - 1)) / 2, 10.0)
            assert t ** p <= apriori_constant(p, alpha) * (1 + 1e-12)
