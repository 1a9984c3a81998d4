import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moscolab.controls import (ClassParams, ControlField, InfeasibleControlError, check_class,
                               control_from_dict, divergence_offsets, identity_control, make_diagonal_control,
                               profile_bounds, project_box, row_divergence)
from moscolab.geometry import GridSpec

G = GridSpec(17, 17)


def sym_control(grid, a11, a12, a22):
    e = np.zeros((*grid.cell_shape, 2, 2))
    e[..., 0, 0], e[..., 0, 1], e[..., 1, 0], e[..., 1, 1] = a11, a12, a12, a22
    return ControlField(grid, "symmetric", e)


def test_params_validation():
    assert ClassParams(3.0, 1.0, 2.0).q == 1.5
    for bad in [(1.5, 1, 2), (5, 1, 2), (2, 0, 1), (2, 2, 1)]:
        with pytest.raises(ValueError):
            ClassParams(*bad)
    with pytest.raises(ValueError):
        ClassParams(2, 1, 2, xi1=3.0, xi2=1.0)


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_identity_margins(p):
    rep = check_class(identity_control(G), ClassParams(p, 1.0, 1.0), n_samples=500, seed=1)
    assert rep.ok
    assert rep.growth_margin == 0.0
    # for U = I and alpha = 1 the coercivity gap vanishes identically
    assert abs(rep.coercive_margin) <= 1e-14
    assert rep.monotone_margin >= 0.0


def test_growth_violation_reports_cell():
    U = identity_control(G).entries.copy()
    U[3, 5, 0, 0] = 3.0
    rep = check_class(ControlField(G, "diagonal", U), ClassParams(2.0, 1.0, 2.0))
    assert not rep.growth_ok and not rep.ok
    assert rep.violating_cell == (3, 5)
    assert rep.growth_margin == pytest.approx(-1.0)


def test_indefinite_control_fails_monotonicity():
    U = sym_control(G, 1.0, 1.5, 1.0)       # eigenvalues 2.5 and -0.5
    rep = check_class(U, ClassParams(2.0, 0.5, 2.0), n_samples=2000)
    assert not rep.monotone_ok and not rep.coercive_ok


def test_check_class_deterministic_per_seed():
    U = sym_control(G, 1.5, 0.3, 1.2)
    a = check_class(U, ClassParams(3.0, 0.5, 2.0), 300, seed=7)
    b = check_class(U, ClassParams(3.0, 0.5, 2.0), 300, seed=7)
    assert a.to_dict() == b.to_dict()


def test_project_clamps_and_is_idempotent():
    P = ClassParams(2.0, 1.0, 2.0)
    U = sym_control(G, 3.0, -5.0, 0.5)
    V = project_box(U, P)
    # off-diagonal entries live in [max(-beta, xi1), min(beta, xi2)] and xi1 defaults to 0
    assert np.all(V.a11 == 2.0) and np.all(V.a22 == 1.0) and np.all(V.a12 == 0.0)
    W = project_box(sym_control(G, 1.5, 5.0, 1.5), P)
    assert np.all(W.a12 == 2.0)
    assert project_box(V, P) is V


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_projection_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    P = ClassParams(2.0, 0.5, 2.0)
    g = GridSpec(5, 5)
    U = sym_control(g, *rng.normal(1.0, 2.0, (3, 4, 4)))
    V = sym_control(g, *rng.normal(1.0, 2.0, (3, 4, 4)))
    PU, PV = project_box(U, P), project_box(V, P)
    assert np.linalg.norm(PU.entries - PV.entries) <= np.linalg.norm(U.entries - V.entries) + 1e-12
    assert np.array_equal(project_box(PU, P).entries, PU.entries)


def test_profile_projection_clamps_profiles():
    P = ClassParams(2.0, 1.0, 2.0)
    U = make_diagonal_control(np.full(16, 5.0), np.full(16, 0.1), G, P)
    assert np.all(U.profiles[0] == 2.0) and np.all(U.profiles[1] == 1.0)
    assert np.all(U.a11 == 2.0) and np.all(U.a22 == 1.0)


def test_diagonal_bounds_follow_xi():
    P = ClassParams(2.0, 1.0, 3.0, xi1=1.5, xi2=2.5)
    lo, hi = P.diagonal_bounds(G)
    assert np.all(lo == 1.5) and np.all(hi == 2.5)
    (lo1, hi1), _ = profile_bounds(G, P)
    assert np.all(lo1 == 1.5) and np.all(hi1 == 2.5)


def test_infeasible_offsets_raise():
    P = ClassParams(2.0, 1.0, 1.1)
    with pytest.raises(InfeasibleControlError):
        make_diagonal_control(1.0, 1.0, G, P, div_target=(np.full(G.shape, 10.0), np.zeros(G.shape)))


def test_row_divergence_solenoidal_profiles():
    rng = np.random.default_rng(0)
    U = make_diagonal_control(rng.uniform(1, 2, 16), rng.uniform(1, 2, 16), G, ClassParams(2.0, 1.0, 2.0))
    d1, d2 = row_divergence(U)
    assert np.abs(d1).max() <= 1e-12 and np.abs(d2).max() <= 1e-12


def test_row_divergence_linear_entry():
    cx, _ = G.cell_centers()
    U = sym_control(G, cx, 0.0, 1.0)          # a11 = x1 has divergence 1 in the first row
    d1, d2 = row_divergence(U)
    np.testing.assert_allclose(d1[1:-1, 1:-1], 1.0, atol=1e-12)
    assert np.abs(d2).max() <= 1e-12


def test_divergence_offsets_hit_target():
    rng = np.random.default_rng(4)
    q1, q2 = rng.normal(size=G.shape), rng.normal(size=G.shape)
    P = ClassParams(2.0, 0.1, 50.0)
    U = make_diagonal_control(10.0, 10.0, G, P, div_target=(q1, q2))
    d1, d2 = row_divergence(U)
    np.testing.assert_allclose(d1[1:-1, 1:-1], q1[1:-1, 1:-1], atol=1e-11)
    np.testing.assert_allclose(d2[1:-1, 1:-1], q2[1:-1, 1:-1], atol=1e-11)
    o1, o2 = divergence_offsets(G, q1, q2)
    assert np.all(o1[0] == 0) and np.all(o2[:, 0] == 0)


def test_bytes_round_trip():
    U = sym_control(G, 1.25, -0.5, 1.75)
    V = ControlField.from_bytes(U.to_bytes(), G)
    assert np.array_equal(U.entries, V.entries)
    assert len(U.to_bytes()) == 16 * 16 * 4 * 8


def test_control_validation():
    e = np.zeros((*G.cell_shape, 2, 2))
    e[..., 0, 1] = 1.0
    with pytest.raises(ValueError):
        ControlField(G, "symmetric", e)          # not symmetric
    with pytest.raises(ValueError):
        ControlField(G, "diagonal", np.zeros((3, 3, 2, 2)))


def test_control_from_dict():
    P = ClassParams(2.0, 1.0, 2.0)
    U = control_from_dict({"profile1": 1.5, "profile2": 1.25}, G, P)
    assert U.is_diagonal and np.all(U.a11 == 1.5) and np.all(U.a22 == 1.25)
    assert control_from_dict({}, G, P).entries.tolist() == identity_control(G).entries.tolist()
