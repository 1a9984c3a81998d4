import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from moscolab.geometry import (FamilySpec, GeometryError, GridDomain, GridSpec, distance_transform,
                               ekeland_distance, family_generate, hc_distance, kuratowski_check, rasterize,
                               topological_check)

G129 = GridSpec(129, 129)


def disk(r, c=(0.5, 0.5), grid=G129):
    return rasterize({"shape": "disk", "center": list(c), "radius": r}, grid)


def brute_dt(mask, h):
    """Distance from each node to the nearest node outside, the box exterior counting as outside."""
    padded = np.pad(mask, 1, constant_values=False)
    I, J = np.nonzero(~padded)
    out = np.zeros(mask.shape)
    for i, j in zip(*np.nonzero(mask)):
        out[i, j] = h * np.sqrt(((I - (i + 1)) ** 2 + (J - (j + 1)) ** 2).min())
    return out


def random_mask(rng, n=11, density=0.6):
    m = rng.random((n, n)) < density
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = False
    return m


def test_grid_invariants():
    g = GridSpec(33, 33)
    assert g.h == 1 / 32
    with pytest.raises(GeometryError):
        GridSpec(2, 5)
    with pytest.raises(GeometryError):
        GridSpec(5, 9)   # non-square cells on the unit box


def test_box_interior_measure_counts_cells():
    g = GridSpec(33, 33)
    d = rasterize({"shape": "box_interior", "margin_cells": 1}, g)
    # 31 x 31 nodes inside, hence 30 x 30 complete cells
    assert d.n_nodes == 31 * 31
    assert d.measure == (30 * g.h) ** 2
    assert d.node_measure == (31 * g.h) ** 2


def test_disk_area_within_perimeter_band():
    r, h = 0.3, G129.h
    assert abs(disk(r).measure - math.pi * r * r) <= 4 * r * h


def test_rasterize_rejections():
    with pytest.raises(GeometryError):
        rasterize({}, G129)
    with pytest.raises(GeometryError):
        rasterize(None, G129)
    with pytest.raises(GeometryError):
        rasterize({"shape": "disk", "center": [0.5, 0.5], "radius": 0.5}, G129)
    with pytest.raises(GeometryError):
        GridDomain(GridSpec(5, 5), np.ones((5, 5), bool))


def test_cell_mask_consistency():
    rng = np.random.default_rng(3)
    d = GridDomain(GridSpec(11, 11), random_mask(rng))
    m = d.mask
    expected = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
    assert np.array_equal(d.cell_mask, expected)
    assert d.measure == d.grid.h ** 2 * expected.sum()


@pytest.mark.parametrize("seed", range(5))
def test_distance_transform_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(13, 13)
    d = GridDomain(g, random_mask(rng, 13, 0.75))
    np.testing.assert_allclose(distance_transform(d), brute_dt(d.mask, g.h), rtol=0, atol=1e-14)


def test_distance_transform_analytic_values():
    g = GridSpec(65, 65)
    assert not distance_transform(GridDomain(g, np.zeros(g.shape, bool))).any()
    r = 0.3
    dt = distance_transform(disk(r, grid=g))
    assert abs(dt[32, 32] - r) <= g.h
    half = rasterize({"shape": "rect", "lo": [0.01, 0.01], "hi": [0.5, 0.99]}, g)
    i, j = g.nearest_node((0.25, 0.5))
    assert abs(distance_transform(half)[i, j] - 0.25) <= g.h


def test_distance_transform_lipschitz():
    dt = distance_transform(disk(0.35))
    h = G129.h
    assert np.abs(np.diff(dt, axis=0)).max() <= h * math.sqrt(2) + 1e-15
    assert np.abs(np.diff(dt, axis=1)).max() <= h * math.sqrt(2) + 1e-15


def test_hc_distance_examples():
    h = G129.h
    a = disk(0.3)
    assert hc_distance(a, a) == 0.0
    assert abs(hc_distance(a, disk(0.2)) - 0.1) <= 2 * h
    assert abs(hc_distance(a, disk(0.3, (0.53, 0.5))) - 0.03) <= 2 * h
    with pytest.raises(GeometryError):
        hc_distance(a, disk(0.3, grid=GridSpec(65, 65)))


def test_ekeland_distance_examples():
    h = G129.h
    a = rasterize({"shape": "rect", "lo": [0.1, 0.1], "hi": [0.3, 0.2]}, G129)    # area 0.02
    b = rasterize({"shape": "rect", "lo": [0.5, 0.5], "hi": [0.8, 0.6]}, G129)    # area 0.03
    assert abs(ekeland_distance(a, b) - 0.05) <= 2 * h * (0.6 + 0.8)
    d = ekeland_distance(disk(0.3), disk(0.2))
    assert abs(d - math.pi * 0.05) <= 2 * h * 2 * math.pi * 0.5
    assert ekeland_distance(a, a) == 0.0


masks = st.integers(0, 2 ** 32 - 1).map(lambda s: random_mask(np.random.default_rng(s), 9, 0.5))


@settings(max_examples=100, deadline=None)
@given(masks, masks, masks)
def test_metric_axioms(ma, mb, mc):
    g = GridSpec(9, 9)
    a, b, c = (GridDomain(g, m) for m in (ma, mb, mc))
    for dist in (hc_distance, ekeland_distance):
        assert dist(a, b) == dist(b, a)
        assert dist(a, b) >= 0
        assert (dist(a, b) == 0) == (a == b) if dist is hc_distance else dist(a, a) == 0
        assert dist(a, c) <= dist(a, b) + dist(b, c) + 1e-12


def test_family_dumbbell():
    fam = family_generate(FamilySpec("dumbbell", (0.2, 0.1, 0.05)), G129)
    assert len(fam.domains) == 3
    _, ncomp = ndimage.label(fam.limit.mask)
    assert ncomp == 2
    ek = [ekeland_distance(d, fam.limit) for d in fam.domains]
    assert all(b < a for a, b in zip(ek, ek[1:]))


def test_family_shrinking_hole_hc():
    eps = (0.2, 0.1, 0.05)
    fam = family_generate(FamilySpec("shrinking_hole", eps), G129)
    for e, d in zip(eps, fam.domains):
        assert abs(hc_distance(d, fam.limit) - e) <= 2 * G129.h


def test_family_oscillating_crack_hc():
    eps = (0.1, 0.05, 0.025)
    fam = family_generate(FamilySpec("oscillating_crack", eps), G129)
    for e, d in zip(eps, fam.domains):
        assert hc_distance(d, fam.limit) <= e + 2 * G129.h


def test_family_polygon_disk():
    eps = (0.05, 0.025)
    fam = family_generate(FamilySpec("polygon_disk", eps), G129)
    for e, d in zip(eps, fam.domains):
        assert hc_distance(d, fam.limit) <= e + 2 * G129.h
        assert fam.limit.contains(d)


def test_family_rejections():
    with pytest.raises(GeometryError, match="eps=0.01"):
        family_generate(FamilySpec("shrinking_hole", (0.1, 0.01)), G129)
    with pytest.raises(GeometryError):
        FamilySpec("shrinking_hole", (0.1, 0.2))
    with pytest.raises(GeometryError):
        FamilySpec("teapot", (0.1,))


def test_kuratowski_constant_sequence():
    d = disk(0.3)
    rep = kuratowski_check([d, d, d], d, tol=0.0)
    assert rep.k1_ok and rep.k2_ok
    with pytest.raises(GeometryError):
        kuratowski_check([], d, 0.0)


def test_kuratowski_shrinking_hole():
    eps = (0.2, 0.1, 0.05)
    h = G129.h
    fam = family_generate(FamilySpec("shrinking_hole", eps), G129)
    rep = kuratowski_check(fam.domains, fam.limit, tol=2 * h)
    # limit complement is reached by every member; the hole's far side is eps away from the centre
    assert rep.k1_ok
    assert all(abs(k2 - e) <= 2 * h for k2, e in zip(rep.k2_defects, eps))
    assert not rep.k2_ok
    assert kuratowski_check(fam.domains, fam.limit, tol=eps[-2] + 2 * h).k2_ok
    assert kuratowski_check(fam.domains, fam.limit, tol=eps[-1] + 2 * h, tail=1).k2_ok


def test_kuratowski_dumbbell_fails():
    fam = family_generate(FamilySpec("dumbbell", (0.2, 0.1, 0.05)), G129)
    rep = kuratowski_check(fam.domains, fam.limit, tol=2 * G129.h)
    assert not rep.k2_ok
    assert not rep.k1_ok


def test_topological_check_shrinking_hole():
    eps = (0.2, 0.1, 0.05)
    fam = family_generate(FamilySpec("shrinking_hole", eps), G129)
    X, Y = G129.coords()
    k0 = np.hypot(X - 0.5, Y - 0.5) < 0.01
    rep = topological_check(fam.domains, fam.limit, tol=0.06, k0=k0, tail=1)
    assert rep.d2_ok and rep.d1_ok
    assert rep.d1_defects[0] > 0 and rep.d1_defects[-1] == 0
    assert not topological_check(fam.domains, fam.limit, tol=0.03, tail=1).d1_ok
