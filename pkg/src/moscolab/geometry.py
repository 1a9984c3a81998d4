"""Rasterized domains inside the hold-all box, perturbation families and set metrics.

Nodes are indexed ``[i, j]`` with ``x1 = x0 + i*h`` and ``x2 = y0 + j*h``; cell
``(i, j)`` has corners ``(i, j), (i+1, j), (i, j+1), (i+1, j+1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

FAMILY_KINDS = ("dumbbell", "oscillating_crack", "shrinking_hole", "polygon_disk")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise GeometryError(f"grid needs at least 3 nodes per axis, got {self.nx}x{self.ny}")
        x0, y0, x1, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise GeometryError(f"degenerate box {self.box}")
        hy = (y1 - y0) / (self.ny - 1)
        if not math.isclose(self.h, hy, rel_tol=1e-12):
            raise GeometryError(f"cells must be square: hx={self.h}, hy={hy}")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))

    @property
    def h(self) -> float:
        return (self.box[2] - self.box[0]) / (self.nx - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cell_shape(self) -> tuple[int, int]:
        return (self.nx - 1, self.ny - 1)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.box[0] + self.h * np.arange(self.nx)
        y = self.box[1] + self.h * np.arange(self.ny)
        return np.meshgrid(x, y, indexing="ij")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.box[0] + self.h * (np.arange(self.nx - 1) + 0.5)
        y = self.box[1] + self.h * (np.arange(self.ny - 1) + 0.5)
        return np.meshgrid(x, y, indexing="ij")

    def nearest_node(self, point: Sequence[float]) -> tuple[int, int]:
        i = int(round((point[0] - self.box[0]) / self.h))
        j = int(round((point[1] - self.box[1]) / self.h))
        return min(max(i, 0), self.nx - 1), min(max(j, 0), self.ny - 1)

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "box": list(self.box)}


def _frame(shape) -> np.ndarray:
    frame = np.zeros(shape, dtype=bool)
    frame[0, :] = frame[-1, :] = True
    frame[:, 0] = frame[:, -1] = True
    return frame


@dataclass(frozen=True, eq=False)
class GridDomain:
    """Open subset of the hold-all box sampled at grid nodes."""

    grid: GridSpec
    mask: np.ndarray
    name: str = ""
    cell_mask: np.ndarray = field(init=False, repr=False)
    measure: float = field(init=False)

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.shape != self.grid.shape:
            raise GeometryError(f"mask shape {mask.shape} does not match grid {self.grid.shape}")
        if np.any(mask & _frame(mask.shape)):
            raise GeometryError("domain touches the boundary of the hold-all box (need closure inside D)")
        mask.setflags(write=False)
        cells = mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]
        cells.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "cell_mask", cells)
        object.__setattr__(self, "measure", self.grid.h ** 2 * int(cells.sum()))

    @property
    def node_measure(self) -> float:
        """h^2 times the number of nodes inside; the quadrature weight of nodal sums."""
        return self.grid.h ** 2 * int(self.mask.sum())

    @property
    def n_nodes(self) -> int:
        return int(self.mask.sum())

    def contains(self, other: "GridDomain") -> bool:
        _check_same_grid(self, other)
        return bool(np.all(self.mask | ~other.mask))

    def __eq__(self, other):
        if not isinstance(other, GridDomain):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.mask, other.mask)

    __hash__ = None


# ---------------------------------------------------------------------------
# shape descriptions
# ---------------------------------------------------------------------------

def _point_segment(q: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = np.maximum(np.einsum("...i,...i->...", ab, ab), 1e-300)
    t = np.clip(np.einsum("...i,...i->...", q - a, ab) / denom, 0.0, 1.0)
    return np.linalg.norm(q - (a + t[..., None] * ab), axis=-1)


def _seg_distance(px: np.ndarray, py: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Euclidean distance from points to a polyline."""
    q = np.column_stack([px.ravel(), py.ravel()])
    if len(pts) == 1:
        return np.linalg.norm(q - pts[0], axis=1).reshape(px.shape)
    if len(pts) <= 64:
        d = _point_segment(q[:, None, :], pts[None, :-1], pts[None, 1:])
        return d.min(axis=1).reshape(px.shape)
    # densely sampled curves: the closest segment touches the nearest vertex
    _, m = cKDTree(pts).query(q)
    lo = np.clip(m - 1, 0, len(pts) - 2)
    hi = np.clip(m, 0, len(pts) - 2)
    d = np.minimum(_point_segment(q, pts[lo], pts[lo + 1]), _point_segment(q, pts[hi], pts[hi + 1]))
    return d.reshape(px.shape)


def _shape_mask(desc: dict, grid: GridSpec, closed: bool) -> np.ndarray:
    kind = desc.get("shape")
    X, Y = grid.coords()
    if kind == "disk":
        cx, cy = desc["center"]
        d = np.hypot(X - cx, Y - cy)
        return d <= desc["radius"] if closed else d < desc["radius"]
    if kind == "rect":
        (ax, ay), (bx, by) = desc["lo"], desc["hi"]
        if closed:
            return (X >= ax) & (X <= bx) & (Y >= ay) & (Y <= by)
        return (X > ax) & (X < bx) & (Y > ay) & (Y < by)
    if kind == "box_interior":
        m = int(desc.get("margin_cells", 1))
        if m < 1:
            raise GeometryError("box_interior needs margin_cells >= 1")
        out = np.zeros(grid.shape, dtype=bool)
        out[m:grid.nx - m, m:grid.ny - m] = True
        return out
    if kind == "polygon":
        v = np.asarray(desc["vertices"], dtype=float)
        inside = np.zeros(grid.shape, dtype=bool)
        for k in range(len(v)):
            (x1, y1), (x2, y2) = v[k], v[(k + 1) % len(v)]
            cond = (y1 > Y) != (y2 > Y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (Y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= cond & (X < xint)
        edge = _seg_distance(X, Y, np.vstack([v, v[:1]])) <= 1e-12
        return (inside | edge) if closed else (inside & ~edge)
    if kind == "point":
        out = np.zeros(grid.shape, dtype=bool)
        out[grid.nearest_node(desc["at"])] = True
        return out
    if kind == "channel":
        pts = np.asarray(desc["points"], dtype=float)
        w = desc.get("halfwidth")
        w = 0.5 * grid.h if w is None else float(w)
        d = _seg_distance(X, Y, pts)
        return d <= w if closed else d < w
    if kind == "union":
        parts = desc.get("parts") or []
        if not parts:
            raise GeometryError("union needs at least one part")
        out = np.zeros(grid.shape, dtype=bool)
        for part in parts:
            out |= _shape_mask(part, grid, closed)
        return out
    if kind == "difference":
        out = _shape_mask(desc["base"], grid, closed)
        for part in desc.get("remove", []):
            out &= ~_shape_mask(part, grid, not closed)
        return out
    raise GeometryError(f"unknown shape {kind!r}")


def _bbox(desc: dict, grid: GridSpec) -> tuple[float, float, float, float]:
    kind = desc.get("shape")
    if kind == "disk":
        (cx, cy), r = desc["center"], desc["radius"]
        return cx - r, cy - r, cx + r, cy + r
    if kind == "rect":
        return (*desc["lo"], *desc["hi"])
    if kind == "box_interior":
        m = int(desc.get("margin_cells", 1)) * grid.h
        x0, y0, x1, y1 = grid.box
        return x0 + m, y0 + m, x1 - m, y1 - m
    if kind in ("polygon", "channel"):
        v = np.asarray(desc.get("vertices", desc.get("points")), dtype=float)
        w = desc.get("halfwidth") or 0.0
        return v[:, 0].min() - w, v[:, 1].min() - w, v[:, 0].max() + w, v[:, 1].max() + w
    if kind == "point":
        x, y = desc["at"]
        return x, y, x, y
    if kind == "union":
        boxes = np.array([_bbox(p, grid) for p in desc["parts"]])
        return boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max()
    if kind == "difference":
        return _bbox(desc["base"], grid)
    raise GeometryError(f"unknown shape {kind!r}")


def rasterize(desc: dict | None, grid: GridSpec, name: str = "") -> GridDomain:
    """Sample an open-set description at the grid nodes."""
    if not desc:
        raise GeometryError("empty domain description")
    x0, y0, x1, y1 = _bbox(desc, grid)
    bx0, by0, bx1, by1 = grid.box
    if not (x0 > bx0 and y0 > by0 and x1 < bx1 and y1 < by1):
        raise GeometryError(
            f"shape {desc.get('shape')!r} with bounding box {(x0, y0, x1, y1)} "
            f"is not compactly contained in the box {grid.box}")
    return GridDomain(grid, _shape_mask(desc, grid, closed=False), name=name or desc.get("shape", ""))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _check_same_grid(a: GridDomain, b: GridDomain):
    if a.grid != b.grid:
        raise GeometryError(f"grid mismatch: {a.grid} vs {b.grid}")


def _edt_to_complement(mask: np.ndarray, h: float) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=False)
    if not padded.any():
        return np.zeros(mask.shape)
    return ndimage.distance_transform_edt(padded, sampling=h)[1:-1, 1:-1]


def distance_transform(d: GridDomain) -> np.ndarray:
    """Exact Euclidean distance from every node to the nearest node outside the domain.

    The box exterior counts as complement, so a frame of outside nodes is padded on.
    """
    return _edt_to_complement(d.mask, d.grid.h)


def hc_distance(a: GridDomain, b: GridDomain) -> float:
    """Hausdorff-complementary distance: sup |d(x, A^c) - d(x, B^c)| over grid nodes."""
    _check_same_grid(a, b)
    if np.array_equal(a.mask, b.mask):
        return 0.0
    return float(np.max(np.abs(distance_transform(a) - distance_transform(b))))


def ekeland_distance(a: GridDomain, b: GridDomain) -> float:
    """Measure of the symmetric difference of the two cell masks."""
    _check_same_grid(a, b)
    return a.grid.h ** 2 * int(np.count_nonzero(a.cell_mask != b.cell_mask))


# ---------------------------------------------------------------------------
# perturbation families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FamilySpec:
    kind: str
    eps_list: tuple[float, ...]
    parameters: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise GeometryError(f"unknown family kind {self.kind!r}; expected one of {FAMILY_KINDS}")
        eps = tuple(float(e) for e in self.eps_list)
        if not eps:
            raise GeometryError("eps_list is empty")
        if any(e <= 0 for e in eps):
            raise GeometryError(f"eps_list must be positive: {eps}")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise GeometryError(f"eps_list must be strictly decreasing: {eps}")
        object.__setattr__(self, "eps_list", eps)


@dataclass(frozen=True)
class Family:
    spec: FamilySpec
    domains: tuple[GridDomain, ...]
    limit: GridDomain

    @property
    def eps(self) -> tuple[float, ...]:
        return self.spec.eps_list


_DEFAULTS = {
    "dumbbell": {"centers": [[0.3, 0.5], [0.7, 0.5]], "radius": 0.15, "hole_ratio": 0.5},
    "shrinking_hole": {"center": [0.5, 0.5], "radius": 0.4},
    "oscillating_crack": {"lo": [0.15, 0.15], "hi": [0.85, 0.85], "crack_x": [0.3, 0.7],
                          "crack_y": 0.5, "waves": 3, "samples": 4000},
    "polygon_disk": {"center": [0.5, 0.5], "radius": 0.4},
}


def _dumbbell(p: dict, eps: float | None) -> dict:
    (c1, c2), r = p["centers"], p["radius"]
    disks = [{"shape": "disk", "center": c1, "radius": r}, {"shape": "disk", "center": c2, "radius": r}]
    if eps is None:
        return {"shape": "union", "parts": disks}
    cy = 0.5 * (c1[1] + c2[1])
    handle = {"shape": "rect", "lo": [c1[0], cy - eps / 2], "hi": [c2[0], cy + eps / 2]}
    holes = [{"shape": "disk", "center": c, "radius": p["hole_ratio"] * eps} for c in (c1, c2)]
    return {"shape": "difference", "base": {"shape": "union", "parts": disks + [handle]}, "remove": holes}


def _shrinking_hole(p: dict, eps: float | None) -> dict:
    disk = {"shape": "disk", "center": p["center"], "radius": p["radius"]}
    # the Hc-limit of disks with shrinking concentric holes is the punctured disk
    hole = {"shape": "point", "at": p["center"]} if eps is None else \
        {"shape": "disk", "center": p["center"], "radius": eps}
    return {"shape": "difference", "base": disk, "remove": [hole]}


def _oscillating_crack(p: dict, eps: float | None, h: float) -> dict:
    (a, b), c = p["crack_x"], p["crack_y"]
    x = np.linspace(a, b, int(p["samples"]))
    amp = 0.0 if eps is None else eps
    y = c + amp * np.sin(2 * np.pi * p["waves"] * (x - a) / (b - a))
    crack = {"shape": "channel", "points": np.column_stack([x, y]).tolist(), "halfwidth": 0.5 * h}
    return {"shape": "difference", "base": {"shape": "rect", "lo": p["lo"], "hi": p["hi"]}, "remove": [crack]}


def _polygon_disk(p: dict, eps: float | None) -> dict:
    (cx, cy), r = p["center"], p["radius"]
    if eps is None:
        return {"shape": "disk", "center": [cx, cy], "radius": r}
    # smallest inscribed regular n-gon whose sagitta is at most eps
    n = max(3, math.ceil(math.pi / math.acos(max(-1.0, 1.0 - eps / r))))
    t = 2 * np.pi * np.arange(n) / n
    return {"shape": "polygon", "vertices": np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)]).tolist()}


def family_description(spec: FamilySpec, eps: float | None, grid: GridSpec) -> dict:
    p = {**_DEFAULTS[spec.kind], **spec.parameters}
    if spec.kind == "dumbbell":
        return _dumbbell(p, eps)
    if spec.kind == "shrinking_hole":
        return _shrinking_hole(p, eps)
    if spec.kind == "oscillating_crack":
        return _oscillating_crack(p, eps, grid.h)
    return _polygon_disk(p, eps)


def family_generate(spec: FamilySpec, grid: GridSpec) -> Family:
    """Rasterize every member of a perturbation family plus its limit set."""
    for eps in spec.eps_list:
        if eps <= 2 * grid.h:
            raise GeometryError(f"eps={eps} is not resolvable on a grid with h={grid.h} (need eps > 2h)")
    domains = tuple(rasterize(family_description(spec, e, grid), grid, name=f"{spec.kind}[eps={e:g}]")
                    for e in spec.eps_list)
    limit = rasterize(family_description(spec, None, grid), grid, name=f"{spec.kind}[limit]")
    return Family(spec, domains, limit)


# ---------------------------------------------------------------------------
# set convergence at grid resolution
# ---------------------------------------------------------------------------

@dataclass
class KuratowskiReport:
    k1_ok: bool
    k2_ok: bool
    k1_defects: list[float]
    k2_defects: list[float]
    tail: list[int]
    tol: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _tail_indices(n: int, tail: int | None) -> list[int]:
    tail = max(1, math.ceil(n / 2)) if tail is None else min(max(tail, 1), n)
    return list(range(n - tail, n))


def kuratowski_check(seq: Sequence[GridDomain], limit: GridDomain, tol: float,
                     tail: int | None = None) -> KuratowskiReport:
    """Kuratowski convergence of the complements, judged on the tail of a finite sequence.

    K1 defect of member k: largest distance from a limit-complement node to the
    complement of member k.  K2 defect: largest distance from a node of the
    complement of member k to the limit complement.  Both are per-member numbers;
    the verdict requires every tail member to be within ``tol``.
    """
    if not seq:
        raise GeometryError("kuratowski_check needs a non-empty sequence")
    dt_lim = distance_transform(limit)
    k1, k2 = [], []
    for d in seq:
        _check_same_grid(d, limit)
        dt = distance_transform(d)
        outside_lim = ~limit.mask
        k1.append(float(dt[outside_lim].max()) if outside_lim.any() else 0.0)
        outside = ~d.mask
        k2.append(float(dt_lim[outside].max()) if outside.any() else 0.0)
    idx = _tail_indices(len(seq), tail)
    slack = 1e-12
    return KuratowskiReport(
        k1_ok=all(k1[i] <= tol + slack for i in idx),
        k2_ok=all(k2[i] <= tol + slack for i in idx),
        k1_defects=k1, k2_defects=k2, tail=idx, tol=tol)


@dataclass
class TopologicalReport:
    d1_ok: bool
    d2_ok: bool
    d1_defects: list[int]
    d2_defects: list[int]
    tail: list[int]
    tol: float


def topological_check(seq: Sequence[GridDomain], limit: GridDomain, tol: float,
                      k0: np.ndarray | None = None, k1: np.ndarray | None = None,
                      tail: int | None = None) -> TopologicalReport:
    """Convergence in the sense of compacts at grid resolution.

    ``k0`` marks exceptional nodes inside the limit (capacity-zero set), ``k1``
    marks a null set the members may still cover.  (D1): limit nodes farther
    than ``tol`` from the limit complement and from ``k0`` lie in the member.
    (D2): member nodes lie within ``tol`` of the limit closure or of ``k1``.
    Defects count offending nodes.
    """
    if not seq:
        raise GeometryError("topological_check needs a non-empty sequence")
    h = limit.grid.h
    k0 = np.zeros(limit.grid.shape, bool) if k0 is None else np.asarray(k0, bool)
    k1 = np.zeros(limit.grid.shape, bool) if k1 is None else np.asarray(k1, bool)
    compact = _edt_to_complement(limit.mask & ~k0, h) > tol
    # distance to the closed set cl(limit) U k1
    target = limit.mask | k1
    near = ndimage.distance_transform_edt(~target, sampling=h) <= tol + h if target.any() \
        else np.zeros(limit.grid.shape, bool)
    d1, d2 = [], []
    for d in seq:
        _check_same_grid(d, limit)
        d1.append(int(np.count_nonzero(compact & ~d.mask)))
        d2.append(int(np.count_nonzero(d.mask & ~near)))
    idx = _tail_indices(len(seq), tail)
    return TopologicalReport(all(d1[i] == 0 for i in idx), all(d2[i] == 0 for i in idx), d1, d2, idx, tol)
