"""Approximate distance functions to polygonal Dirichlet boundaries.

Per-segment ADFs are combined either by R-function normalization of order
``m`` or by a plain product, and boundary data is blended into the domain by
transfinite interpolation. All derivatives come from :mod:`pinn_bc.jets`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import jets
from .jets import Jet


class InconsistentBoundaryData(ValueError):
    """Boundary data disagrees at a vertex shared by two Dirichlet segments."""


@dataclass(frozen=True)
class Segment:
    a: tuple
    b: tuple
    id: int = 0

    def __post_init__(self):
        a = tuple(float(v) for v in self.a)
        b = tuple(float(v) for v in self.b)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if not np.hypot(b[0] - a[0], b[1] - a[1]) > 0.0:
            raise ValueError(f"degenerate segment {a} -> {b}")

    @property
    def length(self) -> float:
        return float(np.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1]))

    @property
    def center(self):
        return (0.5 * (self.a[0] + self.b[0]), 0.5 * (self.a[1] + self.b[1]))

    @property
    def tangent(self):
        L = self.length
        return ((self.b[0] - self.a[0]) / L, (self.b[1] - self.a[1]) / L)

    @property
    def normal(self):
        """Unit normal on the side where :func:`signed_distance` is negative (left of a->b)."""
        tx, ty = self.tangent
        return (-ty, tx)

    def point_at(self, s):
        s = np.asarray(s, dtype=float)
        return np.stack(
            [self.a[0] + s * (self.b[0] - self.a[0]), self.a[1] + s * (self.b[1] - self.a[1])], axis=-1
        )


@dataclass(frozen=True)
class PolygonalBoundary:
    """Ordered segments with a Dirichlet mask and per-segment boundary data.

    ``data[i]`` is a jet-compatible callable ``g(x, y)``; it is evaluated at the
    (clamped) orthogonal projection onto segment ``i``.
    """

    segments: tuple
    dirichlet_mask: tuple
    data: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "dirichlet_mask", tuple(bool(m) for m in self.dirichlet_mask))
        if len(self.dirichlet_mask) != len(self.segments):
            raise ValueError("dirichlet_mask must have one entry per segment")
        if not any(self.dirichlet_mask):
            raise ValueError("at least one segment must carry a Dirichlet condition")
        data = tuple(self.data) if self.data else (None,) * len(self.segments)
        if len(data) != len(self.segments):
            raise ValueError("data must have one entry per segment")
        object.__setattr__(self, "data", data)

    def with_data(self, g) -> "PolygonalBoundary":
        """Attach the same global datum ``g(x, y)`` to every segment."""
        return PolygonalBoundary(self.segments, self.dirichlet_mask, (g,) * len(self.segments))

    def with_mask(self, mask) -> "PolygonalBoundary":
        return PolygonalBoundary(self.segments, mask, self.data)

    @property
    def dirichlet_segments(self):
        return [s for s, m in zip(self.segments, self.dirichlet_mask) if m]

    @property
    def dirichlet_data(self):
        return [g for g, m in zip(self.data, self.dirichlet_mask) if m]

    @property
    def dirichlet_vertices(self) -> np.ndarray:
        pts = []
        for s in self.dirichlet_segments:
            pts.extend([s.a, s.b])
        return np.unique(np.round(np.array(pts), 14), axis=0)

    def on_dirichlet(self, points, tol=1e-12) -> np.ndarray:
        """Boolean mask of points lying on a Dirichlet segment within ``tol``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        hit = np.zeros(len(points), dtype=bool)
        for s in self.dirichlet_segments:
            hit |= _on_segment(s, points, tol)
        return hit

    def sample(self, n_per_segment, rng=None, dirichlet_only=True):
        """Points on the boundary by segment-parameter sampling (random if ``rng`` given)."""
        segs = self.dirichlet_segments if dirichlet_only else list(self.segments)
        out = []
        for s in segs:
            if rng is None:
                t = (np.arange(n_per_segment) + 0.5) / n_per_segment
            else:
                t = rng.uniform(0.0, 1.0, n_per_segment)
            out.append(s.point_at(t))
        return np.concatenate(out, axis=0)


def _on_segment(seg: Segment, points, tol):
    ax, ay = seg.a
    tx, ty = seg.tangent
    L = seg.length
    rx, ry = points[:, 0] - ax, points[:, 1] - ay
    along = rx * tx + ry * ty
    across = -rx * ty + ry * tx
    return (np.abs(across) <= tol) & (along >= -tol) & (along <= L + tol)


# per-segment fields; x, y may be arrays or jets


def _signed_distance(seg, x, y):
    (xa, ya), (xb, yb) = seg.a, seg.b
    return ((x - xa) * (yb - ya) - (y - ya) * (xb - xa)) / seg.length


def _trimming(seg, x, y):
    L = seg.length
    xc, yc = seg.center
    return ((0.5 * L) ** 2 - ((x - xc) * (x - xc) + (y - yc) * (y - yc))) / L


def _segment_adf(seg, x, y):
    d = _signed_distance(seg, x, y)
    t = _trimming(seg, x, y)
    d2 = d * d
    r = (jets.sqrt(t * t + d2 * d2) - t) * 0.5
    return jets.sqrt(d2 + r * r)


def _xy(point):
    p = np.asarray(point, dtype=float)
    return p[..., 0], p[..., 1]


def signed_distance(seg: Segment, x) -> float:
    """Signed distance from ``x`` to the line through ``seg``."""
    return _signed_distance(seg, *_xy(x))


def trimming_function(seg: Segment, x) -> float:
    """Circle trimming field, non-negative inside the circle with diameter ``seg``."""
    return _trimming(seg, *_xy(x))


def segment_adf(seg: Segment, x) -> float:
    return _segment_adf(seg, *_xy(x))


@dataclass
class FieldSample:
    """Value, gradient, Hessian and Laplacian of a scalar field at a batch of points.

    ``laplacian_ok`` is False where second derivatives were withheld (inside the
    vertex-exclusion zone of a normalized ADF); ``laplacian`` and ``hessian`` are
    ``nan`` there.
    """

    value: np.ndarray
    gradient: np.ndarray
    hessian: Optional[np.ndarray] = None
    laplacian_ok: Optional[np.ndarray] = None

    @property
    def laplacian(self):
        if self.hessian is None:
            return None
        return self.hessian[..., 0, 0] + self.hessian[..., 1, 1]

    @classmethod
    def from_jet(cls, jet: Jet, order=2):
        hess = jet.hess if order >= 2 else None
        ok = np.ones(len(jet), dtype=bool) if order >= 2 else None
        return cls(jet.val, jet.grad, hess, ok)

    def __getitem__(self, i):
        return FieldSample(
            self.value[i],
            self.gradient[i],
            None if self.hessian is None else self.hessian[i],
            None if self.laplacian_ok is None else self.laplacian_ok[i],
        )


def _leave_one_out_products(factors):
    """``[prod_{j != k} f_j for k]`` via prefix/suffix products (no division)."""
    n = len(factors)
    if n == 1:
        return [1.0]
    prefix = [None] * n
    suffix = [None] * n
    prefix[0] = factors[0]
    for k in range(1, n):
        prefix[k] = prefix[k - 1] * factors[k]
    suffix[n - 1] = factors[n - 1]
    for k in range(n - 2, -1, -1):
        suffix[k] = suffix[k + 1] * factors[k]
    out = []
    for k in range(n):
        if k == 0:
            out.append(suffix[1])
        elif k == n - 1:
            out.append(prefix[n - 2])
        else:
            out.append(prefix[k - 1] * suffix[k + 1])
    return out


def combine_normalized(phis, m=1):
    """``(sum phi_i^-m)^(-1/m)`` in the multiplied-through form, exact zero on any ``phi_i = 0``."""
    if len(phis) == 1:
        return phis[0]
    num = phis[0]
    for p in phis[1:]:
        num = num * p
    powered = [p**m for p in phis] if m != 1 else list(phis)
    den = _leave_one_out_products(powered)
    s = den[0]
    for d in den[1:]:
        s = s + d
    if m == 1:
        return num / s
    if m == 2:
        return num / jets.sqrt(s)
    return num / s ** (1.0 / m)


def combine_product(phis):
    out = phis[0]
    for p in phis[1:]:
        out = out * p
    return out


@dataclass
class AdfField:
    """ADF to a union of boundary pieces.

    ``pieces`` are jet-compatible callables ``phi_i(x, y)``; ``mode`` is
    ``"normalized"`` (with order ``m``) or ``"product"``. Use :meth:`from_boundary`
    for polygons; the raw constructor serves fixtures such as the quadrant.
    """

    pieces: Sequence[Callable]
    mode: str = "normalized"
    m: int = 1
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    exclusion_radius: float = 0.0

    def __post_init__(self):
        if self.mode not in ("normalized", "product"):
            raise ValueError(f"unknown ADF mode {self.mode!r}")
        if self.mode == "normalized" and int(self.m) < 1:
            raise ValueError("normalization order m must be >= 1")
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)

    @classmethod
    def from_boundary(cls, boundary: PolygonalBoundary, mode="normalized", m=1, exclusion_radius=None):
        segs = boundary.dirichlet_segments
        pieces = [(lambda x, y, s=s: _segment_adf(s, x, y)) for s in segs]
        if exclusion_radius is None:
            exclusion_radius = 1e-2 * min(s.length for s in segs)
        return cls(pieces, mode, m, boundary.dirichlet_vertices, exclusion_radius)

    def _combine(self, x, y):
        phis = [p(x, y) for p in self.pieces]
        if self.mode == "product":
            return combine_product(phis)
        return combine_normalized(phis, self.m)

    def value(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self._combine(points[:, 0], points[:, 1])
        out = np.broadcast_to(out, (len(points),)).astype(float)
        return np.where(np.isnan(out), 0.0, out)

    def near_vertex(self, points, radius=None) -> np.ndarray:
        radius = self.exclusion_radius if radius is None else radius
        points = np.atleast_2d(points)
        if len(self.vertices) == 0 or radius <= 0:
            return np.zeros(len(points), dtype=bool)
        dist = np.linalg.norm(points[:, None, :] - self.vertices[None, :, :], axis=-1)
        return dist.min(axis=1) < radius

    def sample(self, points, order=2) -> FieldSample:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            jet = jets.evaluate(self._combine, points, order=2)
        out = FieldSample.from_jet(jet, order)
        # on the boundary the multiplied-through form already returns exact zeros
        out.value = np.where(np.isnan(out.value), 0.0, out.value)
        if order >= 2 and self.mode == "normalized":
            bad = self.near_vertex(points)
            out.laplacian_ok = ~bad
            out.hessian = out.hessian.copy()
            out.hessian[bad] = np.nan
        return out


def boundary_adf(field_: AdfField, x) -> FieldSample:
    """Sample an ADF (value, gradient, Laplacian) at a single point or a batch."""
    single = np.ndim(x) == 1
    out = field_.sample(np.atleast_2d(x))
    return out[0] if single else out


def quadrant_fixture(mode="normalized", m=1) -> AdfField:
    """ADF to the two half-axes bounding the positive quadrant, with exact piece distances."""
    return AdfField([lambda x, y: x, lambda x, y: y], mode, m, np.zeros((1, 2)), 0.0)


def quadrant_reference(m, x) -> FieldSample:
    """Closed-form value, gradient and Hessian of the quadrant ADF of order 1 or 2."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    px, py = x[:, 0], x[:, 1]
    if np.any((px == 0) & (py == 0)):
        raise ValueError("quadrant ADF is singular at the origin")
    if m == 1:
        s = px + py
        val = px * py / s
        grad = np.stack([py**2 / s**2, px**2 / s**2], axis=-1)
        hxx = -2 * py**2 / s**3
        hyy = -2 * px**2 / s**3
        hxy = 2 * px * py / s**3
    elif m == 2:
        r = np.hypot(px, py)
        val = px * py / r
        grad = np.stack([py / r - px**2 * py / r**3, px / r - px * py**2 / r**3], axis=-1)
        hxx = 3 * px**3 * py / r**5 - 3 * px * py / r**3
        hyy = 3 * px * py**3 / r**5 - 3 * px * py / r**3
        hxy = 3 * px**2 * py**2 / r**5
    else:
        raise ValueError("closed forms exist for m = 1 and m = 2 only")
    hess = np.empty((len(px), 2, 2))
    hess[:, 0, 0], hess[:, 1, 1] = hxx, hyy
    hess[:, 0, 1] = hess[:, 1, 0] = hxy
    return FieldSample(val, grad, hess, np.ones(len(px), dtype=bool))


def _project_clamped(seg: Segment, x, y):
    (xa, ya), (xb, yb) = seg.a, seg.b
    L2 = seg.length**2
    s = ((x - xa) * (xb - xa) + (y - ya) * (yb - ya)) / L2
    if isinstance(s, Jet):
        lo, hi = s.val <= 0.0, s.val >= 1.0
        val = np.clip(s.val, 0.0, 1.0)
        grad, hess = s.grad.copy(), s.hess.copy()
        grad[lo | hi] = 0.0
        hess[lo | hi] = 0.0
        s = Jet(val, grad, hess)
    else:
        s = np.clip(s, 0.0, 1.0)
    return xa + s * (xb - xa), ya + s * (yb - ya)


@dataclass
class TransfiniteExtension:
    """Blend of per-segment boundary data with ADF-product weights."""

    boundary: PolygonalBoundary
    vertex_tol: float = 1e-8

    def __post_init__(self):
        self._segs = self.boundary.dirichlet_segments
        self._data = self.boundary.dirichlet_data
        if any(g is None for g in self._data):
            raise ValueError("every Dirichlet segment needs boundary data")

    def _parts(self, x, y):
        phis = [_segment_adf(s, x, y) for s in self._segs]
        gs = [g(*_project_clamped(s, x, y)) for s, g in zip(self._segs, self._data)]
        return phis, gs

    def _blend(self, x, y):
        phis, gs = self._parts(x, y)
        weights = _leave_one_out_products(phis)
        num, den = None, None
        for w, g in zip(weights, gs):
            term = w * g
            num = term if num is None else num + term
            den = w if den is None else den + w
        return num / den

    def _fix_vertices(self, points, values):
        """Replace 0/0 results where several segment ADFs vanish at once."""
        bad = ~np.isfinite(values)
        if not np.any(bad):
            return values
        pts = points[bad]
        phis, gs = self._parts(pts[:, 0], pts[:, 1])
        phis = np.array([np.broadcast_to(p, len(pts)) for p in phis])
        gs = np.array([np.broadcast_to(jets.value(g), len(pts)) for g in gs])
        fixed = np.empty(len(pts))
        for k in range(len(pts)):
            on = phis[:, k] == 0.0
            if not np.any(on):
                on = phis[:, k] <= phis[:, k].min()
            cand = gs[on, k]
            if np.ptp(cand) > self.vertex_tol:
                raise InconsistentBoundaryData(
                    f"boundary data disagrees at vertex {tuple(pts[k])}: {cand.tolist()}"
                )
            fixed[k] = cand.mean()
        values = values.copy()
        values[bad] = fixed
        return values

    def value(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(self._segs) == 1:
            return jets.evaluate(lambda x, y: self._data[0](*_project_clamped(self._segs[0], x, y)), points, 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.broadcast_to(self._blend(points[:, 0], points[:, 1]), (len(points),)).astype(float)
        return self._fix_vertices(points, vals)

    def sample(self, points, order=2) -> FieldSample:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(self._segs) == 1:
            fn = lambda x, y: self._data[0](*_project_clamped(self._segs[0], x, y))  # noqa: E731
        else:
            fn = self._blend
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            jet = jets.evaluate(fn, points, order=2)
        out = FieldSample.from_jet(jet, order)
        out.value = self._fix_vertices(points, out.value) if len(self._segs) > 1 else out.value
        return out


def transfinite_extension(boundary: PolygonalBoundary, x):
    """Value of the transfinite blend of the boundary data at ``x`` (point or batch)."""
    single = np.ndim(x) == 1
    out = TransfiniteExtension(boundary).value(np.atleast_2d(x))
    return float(out[0]) if single else out


@dataclass
class FunctionField:
    """A jet-compatible closed-form field ``fn(x, y)`` with the same sampling API as :class:`AdfField`."""

    fn: Callable

    def value(self, points):
        return jets.evaluate(self.fn, np.atleast_2d(points), order=0)

    def sample(self, points, order=2) -> FieldSample:
        return FieldSample.from_jet(jets.evaluate(self.fn, np.atleast_2d(points), order=2), order)

    def near_vertex(self, points, radius=None):
        return np.zeros(len(np.atleast_2d(points)), dtype=bool)


def load_polygon(path) -> PolygonalBoundary:
    """Read ``x_A y_A x_B y_B dirichlet_flag`` lines (``#`` starts a comment)."""
    segs, mask = [], []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"bad polygon line: {line!r}")
            xa, ya, xb, yb = map(float, parts[:4])
            segs.append(Segment((xa, ya), (xb, yb), len(segs)))
            mask.append(bool(int(float(parts[4]))))
    return PolygonalBoundary(tuple(segs), tuple(mask))


def save_polygon(boundary: PolygonalBoundary, path):
    with open(path, "w") as fh:
        for s, m in zip(boundary.segments, boundary.dirichlet_mask):
            fh.write(f"{float(s.a[0])!r} {float(s.a[1])!r} {float(s.b[0])!r} {float(s.b[1])!r} {int(m)}\n")
