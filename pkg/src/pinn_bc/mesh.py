"""Structured conforming triangulations, nested refinement and the mesh text format."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adf import PolygonalBoundary, Segment
from .errors import ConfigurationError, OutOfDomainError


def _polygon(loops, dirichlet=None):
    segs = []
    for loop in loops:
        n = len(loop)
        for k in range(n):
            segs.append(Segment(loop[k], loop[(k + 1) % n], len(segs)))
    mask = [True] * len(segs) if dirichlet is None else dirichlet
    return PolygonalBoundary(tuple(segs), tuple(mask))


# name -> (bounding box, base cell size, removed box or None, boundary)
_DOMAINS = {
    "unit_square": ((0.0, 1.0, 0.0, 1.0), 1.0, None, [[(0, 0), (1, 0), (1, 1), (0, 1)]]),
    "rect_xt": ((0.0, 1.0, 0.0, 1.0), 1.0, None, [[(0, 0), (1, 0), (1, 1), (0, 1)]]),
    "l_shape": (
        (-1.0, 1.0, -1.0, 1.0),
        1.0,
        (-1.0, 0.0, -1.0, 0.0),
        [[(0, -1), (1, -1), (1, 1), (-1, 1), (-1, 0), (0, 0)]],
    ),
    "square_with_hole": (
        (-1.0, 1.0, -1.0, 1.0),
        0.5,
        (0.0, 0.5, 0.0, 0.5),
        [[(-1, -1), (1, -1), (1, 1), (-1, 1)], [(0, 0), (0, 0.5), (0.5, 0.5), (0.5, 0)]],
    ),
}

_ALIASES = {
    "unitsquare": "unit_square",
    "lshape": "l_shape",
    "squarewithhole": "square_with_hole",
    "rect": "rect_xt",
    "rect(x,t)": "rect_xt",
}


def canonical_domain(name: str) -> str:
    key = str(name).strip().lower()
    key = _ALIASES.get(key.replace("_", "").replace("-", ""), key)
    if key not in _DOMAINS:
        raise ConfigurationError(f"unsupported domain {name!r}; choose one of {sorted(_DOMAINS)}")
    return key


def domain_boundary(name: str) -> PolygonalBoundary:
    """Polygon of a named domain; every segment is Dirichlet except for ``rect_xt``
    where only the inflow edge ``x = 0`` and the initial edge ``t = 0`` are."""
    key = canonical_domain(name)
    loops = _DOMAINS[key][3]
    if key == "rect_xt":
        # segments: t=0, x=1, t=1, x=0
        return _polygon(loops, [True, False, False, True])
    return _polygon(loops)


@dataclass
class TriMesh:
    vertices: np.ndarray  # (nv, 2)
    elements: np.ndarray  # (ne, 3), counter-clockwise
    boundary_edges: np.ndarray = field(default=None)  # (nb, 2) vertex pairs
    boundary_tags: np.ndarray = field(default=None)  # (nb,) segment id, -1 if untagged

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        if self.boundary_edges is None:
            self.boundary_edges = find_boundary_edges(self.elements)
        self.boundary_edges = np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        if self.boundary_tags is None:
            self.boundary_tags = -np.ones(len(self.boundary_edges), dtype=np.int64)
        self.boundary_tags = np.asarray(self.boundary_tags, dtype=np.int64)
        self._edge_owner = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    def corners(self):
        """Element corner coordinates, shape ``(ne, 3, 2)``."""
        return self.vertices[self.elements]

    def jacobians(self):
        c = self.corners()
        J = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=-1)  # columns are edge vectors
        return c[:, 0], J

    def areas(self):
        _, J = self.jacobians()
        return 0.5 * np.linalg.det(J)

    @property
    def meshsize(self) -> float:
        c = self.corners()
        d = [np.linalg.norm(c[:, i] - c[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return float(np.max(np.maximum.reduce(d)))

    def edge_owner(self):
        """For each boundary edge, the owning element and its outward unit normal."""
        if self._edge_owner is None:
            lookup = {}
            for e, tri in enumerate(self.elements):
                for i, j in ((0, 1), (1, 2), (2, 0)):
                    lookup[(tri[i], tri[j])] = e
            owners = np.empty(len(self.boundary_edges), dtype=np.int64)
            normals = np.empty((len(self.boundary_edges), 2))
            edges = self.boundary_edges.copy()
            for k, (a, b) in enumerate(self.boundary_edges):
                if (a, b) in lookup:
                    owners[k] = lookup[(a, b)]
                else:
                    owners[k] = lookup[(b, a)]
                    edges[k] = (b, a)
                t = self.vertices[edges[k, 1]] - self.vertices[edges[k, 0]]
                # counter-clockwise element: the outward normal is the tangent rotated clockwise
                normals[k] = np.array([t[1], -t[0]]) / np.linalg.norm(t)
            self.boundary_edges = edges
            self._edge_owner = (owners, normals)
        return self._edge_owner

    def locate(self, points, tol=1e-12, chunk=2048):
        """Index of an element containing each point; raises :class:`OutOfDomainError`."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        v0, J = self.jacobians()
        Jinv = np.linalg.inv(J)
        out = np.empty(len(points), dtype=np.int64)
        for start in range(0, len(points), chunk):
            p = points[start : start + chunk]
            rel = p[:, None, :] - v0[None, :, :]
            lam = np.einsum("eij,pej->pei", Jinv, rel)
            l3 = 1.0 - lam.sum(-1)
            inside = (lam >= -tol).all(-1) & (l3 >= -tol)
            found = inside.any(axis=1)
            if not found.all():
                bad = p[~found][0]
                raise OutOfDomainError(f"point {tuple(bad)} is outside the mesh")
            out[start : start + chunk] = inside.argmax(axis=1)
        return out


def find_boundary_edges(elements):
    edges = np.concatenate([elements[:, [0, 1]], elements[:, [1, 2]], elements[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inv.ravel()] == 1
    return edges[once]


def tag_boundary(mesh: TriMesh, boundary: PolygonalBoundary, tol=1e-10) -> TriMesh:
    """Tag each boundary edge with the id of the polygon segment containing it."""
    from .adf import _on_segment

    tags = -np.ones(len(mesh.boundary_edges), dtype=np.int64)
    a = mesh.vertices[mesh.boundary_edges[:, 0]]
    b = mesh.vertices[mesh.boundary_edges[:, 1]]
    for s in boundary.segments:
        hit = _on_segment(s, a, tol) & _on_segment(s, b, tol)
        tags[hit & (tags < 0)] = s.id
    mesh.boundary_tags = tags
    return mesh


def dedupe_points(points, scale=1.0, decimals=9):
    """Merge coincident points; returns ``(unique_points, inverse_index)`` in first-seen order."""
    key = np.round(np.asarray(points) / scale, decimals)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    # renumber by first appearance so numbering follows element order
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return np.asarray(points)[first[order]], rank[inv]


def generate_mesh(domain: str, level: int) -> TriMesh:
    """Structured right-triangle mesh of a named domain; the meshsize halves per level."""
    if int(level) != level or level < 0:
        raise ConfigurationError(f"mesh level must be a non-negative integer, got {level}")
    key = canonical_domain(domain)
    (x0, x1, y0, y1), h0, hole, _ = _DOMAINS[key]
    h = h0 / 2**level
    nx, ny = int(round((x1 - x0) / h)), int(round((y1 - y0) / h))

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            cx, cy = x0 + (i + 0.5) * h, y0 + (j + 0.5) * h
            if hole is not None and hole[0] < cx < hole[1] and hole[2] < cy < hole[3]:
                continue
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    tris = np.array(tris, dtype=np.int64)
    gx, gy = np.meshgrid(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1))
    verts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    used = np.unique(tris)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = TriMesh(verts[used], remap[tris])
    return tag_boundary(mesh, domain_boundary(key))


def _lattice(k):
    return [(i, j) for j in range(k + 1) for i in range(k + 1 - j)]


@dataclass
class NestedMeshPair:
    coarse: TriMesh
    fine: TriMesh
    containment: np.ndarray  # fine element -> coarse element
    factor: int = 2


def refine_to_pair(coarse: TriMesh, factor: int = 2) -> NestedMeshPair:
    """Split every coarse triangle into ``factor**2`` similar children.

    ``factor = 2`` is the uniform red refinement.
    """
    r = int(factor)
    if r < 1:
        raise ConfigurationError("refinement factor must be >= 1")
    lat = _lattice(r)
    index = {ij: n for n, ij in enumerate(lat)}
    local = []
    for j in range(r):
        for i in range(r - j):
            local.append((index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]))
            if i + j <= r - 2:
                local.append((index[(i + 1, j)], index[(i + 1, j + 1)], index[(i, j + 1)]))
    local = np.array(local)
    bary = np.array([(i / r, j / r) for i, j in lat])
    v0, J = coarse.jacobians()
    pts = v0[:, None, :] + np.einsum("eij,nj->eni", J, bary)  # (ne, nlat, 2)
    scale = max(np.ptp(coarse.vertices, axis=0).max(), 1.0)
    verts, inv = dedupe_points(pts.reshape(-1, 2), scale=scale)
    inv = inv.reshape(coarse.n_elements, len(lat))
    elements = inv[:, local].reshape(-1, 3)
    parent = np.repeat(np.arange(coarse.n_elements), len(local))
    fine = TriMesh(verts, elements)
    # inherit tags from the coarse boundary edge containing each fine boundary edge
    tags = -np.ones(len(fine.boundary_edges), dtype=np.int64)
    mid = verts[fine.boundary_edges].mean(axis=1)
    ca = coarse.vertices[coarse.boundary_edges[:, 0]]
    cb = coarse.vertices[coarse.boundary_edges[:, 1]]
    t = cb - ca
    L = np.linalg.norm(t, axis=1)
    rel = mid[:, None, :] - ca[None, :, :]
    across = np.abs(rel[..., 0] * t[None, :, 1] - rel[..., 1] * t[None, :, 0]) / L[None, :]
    along = (rel * t[None]).sum(-1) / L[None, :] ** 2
    ok = (across < 1e-10 * scale) & (along > 0) & (along < 1)
    has = ok.any(axis=1)
    tags[has] = coarse.boundary_tags[ok.argmax(axis=1)[has]]
    fine.boundary_tags = tags
    return NestedMeshPair(coarse, fine, parent, r)


def save_mesh(mesh: TriMesh, path):
    """Plain-text mesh: ``nv ne`` header, ``x y`` lines, ``i j k`` lines, then ``i j tag`` lines."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_elements}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for i, j, k in mesh.elements:
            fh.write(f"{i} {j} {k}\n")
        for (i, j), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            fh.write(f"{i} {j} {tag}\n")


def load_mesh(path) -> TriMesh:
    with open(path) as fh:
        rows = [line.split() for line in fh if line.strip() and not line.lstrip().startswith("#")]
    nv, ne = int(rows[0][0]), int(rows[0][1])
    verts = np.array(rows[1 : 1 + nv], dtype=float)
    elems = np.array(rows[1 + nv : 1 + nv + ne], dtype=np.int64)
    rest = rows[1 + nv + ne :]
    if rest:
        b = np.array(rest, dtype=np.int64)
        return TriMesh(verts, elems, b[:, :2], b[:, 2])
    return TriMesh(verts, elems)


def uniform_points(domain: str, n: int, rng: np.random.Generator, margin: float = 0.0) -> np.ndarray:
    """Uniform random points inside a named domain (rejection sampling), kept ``margin``
    away from the outer bounding box and the removed region."""
    key = canonical_domain(domain)
    (x0, x1, y0, y1), _, hole, _ = _DOMAINS[key]
    out = []
    while sum(len(o) for o in out) < n:
        p = rng.uniform([x0 + margin, y0 + margin], [x1 - margin, y1 - margin], size=(2 * n, 2))
        if hole is not None:
            inside = (
                (p[:, 0] > hole[0] - margin)
                & (p[:, 0] < hole[1] + margin)
                & (p[:, 1] > hole[2] - margin)
                & (p[:, 1] < hole[3] + margin)
            )
            p = p[~inside]
        out.append(p)
    return np.concatenate(out)[:n]
