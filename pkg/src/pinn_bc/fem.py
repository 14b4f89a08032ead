"""Lagrange spaces on triangles, nodal interpolation and H1 error measurement."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from . import jets
from .adf import FieldSample, PolygonalBoundary
from .errors import ConfigurationError
from .mesh import NestedMeshPair, TriMesh, _lattice, dedupe_points
from .quadrature import MAX_ORDER, QuadratureRule, quadrature_for_order


def _monomials(k):
    return [(a, b) for a in range(k + 1) for b in range(k + 1 - a)]


@lru_cache(maxsize=None)
def _basis_coefficients(k):
    nodes = np.array([(i / k, j / k) for i, j in _lattice(k)]) if k > 0 else np.array([[1 / 3, 1 / 3]])
    mons = _monomials(k)
    V = np.stack([nodes[:, 0] ** a * nodes[:, 1] ** b for a, b in mons], axis=1)
    return nodes, np.linalg.inv(V)


def reference_basis(k, points):
    """Values ``(n, nloc)`` and reference gradients ``(n, nloc, 2)`` of the degree-``k`` basis."""
    points = np.atleast_2d(points)
    _, C = _basis_coefficients(k)
    x, y = points[:, 0], points[:, 1]
    mons = _monomials(k)
    M = np.stack([x**a * y**b for a, b in mons], axis=1)
    Mx = np.stack([a * x ** max(a - 1, 0) * y**b if a else np.zeros_like(x) for a, b in mons], axis=1)
    My = np.stack([b * x**a * y ** max(b - 1, 0) if b else np.zeros_like(x) for a, b in mons], axis=1)
    return M @ C, np.stack([Mx @ C, My @ C], axis=-1)


class LagrangeSpace:
    """Continuous piecewise polynomials of a given degree on a triangulation.

    Degrees of freedom sit on the uniform barycentric lattice of each element and
    are merged across elements. ``boundary_dof_mask`` marks dofs lying on the
    Dirichlet part of ``boundary`` (all of the mesh boundary when it is None).
    """

    def __init__(self, mesh: TriMesh, degree: int, boundary: Optional[PolygonalBoundary] = None):
        if int(degree) < 1:
            raise ConfigurationError(f"Lagrange degree must be >= 1, got {degree}")
        self.mesh = mesh
        self.degree = k = int(degree)
        self.boundary = boundary
        ref_nodes, _ = _basis_coefficients(k)
        self.ref_nodes = ref_nodes
        v0, J = mesh.jacobians()
        pts = v0[:, None, :] + np.einsum("eij,nj->eni", J, ref_nodes)
        scale = max(np.ptp(mesh.vertices, axis=0).max(), 1.0)
        self.dof_points, inv = dedupe_points(pts.reshape(-1, 2), scale=scale)
        self.element_dofs = inv.reshape(mesh.n_elements, len(ref_nodes))
        self.on_boundary_mask = self._boundary_dofs()
        if boundary is None:
            self.boundary_dof_mask = self.on_boundary_mask.copy()
        else:
            self.boundary_dof_mask = boundary.on_dirichlet(self.dof_points, tol=1e-12 * scale)

    def _boundary_dofs(self):
        mask = np.zeros(self.dim, dtype=bool)
        edges = self.mesh.boundary_edges
        a, b = self.mesh.vertices[edges[:, 0]], self.mesh.vertices[edges[:, 1]]
        p = self.dof_points
        for s in range(0, len(edges), 256):
            aa, bb = a[s : s + 256], b[s : s + 256]
            t = bb - aa
            rel = p[:, None, :] - aa[None]
            cross = rel[..., 0] * t[None, :, 1] - rel[..., 1] * t[None, :, 0]
            along = (rel * t[None]).sum(-1) / (t**2).sum(-1)[None]
            L = np.linalg.norm(t, axis=1)[None]
            hit = (np.abs(cross) / L < 1e-10) & (along > -1e-10) & (along < 1 + 1e-10)
            mask |= hit.any(axis=1)
        return mask

    @property
    def dim(self) -> int:
        return len(self.dof_points)

    @property
    def n_local(self) -> int:
        return self.element_dofs.shape[1]

    def basis_at(self, elements, points):
        """Global dof indices, basis values and physical gradients at ``points`` inside ``elements``."""
        elements = np.asarray(elements)
        v0, J = self.mesh.jacobians()
        Jinv = np.linalg.inv(J[elements])
        ref = np.einsum("nij,nj->ni", Jinv, points - v0[elements])
        vals, rgrad = reference_basis(self.degree, ref)
        grads = np.einsum("nji,nlj->nli", Jinv, rgrad)  # J^{-T} applied to reference gradients
        return self.element_dofs[elements], vals, grads


@dataclass
class TrialFunction:
    space: LagrangeSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape[0] != self.space.dim:
            raise ValueError(
                f"coefficient vector has length {self.coefficients.shape[0]}, space dimension is {self.space.dim}"
            )

    def sample(self, points, elements=None):
        """Value and gradient at ``points`` (element located by search unless given)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if elements is None:
            elements = self.space.mesh.locate(points)
        dofs, vals, grads = self.space.basis_at(elements, points)
        c = self.coefficients[dofs]  # (n, nloc) or (n, nloc, ncomp)
        if c.ndim == 2:
            return (vals * c).sum(1), np.einsum("nl,nli->ni", c, grads)
        return np.einsum("nl,nlc->nc", vals, c), np.einsum("nlc,nli->nci", c, grads)

    def __call__(self, points):
        return self.sample(points)


def interpolate(space: LagrangeSpace, f: Callable) -> TrialFunction:
    """Nodal interpolant: coefficients are ``f`` at the dof points (``f(x, y)``)."""
    x, y = space.dof_points[:, 0], space.dof_points[:, 1]
    vals = np.asarray(f(x, y), dtype=float)
    if vals.ndim == 0:
        vals = np.full(space.dim, float(vals))
    return TrialFunction(space, vals)


def evaluate(w: TrialFunction, x) -> FieldSample:
    single = np.ndim(x) == 1
    v, g = w.sample(np.atleast_2d(x))
    out = FieldSample(v, g)
    return out[0] if single else out


def exact_field(fn):
    """Wrap a jet-compatible ``fn(x, y)`` (scalar or list of components) as ``points -> (value, gradient)``."""

    def sample(points):
        points = np.atleast_2d(points)
        out = fn(*jets.Jet.coordinates(points))
        if isinstance(out, (list, tuple)):
            comps = [o if isinstance(o, jets.Jet) else jets.Jet.constant(o, len(points)) for o in out]
            return np.stack([c.val for c in comps], -1), np.stack([c.grad for c in comps], 1)
        if not isinstance(out, jets.Jet):
            out = jets.Jet.constant(out, len(points))
        return out.val, out.grad

    return sample


def error_quadrature_order(k_int):
    return min(max(2 * int(k_int), 8), MAX_ORDER)


def quadrature_points(mesh: TriMesh, rule: QuadratureRule):
    """Physical quadrature points ``(ne*nq, 2)``, weights and owning elements."""
    v0, J = mesh.jacobians()
    pts = v0[:, None, :] + np.einsum("eij,qj->eqi", J, rule.points)
    w = np.abs(np.linalg.det(J))[:, None] * rule.weights[None, :]
    elems = np.repeat(np.arange(mesh.n_elements), len(rule))
    return pts.reshape(-1, 2), w.ravel(), elems


def h1_error(w, u_exact, rule: Optional[QuadratureRule] = None, mesh: Optional[TriMesh] = None,
             pair: Optional[NestedMeshPair] = None, seminorm_only=False) -> float:
    """H1 norm of ``w - u_exact``.

    ``w`` is a :class:`TrialFunction` or any ``points -> (value, gradient)``
    callable; ``u_exact`` is the latter. Integration runs over ``pair.fine`` when
    a nested pair is given (trial evaluated through the containment map),
    otherwise over ``mesh`` or the trial space's own mesh.
    """
    if pair is not None:
        mesh = pair.fine
    elif mesh is None:
        if not isinstance(w, TrialFunction):
            raise ValueError("a mesh is required when w is not a TrialFunction")
        mesh = w.space.mesh
    if rule is None:
        k = w.space.degree if isinstance(w, TrialFunction) else 4
        rule = quadrature_for_order(error_quadrature_order(k))
    pts, wts, elems = quadrature_points(mesh, rule)
    if isinstance(w, TrialFunction):
        hint = None
        if pair is not None and w.space.mesh is pair.coarse:
            hint = pair.containment[elems]
        elif w.space.mesh is mesh:
            hint = elems
        wv, wg = w.sample(pts, hint)
    else:
        wv, wg = w(pts)
    uv, ug = u_exact(pts)
    dv = np.asarray(wv) - np.asarray(uv)
    dg = np.asarray(wg) - np.asarray(ug)
    dens = (dg**2).reshape(len(pts), -1).sum(1)
    if not seminorm_only:
        dens = dens + (dv**2).reshape(len(pts), -1).sum(1)
    return float(np.sqrt(np.dot(wts, dens)))


def h1_norm(u, mesh: TriMesh, rule: Optional[QuadratureRule] = None) -> float:
    zero = lambda p: (np.zeros_like(u(p)[0]), np.zeros_like(u(p)[1]))  # noqa: E731
    return h1_error(u, zero, rule, mesh=mesh)
