"""PINN and interpolated-VPINN residuals and losses under four boundary treatments.

Boundary treatments (``BcMethod``):

* ``Penalty`` (ma): squared boundary mismatches weighted by ``lam``;
* ``ExactNormalized`` (mb): output layer ``B w = gbar + phi w`` with an
  ``m``-normalized ADF ``phi``;
* ``ExactProduct`` (mc): the same layer with the plain product of segment ADFs;
* ``Nitsche`` (md): VPINN only; boundary integrals in an enlarged test space.

Per-family physics lives in small plugin objects that supply a strong-form
residual for PINNs and a pointwise weak-form integrand for VPINNs. The weak
integrand is written as ``s0 * v + s1 * dv/dx + s2 * dv/dy`` so that the
residual against test function ``v_i`` is ``-(T s0 + Tx s1 + Ty s2)_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import torch

from . import jets
from .adf import AdfField, FieldSample, FunctionField, TransfiniteExtension
from .errors import ConfigurationError
from .fem import LagrangeSpace, TrialFunction, quadrature_points
from .mesh import NestedMeshPair
from .nn import DTYPE, MlpArchitecture, NetworkJet, forward, input_jet, l2_penalty
from .problems import ProblemSpec, component_boundaries, parametric_instance
from .quadrature import gauss_legendre_01, quadrature_for_order

# ---------------------------------------------------------------- boundary methods


@dataclass(frozen=True)
class Penalty:
    lam: float = 1.0
    n_points: Optional[int] = None  # PINN only; None means about sqrt(dim U_H)

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError("penalty weight must be positive")

    code = "ma"


@dataclass(frozen=True)
class ExactNormalized:
    m: int = 1

    def __post_init__(self):
        if int(self.m) < 1:
            raise ConfigurationError("normalization order m must be >= 1")

    code = "mb"


@dataclass(frozen=True)
class ExactProduct:
    code = "mc"


@dataclass(frozen=True)
class Nitsche:
    """``variant="nonsymmetric"`` tests ``-kappa (w - g) dv/dn`` (stable for every ``gamma > 0``);
    ``variant="positive"`` tests ``+(w - g) dv/dn`` with unit weight."""

    gamma: float = 1.0
    variant: str = "nonsymmetric"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError("Nitsche parameter gamma must be positive")
        if self.variant not in ("nonsymmetric", "positive"):
            raise ConfigurationError(f"unknown Nitsche variant {self.variant!r}")

    @property
    def adjoint_sign(self):
        return -1.0 if self.variant == "nonsymmetric" else 1.0

    code = "md"


BcMethod = Union[Penalty, ExactNormalized, ExactProduct, Nitsche]


def make_method(code: str, lam=1e3, m=1, gamma=1.0, nitsche_variant="nonsymmetric") -> BcMethod:
    code = code.lower()
    if code == "ma":
        return Penalty(lam)
    if code == "mb":
        return ExactNormalized(m)
    if code == "mc":
        return ExactProduct()
    if code == "md":
        return Nitsche(gamma, nitsche_variant)
    raise ConfigurationError(f"unknown boundary method {code!r}; use ma, mb, mc or md")


def is_exact(method) -> bool:
    return isinstance(method, (ExactNormalized, ExactProduct))


# ---------------------------------------------------------------- B-layer


class BLayer:
    """``(B w)(x) = gbar(x) + phi(x) w(x)`` componentwise, with cached samples of ``phi`` and ``gbar``."""

    def __init__(self, adf, gbars: Sequence):
        self.adf = adf
        self.gbars = list(gbars)
        self._cache = {}

    @classmethod
    def for_problem(cls, spec: ProblemSpec, method: BcMethod, boundary=None):
        boundary = spec.boundary if boundary is None else boundary
        if spec.adf is not None:
            adf = spec.adf
        elif isinstance(method, ExactNormalized):
            adf = AdfField.from_boundary(boundary, "normalized", method.m)
        elif isinstance(method, ExactProduct):
            adf = AdfField.from_boundary(boundary, "product")
        else:
            raise ConfigurationError(f"{type(method).__name__} has no B-layer")
        if spec.gbar is not None:
            gbars = [FunctionField(spec.gbar)]
        elif spec.n_out == 1:
            gbars = [TransfiniteExtension(boundary)]
        else:
            gbars = [TransfiniteExtension(b) for b in component_boundaries(spec)]
        return cls(adf, gbars)

    def samples(self, points, order):
        key = (points.shape, points.tobytes(), order)
        if key not in self._cache:
            if len(self._cache) > 16:
                self._cache.clear()
            phi = self.adf.sample(points, order) if order else None
            if order:
                gb = [g.sample(points, order) for g in self.gbars]
            else:
                gb = None
            phi_v = self.adf.value(points)
            gb_v = np.stack([g.value(points) for g in self.gbars], -1)
            self._cache[key] = (phi_v, gb_v, phi, gb)
        return self._cache[key]

    def nodal(self, points):
        """``phi`` ``(n,)`` and ``gbar`` ``(n, ncomp)`` values."""
        phi_v, gb_v, _, _ = self.samples(points, 0)
        return phi_v, gb_v


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def apply_b_layer(adf, gbar, evaluator):
    """Wrap an evaluator ``(w, points, order) -> NetworkJet`` with the B-layer.

    ``gbar`` is one extension object or a list with one per output component.
    """
    gbars = gbar if isinstance(gbar, (list, tuple)) else [gbar]
    layer = BLayer(adf, gbars)

    def wrapped(w, points, order=0):
        points = np.atleast_2d(points)
        u = evaluator(w, points, order)
        phi_v, gb_v, phi, gb = layer.samples(points, order)
        if order == 0:
            return NetworkJet(_t(gb_v) + _t(phi_v)[:, None] * u.value, None, None)
        pv, pg = _t(phi.value), _t(phi.gradient)
        gv = _t(np.stack([g.value for g in gb], -1))
        gg = _t(np.stack([g.gradient for g in gb], 1))
        val = gv + pv[:, None] * u.value
        jac = gg + pg[:, None, :] * u.value[..., None] + pv[:, None, None] * u.jacobian
        hess = None
        if order >= 2:
            ph = _t(phi.hessian)
            gh = _t(np.stack([g.hessian for g in gb], 1))
            outer = pg[:, None, :, None] * u.jacobian[..., None, :]
            hess = (
                gh
                + ph[:, None] * u.value[..., None, None]
                + outer
                + outer.transpose(-1, -2)
                + pv[:, None, None, None] * u.hessian
            )
        return NetworkJet(val, jac, hess)

    wrapped.layer = layer
    return wrapped


def network_evaluator(arch: MlpArchitecture, p: Optional[float] = None):
    """Evaluator over the spatial inputs; a fixed parameter ``p`` is appended as a third input."""

    def ev(w, points, order=0):
        x = np.atleast_2d(points)
        if p is not None:
            x = np.column_stack([x, np.full(len(x), p)])
        if order == 0:
            return NetworkJet(forward(arch, w, x), None, None)
        j = input_jet(arch, w, x, order)
        hess = None if j.hessian is None else j.hessian[..., :2, :2]
        return NetworkJet(j.value, j.jacobian[..., :2], hess)

    return ev


# ---------------------------------------------------------------- physics plugins


def _mu_jet(coef, points):
    x, y = jets.Jet.coordinates(points)
    mu = coef.mu(x, y)
    if not isinstance(mu, jets.Jet):
        mu = jets.Jet.constant(mu, len(points))
    return mu


def _full(v, n):
    return np.broadcast_to(np.asarray(jets.value(v), dtype=float), (n,)).copy()


class Plugin:
    family = ""
    affine = True

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        self.n_comp = spec.n_out

    def coefficients(self, points, spec=None) -> dict:
        raise NotImplementedError

    def strong(self, c, v, g, H):
        raise NotImplementedError

    def weak(self, c, v, g):
        raise NotImplementedError

    def nitsche_weight(self, c):
        """Diffusion scale multiplying the adjoint boundary term."""
        return 1.0

    @staticmethod
    def torchify(c):
        return {k: (_t(a) if isinstance(a, np.ndarray) else a) for k, a in c.items()}


class EllipticPlugin(Plugin):
    family = "elliptic"

    def coefficients(self, points, spec=None):
        spec = spec or self.spec
        coef = spec.coefficients
        n = len(points)
        x, y = points[:, 0], points[:, 1]
        mu = _mu_jet(coef, points)
        b1, b2 = coef.beta(x, y)
        return {
            "mu": mu.val.copy(),
            "dmu": mu.grad.copy(),
            "b1": _full(b1, n),
            "b2": _full(b2, n),
            "sigma": _full(coef.sigma(x, y), n),
            "f": np.asarray(spec.source(points), dtype=float).reshape(n),
        }

    def reaction(self, c, v):
        return c["sigma"] * v

    def nitsche_weight(self, c):
        return c["mu"]

    def strong(self, c, v, g, H):
        v, gx, gy = v[:, 0], g[:, 0, 0], g[:, 0, 1]
        lap = H[:, 0, 0, 0] + H[:, 0, 1, 1]
        div = c["mu"] * lap + c["dmu"][:, 0] * gx + c["dmu"][:, 1] * gy
        r = -div + c["b1"] * gx + c["b2"] * gy + self.reaction(c, v) - c["f"]
        return r[:, None]

    def weak(self, c, v, g):
        v, gx, gy = v[:, 0], g[:, 0, 0], g[:, 0, 1]
        s0 = c["b1"] * gx + c["b2"] * gy + self.reaction(c, v) - c["f"]
        return s0[:, None], (c["mu"] * gx)[:, None], (c["mu"] * gy)[:, None]


class ParametricPlugin(EllipticPlugin):
    family = "parametric"
    affine = False

    def coefficients(self, points, spec=None):
        spec = spec or self.spec
        c = super().coefficients(points, spec)
        c["p"] = float(spec.params["p"])
        return c

    def reaction(self, c, v):
        return c["sigma"] * jets.sin(c["p"] * v) * v


class ElasticityPlugin(Plugin):
    family = "elasticity"

    def coefficients(self, points, spec=None):
        spec = spec or self.spec
        lam, mu = spec.coefficients.lame
        return {"lam": lam, "mu": mu, "f": np.asarray(spec.source(points), dtype=float).reshape(len(points), 2)}

    def nitsche_weight(self, c):
        return c["mu"]

    def _stress(self, c, g):
        div = g[:, 0, 0] + g[:, 1, 1]
        shear = c["mu"] * (g[:, 0, 1] + g[:, 1, 0])
        s00 = 2 * c["mu"] * g[:, 0, 0] + c["lam"] * div
        s11 = 2 * c["mu"] * g[:, 1, 1] + c["lam"] * div
        return s00, shear, s11

    def strong(self, c, v, g, H):
        lam, mu = c["lam"], c["mu"]
        lap = H[..., 0, 0] + H[..., 1, 1]  # (n, 2)
        grad_div0 = H[:, 0, 0, 0] + H[:, 1, 1, 0]
        grad_div1 = H[:, 0, 0, 1] + H[:, 1, 1, 1]
        div_sigma0 = mu * lap[:, 0] + (mu + lam) * grad_div0
        div_sigma1 = mu * lap[:, 1] + (mu + lam) * grad_div1
        lib = torch if isinstance(v, torch.Tensor) else np
        return lib.stack([-div_sigma0 - c["f"][:, 0], -div_sigma1 - c["f"][:, 1]], 1)

    def weak(self, c, v, g):
        s00, s01, s11 = self._stress(c, g)
        lib = torch if isinstance(v, torch.Tensor) else np
        s0 = -c["f"] + 0.0 * v
        s1 = lib.stack([s00, s01], 1)  # sigma[:, i, 0]
        s2 = lib.stack([s01, s11], 1)  # sigma[:, i, 1]
        return s0, s1, s2


class EikonalPlugin(Plugin):
    family = "eikonal"
    affine = False

    def coefficients(self, points, spec=None):
        spec = spec or self.spec
        co = spec.coefficients
        return {"eps": co.eps, "floor": co.floor, "f": np.asarray(spec.source(points), dtype=float).reshape(len(points))}

    def nitsche_weight(self, c):
        return c["eps"]

    def _norm(self, c, g):
        return jets.sqrt(g[:, 0, 0] ** 2 + g[:, 0, 1] ** 2 + c["floor"])

    def strong(self, c, v, g, H):
        lap = H[:, 0, 0, 0] + H[:, 0, 1, 1]
        return (-c["eps"] * lap + self._norm(c, g) - c["f"])[:, None]

    def weak(self, c, v, g):
        s0 = self._norm(c, g) - c["f"]
        return s0[:, None], c["eps"] * g[:, :, 0], c["eps"] * g[:, :, 1]


class ConvectionPlugin(Plugin):
    """``u_t + beta u_x = f`` on the (x, t) rectangle; ``y`` plays the role of ``t``."""

    family = "convection"

    def coefficients(self, points, spec=None):
        spec = spec or self.spec
        return {"beta": spec.coefficients.beta, "f": np.asarray(spec.source(points), dtype=float).reshape(len(points))}

    def nitsche_weight(self, c):
        return 0.0

    def strong(self, c, v, g, H):
        return (g[:, 0, 1] + c["beta"] * g[:, 0, 0] - c["f"])[:, None]

    def weak(self, c, v, g):
        s0 = g[:, 0, 1] + c["beta"] * g[:, 0, 0] - c["f"]
        z = 0.0 * v
        return s0[:, None], z, z


_PLUGINS = {
    "elliptic": EllipticPlugin,
    "parametric": ParametricPlugin,
    "elasticity": ElasticityPlugin,
    "eikonal": EikonalPlugin,
    "convection": ConvectionPlugin,
}


def problem_residual_plugins(spec: ProblemSpec) -> Plugin:
    return _PLUGINS[spec.family](spec)


def _affine_probe(plugin: Plugin, c: dict, n: int):
    """Coefficients of the affine map ``(v, grad v) -> (s0, s1, s2)`` at each point.

    Returns ``K`` of shape ``(n, 3*nc, 3*nc)`` and offset ``b`` ``(n, 3*nc)``;
    inputs and outputs are ordered ``[value, d/dx, d/dy]`` per component.
    """
    nc = plugin.n_comp

    def run(vec):
        v = np.broadcast_to(vec[0::3], (n, nc)).copy()
        g = np.stack([np.broadcast_to(vec[1::3], (n, nc)), np.broadcast_to(vec[2::3], (n, nc))], -1).copy()
        s0, s1, s2 = plugin.weak(c, v, g)
        s0, s1, s2 = (np.broadcast_to(np.asarray(s, float), (n, nc)) for s in (s0, s1, s2))
        out = np.empty((n, 3 * nc))
        out[:, 0::3], out[:, 1::3], out[:, 2::3] = s0, s1, s2
        return out

    b = run(np.zeros(3 * nc))
    K = np.empty((n, 3 * nc, 3 * nc))
    for j in range(3 * nc):
        e = np.zeros(3 * nc)
        e[j] = 1.0
        K[:, :, j] = run(e) - b
    return K, b


# ---------------------------------------------------------------- PINN


def _check_arch(spec, arch):
    want_in = 3 if spec.family == "parametric" else 2
    if arch.n_out != spec.n_out:
        raise ConfigurationError(f"{spec.case_id} needs {spec.n_out} network outputs, got {arch.n_out}")
    if arch.n_in != want_in:
        raise ConfigurationError(f"{spec.case_id} needs {want_in} network inputs, got {arch.n_in}")


def pinn_residuals(spec: ProblemSpec, evaluator, w, points, coefficients=None):
    """Strong-form residuals ``(n, n_out)`` of the evaluated field at ``points``."""
    points = np.atleast_2d(points)
    plugin = problem_residual_plugins(spec)
    c = coefficients if coefficients is not None else plugin.torchify(plugin.coefficients(points))
    j = evaluator(w, points, 2)
    return plugin.strong(c, j.value, j.jacobian, j.hessian)


class PinnModel:
    """Strong-form loss ``sum r_i^2`` plus the method-specific boundary term.

    Parametric problems evaluate the network at ``(x, y, p)`` for every
    training parameter and sum the per-parameter losses.
    """

    def __init__(self, spec: ProblemSpec, method: BcMethod, arch: MlpArchitecture, points, boundary_points=None,
                 p_values=None, lam_reg=0.0):
        if isinstance(method, Nitsche):
            raise ConfigurationError("Nitsche's method is only available for VPINNs")
        _check_arch(spec, arch)
        self.spec, self.method, self.arch, self.lam_reg = spec, method, arch, lam_reg
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.plugin = problem_residual_plugins(spec)
        if spec.family == "parametric":
            if p_values is None:
                p_values = spec.params["range"].train_values()
            self.instances = [parametric_instance(spec, p) for p in p_values]
        else:
            self.instances = [spec]
        self.evaluators, self.coefs, self.bdata = [], [], []
        for inst in self.instances:
            ev = network_evaluator(arch, inst.params.get("p"))
            if is_exact(method):
                layer = BLayer.for_problem(inst, method)
                bad = layer.adf.near_vertex(self.points)
                if np.any(bad):
                    raise ConfigurationError(
                        f"{int(bad.sum())} collocation points lie inside the vertex-exclusion zone of the ADF"
                    )
                ev = apply_b_layer(layer.adf, layer.gbars, ev)
            self.evaluators.append(ev)
            self.coefs.append(self.plugin.torchify(self.plugin.coefficients(self.points, inst)))
            if isinstance(method, Penalty):
                if boundary_points is None:
                    raise ConfigurationError("the penalty method needs boundary control points")
                bp = np.atleast_2d(boundary_points)
                g = np.stack([np.asarray(jets.value(gc(bp[:, 0], bp[:, 1])), float) * np.ones(len(bp))
                              for gc in _component_data(inst)], -1)
                self.bdata.append((bp, _t(g)))

    def residuals(self, w, k=0):
        return pinn_residuals(self.instances[k], self.evaluators[k], w, self.points, self.coefs[k])

    def boundary_mismatch(self, w, k=0):
        bp, g = self.bdata[k]
        return self.evaluators[k](w, bp, 0).value - g

    def loss(self, w):
        total = 0.0
        for k in range(len(self.instances)):
            total = total + torch.sum(self.residuals(w, k) ** 2)
            if isinstance(self.method, Penalty):
                total = total + self.method.lam * torch.sum(self.boundary_mismatch(w, k) ** 2)
        if self.lam_reg:
            total = total + l2_penalty(w, self.lam_reg)
        return total

    def field(self, w, k=0):
        """``points -> (value, gradient)`` of the trained field for H1 measurement."""
        ev = self.evaluators[k]

        def sample(points):
            j = ev(w, points, 1)
            v, g = j.value.detach().numpy(), j.jacobian.detach().numpy()
            return (v[:, 0], g[:, 0]) if self.spec.n_out == 1 else (v, g)

        return sample


def pinn_loss(model: PinnModel, w):
    return model.loss(w)


def _component_data(spec: ProblemSpec):
    return [b.dirichlet_data[0] for b in component_boundaries(spec)]


# ---------------------------------------------------------------- VPINN discretization


def _sp_to_torch(A):
    A = A.tocoo()
    idx = torch.as_tensor(np.vstack([A.row, A.col]), dtype=torch.int64)
    return torch.sparse_coo_tensor(idx, torch.as_tensor(A.data, dtype=DTYPE), A.shape, check_invariants=False).coalesce()


def _basis_matrix(space: LagrangeSpace, elements, points, n_rows):
    dofs, vals, grads = space.basis_at(elements, points)
    rows = np.repeat(np.arange(n_rows), dofs.shape[1])
    shape = (n_rows, space.dim)
    mk = lambda d: sp.csr_matrix((d.ravel(), (rows, dofs.ravel())), shape=shape)  # noqa: E731
    return mk(vals), mk(grads[..., 0]), mk(grads[..., 1])


@dataclass
class EdgeQuadrature:
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    elements: np.ndarray  # owning fine element


def edge_quadrature(mesh, edge_ids, order) -> EdgeQuadrature:
    owners, normals = mesh.edge_owner()
    s, ws = gauss_legendre_01(order)
    e = mesh.boundary_edges[edge_ids]
    a, b = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    L = np.linalg.norm(b - a, axis=1)
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    wts = L[:, None] * ws[None, :]
    nq = len(s)
    return EdgeQuadrature(
        pts.reshape(-1, 2),
        wts.ravel(),
        np.repeat(normals[edge_ids], nq, axis=0),
        np.repeat(owners[edge_ids], nq),
    )


class VpinnDiscretization:
    """Trial space on the coarse mesh, test space on the fine one, and the
    sparse operators that map trial coefficients to weak residuals.

    ``enlarged`` keeps test functions that do not vanish on the Dirichlet
    boundary (Nitsche). Quadrature of order ``q`` runs over fine elements.
    """

    def __init__(self, spec: ProblemSpec, pair: NestedMeshPair, k_int: int, k_test: int, q: int, enlarged=False):
        if int(q) < 1:
            raise ConfigurationError("quadrature order q must be >= 1")
        self.spec, self.pair = spec, pair
        self.k_int, self.k_test, self.q, self.enlarged = int(k_int), int(k_test), int(q), enlarged
        self.plugin = problem_residual_plugins(spec)
        self.trial = LagrangeSpace(pair.coarse, k_int, spec.boundary)
        self.test = LagrangeSpace(pair.fine, k_test, spec.boundary)
        self.rule = quadrature_for_order(q)
        self.h = pair.fine.meshsize

        mask = np.ones(self.test.dim, bool) if enlarged else ~self.test.boundary_dof_mask
        self.test_index = np.flatnonzero(mask)
        P = sp.csr_matrix(
            (np.ones(len(self.test_index)), (np.arange(len(self.test_index)), self.test_index)),
            shape=(len(self.test_index), self.test.dim),
        )
        self.selector = P

        pts, wts, elems = quadrature_points(pair.fine, self.rule)
        self.qp, self.qw, self.q_elems = pts, wts, elems
        self.U = _basis_matrix(self.trial, pair.containment[elems], pts, len(pts))
        T = _basis_matrix(self.test, elems, pts, len(pts))
        W = sp.diags(wts)
        self.T = [(P @ (W @ M).T).tocsr() for M in T]

        # boundary edges of the fine mesh split by Dirichlet / Neumann tag
        dir_ids = {s.id for s, m in zip(spec.boundary.segments, spec.boundary.dirichlet_mask) if m}
        tags = pair.fine.boundary_tags
        is_dir = np.array([t in dir_ids for t in tags])
        self.neumann = None
        psi = getattr(spec.coefficients, "psi", None)
        if psi is not None and np.any(~is_dir):
            eq = edge_quadrature(pair.fine, np.flatnonzero(~is_dir), q)
            Tn = _basis_matrix(self.test, eq.elements, eq.points, len(eq.points))[0]
            vals = np.asarray(psi(eq.points), float).reshape(len(eq.points), -1)
            self.neumann = P @ (Tn.T @ (eq.weights[:, None] * vals))
        self.dir_edges = np.flatnonzero(is_dir)
        self.nitsche = None
        if enlarged:
            eq = edge_quadrature(pair.fine, self.dir_edges, q)
            Ub = _basis_matrix(self.trial, pair.containment[eq.elements], eq.points, len(eq.points))
            Tb = _basis_matrix(self.test, eq.elements, eq.points, len(eq.points))
            Wb = sp.diags(eq.weights)
            nx, ny = eq.normals[:, 0], eq.normals[:, 1]
            self.nitsche = {
                "eq": eq,
                "Ub": Ub,
                "Ubn": (sp.diags(nx) @ Ub[1] + sp.diags(ny) @ Ub[2]).tocsr(),
                "Tb": (P @ (Wb @ Tb[0]).T).tocsr(),
                "Tbn": (P @ (Wb @ (sp.diags(nx) @ Tb[1] + sp.diags(ny) @ Tb[2])).T).tocsr(),
                "Tbx": (P @ (Wb @ (sp.diags(nx) @ Tb[0])).T).tocsr(),
                "Tby": (P @ (Wb @ (sp.diags(ny) @ Tb[0])).T).tocsr(),
            }
        self._torch = None

    # -- helpers

    @property
    def n_test(self):
        return len(self.test_index)

    @property
    def boundary_dofs(self):
        """Trial dofs on the Dirichlet boundary (interpolation nodes = penalty control points)."""
        return np.flatnonzero(self.trial.boundary_dof_mask)

    def boundary_values(self, spec=None):
        spec = spec or self.spec
        pts = self.trial.dof_points[self.boundary_dofs]
        return np.stack([_full(g(pts[:, 0], pts[:, 1]), len(pts)) for g in _component_data(spec)], -1)

    def context(self, spec=None):
        """Coefficients at volume and Dirichlet-edge quadrature points, plus Dirichlet data on edges."""
        spec = spec or self.spec
        ctx = {"vol": self.plugin.coefficients(self.qp, spec)}
        if self.nitsche is not None:
            bp = self.nitsche["eq"].points
            ctx["bnd"] = self.plugin.coefficients(bp, spec)
            ctx["g"] = np.stack([_full(g(bp[:, 0], bp[:, 1]), len(bp)) for g in _component_data(spec)], -1)
        return ctx

    def torch_ops(self):
        if self._torch is None:
            d = {"U": [_sp_to_torch(M) for M in self.U], "T": [_sp_to_torch(M) for M in self.T]}
            if self.nitsche is not None:
                n = self.nitsche
                d["Ub"] = [_sp_to_torch(M) for M in n["Ub"]]
                for k in ("Ubn", "Tb", "Tbn", "Tbx", "Tby"):
                    d[k] = _sp_to_torch(n[k])
            if self.neumann is not None:
                d["neumann"] = _t(self.neumann)
            self._torch = d
        return self._torch

    # -- residuals

    def residuals(self, coefficients, method: Optional[BcMethod] = None, ctx=None):
        """Weak residuals ``(n_test, n_comp)`` for trial coefficients ``(dim U_H,)`` or ``(dim U_H, n_comp)``.

        Works on numpy arrays (scipy operators) and torch tensors (sparse torch
        operators, differentiable). Nitsche terms are added when ``method`` is
        :class:`Nitsche`.
        """
        ctx = ctx or self.context()
        is_t = isinstance(coefficients, torch.Tensor)
        c = coefficients.reshape(self.trial.dim, -1)
        if is_t:
            ops = self.torch_ops()
            mm = torch.sparse.mm
            cv = Plugin.torchify(ctx["vol"])
            U, T = ops["U"], ops["T"]
        else:
            mm = lambda A, x: A @ x  # noqa: E731
            cv = ctx["vol"]
            U, T = self.U, self.T
        v, gx, gy = (mm(M, c) for M in U)
        lib = torch if is_t else np
        s0, s1, s2 = self.plugin.weak(cv, v, lib.stack([gx, gy], -1))
        r = -(mm(T[0], s0) + mm(T[1], s1) + mm(T[2], s2))
        if self.neumann is not None:
            r = r + (ops["neumann"] if is_t else self.neumann)
        if isinstance(method, Nitsche):
            if self.nitsche is None:
                raise ConfigurationError("Nitsche residuals need the enlarged test space")
            r = r + self._nitsche_terms(c, method, ctx, is_t)
        return r

    def _nitsche_terms(self, c, method, ctx, is_t, split=False):
        n = self.nitsche
        if is_t:
            ops = self.torch_ops()
            mm = torch.sparse.mm
            Ub, Ubn, Tb, Tbn, Tbx, Tby = ops["Ub"], ops["Ubn"], ops["Tb"], ops["Tbn"], ops["Tbx"], ops["Tby"]
            cb, g = Plugin.torchify(ctx["bnd"]), _t(ctx["g"])
        else:
            mm = lambda A, x: A @ x  # noqa: E731
            Ub, Ubn, Tb, Tbn, Tbx, Tby = n["Ub"], n["Ubn"], n["Tb"], n["Tbn"], n["Tbx"], n["Tby"]
            cb, g = ctx["bnd"], ctx["g"]
        lib = torch if is_t else np
        wb = mm(Ub[0], c)
        _, s1, s2 = self.plugin.weak(cb, wb, lib.stack([mm(Ub[1], c), mm(Ub[2], c)], -1))
        flux = mm(Tbx, s1) + mm(Tby, s2)  # integral of (s . n) v over the Dirichlet edges
        diff = wb - g
        kappa = self._kappa(cb, method)
        sym = method.adjoint_sign * mm(Tbn, kappa * diff)  # integral of kappa (w - g) dv/dn
        pen = -method.gamma / self.h * mm(Tb, diff)  # gamma h^-1 integral of (g - w) v
        if split:
            return flux, sym, pen
        return flux + sym + pen

    def _kappa(self, cb, method):
        if method.variant == "positive":
            return 1.0
        k = self.plugin.nitsche_weight(cb)
        return k[:, None] if hasattr(k, "ndim") and k.ndim == 1 else k

    def nitsche_added_terms(self, coefficients, method: "Nitsche", ctx=None):
        """The two boundary terms ``(w - g) dv/dn`` and ``gamma h^-1 (g - w) v`` (without the flux)."""
        ctx = ctx or self.context()
        c = np.asarray(coefficients, float).reshape(self.trial.dim, -1)
        _, sym, pen = self._nitsche_terms(c, method, ctx, False, split=True)
        return sym, pen

    def residuals_loop(self, coefficients, method: Optional[BcMethod] = None, ctx=None):
        """Element-by-element evaluation of :meth:`residuals` (numpy only), for cross-checking."""
        ctx = ctx or self.context()
        c = np.asarray(coefficients, float).reshape(self.trial.dim, -1)
        nc = c.shape[1]
        full = np.zeros((self.test.dim, nc))
        nq = len(self.rule)
        cv = ctx["vol"]
        for e in range(self.pair.fine.n_elements):
            sl = slice(e * nq, (e + 1) * nq)
            pts = self.qp[sl]
            parent = np.full(nq, self.pair.containment[e])
            tdofs, tv, tg = self.trial.basis_at(parent, pts)
            ce = c[tdofs]  # (nq, nloc, nc)
            v = np.einsum("ql,qlc->qc", tv, ce)
            g = np.einsum("qlc,qli->qci", ce, tg)
            local = {k: (a[sl] if isinstance(a, np.ndarray) else a) for k, a in cv.items()}
            s0, s1, s2 = self.plugin.weak(local, v, g)
            s0, s1, s2 = (np.broadcast_to(s, (nq, nc)) for s in (s0, s1, s2))
            vdofs, vv, vg = self.test.basis_at(np.full(nq, e), pts)
            wq = self.qw[sl]
            contrib = (
                np.einsum("q,ql,qc->lc", wq, vv[:], s0)
                + np.einsum("q,ql,qc->lc", wq, vg[..., 0], s1)
                + np.einsum("q,ql,qc->lc", wq, vg[..., 1], s2)
            )
            np.subtract.at(full, vdofs[0], contrib)
        if self.neumann is not None:
            full[self.test_index] += self.neumann
        if isinstance(method, Nitsche):
            eq = self.nitsche["eq"]
            nq1 = len(gauss_legendre_01(self.q)[0])
            for k in range(len(self.dir_edges)):
                sl = slice(k * nq1, (k + 1) * nq1)
                pts, wq, nrm, el = eq.points[sl], eq.weights[sl], eq.normals[sl], eq.elements[sl]
                tdofs, tv, tg = self.trial.basis_at(self.pair.containment[el], pts)
                ce = c[tdofs]
                v = np.einsum("ql,qlc->qc", tv, ce)
                g = np.einsum("qlc,qli->qci", ce, tg)
                local = {kk: (a[sl] if isinstance(a, np.ndarray) else a) for kk, a in ctx["bnd"].items()}
                _, s1, s2 = self.plugin.weak(local, v, g)
                flux = np.broadcast_to(s1, (nq1, nc)) * nrm[:, :1] + np.broadcast_to(s2, (nq1, nc)) * nrm[:, 1:]
                diff = v - ctx["g"][sl]
                kappa = self._kappa(local, method)
                vdofs, vv, vg = self.test.basis_at(el, pts)
                dvn = vg[..., 0] * nrm[:, :1] + vg[..., 1] * nrm[:, 1:]
                contrib = (
                    np.einsum("q,ql,qc->lc", wq, vv, flux)
                    + method.adjoint_sign * np.einsum("q,ql,qc->lc", wq, dvn, kappa * diff)
                    - method.gamma / self.h * np.einsum("q,ql,qc->lc", wq, vv, diff)
                )
                np.add.at(full, vdofs[0], contrib)
        return full[self.test_index]

    def assemble(self, method: Optional[BcMethod] = None, ctx=None):
        """Affine form ``r = F - A c`` with ``c`` flattened component-major.

        Returns ``(A, F)`` (scipy CSR, dense vector). Only for families whose
        weak integrand is affine in the trial function.
        """
        if not self.plugin.affine:
            raise ConfigurationError(f"the {self.spec.family} residuals are not affine in the trial coefficients")
        ctx = ctx or self.context()
        nc = self.plugin.n_comp
        K, b = _affine_probe(self.plugin, ctx["vol"], len(self.qp))
        blocks = [[None] * nc for _ in range(nc)]
        F = np.zeros((nc, self.n_test))
        for oc in range(nc):
            for sk in range(3):
                o = 3 * oc + sk
                F[oc] -= self.T[sk] @ b[:, o]
                for ic in range(nc):
                    for uk in range(3):
                        kk = K[:, o, 3 * ic + uk]
                        if not np.any(kk):
                            continue
                        term = self.T[sk] @ sp.diags(kk) @ self.U[uk]
                        blocks[oc][ic] = term if blocks[oc][ic] is None else blocks[oc][ic] + term
        for oc in range(nc):
            for ic in range(nc):
                if blocks[oc][ic] is None:
                    blocks[oc][ic] = sp.csr_matrix((self.n_test, self.trial.dim))
        A = sp.bmat(blocks, format="csr")
        F = F.ravel()
        if self.neumann is not None:
            F = F + self.neumann.T.ravel()
        if isinstance(method, Nitsche):
            n = self.nitsche
            Kb, bb = _affine_probe(self.plugin, ctx["bnd"], len(n["eq"].points))
            nb = [[None] * nc for _ in range(nc)]
            Fb = np.zeros((nc, self.n_test))
            Tx, Ty = n["Tbx"], n["Tby"]
            nb_pts = len(n["eq"].points)
            kappa = np.broadcast_to(np.asarray(self._kappa(ctx["bnd"], method), float), (nb_pts, nc))
            sgn = method.adjoint_sign
            for oc in range(nc):
                for ic in range(nc):
                    M = sp.csr_matrix((self.n_test, self.trial.dim))
                    for uk in range(3):
                        kx = Kb[:, 3 * oc + 1, 3 * ic + uk]
                        ky = Kb[:, 3 * oc + 2, 3 * ic + uk]
                        if np.any(kx):
                            M = M - Tx @ sp.diags(kx) @ n["Ub"][uk]
                        if np.any(ky):
                            M = M - Ty @ sp.diags(ky) @ n["Ub"][uk]
                    if oc == ic:
                        M = M - sgn * (n["Tbn"] @ sp.diags(kappa[:, oc]) @ n["Ub"][0])
                        M = M + method.gamma / self.h * (n["Tb"] @ n["Ub"][0])
                    nb[oc][ic] = M
                g = ctx["g"][:, oc]
                Fb[oc] = -sgn * (n["Tbn"] @ (kappa[:, oc] * g)) + method.gamma / self.h * (n["Tb"] @ g)
                Fb[oc] += Tx @ bb[:, 3 * oc + 1] + Ty @ bb[:, 3 * oc + 2]
            A = (A + sp.bmat(nb, format="csr")).tocsr()
            F = F + Fb.ravel()
        return A, F


def trial_refinement_factor(k_int: int, k_test: int) -> int:
    """Nesting factor ``ceil(k_int / k_test)`` between trial and test meshes."""
    return max(1, ceil(k_int / k_test))


# ---------------------------------------------------------------- VPINN model


class VpinnModel:
    """Interpolated VPINN: ``trial = I_H(B u)`` (exact modes) or ``I_H(u)``.

    With ``interpolate=False`` the network (or its B-wrapped version) is used
    directly at the quadrature points instead of through ``I_H``.
    """

    def __init__(self, spec: ProblemSpec, method: BcMethod, arch: MlpArchitecture, disc: VpinnDiscretization,
                 p_values=None, lam_reg=0.0, interpolate=True):
        _check_arch(spec, arch)
        if isinstance(method, Nitsche) and not disc.enlarged:
            raise ConfigurationError("Nitsche's method needs a discretization built with enlarged=True")
        self.spec, self.method, self.arch, self.disc = spec, method, arch, disc
        self.lam_reg, self.interpolate = lam_reg, interpolate
        if spec.family == "parametric":
            if p_values is None:
                p_values = spec.params["range"].train_values()
            self.instances = [parametric_instance(spec, p) for p in p_values]
        else:
            self.instances = [spec]
        nodes = disc.trial.dof_points
        self.nodes = nodes
        self.ctx, self.evaluators, self.nodal, self.gB = [], [], [], []
        for inst in self.instances:
            ctx = disc.context(inst)
            self.ctx.append(ctx)
            ev = network_evaluator(arch, inst.params.get("p"))
            phi = gb = None
            if is_exact(method):
                layer = BLayer.for_problem(inst, method)
                phi, gb = layer.nodal(nodes)
                if not interpolate:
                    ev = apply_b_layer(layer.adf, layer.gbars, ev)
            self.evaluators.append(ev)
            self.nodal.append((None if phi is None else _t(phi), None if gb is None else _t(gb)))
            self.gB.append(_t(disc.boundary_values(inst)))
        if not interpolate:
            if isinstance(method, Nitsche):
                raise ConfigurationError("Nitsche's method needs the interpolated trial space")
            self._qp_ctx = [Plugin.torchify(c["vol"]) for c in self.ctx]

    def coefficients(self, w, k=0):
        """Trial coefficients ``(dim U_H, n_comp)`` as a torch tensor."""
        u = self.evaluators[k](w, self.nodes, 0).value
        phi, gb = self.nodal[k]
        if phi is None:
            return u
        return gb + phi[:, None] * u

    def residuals(self, w, k=0):
        if self.interpolate:
            return self.disc.residuals(self.coefficients(w, k), self.method, self.ctx[k])
        d = self.disc
        j = self.evaluators[k](w, d.qp, 1)
        s0, s1, s2 = d.plugin.weak(self._qp_ctx[k], j.value, j.jacobian)
        ops = d.torch_ops()
        return -(torch.sparse.mm(ops["T"][0], s0) + torch.sparse.mm(ops["T"][1], s1) + torch.sparse.mm(ops["T"][2], s2))

    def loss(self, w):
        total = 0.0
        for k in range(len(self.instances)):
            total = total + torch.sum(self.residuals(w, k) ** 2)
            if isinstance(self.method, Penalty):
                c = self.coefficients(w, k)
                total = total + self.method.lam * torch.sum((c[self.disc.boundary_dofs] - self.gB[k]) ** 2)
        if self.lam_reg:
            total = total + l2_penalty(w, self.lam_reg)
        return total

    def trial(self, w, k=0) -> TrialFunction:
        c = self.coefficients(w, k).detach().numpy()
        return TrialFunction(self.disc.trial, c[:, 0] if c.shape[1] == 1 else c)

    def field(self, w, k=0):
        if self.interpolate:
            return self.trial(w, k)
        ev = self.evaluators[k]

        def sample(points):
            j = ev(w, points, 1)
            v, g = j.value.detach().numpy(), j.jacobian.detach().numpy()
            return (v[:, 0], g[:, 0]) if self.spec.n_out == 1 else (v, g)

        return sample


def vpinn_residuals(spec: ProblemSpec, trial: TrialFunction, pair: NestedMeshPair, k_test: int, q: int):
    """Weak residuals of a given trial function against the standard test space."""
    disc = VpinnDiscretization(spec, pair, trial.space.degree, k_test, q)
    return disc.residuals(trial.coefficients)


def nitsche_residuals(spec: ProblemSpec, trial: TrialFunction, pair: NestedMeshPair, k_test: int, gamma: float, q: int,
                      variant: str = "nonsymmetric"):
    method = Nitsche(gamma, variant)
    disc = VpinnDiscretization(spec, pair, trial.space.degree, k_test, q, enlarged=True)
    return disc.residuals(trial.coefficients, method)


def vpinn_loss(model: VpinnModel, w):
    return model.loss(w)
