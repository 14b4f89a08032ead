"""Benchmark problems: coefficients, manufactured sources and exact solutions.

Every callable here is written with the :mod:`jets` operations, so the same
expression evaluates on numpy arrays, torch tensors and second-order jets.
Sources of problems with an exact solution are manufactured by pushing the
exact solution through the strong operator in jet arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from . import jets
from .adf import FunctionField, PolygonalBoundary
from .errors import ConfigurationError
from .fem import LagrangeSpace, TrialFunction
from .mesh import canonical_domain, domain_boundary, load_mesh, uniform_points

FAMILIES = ("elliptic", "parametric", "elasticity", "eikonal", "convection")


@dataclass(frozen=True)
class EllipticCoefficients:
    """``-div(mu grad u) + beta . grad u + sigma u = f`` with optional Neumann datum ``psi``."""

    mu: Callable
    beta: Callable  # (x, y) -> (b1, b2)
    sigma: Callable
    f: Optional[Callable] = None  # points (n, 2) -> (n,)
    psi: Optional[Callable] = None

    def check_well_posed(self, domain: str, n=1000, mu0=1e-12, seed=0):
        """Sampled coercivity check: ``mu >= mu0`` and ``sigma - div(beta)/2 >= -1e-10``."""
        pts = uniform_points(domain, n, np.random.default_rng(seed), margin=1e-3)
        x, y = pts[:, 0], pts[:, 1]
        mu = np.broadcast_to(jets.value(self.mu(x, y)), x.shape)
        if mu.min() < mu0:
            raise ConfigurationError(f"diffusion coefficient drops to {mu.min():.3g}")
        eps = 1e-6
        bxp, _ = self.beta(x + eps, y)
        bxm, _ = self.beta(x - eps, y)
        _, byp = self.beta(x, y + eps)
        _, bym = self.beta(x, y - eps)
        div = (np.asarray(bxp) - bxm) / (2 * eps) + (np.asarray(byp) - bym) / (2 * eps)
        sig = np.broadcast_to(jets.value(self.sigma(x, y)), x.shape)
        if (sig - 0.5 * div).min() < -1e-10:
            raise ConfigurationError("sigma - div(beta)/2 is negative somewhere")
        return float(mu.min()), float((sig - 0.5 * div).min())


@dataclass(frozen=True)
class ParameterRange:
    low: float = 0.5
    high: float = 2.0
    n_train: int = 13
    n_test: int = 100

    def __post_init__(self):
        if not self.low < self.high:
            raise ConfigurationError("empty parameter interval")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("parameter set sizes must be positive")

    def contains(self, p) -> bool:
        return self.low - 1e-14 <= p <= self.high + 1e-14

    def train_values(self):
        return np.linspace(self.low, self.high, self.n_train)

    def test_values(self, seed=None):
        """Evenly spaced unless a seed asks for a uniform random draw."""
        if seed is None:
            return np.linspace(self.low, self.high, self.n_test)
        return np.sort(np.random.default_rng(seed).uniform(self.low, self.high, self.n_test))


@dataclass(frozen=True)
class ProblemSpec:
    case_id: str
    family: str
    domain: str
    boundary: PolygonalBoundary
    coefficients: object = None
    exact: Optional[Callable] = None  # jet-compatible (x, y) -> value or [values]
    n_out: int = 1
    params: dict = field(default_factory=dict)
    adf: Optional[FunctionField] = None  # closed-form ADF replacing the polygon ADF
    gbar: Optional[Callable] = None  # closed-form lifting replacing the transfinite blend
    reference: Optional[TrialFunction] = None

    @property
    def has_exact(self):
        return self.exact is not None

    @property
    def n_in(self):
        return 3 if self.family == "parametric" and "p" not in self.params else 2

    def source(self, points):
        """Source values at ``points``: ``(n,)`` or ``(n, n_out)``."""
        return self.coefficients.f(np.atleast_2d(points))

    def exact_sample(self, points):
        """Value and gradient of the exact (or reference) solution."""
        from .fem import exact_field

        if self.exact is not None:
            return exact_field(self.exact)(points)
        if self.reference is not None:
            return self.reference.sample(points)
        raise ConfigurationError(f"problem {self.case_id!r} has neither an exact nor a reference solution")

    def with_reference(self, reference: TrialFunction) -> "ProblemSpec":
        return replace(self, reference=reference)


# ---------------------------------------------------------------- coefficient data

def _mu41(x, y):
    return 2.0 + jets.sin(x + 2.0 * y)


def _beta41(x, y):
    return jets.sqrt(x - y * y + 5.0), jets.sqrt(y - x * x + 5.0)


def _sigma41(x, y):
    return jets.exp(x / 2.0 - y / 3.0) + 2.0


def sol2(x, y):
    s = x + y / 2.0
    return jets.cos(5.0 * s) + s * s


def sol5(x, y):
    return jets.sin(3.0 * x * (x - y)) * jets.cos(4.0 * y + x) + jets.sin(5.0 * (x + 2.0 * y)) * jets.cos(
        3.0 * (y - 2.0 * x)
    )


def _const(c):
    return lambda x, y: 0.0 * x + c


def elliptic_operator(coef: EllipticCoefficients, u: jets.Jet, x: jets.Jet, y: jets.Jet, reaction=None):
    """Strong operator applied to a second-order jet ``u``; returns values.

    ``reaction(u_value)`` overrides the linear ``sigma * u`` term.
    """
    mu = coef.mu(x, y)
    mu = mu if isinstance(mu, jets.Jet) else jets.Jet.constant(mu, len(u))
    b1, b2 = coef.beta(x, y)
    b1, b2 = jets.value(b1), jets.value(b2)
    sig = jets.value(coef.sigma(x, y))
    div_flux = mu.val * u.laplacian + (mu.grad * u.grad).sum(-1)
    react = sig * u.val if reaction is None else reaction(u.val)
    return -div_flux + b1 * u.grad[:, 0] + b2 * u.grad[:, 1] + react


def _manufactured(coef_fn, exact, reaction=None):
    def f(points):
        points = np.atleast_2d(points)
        x, y = jets.Jet.coordinates(points)
        coef = coef_fn()
        return elliptic_operator(coef, exact(x, y), x, y, reaction)

    return f


def _elliptic_case(case_id, exact, domain):
    coef0 = EllipticCoefficients(_mu41, _beta41, _sigma41)
    f = _manufactured(lambda: coef0, exact)
    coef = replace(coef0, f=f)
    boundary = domain_boundary(domain).with_data(exact)
    return ProblemSpec(case_id, "elliptic", domain, boundary, coef, exact)


# ---------------------------------------------------------------- parametric

PARAM_RANGE = ParameterRange()
PARAM_MU, PARAM_BETA, PARAM_SIGMA = 1.0, (2.0, 3.0), 4.0


def sol_param(p):
    def u(x, y):
        return jets.sin(p * math.pi * x) * jets.sin(math.pi * y / p)

    return u


def _param_coefficients(p, exact):
    coef0 = EllipticCoefficients(_const(PARAM_MU), lambda x, y: (_const(PARAM_BETA[0])(x, y), _const(PARAM_BETA[1])(x, y)),
                                 _const(PARAM_SIGMA))
    reaction = lambda u: PARAM_SIGMA * jets.sin(p * u) * u  # noqa: E731
    return replace(coef0, f=_manufactured(lambda: coef0, exact, reaction))


def parametric_instance(spec: ProblemSpec, p: float) -> ProblemSpec:
    """The nonlinear problem frozen at parameter ``p`` (rebuilds ``f`` and ``g``)."""
    rng_ = spec.params.get("range", PARAM_RANGE)
    if not rng_.contains(p):
        raise ConfigurationError(f"parameter {p} outside [{rng_.low}, {rng_.high}]")
    exact = sol_param(float(p))
    params = dict(spec.params, p=float(p))
    return replace(
        spec,
        exact=exact,
        boundary=spec.boundary.with_data(exact),
        coefficients=_param_coefficients(float(p), exact),
        params=params,
    )


def _parametric_case(domain="unit_square"):
    base = domain_boundary(domain)
    spec = ProblemSpec("parametric", "parametric", domain, base.with_data(sol_param(1.0)), None, None,
                       params={"range": PARAM_RANGE})
    return spec


# ---------------------------------------------------------------- elasticity

@dataclass(frozen=True)
class ElasticityCoefficients:
    E: float = 117.0
    nu: float = 1.0 / 3.0
    f: Optional[Callable] = None

    @property
    def lame(self):
        mu = self.E / (2 * (1 + self.nu))
        lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        return lam, mu


def _elasticity_case(domain="l_shape"):
    coef0 = ElasticityCoefficients()
    lam, mu = coef0.lame

    def f(points):
        x, y = np.atleast_2d(points).T
        return (mu + lam) * np.stack([x * np.exp(y), y * np.sqrt(x + 2.0)], -1)

    g = [lambda x, y: jets.sin(math.pi * (x + y)) * x * y, lambda x, y: jets.exp(x - y) * x * y]
    boundary = domain_boundary(domain)
    return ProblemSpec("elasticity", "elasticity", domain, boundary, replace(coef0, f=f), None, n_out=2,
                       params={"g": g})


def component_boundaries(spec: ProblemSpec):
    """One scalar-data boundary per output component."""
    if spec.n_out == 1:
        return [spec.boundary]
    return [spec.boundary.with_data(g) for g in spec.params["g"]]


# ---------------------------------------------------------------- eikonal, convection

@dataclass(frozen=True)
class EikonalCoefficients:
    eps: float = 0.1
    floor: float = 1e-12
    f: Optional[Callable] = None


def _eikonal_case(domain="l_shape"):
    coef = EikonalCoefficients(f=lambda points: np.ones(len(np.atleast_2d(points))))
    boundary = domain_boundary(domain).with_data(_const(0.0))
    return ProblemSpec("eikonal", "eikonal", domain, boundary, coef, None)


@dataclass(frozen=True)
class ConvectionCoefficients:
    beta: float = 30.0
    f: Optional[Callable] = None


def _convection_case(beta=30.0):
    exact = lambda x, t: jets.sin(x - beta * t)  # noqa: E731
    coef = ConvectionCoefficients(beta, f=lambda points: np.zeros(len(np.atleast_2d(points))))
    # x = 0 carries g(t) = -sin(beta t), t = 0 carries h(x) = sin(x); both are traces of the exact solution
    boundary = domain_boundary("rect_xt").with_data(exact)
    adf = FunctionField(lambda x, t: x * t)
    gbar = lambda x, t: jets.sin(x) - jets.sin(beta * t)  # noqa: E731
    return ProblemSpec("convection", "convection", "rect_xt", boundary, coef, exact, adf=adf, gbar=gbar,
                       params={"beta": beta})


_CATALOG = {
    "elliptic_sol2": lambda domain: _elliptic_case("elliptic_sol2", sol2, domain or "square_with_hole"),
    "elliptic_sol5": lambda domain: _elliptic_case("elliptic_sol5", sol5, domain or "square_with_hole"),
    "parametric": lambda domain: _parametric_case(domain or "unit_square"),
    "elasticity": lambda domain: _elasticity_case(domain or "l_shape"),
    "eikonal": lambda domain: _eikonal_case(domain or "l_shape"),
    "convection": lambda domain: _convection_case(),
}


def case_ids():
    return sorted(_CATALOG)


def catalog(case_id: str, domain: Optional[str] = None) -> ProblemSpec:
    """Build a benchmark problem; ``domain`` overrides the default domain where meaningful."""
    if case_id not in _CATALOG:
        raise ConfigurationError(f"unknown problem {case_id!r}; choose one of {case_ids()}")
    if domain is not None:
        domain = canonical_domain(domain)
        if case_id == "convection" and domain != "rect_xt":
            raise ConfigurationError("the convection problem lives on the space-time rectangle")
    return _CATALOG[case_id](domain)


def strong_residual_exact(spec: ProblemSpec, points) -> np.ndarray:
    """Strong-form residual of the exact solution, computed with torch autograd
    (independent of the jet path used to manufacture the source)."""
    import torch

    pts = torch.tensor(np.atleast_2d(points), dtype=torch.float64, requires_grad=True)
    x, y = pts[:, 0], pts[:, 1]
    u = spec.exact(x, y)

    def grad(v):
        return torch.autograd.grad(v.sum(), pts, create_graph=True)[0]

    g = grad(u)
    if spec.family == "convection":
        return (g[:, 1] + spec.params["beta"] * g[:, 0]).detach().numpy()
    coef = spec.coefficients
    mu = coef.mu(x, y)
    mu = mu if isinstance(mu, torch.Tensor) else torch.full_like(x, float(mu))
    flux = mu[:, None] * g
    div = grad(flux[:, 0])[:, 0] + grad(flux[:, 1])[:, 1]
    b1, b2 = coef.beta(x, y)
    sig = coef.sigma(x, y)
    if spec.family == "parametric":
        p = spec.params["p"]
        react = sig * torch.sin(p * u) * u
    else:
        react = sig * u
    res = -div + b1 * g[:, 0] + b2 * g[:, 1] + react
    return (res - torch.as_tensor(spec.source(points))).detach().numpy()


def quasi_random_interior(domain: str, n: int, seed=0) -> np.ndarray:
    """Scrambled Sobol points restricted to the domain (rejection from the bounding box)."""
    from .mesh import _DOMAINS

    (x0, x1, y0, y1), _, hole, _ = _DOMAINS[canonical_domain(domain)]
    sampler = qmc.Sobol(2, scramble=True, seed=seed)
    out = []
    while sum(len(o) for o in out) < n:
        u = sampler.random(256)
        p = np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])
        if hole is not None:
            hx0, hx1, hy0, hy1 = hole
            p = p[~((p[:, 0] >= hx0) & (p[:, 0] <= hx1) & (p[:, 1] >= hy0) & (p[:, 1] <= hy1))]
        out.append(p)
    return np.concatenate(out)[:n]


def load_reference(mesh_path, coefficients_path) -> TrialFunction:
    """Reference solution from a mesh file and a whitespace-separated nodal vector.

    The polynomial degree is inferred from the vector length; vector problems
    store one row per node with one column per component.
    """
    mesh = load_mesh(mesh_path)
    coefs = np.loadtxt(coefficients_path, ndmin=1)
    for k in range(1, 7):
        space = LagrangeSpace(mesh, k)
        if space.dim == coefs.shape[0]:
            return TrialFunction(space, coefs)
    raise ConfigurationError(f"{coefficients_path}: {coefs.shape[0]} values match no Lagrange degree on this mesh")
