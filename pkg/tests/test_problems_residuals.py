import numpy as np
import pytest
import torch

from pinn_bc.errors import ConfigurationError
from pinn_bc.fem import LagrangeSpace, interpolate
from pinn_bc.mesh import generate_mesh, refine_to_pair, uniform_points
from pinn_bc.nn import MlpArchitecture, init_weights, weight_gradient
from pinn_bc.problems import (
    EllipticCoefficients,
    case_ids,
    catalog,
    parametric_instance,
    quasi_random_interior,
    strong_residual_exact,
)
from pinn_bc.residuals import (
    ExactNormalized,
    ExactProduct,
    Nitsche,
    Penalty,
    PinnModel,
    VpinnDiscretization,
    VpinnModel,
    make_method,
    nitsche_residuals,
    trial_refinement_factor,
    vpinn_residuals,
)


def test_catalog_ids_and_defaults():
    assert set(case_ids()) >= {"elliptic_sol2", "elliptic_sol5", "parametric", "elasticity", "eikonal", "convection"}
    assert catalog("elliptic_sol2").domain == "square_with_hole"
    assert catalog("elasticity").n_out == 2
    with pytest.raises(ConfigurationError):
        catalog("nope")
    with pytest.raises(ConfigurationError):
        catalog("convection", "l_shape")


def test_sol2_and_convection_anchor_values():
    assert np.isclose(float(catalog("elliptic_sol2").exact(np.array(0.0), np.array(0.0))), 1.0)
    assert abs(float(catalog("convection").exact(np.array(0.0), np.array(0.0)))) < 1e-15


def test_parametric_range_enforced():
    spec = catalog("parametric")
    assert parametric_instance(spec, 2.0).params["p"] == 2.0
    with pytest.raises(ConfigurationError):
        parametric_instance(spec, 2.5)


def test_well_posedness_check_rejects_bad_diffusion():
    good = catalog("elliptic_sol2").coefficients
    good.check_well_posed("square_with_hole")
    bad = EllipticCoefficients(mu=lambda x, y: 0 * x - 1.0, beta=good.beta, sigma=good.sigma, f=good.f, psi=None)
    with pytest.raises(ConfigurationError):
        bad.check_well_posed("unit_square")


@pytest.mark.parametrize("case", ["elliptic_sol2", "elliptic_sol5", "convection"])
def test_manufactured_residual_vanishes(case):
    spec = catalog(case)
    pts = quasi_random_interior(spec.domain, 200, seed=1)
    assert np.max(np.abs(strong_residual_exact(spec, pts))) < 1e-8


def test_method_factory():
    assert make_method("MA", lam=5.0) == Penalty(5.0)
    assert make_method("mb", m=2) == ExactNormalized(2)
    assert isinstance(make_method("mc"), ExactProduct)
    assert make_method("md", gamma=3.0).adjoint_sign == -1.0
    assert make_method("md", nitsche_variant="positive").adjoint_sign == 1.0
    for bad in (lambda: make_method("me"), lambda: Penalty(0.0), lambda: Nitsche(-1.0), lambda: ExactNormalized(0)):
        with pytest.raises(ConfigurationError):
            bad()


def test_refinement_factor():
    assert trial_refinement_factor(4, 1) == 4
    assert trial_refinement_factor(5, 2) == 3
    assert trial_refinement_factor(2, 2) == 1


def _disc(case="elliptic_sol2", dom="unit_square", enlarged=False, k_int=4, k_test=1, q=3):
    spec = catalog(case, dom)
    pair = refine_to_pair(generate_mesh(spec.domain, 1), trial_refinement_factor(k_int, k_test))
    return spec, VpinnDiscretization(spec, pair, k_int, k_test, q, enlarged=enlarged)


def test_standard_test_space_excludes_dirichlet_dofs():
    spec, disc = _disc()
    _, big = _disc(enlarged=True)
    assert big.n_test == big.test.dim
    assert disc.n_test == big.test.dim - big.test.boundary_dof_mask.sum()


def test_residual_of_interpolated_exact_solution_shrinks():
    spec = catalog("elliptic_sol2", "unit_square")
    res, nres = [], []
    for level in (1, 2):
        pair = refine_to_pair(generate_mesh(spec.domain, level), 4)
        w = interpolate(LagrangeSpace(pair.coarse, 4, spec.boundary), spec.exact)
        res.append(np.max(np.abs(vpinn_residuals(spec, w, pair, 1, 3))))
        nres.append(np.max(np.abs(nitsche_residuals(spec, w, pair, 1, 1.0, 3))))
    assert res[1] < res[0] / 8 and nres[1] < nres[0] / 8


def test_vpinn_exact_modes_hit_boundary_values():
    spec, disc = _disc()
    arch = MlpArchitecture.hidden(2, 2, 8)
    w = init_weights(arch, 0)
    for method in (ExactNormalized(1), ExactNormalized(2), ExactProduct()):
        model = VpinnModel(spec, method, arch, disc)
        c = model.coefficients(torch.as_tensor(w)).numpy()[:, 0]
        assert np.allclose(c[disc.boundary_dofs], disc.boundary_values()[:, 0], atol=1e-12)


@pytest.mark.parametrize("code", ["ma", "mb", "mc", "md"])
def test_vpinn_loss_gradient_matches_finite_differences(code):
    method = make_method(code, lam=10.0)
    spec, disc = _disc(enlarged=code == "md")
    arch = MlpArchitecture.hidden(2, 1, 5)
    model = VpinnModel(spec, method, arch, disc)
    w = init_weights(arch, 1)
    _, g = weight_gradient(model.loss, w)
    for i in (0, 7, arch.n_params - 1):
        e = np.zeros_like(w)
        e[i] = 1e-6
        fd = (float(model.loss(torch.as_tensor(w + e))) - float(model.loss(torch.as_tensor(w - e)))) / 2e-6
        assert np.isclose(g[i], fd, rtol=1e-5, atol=1e-8)


def test_vpinn_rejects_nitsche_without_enlarged_space():
    spec, disc = _disc()
    arch = MlpArchitecture.hidden(2, 1, 5)
    with pytest.raises(ConfigurationError):
        VpinnModel(spec, Nitsche(1.0), arch, disc)


def test_pinn_model_guards():
    spec = catalog("elliptic_sol2", "unit_square")
    arch = MlpArchitecture.hidden(2, 1, 5)
    pts = uniform_points("unit_square", 20, np.random.default_rng(0), margin=0.05)
    with pytest.raises(ConfigurationError):
        PinnModel(spec, Nitsche(1.0), arch, pts)
    with pytest.raises(ConfigurationError):
        PinnModel(spec, Penalty(1.0), arch, pts)
    with pytest.raises(ConfigurationError):
        PinnModel(spec, ExactNormalized(1), arch, np.array([[1e-4, 1e-4]]))
    with pytest.raises(ConfigurationError):
        PinnModel(spec, ExactProduct(), MlpArchitecture.hidden(2, 1, 5, 2), pts)


def test_parametric_pinn_sums_over_parameters():
    spec = catalog("parametric")
    arch = MlpArchitecture.hidden(3, 1, 5)
    pts = uniform_points(spec.domain, 15, np.random.default_rng(0), margin=0.05)
    w = torch.as_tensor(init_weights(arch, 0))
    one = [PinnModel(spec, ExactProduct(), arch, pts, p_values=[p]).loss(w) for p in (0.5, 1.0)]
    both = PinnModel(spec, ExactProduct(), arch, pts, p_values=[0.5, 1.0]).loss(w)
    assert torch.isclose(both, one[0] + one[1])
