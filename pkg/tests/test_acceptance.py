"""Acceptance suite: one test per criterion, each printing a pass/fail line."""

import numpy as np
import pytest
import torch

from pinn_bc import jets
from pinn_bc.adf import AdfField, boundary_adf, quadrant_fixture
from pinn_bc.harness import ExperimentConfig, convergence_study, least_squares_oracle, run_experiment, _Setup
from pinn_bc.mesh import domain_boundary, generate_mesh, refine_to_pair
from pinn_bc.nn import DTYPE, MlpArchitecture, NetworkJet, forward, init_weights, input_jet, weight_gradient
from pinn_bc.problems import case_ids, catalog, parametric_instance, strong_residual_exact
from pinn_bc.residuals import (
    BLayer,
    ExactNormalized,
    ExactProduct,
    Nitsche,
    VpinnDiscretization,
    apply_b_layer,
    make_method,
    network_evaluator,
    pinn_residuals,
)

ORACLE_TRIPLES = [(3, 1, 4), (5, 1, 6), (5, 2, 5)]  # (q, k_test, k_int)
METHODS = {"ma": dict(lam=1e3), "mb": dict(m=1), "mc": {}, "md": dict(gamma=1.0)}
# finer collocation than level 2 is needed to resolve sin(x - 30 t); lr0 raised for the short desk-scale schedule
CONVECTION = dict(problem="convection", model="pinn", method="mc", levels=[3], lr0=1e-2, seeds=[0, 1, 2], log_every=0)


def _exact_evaluator(spec):
    """Evaluator returning the exact solution as if it were a network output."""

    def ev(w, points, order=0):
        j = jets.evaluate(spec.exact, np.atleast_2d(points), 2)
        t = lambda a: torch.as_tensor(np.asarray(a, float), dtype=DTYPE)  # noqa: E731
        return NetworkJet(t(j.val)[:, None], t(j.grad)[:, None, :], t(j.hess)[:, None])

    return ev


# 1
def test_quadrant_closed_form_and_vertex_blowup(record_criterion):
    f1, f2 = quadrant_fixture("normalized", 1), quadrant_fixture("normalized", 2)
    s1 = boundary_adf(f1, np.array([1.0, 1.0]))
    c = np.sqrt(0.5)
    s2 = boundary_adf(f2, np.array([c, c]))  # polar (1, pi/4)
    s2b = boundary_adf(f2, np.array([1.0, 1.0]))
    devs = [abs(s1.value - 0.5), abs(s1.laplacian - (-0.5)), abs(s2b.value - 1 / np.sqrt(2)),
            abs(s2.laplacian - (-1.5))]
    ok_values = max(devs) < 1e-10

    rhos = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    laps = []
    for rho in rhos:
        hfd = rho * 1e-3
        p = np.array([rho, rho])
        pts = np.array([p, p + [hfd, 0], p - [hfd, 0], p + [0, hfd], p - [0, hfd]])
        v = f1.value(pts)
        laps.append((v[1] + v[2] + v[3] + v[4] - 4 * v[0]) / hfd**2)
    slope = np.polyfit(np.log(rhos), np.log(np.abs(laps)), 1)[0]
    ok_slope = abs(slope + 1) <= 0.05
    record_criterion(1, ok_values and ok_slope,
                     f"max closed-form deviation {max(devs):.2e} (tol 1e-10); FD Laplacian slope {slope:.4f} (-1 +- 0.05)")


# 2
def test_exact_boundary_conditions_hold_for_random_networks(record_criterion):
    worst = 0.0
    rng = np.random.default_rng(1)
    arch = MlpArchitecture.hidden(2, 2, 20)
    for domain in ("l_shape", "square_with_hole"):
        spec = catalog("elliptic_sol2", domain)
        segs = spec.boundary.dirichlet_segments
        n_per = int(np.ceil(500 / len(segs)))
        pts = spec.boundary.sample(n_per, rng)[:500]
        g = spec.exact(pts[:, 0], pts[:, 1])
        for method in (ExactNormalized(1), ExactNormalized(2), ExactProduct()):
            layer = BLayer.for_problem(spec, method)
            ev = apply_b_layer(layer.adf, layer.gbars, network_evaluator(arch))
            for seed in range(10):
                w = init_weights(arch, seed) + rng.normal(0, 1, arch.n_params)
                bu = ev(w, pts, 0).value.detach().numpy()[:, 0]
                worst = max(worst, float(np.max(np.abs(bu - g))))
    record_criterion(2, worst < 1e-10, f"max |Bu - g| = {worst:.2e} over 2 domains x 3 methods x 10 nets (tol 1e-10)")


# 3
def test_normalized_adf_normal_derivatives(record_criterion):
    boundary = domain_boundary("square_with_hole")
    segs = boundary.dirichlet_segments
    per = int(np.ceil(100 / len(segs)))
    pts, normals = [], []
    for s in segs:
        t = np.linspace(0.1, 0.9, per)
        pts.append(s.point_at(t))
        normals.append(np.tile(s.normal, (per, 1)))
    pts, normals = np.concatenate(pts)[:100], np.concatenate(normals)[:100]
    probe = AdfField.from_boundary(boundary, "normalized", 1)
    # orient normals inward
    inward = np.where((probe.value(pts + 1e-3 * normals) > 0)[:, None], normals, -normals)

    worst1, worst2 = 0.0, 0.0
    for m in (1, 2):
        adf = AdfField.from_boundary(boundary, "normalized", m)
        h = 1e-4
        v = [adf.value(pts + k * h * inward) for k in range(3)]
        d1 = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
        worst1 = max(worst1, float(np.max(np.abs(d1 - 1))))
        if m == 2:
            # the stencil reaches 3h inside, where d_nn phi grows like (distance) x O(100) near hole corners
            h = 1e-4
            v = [adf.value(pts + k * h * inward) for k in range(4)]
            d2 = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
            worst2 = float(np.max(np.abs(d2)))
    record_criterion(3, worst1 < 1e-4 and worst2 < 1e-2,
                     f"max |d_n phi - 1| = {worst1:.2e} (tol 1e-4); max |d_nn phi| (m=2) = {worst2:.2e} (tol 1e-2)")


# 4
def test_differentiation_suite(record_criterion):
    rng = np.random.default_rng(4)
    worst1 = worst2 = 0.0
    for case in range(20):
        depth, width = int(rng.integers(1, 4)), int(rng.integers(3, 12))
        arch = MlpArchitecture.hidden(2, depth, width, int(rng.integers(1, 3)))
        w = init_weights(arch, case) + 0.3 * rng.normal(size=arch.n_params)
        x = rng.uniform(-1, 1, (5, 2))
        j = input_jet(arch, w, x, 2)
        J, H = j.jacobian.numpy(), j.hessian.numpy()
        f = lambda p: forward(arch, w, p).detach().numpy()  # noqa: E731
        h = 1e-6
        Jfd = np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(2)], -1)
        h2 = 1e-4
        Hfd = np.empty_like(H)
        for a in range(2):
            for b in range(2):
                ea, eb = h2 * np.eye(2)[a], h2 * np.eye(2)[b]
                Hfd[..., a, b] = (f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)) / (4 * h2**2)
        worst1 = max(worst1, np.max(np.abs(J - Jfd)) / np.max(np.abs(Jfd)))
        worst2 = max(worst2, np.max(np.abs(H - Hfd)) / np.max(np.abs(Hfd)))

        # weight gradient of a loss that contains second input derivatives
        def loss(wt):
            jj = input_jet(arch, wt, x, 2)
            return torch.sum(jj.value**2) + torch.sum(jj.hessian**2)

        _, g = weight_gradient(loss, w)
        idx = rng.choice(arch.n_params, 8, replace=False)
        gfd = []
        for i in idx:
            e = np.zeros(arch.n_params)
            e[i] = 1e-6
            gfd.append((float(loss(torch.as_tensor(w + e))) - float(loss(torch.as_tensor(w - e)))) / 2e-6)
        gfd = np.array(gfd)
        worst1 = max(worst1, np.max(np.abs(g[idx] - gfd)) / np.max(np.abs(gfd)))
    record_criterion(4, worst1 < 1e-5 and worst2 < 1e-3,
                     f"20 random nets: first-order rel err {worst1:.2e} (tol 1e-5), second-order {worst2:.2e} (tol 1e-3)")


# 5
def test_oracle_convergence_rates(record_criterion):
    lines, ok = [], True
    for q, kt, ki in ORACLE_TRIPLES:
        for code, kw in METHODS.items():
            cfg = ExperimentConfig(problem="elliptic_sol2", domain="unit_square", method=code, levels=[1, 2, 3, 4],
                                   k_int=ki, k_test=kt, q=q, **kw)
            rate = convergence_study(cfg, mode="oracle").rate
            good = ki - 0.6 <= rate <= ki + 0.8
            ok &= good
            lines.append(f"({q},{kt},{ki}){code}={rate:.2f}{'' if good else '!'}")
    record_criterion(5, ok, "H1 rates " + " ".join(lines))


# 6
def test_oscillatory_solution_ordering(record_criterion):
    spec = catalog("elliptic_sol5", "unit_square")
    q, kt, ki = 5, 2, 5
    ok, parts = True, []
    for level in (3, 4):
        err = {c: least_squares_oracle(spec, make_method(c, lam=1e-3, m=1, gamma=1.0), level, ki, kt, q).error
               for c in ("ma", "mb", "md")}
        ok &= err["mb"] <= err["ma"] and err["md"] <= err["ma"]
        parts.append(f"L{level}: ma={err['ma']:.2e} mb={err['mb']:.2e} md={err['md']:.2e}")
    record_criterion(6, ok, "; ".join(parts))


# 7
def test_trained_vpinn_close_to_oracle(record_criterion):
    cfg = ExperimentConfig(problem="elliptic_sol2", domain="unit_square", model="vpinn", method="mb", m=1,
                           levels=[2], k_int=4, k_test=1, q=3, seeds=[0, 1, 2], log_every=0)
    oracle = least_squares_oracle(catalog("elliptic_sol2", "unit_square"), cfg.bc_method(), 2, 4, 1, 3).error
    rec = run_experiment(cfg)
    assert rec.status == "ok", rec.message
    tr = rec.train_record
    qn = np.array(tr.loss[tr.phase_boundary:])
    monotone = bool(np.all(np.diff(qn) <= 0))
    ratio = rec.final_error / oracle
    record_criterion(7, ratio <= 3 and monotone,
                     f"trained {rec.final_error:.3e} vs oracle {oracle:.3e} (ratio {ratio:.2f}, tol 3); "
                     f"quasi-Newton loss monotone: {monotone}")


# 8
def test_convection_pinn(record_criterion):
    cfg = ExperimentConfig(**CONVECTION)
    st = _Setup(cfg, cfg.levels[0], cfg.seeds[0])
    pts = st.model.points
    r_auto = np.max(np.abs(strong_residual_exact(st.spec, pts)))
    r_jet = float(np.max(np.abs(pinn_residuals(st.spec, _exact_evaluator(st.spec), None, pts).numpy())))
    rec = run_experiment(cfg)
    assert rec.status == "ok", rec.message
    rel = rec.relative_error
    ok = rel < 0.5 and max(r_auto, r_jet) < 1e-8
    record_criterion(8, ok, f"best relative H1 {rel:.3f} (tol 0.5) over seeds {cfg.seeds}; "
                            f"exact-solution residual {max(r_auto, r_jet):.1e} at {len(pts)} points (tol 1e-8)")


# 9
def test_dual_path_and_manufactured_residuals(record_criterion):
    rng = np.random.default_rng(9)
    # differences are measured relative to max(1, max|r|): elasticity residuals are O(1e3)
    dual = dual_abs = 0.0
    for case, dom in (("elliptic_sol2", "unit_square"), ("elasticity", "l_shape"), ("eikonal", "l_shape"),
                      ("convection", None)):
        spec = catalog(case, dom)
        pair = refine_to_pair(generate_mesh(spec.domain, 1), 4)
        for method in (None, Nitsche(1.0)):
            if method is not None and case == "eikonal":
                continue
            disc = VpinnDiscretization(spec, pair, 4, 1, 3, enlarged=method is not None)
            c = rng.normal(size=(disc.trial.dim, spec.n_out))
            r1 = disc.residuals(c, method)
            r2 = disc.residuals_loop(c, method)
            r3 = disc.residuals(torch.as_tensor(c), method).numpy()
            scale = max(1.0, float(np.max(np.abs(r1))))
            dual_abs = max(dual_abs, np.max(np.abs(r1 - r2)), np.max(np.abs(r1 - r3)))
            dual = max(dual, np.max(np.abs(r1 - r2)) / scale, np.max(np.abs(r1 - r3)) / scale)
            if spec.family != "eikonal":
                A, F = disc.assemble(method)
                r4 = (F - A @ c.T.ravel()).reshape(spec.n_out, -1).T
                dual_abs = max(dual_abs, np.max(np.abs(r1 - r4)))
                dual = max(dual, np.max(np.abs(r1 - r4)) / scale)

    manu = 0.0
    for case in case_ids():
        spec = catalog(case)
        specs = [parametric_instance(spec, p) for p in (0.5, 1.3, 2.0)] if spec.family == "parametric" else [spec]
        for s in specs:
            if s.exact is None:
                continue
            mesh = generate_mesh(s.domain, 2)
            pts = mesh.vertices if hasattr(mesh, "vertices") else mesh.points
            manu = max(manu, np.max(np.abs(strong_residual_exact(s, pts))))
            manu = max(manu, float(np.max(np.abs(pinn_residuals(s, _exact_evaluator(s), None, pts).numpy()))))

    nit = 0.0
    for case, dom in (("elliptic_sol2", "square_with_hole"), ("elasticity", "l_shape")):
        spec = catalog(case, dom)
        disc = VpinnDiscretization(spec, refine_to_pair(generate_mesh(spec.domain, 1), 4), 4, 1, 3, enlarged=True)
        c = rng.normal(size=(disc.trial.dim, spec.n_out))
        ctx = disc.context()
        ctx["g"] = disc.nitsche["Ub"][0] @ c  # data equal to the trace of w
        for variant in ("nonsymmetric", "positive"):
            sym, pen = disc.nitsche_added_terms(c, Nitsche(1.0, variant), ctx)
            nit = max(nit, np.max(np.abs(sym)), np.max(np.abs(pen)))
    ok = dual < 1e-12 and manu < 1e-8 and nit < 1e-10
    record_criterion(9, ok, f"dual-path max diff {dual:.1e} scaled, {dual_abs:.1e} absolute (tol 1e-12 scaled); manufactured residual {manu:.1e} (tol 1e-8); "
                            f"Nitsche added terms {nit:.1e} (tol 1e-10)")
