import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinn_bc import jets
from pinn_bc.adf import (
    AdfField,
    InconsistentBoundaryData,
    PolygonalBoundary,
    Segment,
    TransfiniteExtension,
    load_polygon,
    quadrant_fixture,
    quadrant_reference,
    save_polygon,
    segment_adf,
)
from pinn_bc.mesh import domain_boundary

DOMAINS = ["unit_square", "l_shape", "square_with_hole"]


def test_jet_chain_rule_matches_closed_form():
    pts = np.array([[0.3, -0.2], [1.1, 0.7]])
    j = jets.evaluate(lambda x, y: jets.sin(x * y) + jets.exp(x) / (1 + y * y), pts, 2)
    x, y = pts.T
    assert np.allclose(j.val, np.sin(x * y) + np.exp(x) / (1 + y * y))
    dx = y * np.cos(x * y) + np.exp(x) / (1 + y * y)
    dy = x * np.cos(x * y) - 2 * y * np.exp(x) / (1 + y * y) ** 2
    assert np.allclose(j.grad, np.stack([dx, dy], -1))
    hxy = np.cos(x * y) - x * y * np.sin(x * y) - 2 * y * np.exp(x) / (1 + y * y) ** 2
    assert np.allclose(j.hess[:, 0, 1], hxy)
    assert np.allclose(j.hess[:, 0, 1], j.hess[:, 1, 0])


def test_jet_sqrt_and_power():
    pts = np.array([[0.5, 2.0]])
    j = jets.evaluate(lambda x, y: jets.sqrt(x) * y**3, pts, 2)
    assert np.allclose(j.grad, [[0.5 / np.sqrt(0.5) * 8, 3 * np.sqrt(0.5) * 4]])
    assert np.isclose(j.hess[0, 1, 1], 6 * np.sqrt(0.5) * 2)


def test_quadrant_jet_matches_closed_form_away_from_origin():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.05, 2, (50, 2))
    for m in (1, 2):
        s = quadrant_fixture("normalized", m).sample(pts)
        ref = quadrant_reference(m, pts)
        assert np.allclose(s.value, ref.value, atol=1e-13)
        assert np.allclose(s.gradient, ref.gradient, atol=1e-12)
        assert np.allclose(s.hessian, ref.hessian, atol=1e-10)


def test_segment_adf_vanishes_on_segment_only():
    seg = Segment((0.0, 0.0), (1.0, 0.0))
    assert abs(segment_adf(seg, np.array([0.4, 0.0]))) < 1e-15
    assert segment_adf(seg, np.array([0.4, 0.3])) != 0.0


@pytest.mark.parametrize("domain", DOMAINS)
@pytest.mark.parametrize("mode,m", [("normalized", 1), ("normalized", 2), ("product", 1)])
@settings(max_examples=25, deadline=None)
@given(t=st.floats(0.0, 1.0))
def test_adf_zero_on_boundary_positive_inside(domain, mode, m, t):
    b = domain_boundary(domain)
    adf = AdfField.from_boundary(b, mode, m)
    pts = np.array([s.point_at(t) for s in b.dirichlet_segments])
    assert np.max(np.abs(adf.value(pts))) < 1e-12


@pytest.mark.parametrize("domain", DOMAINS)
def test_adf_positive_in_interior(domain):
    from pinn_bc.mesh import uniform_points

    pts = uniform_points(domain, 300, np.random.default_rng(2), margin=1e-3)
    for mode in ("normalized", "product"):
        assert np.all(AdfField.from_boundary(domain_boundary(domain), mode).value(pts) > 0)


def test_laplacian_withheld_near_vertices():
    adf = AdfField.from_boundary(domain_boundary("l_shape"), "normalized", 1)
    s = adf.sample(np.array([[1 - 1e-5, 1 - 1e-5], [0.3, 0.4]]))
    assert not s.laplacian_ok[0] and np.isnan(s.laplacian[0])
    assert s.laplacian_ok[1] and np.isfinite(s.laplacian[1])


@settings(max_examples=40, deadline=None)
@given(t=st.floats(0.0, 1.0), k=st.integers(0, 7))
def test_transfinite_reproduces_boundary_data(t, k):
    g = lambda x, y: jets.sin(x) * y + x * x  # noqa: E731
    b = domain_boundary("square_with_hole").with_data(g)
    seg = b.dirichlet_segments[k]
    p = seg.point_at(np.array([t]))
    assert np.allclose(TransfiniteExtension(b).value(p), g(p[:, 0], p[:, 1]), atol=1e-12)


def test_transfinite_rejects_inconsistent_corner_data():
    b = domain_boundary("unit_square")
    data = tuple((lambda x, y, c=c: 0 * x + c) for c in range(len(b.segments)))
    ext = TransfiniteExtension(PolygonalBoundary(b.segments, b.dirichlet_mask, data))
    with pytest.raises(InconsistentBoundaryData):
        ext.value(np.array([[0.0, 0.0]]))


def test_boundary_needs_dirichlet_segment():
    seg = Segment((0.0, 0.0), (1.0, 0.0))
    with pytest.raises(ValueError):
        PolygonalBoundary((seg,), (False,))


def test_polygon_roundtrip(tmp_path):
    b = domain_boundary("rect_xt")
    save_polygon(b, tmp_path / "p.txt")
    c = load_polygon(tmp_path / "p.txt")
    assert c.dirichlet_mask == b.dirichlet_mask
    assert all(np.allclose(s.a, r.a) and np.allclose(s.b, r.b) for s, r in zip(b.segments, c.segments))
