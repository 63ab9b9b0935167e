import numpy as np
import pytest
from hypothesis import given, strategies as st

from kamnls.nf_cubic import CubicCoefficients, action_angle_field, nls_field
from kamnls.spaces import (
    FourierScalar, NormContext, SiteSet, SpaceError, TruncatedVectorField, decompose_NXR,
    ell_grid, lip_norm, norm_sap, project_K, project_perp_K, structure_check, xi_grid,
)

seeds = st.integers(0, 2**32 - 1)


def test_site_set():
    S = SiteSet((4, 1), J=6, L=2)
    assert S.splus == (1, 4)
    assert S.d == 2 and S.signed == (-4, -1, 1, 4)
    assert S.is_tangential(-4) and not S.is_tangential(2)
    assert S.normal == (2, 3, 5, 6)
    for bad in [((1, 1), 6), ((0, 2), 6), ((1, 4), 4)]:
        with pytest.raises(SpaceError):
            SiteSet(bad[0], J=bad[1], L=1)


def test_ell_grid_size():
    g = ell_grid(2, 3)
    assert g.shape == (49, 2) and np.abs(g).max() == 3


@given(l1=st.integers(-3, 3), l2=st.integers(-3, 3), j=st.integers(-5, 5),
       s=st.floats(0, 1), a=st.floats(0, 1), p=st.floats(0, 4))
def test_single_mode_norm(l1, l2, j, s, a, p):
    u = FourierScalar.mode(2, 3, 5, (l1, l2), j, s=s, a=a)
    lab = abs(l1) + abs(l2)
    expect = max(1, lab + abs(j)) ** p * np.exp(s * lab) * np.exp(a * abs(j))
    assert norm_sap(u, s, a, p) == pytest.approx(expect, rel=1e-13)


def test_norm_outside_strip_raises():
    u = FourierScalar.mode(1, 1, 1, (0,), 1, s=0.1)
    with pytest.raises(SpaceError):
        norm_sap(u, 0.2, 0.0, 1.0)


@given(seed=seeds, K=st.integers(1, 6), nu=st.floats(0.0, 3.0), p=st.floats(0.0, 3.0))
def test_smoothing(seed, K, nu, p):
    u = FourierScalar.random(np.random.default_rng(seed), 2, 4, 8)
    lhs = norm_sap(project_perp_K(u, K), 0, 0, p)
    assert lhs <= K ** (-nu) * norm_sap(u, 0, 0, p + nu) * (1 + 1e-12)


@given(seed=seeds, K=st.integers(0, 8))
def test_projections_split(seed, K):
    u = FourierScalar.random(np.random.default_rng(seed), 2, 3, 5)
    np.testing.assert_allclose((project_K(u, K) + project_perp_K(u, K)).coef, u.coef)


@given(seed=seeds)
def test_norm_monotone_in_p(seed):
    u = FourierScalar.random(np.random.default_rng(seed), 1, 3, 6)
    assert norm_sap(u, 0, 0, 1) <= norm_sap(u, 0, 0, 2)


@given(seed=seeds)
def test_symmetry_projections(seed):
    u = FourierScalar.random(np.random.default_rng(seed), 2, 2, 4)
    assert u.real_part().is_real() and u.odd_part().is_odd()
    v = u.real_part()
    th = np.array([[0.3, 1.1]])
    assert abs(v.evaluate(th, np.array([0.7])).imag).max() < 1e-12


def test_lip_norm():
    u = FourierScalar.mode(1, 1, 2, (0,), 1)
    fam = [(np.array([0.0]), u), (np.array([0.5]), u * 2.0)]
    val, q = lip_norm(fam, 0.1, 0, 0, 1)
    assert q == pytest.approx(2.0) and val == pytest.approx(2.0 + 0.2)
    assert lip_norm(fam[:1], 0.1, 0, 0, 1)[1] is None


def test_xi_grid():
    pts = xi_grid(3, 0.1)
    assert len(pts) == 9
    assert all(np.all(p >= 0.005 - 1e-15) and np.all(p <= 0.015 + 1e-15) for p in pts)


def test_quadratic_in_y_goes_to_R():
    vf = TruncatedVectorField(2)
    vf.add(("th", 0), (0, 0), (2, 0), (), 1.0)
    vf.add(("y", 1), (1, -1), (1, 1), (), 0.5)
    N, X, R = decompose_NXR(vf)
    assert not N.terms and not X.terms and len(R.terms) == 2


def test_decomposition_partitions():
    vf = TruncatedVectorField(2)
    vf.add(("th", 0), (0, 0), (0, 0), (), 1.0)
    vf.add(("w", 1, 3), (0, 0), (0, 0), ((1, 3),), 2.0)
    vf.add(("y", 0), (1, 0), (0, 0), (), 3.0)
    vf.add(("w", 1, 3), (1, 0), (0, 0), ((1, 3), (1, 5)), 4.0)
    N, X, R = decompose_NXR(vf)
    assert (len(N.terms), len(X.terms), len(R.terms)) == (2, 1, 1)


def test_vector_field_norm_weights():
    vf = TruncatedVectorField(1)
    vf.add(("w", 1, 2), (1,), (0,), (), 1.0)
    assert vf.norm(0.5, 0.25, 1.0, NormContext(r0=0.5)) == pytest.approx(3 * np.exp(0.5 + 0.5) / 0.5)


def test_cubic_nls_field_structure():
    a = CubicCoefficients.from_sequence([1, 0, 0, 0, 0, 0, 0, 0])
    vf = action_angle_field(nls_field(a, 8), (1, 4), [1e-3, 2e-3], degree=3)
    assert structure_check(vf, tol=1e-12) == {"reversible": True, "real_on_real": True, "gauge": True}


def test_structure_detects_gauge_violation():
    vf = TruncatedVectorField(1)
    vf.add(("y", 0), (1,), (0,), (), 1.0)
    vf.add(("y", 0), (-1,), (0,), (), -1.0)
    assert structure_check(vf)["gauge"] is False
