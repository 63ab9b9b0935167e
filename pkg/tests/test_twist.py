from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from kamnls.nf_cubic import CubicCoefficients
from kamnls.twist import (
    TwistError, classify_coefficients, cross_coefficient, homogeneous_parts,
    melnikov_affine, melnikov_affine_closed_form, normal_frequency, normal_vector, omega0,
    rank2_eigs, rank_oracle, twist_matrix, twist_polynomial, twist_polynomial_sites_ok,
)

CUBIC = CubicCoefficients.from_sequence([1, 0, 0, 0, 0, 0, 0, 0])
MIXED = CubicCoefficients.from_sequence([0, 0, -4, 0, 0, 2, -2, 0])
ints = st.integers(-5, 5)
site_sets = st.lists(st.integers(1, 9), min_size=2, max_size=4, unique=True)


def exact_M(a_int, sites):
    a = CubicCoefficients.from_sequence(a_int)
    a1, a2, a3, a4, a5, a6, a7, a8 = (Fraction(int(x)) for x in a_int)

    def chi(j1, j2, j3):
        return (a1 - a2 * j3**2 + a3 * j1 * j2 - a6 * j2**2 - a7 * j1 * j2
                - a4 * j1 * j2 * j3**2 + a8 * j1 * j2**2 * j3 - a5 * j1**2 * j2**2 * j3**2)

    def C(j, k):
        return chi(j, j, j) if j == k else chi(k, k, j) + chi(j, k, k)

    d = len(sites)
    M = [[Fraction(1, 4) * (C(sites[k], sites[h]) + C(sites[k], -sites[h])) for h in range(d)] for k in range(d)]
    return a, M


@given(st.lists(ints, min_size=8, max_size=8), site_sets)
def test_decomposition_exact_on_rationals(a_int, sites):
    a, M = exact_M(a_int, sites)
    parts = homogeneous_parts(a, sites, exact=True)
    d = len(sites)
    for i in range(d):
        for k in range(d):
            assert Fraction(1, 4) * sum(parts[g][i][k] for g in (0, 2, 4, 6)) == M[i][k]
    assert twist_matrix(a, sites).identity_residual <= 1e-12


def test_M0_cubic():
    td = twist_matrix(CUBIC, (1, 4))
    np.testing.assert_array_equal(td.parts[0], [[3, 4], [4, 3]])
    assert np.linalg.det(td.parts[0]) == pytest.approx(-7)


@pytest.mark.parametrize("d", [2, 3, 4])
def test_M6_determinant_two_ways(d):
    a = CubicCoefficients(a5=1.0)
    v = np.arange(1, d + 1, dtype=float) + 1
    M6 = homogeneous_parts(a, v)[6]
    A = np.ones((d, d))
    ev = np.linalg.eigvalsh(4 * A - np.eye(d))
    closed = (-1) ** d * np.prod(ev) * np.prod(v**2) * np.prod(v**4)
    assert np.linalg.det(M6) == pytest.approx(closed, rel=1e-10)


def test_omega0_at_zero():
    np.testing.assert_array_equal(omega0(CUBIC, (1, 4), [0, 0]), [1, 16])


def test_normal_frequency():
    xi = np.array([1e-3, 2e-3])
    assert normal_frequency(CUBIC, (1, 4), 3, xi) == pytest.approx(9 - normal_vector(CUBIC, (1, 4), 3) @ xi)
    assert cross_coefficient(CUBIC, 2, 2) == 1 and cross_coefficient(CUBIC, 2, 3) == 2


def test_classify_cases():
    r = classify_coefficients(CUBIC, 2)
    assert r["verdict"] == "non-resonant" and r["nonresonant_branches"] == ["2"]
    r = classify_coefficients(CubicCoefficients(a5=0.5, a1=1.0), 3)
    assert r["nonresonant_branches"] == ["1"]
    assert classify_coefficients(CubicCoefficients(a2=1.0, a3=1.0), 3)["verdict"] == "resonant"
    assert classify_coefficients(CubicCoefficients(), 3)["resonant_branches"] == [1]


def test_mixed_coefficients_classifier_vs_rank():
    r = classify_coefficients(MIXED, 3)
    assert r["verdict"] == "non-resonant" and r["nonresonant_branches"] == ["4c"]
    assert rank_oracle(twist_matrix(MIXED, (1, 2, 4)).M) == 3


def test_twist_polynomial():
    p = twist_polynomial(MIXED)["coeffs"]
    x = sp.symbols("x")
    expr = sum(sp.Rational(c) * x**k for k, c in enumerate(p))
    assert sp.expand(expr) == -4 * x**2
    assert twist_polynomial_sites_ok(MIXED, range(1, 30))
    assert twist_polynomial(CUBIC)["coeffs"] == [1, 0, 0, 0, 0, 0, 0]
    assert twist_polynomial(CubicCoefficients())["degenerate"]
    assert not twist_polynomial_sites_ok(CubicCoefficients(), (1, 2))


@given(st.lists(ints, min_size=8, max_size=8), st.integers(1, 12))
def test_twist_polynomial_symbolic(a_int, v):
    a = CubicCoefficients.from_sequence(a_int)
    a1, a2, a3, a4, a5, a6, a7, a8 = sp.symbols("a1:9")
    x = sp.symbols("x")
    ref = a1 + (a3 - a2 - a6 - a7) * x**2 + (-a4 + a8) * x**4 - a5 * x**6
    val = ref.subs(dict(zip((a1, a2, a3, a4, a5, a6, a7, a8), a_int))).subs(x, v)
    got = sum(c * v**k for k, c in enumerate(twist_polynomial(a)["coeffs"]))
    assert got == int(val)


def test_melnikov_affine_errors():
    with pytest.raises(TwistError):
        melnikov_affine(CUBIC, (1, 4), (1, 0), 2, 3, 1, 1)
    with pytest.raises(TwistError):
        melnikov_affine(CUBIC, (1, 4), (0, 0), 2, 2, 1, 1)
    Z, _ = melnikov_affine(CUBIC, (1, 4), (1, -1), 5, 5, 1, 1)
    assert Z == -15


def test_melnikov_affine_closed_form():
    rng = np.random.default_rng(0)
    a = CubicCoefficients.from_sequence(rng.normal(size=8))
    found = 0
    for j in range(-30, 31):
        for k in range(-30, 31):
            if abs(j) in (0, 1, 4) or abs(k) in (0, 1, 4):
                continue
            Z, c = melnikov_affine(a, (1, 4), (1, -1), j, k, 1, 1)
            if Z == 0:
                found += 1
                np.testing.assert_allclose(c, melnikov_affine_closed_form(a, (1, 4), (1, -1)), atol=1e-12 * max(1, np.abs(c).max()))
    assert found > 0


def test_rank2_eigs_beta_zero():
    mu = rank2_eigs(2.0, 3.0, 0.0, 1.0, 1.0, 4)
    assert sorted(mu) == pytest.approx([0.0, 6.0])


def test_rank2_eigs_zero_lambda():
    with pytest.raises(TwistError):
        rank2_eigs(0.0, 1, 1, 1, 1, 2)


def test_rank2_eigs_dense():
    rng = np.random.default_rng(11)
    for _ in range(50):
        d = int(rng.integers(2, 6))
        v = rng.choice(np.arange(1, 20), d, replace=False).astype(float)
        lam, al, be = rng.normal(size=3)
        A = np.ones((d, d))
        V2 = np.diag(v**2)
        B = (al / lam) * A + (be / lam) * V2 @ A @ np.linalg.inv(V2)
        ev = np.linalg.eigvals(B)
        big = ev[np.argsort(-np.abs(ev))[:2]]
        mu = np.array(rank2_eigs(lam, al, be, np.sum(v**-2.0), np.sum(v**2), d), complex)
        assert np.allclose(np.sort_complex(mu), np.sort_complex(big), rtol=1e-10, atol=1e-10 * np.abs(big).max())


def test_degenerate_case_rank_at_most_two():
    a = CubicCoefficients(a2=1.0, a3=1.5, a6=0.25, a7=0.25, a4=0.3, a8=0.3)
    for sites in [(1, 2, 4), (1, 3, 5, 7)]:
        assert rank_oracle(twist_matrix(a, sites).M) <= 2


def test_rank_full_for_random_nonresonant():
    rng = np.random.default_rng(2024)
    full = 0
    for _ in range(100):
        d = int(rng.integers(2, 5))
        a = CubicCoefficients.from_sequence(rng.normal(size=8))
        sites = tuple(int(v) for v in rng.choice(np.arange(1, 12), d, replace=False))
        assert classify_coefficients(a, d)["verdict"] == "non-resonant"
        full += rank_oracle(twist_matrix(a, sites).M) == d
    assert full >= 95
