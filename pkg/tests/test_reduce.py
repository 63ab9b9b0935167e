import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reduce_cases as rc
from builders import random_op, random_theta_field
from kamnls.psido import PsiDOp, apply, op_predicates, theta_field
from kamnls.reduce import (
    OddBasis, ReduceError, ReducedOperator, Toeplitz, approx_invert, descent_step, divisor_constants,
    enumerate_divisors, kam_reduce, linear_bnf, psido_to_toeplitz, transpose_reduce,
)
from kamnls.spaces import FourierScalar, norm_sap

OM = rc.OMEGA


def two_mode(amp=1e-3):
    b = OddBasis(2, 1, (2, 5))
    sig, jj = b.sig(), b.jj()
    mu = -1j * sig * jj.astype(float) ** 2
    R = Toeplitz.zeros(b)
    k = [tuple(o) for o in b.offsets.tolist()].index((1, 0))
    R.blocks[k, 0, 1] = amp
    return ReducedOperator(OM, 1.0, mu, R)


def test_toeplitz_identity_and_inverse():
    b = OddBasis(2, 2, (1, 2, 3))
    I = Toeplitz.identity(b)
    rng = np.random.default_rng(0)
    A = Toeplitz(b, 1e-2 * rng.standard_normal((len(b.offsets), b.n, b.n)))
    P = I + A
    assert ((P @ I) - P).max_abs() == 0
    C = Toeplitz.zeros(b)
    C.blocks[b.center] = A.blocks[b.center]
    Pc = I + C
    np.testing.assert_allclose(Pc.inverse().blocks[b.center], np.linalg.inv(Pc.blocks[b.center]), atol=1e-14)
    big = rc.pad(P, 12)
    err = (big @ rc.pad(P.inverse(), 12) - rc.pad(I, 12)).max_abs()
    assert err <= 10 * A.max_abs() ** 2 * len(b.offsets) * b.n
    with pytest.raises(ReduceError):
        (I + A.scale(100.0)).inverse()


def test_psido_to_toeplitz_matches_apply():
    rng = np.random.default_rng(3)
    d = 2
    op = random_op(rng, d, 1, 3, 0.1, L=1, J=3, sites=(2,))
    js = (1, 3, 4, 5, 6)
    b = OddBasis(d, 2, js)
    red = psido_to_toeplitz(op, [1.3, 2.2], b)
    T = red.full().blocks
    Lw, Jw = 4, 12
    err = 0.0
    for ell, s, k in [((0, 0), 0, 1), ((1, -1), 1, 3), ((0, 1), 0, 5), ((-1, 0), 1, 4)]:
        w = [FourierScalar.zeros(d, Lw, Jw) for _ in range(2)]
        w[s].coef[(ell[0] + Lw, ell[1] + Lw, Jw + k)] = 1
        w[s].coef[(ell[0] + Lw, ell[1] + Lw, Jw - k)] = -1
        out = apply(op, tuple(w))
        ki = js.index(k) + s * len(js)
        for oi, D in enumerate(b.offsets):
            l = np.array(ell) + D
            for t in range(2):
                for ji, j in enumerate(js):
                    err = max(err, abs(-T[oi, t * len(js) + ji, ki] - out[t].coef[l[0] + Lw, l[1] + Lw, Jw + j]))
    assert err <= 1e-12
    assert red.check_imaginary()


def test_descent_zero():
    op = PsiDOp.zero(2, 1, 4)
    new, q = descent_step(op, theta_field(OM, L=1))
    assert not np.any(q.coef)


def test_descent_sine():
    eps = 1e-3
    op = PsiDOp.zero(1, 0, 12, m=1.25)
    a1 = FourierScalar.zeros(1, 0, 12)
    a1.coef[0, 13], a1.coef[0, 11] = eps / 2j, -eps / 2j
    op.blocks[1][0][0] = a1
    op.blocks[1][1][1] = a1.conj()
    new, q = descent_step(op, theta_field([1.0]))
    x = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    np.testing.assert_allclose(q.evaluate(np.zeros((16, 1)), x).real, eps / (2 * 1.25) * np.cos(x), atol=1e-15)
    assert np.abs(new.a(1).coef).max() <= 1e-10
    assert norm_sap(q, 0, 0, 1) <= norm_sap(a1, 0, 0, 1)


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=8)
def test_descent_random(seed):
    rng = np.random.default_rng(seed)
    op = random_op(rng, 2, 1, 3, 1e-2, L=2, J=8, orders=(1, 0))
    F = random_theta_field(rng, 2, 1, 2, OM, 0.0)
    new, q = descent_step(op, F)
    assert np.abs(new.a(1).coef).max() <= 1e-10
    assert all(op_predicates(new).values())


def test_descent_structural_error():
    op = PsiDOp.zero(1, 0, 4)
    op.blocks[1][0][0] = FourierScalar.mode(1, 0, 4, (0,), 0, 1e-3)
    with pytest.raises(ReduceError) as e:
        descent_step(op, theta_field([1.0]))
    assert e.value.code == "structural"


def test_linear_bnf_zero_xi():
    red, _ = rc.pipeline(0.0)
    r1, psi, r0, info = linear_bnf(red, (1, 4))
    assert psi.max_abs() == 0 and np.abs(r0).max() == 0


def test_linear_bnf_scaling():
    vals = []
    for x in (1e-4, 1e-5, 1e-6):
        red, _ = rc.pipeline(x)
        r1, psi, r0, info = linear_bnf(red, (1, 4))
        jj = red.basis.jj().astype(float)
        psi_dx = Toeplitz(psi.basis, psi.blocks * jj[None, None, :])
        vals.append(psi_dx.decay_norm(0, 1) / x)
        assert info["min_divisor"] >= 0.5
        assert np.all(np.abs(r0) <= 10 * x)
    assert max(vals) <= 2 * min(vals)


def test_divisor_table():
    div = enumerate_divisors((1, 4), 20, 2)
    assert div["min_nonresonant_integer"] >= 1
    assert len(div["resonant"]) > 0
    const = divisor_constants((1, 4), 20, 2, [1 - 1e-4, 16 - 3e-4])
    assert const["opposite"] > 0 and const["same"] > 0


def test_kam_reduce_zero_input():
    red = two_mode(0.0)
    out = kam_reduce(red, 3)
    assert len(out.log) == 1 and np.array_equal(out.mu, red.mu)


def test_kam_reduce_two_mode_exact():
    red = two_mode()
    out = kam_reduce(red, 1)
    assert out.R.max_abs() < 1e-12
    b = red.basis
    div = 1j * OM[0] + red.mu[0] - red.mu[1]
    Psi = out.chain[-1].blocks
    k = [tuple(o) for o in b.offsets.tolist()].index((1, 0))
    assert Psi[k, 0, 1] == pytest.approx(-1e-3 / div, rel=1e-12)


@pytest.mark.parametrize("seed", [1, 2])
def test_kam_reduce_superlinear(seed):
    out = kam_reduce(rc.random_small(seed), 3, gamma=1e-3)
    R = [e["R_max"] for e in out.log if "R_max" in e]
    assert len(R) == 4 and out.excluded is None
    for a, b in zip(R, R[1:]):
        assert np.log(b) / np.log(a) >= 1.5
    drift = [e["mu_drift"] for e in out.log if "mu_drift" in e]
    assert all(dr <= r for dr, r in zip(drift, R))
    assert out.check_imaginary()


def test_kam_reduce_melnikov_exclusion():
    red = two_mode()
    red.omega = np.array([-21.0 + 1e-3, 1.0])
    out = kam_reduce(red, 2, gamma=1e-3)
    assert out.excluded == ((1, 0), 1, 2, 1, 5)


def test_approx_invert_diagonal_single_mode():
    b = OddBasis(2, 1, (2, 5))
    red = ReducedOperator(OM, 1.0, -1j * b.sig() * b.jj().astype(float) ** 2, Toeplitz.zeros(b))
    g = np.zeros((9, b.n), complex)
    g[7, 1] = 1.0
    h, Lw, info = approx_invert(red, red, g, 1)
    assert info["residual"] == 0.0
    ells = [tuple(e) for e in __import__("kamnls.spaces", fromlist=["ell_grid"]).ell_grid(2, Lw).tolist()]
    i = ells.index((1, 0))
    assert h[i, 1] == pytest.approx(1 / (1j * OM[0] + red.mu[1]))


@pytest.mark.parametrize("seed", [0, 1])
def test_approx_invert_bounds(seed):
    r = rc.invert_case(seed)
    assert r["residual"] <= 10 * r["predicted"]
    assert r["h_norm"] <= 2 / r["gamma"] * r["g_norm_shift"]


def test_approx_invert_first_melnikov():
    red = two_mode(0.0)
    red.mu = red.mu.copy()
    red.mu[0] = -1j * OM[0]
    g = np.ones((9, red.basis.n))
    with pytest.raises(ReduceError) as e:
        approx_invert(red, red, g, 1, gamma=1e-3)
    assert e.value.code == "first-melnikov"


def test_transpose_identity_chain():
    red = two_mode(0.0)
    Qt, info = transpose_reduce(red, red)
    assert (Qt - Toeplitz.identity(red.basis)).max_abs() == 0
    assert info["diag_mismatch"] == 0


def test_transpose_two_mode():
    red = two_mode()
    out = kam_reduce(red, 1)
    Qt, info = transpose_reduce(out, red)
    assert info["inverse_consistency"] <= 1e-10
    assert info["remainder"] <= 1e-10
    assert info["diag_mismatch"] <= 1e-10
