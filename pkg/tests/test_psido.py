import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import conj_cases
import norm_cases
from builders import random_op
from kamnls.psido import (
    DecayMatrix, PsiDError, PsiDOp, apply, assemble_dense, conj_space_diffeo, decay_norm,
    invert_diffeo, op_predicates, theta_field,
)
from kamnls.spaces import FourierScalar, norm_sap

seeds = st.integers(0, 2**32 - 1)


@given(seed=seeds)
@settings(max_examples=10)
def test_apply_matches_dense(seed):
    rng = np.random.default_rng(seed)
    d, L, J = 1, 2, 5
    op = random_op(rng, d, 1, 3, 0.1, L=L, J=J)
    w = [FourierScalar.random(rng, d, L, J) for _ in range(2)]
    got = apply(op, tuple(w))
    A = assemble_dense(op, L, J)
    ref = A @ np.concatenate([w[0].coef.ravel(), w[1].coef.ravel()])
    out = np.concatenate([got[0].coef.ravel(), got[1].coef.ravel()])
    assert np.abs(out - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_cos_multiplication_decay_norm():
    d, L, J = 1, 2, 6
    u = FourierScalar.zeros(d, L, J)
    u.coef[L, J + 1] = u.coef[L, J - 1] = 0.5
    op = PsiDOp.zero(d, L, J, m=0.0)
    op.blocks[0][0][0] = u.with_coef(1j * u.coef)
    op.blocks[0][1][1] = u.with_coef(-1j * u.coef)
    M = DecayMatrix(assemble_dense(op, L, J), d, L, J)
    for p in (0.0, 1.0, 2.0):
        assert decay_norm(M, 0, 0, p) <= norm_sap(u, 0, 0, p) + 1e-14


def test_decay_norm_rejects_symbolic():
    with pytest.raises(PsiDError):
        decay_norm(PsiDOp.zero(1, 1, 1), 0, 0, 1)


@pytest.mark.parametrize("seed", range(5))
def test_interpolation(seed):
    C = norm_cases.interpolation_constant(1, 3.0, 2.0)
    prod, act = norm_cases.interpolation_ratios(seed)
    assert prod <= C and act <= C


def test_invert_diffeo_sine():
    eps = 1e-3
    d, L, J = 1, 0, 8
    beta = FourierScalar.zeros(d, L, J)
    beta.coef[0, J + 1], beta.coef[0, J - 1] = eps / 2j, -eps / 2j
    inv = invert_diffeo(beta)
    x = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    th = np.zeros((64, 1))
    bt = inv.evaluate(th, x).real
    np.testing.assert_allclose(bt, -eps * np.sin(x), atol=2 * eps**2)
    comp = bt + beta.evaluate(th, x + bt).real
    assert np.abs(comp).max() <= 1e-12
    for p in (0.0, 1.0, 2.0):
        assert norm_sap(inv, 0, 0, p) <= 2 * norm_sap(beta, 0, 0, p)


def test_invert_diffeo_too_large():
    beta = FourierScalar.zeros(1, 0, 4)
    beta.coef[0, 5], beta.coef[0, 3] = 0.6 / 2j, -0.6 / 2j
    with pytest.raises(PsiDError) as e:
        invert_diffeo(beta)
    assert e.value.code == "diffeo-too-large"


def test_space_diffeo_second_order_coefficient():
    eps = 1e-2
    d, L, J = 1, 0, 12
    op = PsiDOp.zero(d, L, J, m=1.0)
    alpha = FourierScalar.zeros(d, L, J)
    alpha.coef[0, J + 1], alpha.coef[0, J - 1] = eps / 2j, -eps / 2j
    new = conj_space_diffeo(op, alpha, theta_field([1.0]))
    x = np.linspace(0, 2 * np.pi, 128, endpoint=False)
    th = np.zeros((128, 1))
    y = x + alpha.evaluate(th, x).real
    a2 = new.a(2).evaluate(th, y).real
    np.testing.assert_allclose(a2, (1 + eps * np.cos(x)) ** 2 - 1, atol=1e-10)
    assert all(op_predicates(new).values())


@pytest.mark.parametrize("family", sorted(conj_cases.FAMILIES))
@pytest.mark.parametrize("seed", [100, 101])
def test_conjugation_oracles(family, seed):
    err, ok = conj_cases.FAMILIES[family](seed)
    assert err <= 1e-8 and ok
