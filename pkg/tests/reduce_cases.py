"""Shared instances for the reduction checks."""
import numpy as np

from builders import random_op
from kamnls.nf_cubic import CubicCoefficients
from kamnls.reduce import (
    OddBasis, Toeplitz, _compose, approx_invert, descent_step, kam_reduce, linear_bnf,
    psido_to_toeplitz,
)
from kamnls.regularize import preliminary_step
from kamnls.spaces import ell_grid

OMEGA = np.array([1.3247, 2.2361])
CUBIC = CubicCoefficients(a1=1.0)


def random_small(seed, eps=1e-2, Lt=3, jmax=8):
    rng = np.random.default_rng(seed)
    op = random_op(rng, 2, 1, 3, eps, L=1, J=3, orders=(0,))
    return psido_to_toeplitz(op, OMEGA, OddBasis(2, Lt, tuple(range(1, jmax + 1))))


def pipeline(xi_abs, sites=(1, 4), a=CUBIC, L=4, J=12, Lt=2, jmax=10):
    w = np.mod(np.arange(1, len(sites) + 1) * 0.6180339887498949, 1.0) + 0.5
    xi = xi_abs * w / w.sum()
    _, lf, _ = preliminary_step(a, sites, xi, 8, 1e-3 * xi_abs, L, J)
    op, _ = descent_step(lf.op, lf.F)
    js = tuple(j for j in range(1, jmax + 1) if j not in sites)
    return psido_to_toeplitz(op, lf.omega, OddBasis(len(sites), Lt, js)), xi


def pad(T, Lt):
    """Re-embed a Toeplitz operator in a basis with wider offsets so products are exact."""
    b = T.basis
    nb = OddBasis(b.d, Lt, b.js)
    out = Toeplitz.zeros(nb)
    big = out.blocks.reshape((2 * Lt + 1,) * b.d + (b.n, b.n))
    sl = tuple(slice(Lt - b.Lt, Lt + b.Lt + 1) for _ in range(b.d))
    big[sl] = T.blocks.reshape((2 * b.Lt + 1,) * b.d + (b.n, b.n))
    return out


def l1_operator_norm(T):
    """``sum over offsets of the spectral norm``: a bound for the action on l2 functions."""
    return float(sum(np.linalg.norm(B, 2) for B in T.blocks))


def predicted_residual(red, L0, h_norm, g_norm):
    """Residual bound from the conjugation defect, the final remainder and the inverse defect."""
    b = red.basis
    Lw = 3 * b.Lt
    Q = pad(_compose(red.chain, b), Lw)
    A0 = pad(L0.full(), Lw)
    D = pad(red.full(), Lw)
    T = Q.commutator_transport(red.omega) + A0 @ Q - Q @ D
    Qi = pad(_compose(red.chain, b).inverse(), Lw)
    I = pad(Toeplitz.identity(b), Lw)
    defect = l1_operator_norm(T) * h_norm
    inv = l1_operator_norm(Q @ Qi - I) * g_norm
    return defect + inv, {"conjugation_defect": l1_operator_norm(T), "inverse_defect": l1_operator_norm(Q @ Qi - I)}


def invert_case(seed, eps=1e-2, gamma=1e-3, tau=3.0, Lg=3):
    red = random_small(seed, eps)
    fin = kam_reduce(red, 3, gamma=gamma, tau=tau)
    rng = np.random.default_rng(seed + 1)
    g = rng.standard_normal(((2 * Lg + 1) ** 2, red.basis.n)) + 1j * rng.standard_normal(((2 * Lg + 1) ** 2, red.basis.n))
    h, Lw, info = approx_invert(fin, red, g, Lg, gamma=gamma, tau=tau)
    pred, parts = predicted_residual(fin, red, info["h_norm"], info["g_norm"])
    return {**info, **parts, "predicted": pred, "gamma": gamma}
