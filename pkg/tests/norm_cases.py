"""Random decay matrices and vectors for the smoothing and interpolation checks."""
from math import comb

import numpy as np

from kamnls.psido import DecayMatrix, decay_norm
from kamnls.spaces import FourierScalar, norm_sap, project_K, project_perp_K


def lattice_sum(D, p0, R=4000):
    """``sqrt(sum over Z^D of <k>^{-2 p0})`` with ``<k> = max(1, |k|_1)``, plus an integral tail bound."""
    n = np.arange(1, R + 1, dtype=float)
    shell = sum(2**i * comb(D, i) * np.array([comb(int(m) - 1, i - 1) for m in n], float)
                for i in range(1, D + 1))
    tot = 1.0 + float(np.sum(shell * n ** (-2 * p0)))
    tail = 2**D * R ** (D - 2 * p0) / (2 * p0 - D)
    return float(np.sqrt(tot + tail))


def interpolation_constant(d, p, p0):
    return 2.0 * 2.0**p * lattice_sum(d + 1, p0)


def random_decay(rng, d, L, J, decay=0.7, density=0.3):
    M = DecayMatrix(np.zeros((1, 1)), d, L, J)
    l_idx, j_idx = M.index()
    n1 = len(j_idx)
    dist = np.abs(l_idx[:, None, :] - l_idx[None, :, :]).sum(-1) + np.abs(j_idx[:, None] - j_idx[None, :])
    A = np.zeros((2 * n1, 2 * n1), complex)
    for s in range(2):
        for t in range(2):
            blk = rng.standard_normal((n1, n1)) + 1j * rng.standard_normal((n1, n1))
            blk *= (rng.random((n1, n1)) < density) * np.exp(-decay * dist)
            A[s * n1:(s + 1) * n1, t * n1:(t + 1) * n1] = blk
    M.A = A
    return M


def vec_norm(M, h, p):
    l_idx, j_idx = M.index()
    w = np.maximum(1, np.abs(l_idx).sum(-1) + np.abs(j_idx)) ** p
    return float(np.sqrt(np.sum((np.tile(w, 2) * np.abs(h)) ** 2)))


def interpolation_ratios(seed, d=1, L=2, J=4, p=3.0, p0=2.0):
    """Measured ``lhs / (sum of products)`` for the product and action estimates."""
    rng = np.random.default_rng(seed)
    A, B = random_decay(rng, d, L, J), random_decay(rng, d, L, J)
    nA = {q: decay_norm(A, 0, 0, q) for q in (p, p0)}
    nB = {q: decay_norm(B, 0, 0, q) for q in (p, p0)}
    prod = decay_norm(A @ B, 0, 0, p) / (nA[p0] * nB[p] + nA[p] * nB[p0])
    n = A.A.shape[0]
    h = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.exp(-0.5 * rng.random(n) * 4)
    act = vec_norm(A, A.A @ h, p) / (nA[p0] * vec_norm(A, h, p) + nA[p] * vec_norm(A, h, p0))
    return prod, act


def smoothing_ratios(seed, K=3, nu=1.5, p=1.0):
    """Measured constants of the two smoothing inequalities on one random field."""
    u = FourierScalar.random(np.random.default_rng(seed), 2, 5, 10, decay=0.3)
    hi = norm_sap(project_perp_K(u, K), 0, 0, p) / (K ** (-nu) * norm_sap(u, 0, 0, p + nu))
    lo = norm_sap(project_K(u, K), 0, 0, p + nu) / (K**nu * norm_sap(u, 0, 0, p))
    return hi, lo
