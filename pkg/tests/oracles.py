"""Independent numerical oracles used by the test-suite.

Operators that act pointwise in the angles are represented, at each grid
angle, by dense matrices in the x-Fourier basis (component-major).  Maps are
built by FFT of their action on single exponentials, and inverses come from
LAPACK, so none of the symbolic conjugation formulas are reused.
"""
from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import fsolve

E = (1.0, -1.0)


def theta_grid(d, Nt):
    th = 2 * np.pi * np.arange(Nt) / Nt
    return np.stack(np.meshgrid(*([th] * d), indexing="ij"), axis=-1)


def xcoef_at(u, theta, j):
    """Coefficient of ``e^{ijx}`` of ``u(theta, .)`` at one angle."""
    if abs(j) > u.J:
        return 0.0
    L, d = u.L, u.d
    ax = np.arange(-L, L + 1)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    ph = np.exp(1j * sum(g * t for g, t in zip(grids, theta)))
    return complex(np.sum(u.coef[..., j + u.J] * ph))


def xcoefs_at(u, theta):
    """All x-coefficients of ``u(theta, .)`` at one angle, indexed ``-u.J .. u.J``."""
    ax = np.arange(-u.L, u.L + 1)
    grids = np.meshgrid(*([ax] * u.d), indexing="ij")
    ph = np.exp(1j * sum(g * t for g, t in zip(grids, theta)))
    return np.tensordot(ph, u.coef, axes=(tuple(range(u.d)), tuple(range(u.d))))


def _coef_vector(u, theta, js):
    c = xcoefs_at(u, theta)
    out = np.zeros(len(js), complex)
    ok = np.abs(js) <= u.J
    out[ok] = c[js[ok] + u.J]
    return out


def symbol_matrix(op, theta, J):
    """Dense ``(2(2J+1))^2`` matrix of the operator at a fixed angle."""
    js = np.arange(-J, J + 1)
    n = len(js)
    diff = js[:, None] - js[None, :]
    A = np.zeros((2 * n, 2 * n), complex)
    for s in range(2):
        for t in range(2):
            blk = np.zeros((n, n), complex)
            for k in (2, 1, 0):
                Q = op.blocks[k][s][t]
                tab = _coef_vector(Q, theta, np.arange(-2 * J, 2 * J + 1))
                blk += tab[diff + 2 * J] * ((1j * js) ** k)[None, :]
                if k == 2 and s == t:
                    blk += np.diag(op.m * (1j * js) ** 2)
            A[s * n:(s + 1) * n, t * n:(t + 1) * n] = -1j * E[s] * blk
    for c, dv in op.pairs:
        cv = np.concatenate([_coef_vector(c[s], theta, js) for s in range(2)])
        dvv = np.concatenate([_coef_vector(dv[s], theta, js) for s in range(2)])
        A += np.outer(dvv, np.conj(cv))
    return A


def x_map_matrix(kernel, J, Nx=256):
    """Matrix of a linear map given by ``kernel(x, j) -> values`` of the image of ``e^{ijx}``."""
    x = 2 * np.pi * np.arange(Nx) / Nx
    js = np.arange(-J, J + 1)
    cols = [np.fft.fft(kernel(x, j)) / Nx for j in js]
    return np.stack([c[js % Nx] for c in cols], axis=1)


def perp_mask(J, sites):
    js = np.arange(-J, J + 1)
    keep = np.array([j not in set(sites) for j in js])
    return np.concatenate([keep, keep])




def spectral_dtheta(mats: np.ndarray, d: int, i: int) -> np.ndarray:
    """Derivative along angle ``i`` of an array whose leading ``d`` axes are a uniform grid."""
    Nt = mats.shape[0]
    k = np.fft.fftfreq(Nt, 1.0 / Nt)
    sh = [1] * mats.ndim
    sh[i] = -1
    return np.fft.ifft(np.fft.fft(mats, axis=i) * (1j * k).reshape(sh), axis=i)


def conjugation_oracle(op, theta, phi_fn, F_fn, J, Jbig, sites, Nt):
    """Dense conjugated operator at the grid angle ``theta[idx]`` for every grid index.

    ``phi_fn(theta, Jbig)`` returns the full map matrix at one angle;
    ``F_fn(theta)`` returns the transport vector.  Returns a dict of
    interior blocks of size ``2(2J+1)``.
    """
    d = op.d
    grid = theta_grid(d, Nt)
    shape = grid.shape[:-1]
    nb = 2 * Jbig + 1
    Phis = np.zeros(shape + (2 * nb, 2 * nb), complex)
    for idx in np.ndindex(*shape):
        Phis[idx] = phi_fn(grid[idx], Jbig)
    dPhis = [spectral_dtheta(Phis, d, i) for i in range(d)]
    keep = perp_mask(Jbig, sites)
    inner = np.concatenate([np.abs(np.arange(-Jbig, Jbig + 1)) <= J] * 2)
    out = {}
    for idx in np.ndindex(*shape):
        th = grid[idx]
        P = symbol_matrix(op, th, Jbig)
        Pp = P[np.ix_(keep, keep)]
        Phi = Phis[idx][np.ix_(keep, keep)]
        Fv = F_fn(th)
        dPhi = sum(Fv[i] * dPhis[i][idx] for i in range(d))[np.ix_(keep, keep)]
        res = np.linalg.solve(Phi, Pp @ Phi - dPhi)
        full = np.zeros((2 * nb, 2 * nb), complex)
        full[np.ix_(keep, keep)] = res
        out[idx] = full[np.ix_(inner, inner)]
    return grid, out


def ode_flow(rhs, y0, t1=1.0, rtol=1e-13, atol=1e-15):
    sol = solve_ivp(lambda t, y: rhs(y), (0.0, t1), y0, method="DOP853", rtol=rtol, atol=atol)
    return sol.y[:, -1]


def invert_shift(beta_fn, theta):
    """Solve ``phi + beta(phi) = theta`` by a generic root finder."""
    return fsolve(lambda p: p + beta_fn(p) - theta, theta, xtol=1e-15)
