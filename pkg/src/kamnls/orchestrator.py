"""Finite-step quasi-Newton iteration for an invariant torus of the cubic field.

The unknown torus is an embedding ``U(theta, x) = sum U[l, j] e^{i(l.theta + j x)}``
with gauge charge ``sum(l) = 1`` and ``|l|_1 <= Lb``, together with the
frequency vector ``omega``.  The invariance equation reads, mode by mode,

    F[l, j] = (omega.l - j^2) U[l, j] + N[l, j](U) = 0,

where ``N`` is the cubic nonlinearity evaluated on a grid.  The tangential
amplitudes ``U[e_i, +-v_i] = +-sqrt(xi_i)/(2i)`` are held fixed; their
equations determine ``omega`` instead.

Each step makes one Gauss-Seidel sweep: a dense real-linear solve on the
resonant modes (``|omega.l - j^2| < 1/2``) together with ``delta omega``,
then diagonal division on every other mode.  The contraction factor per
step is of the size of ``|xi|``.  Grids use extended precision.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .nf_cubic import CubicCoefficients, genericity_scan
from .params import check_smallness_at_xi, default_budget
from .regularize import _CHI_TERMS
from .twist import twist_matrix

__all__ = [
    "OrchestratorError",
    "TorusGrid",
    "IterationState",
    "build_initial",
    "kam_step",
    "run",
    "extract_embedding",
    "invariance_defect",
]

LD = np.clongdouble
RESONANT_CUT = 0.5


class OrchestratorError(ValueError):
    def __init__(self, code: str, message: str = "", ledger=None):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.ledger = ledger


class TorusGrid:
    """Index bookkeeping and grid transforms for charge-one tables."""

    def __init__(self, d: int, Lb: int, J: int):
        self.d, self.Lb, self.J = d, Lb, J
        self.shape = (2 * Lb + 1,) * d + (2 * J + 1,)
        ells = np.indices((2 * Lb + 1,) * d).reshape(d, -1).T - Lb
        self.ell_all = ells
        ok = (ells.sum(-1) == 1) & (np.abs(ells).sum(-1) <= Lb)
        self.support = np.zeros(self.shape, bool)
        self.support.reshape(-1, 2 * J + 1)[ok] = True
        self.support[..., J] = False
        self.Nt = 4 * Lb + 1
        self.Nx = 4 * J + 1
        self.jv = np.arange(-J, J + 1)

    def lvec(self) -> np.ndarray:
        """``l`` for every table entry, shape ``shape + (d,)``."""
        g = np.indices(self.shape[:-1]) - self.Lb
        g = np.moveaxis(g, 0, -1)
        return np.broadcast_to(g[..., None, :], self.shape + (self.d,))

    def jgrid(self) -> np.ndarray:
        return np.broadcast_to(self.jv, self.shape)

    def to_grid(self, T: np.ndarray) -> np.ndarray:
        big = np.zeros((self.Nt,) * self.d + (self.Nx,), LD)
        idx = np.ix_(*([np.arange(-self.Lb, self.Lb + 1) % self.Nt] * self.d + [self.jv % self.Nx]))
        big[idx] = T
        return sfft.ifftn(big) * big.size

    def from_grid(self, G: np.ndarray) -> np.ndarray:
        C = sfft.fftn(G) / G.size
        idx = np.ix_(*([np.arange(-self.Lb, self.Lb + 1) % self.Nt] * self.d + [self.jv % self.Nx]))
        return C[idx] * self.support


def _derivs(grid: TorusGrid, T: np.ndarray, ks) -> dict:
    return {k: grid.to_grid(T * grid.jgrid().astype(np.longdouble) ** k) for k in ks}


def nonlinearity(a: CubicCoefficients, grid: TorusGrid, T: np.ndarray) -> np.ndarray:
    """``N[l, j]`` restricted to the table support."""
    coef = a.as_tuple()
    terms = [(sgn * coef[i], k1, k2, k3) for i, k1, k2, k3, sgn in _CHI_TERMS if coef[i] != 0]
    if not terms:
        return np.zeros(grid.shape, LD)
    ks = sorted({k for _, k1, k2, k3 in terms for k in (k1, k2, k3)})
    u = _derivs(grid, T, ks)
    acc = np.zeros_like(u[ks[0]])
    for c, k1, k2, k3 in terms:
        acc += np.longdouble(c) * u[k1] * np.conj(u[k2]) * u[k3]
    return grid.from_grid(acc)


def nonlinearity_jvp(a: CubicCoefficients, grid: TorusGrid, u: dict, D: np.ndarray) -> np.ndarray:
    """Real-linear derivative of ``N`` at the grid derivatives ``u`` in direction ``D``."""
    coef = a.as_tuple()
    terms = [(sgn * coef[i], k1, k2, k3) for i, k1, k2, k3, sgn in _CHI_TERMS if coef[i] != 0]
    if not terms:
        return np.zeros(grid.shape, LD)
    ks = sorted({k for _, k1, k2, k3 in terms for k in (k1, k2, k3)})
    w = _derivs(grid, D, ks)
    acc = np.zeros_like(w[ks[0]])
    for c, k1, k2, k3 in terms:
        c = np.longdouble(c)
        acc += c * (w[k1] * np.conj(u[k2]) * u[k3] + u[k1] * np.conj(w[k2]) * u[k3]
                    + u[k1] * np.conj(u[k2]) * w[k3])
    return grid.from_grid(acc)


def residual(a: CubicCoefficients, grid: TorusGrid, T: np.ndarray, omega) -> np.ndarray:
    om = np.asarray(omega, np.longdouble)
    div = grid.lvec().astype(np.longdouble) @ om - grid.jgrid().astype(np.longdouble) ** 2
    return (div * T + nonlinearity(a, grid, T)) * grid.support


def invariance_defect(a: CubicCoefficients, grid: TorusGrid, T: np.ndarray, omega) -> float:
    """``l2`` norm of the invariance residual over the table."""
    return float(np.sqrt(np.sum(np.abs(residual(a, grid, T, omega)) ** 2)))


@dataclass
class IterationState:
    n: int
    a: CubicCoefficients
    sites: tuple
    xi: np.ndarray
    grid: TorusGrid
    U: np.ndarray
    omega: np.ndarray
    omega0: np.ndarray
    fixed: np.ndarray
    ledger: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    gamma: float = 0.0
    eps0: float = 0.0
    K0: float = 1.5
    excluded: tuple | None = None

    @property
    def d(self) -> int:
        return len(self.sites)

    def defect(self) -> float:
        return invariance_defect(self.a, self.grid, self.U, self.omega)


def leading_table(grid: TorusGrid, sites, xi) -> np.ndarray:
    T = np.zeros(grid.shape, LD)
    for i, (v, x) in enumerate(zip(sites, xi)):
        ell = [grid.Lb] * grid.d
        ell[i] += 1
        amp = np.sqrt(np.longdouble(x)) / LD(2j)
        T[tuple(ell) + (grid.J + v,)] = amp
        T[tuple(ell) + (grid.J - v,)] = -amp
    return T


def build_initial(a: CubicCoefficients, sites, xi, Lb: int = 5, J: int = 24, gamma0: float = 1e-3,
                  K0: float = 1.5, strict: bool = False, scan_bound: int | None = None) -> IterationState:
    """Leading torus, twist frequencies and the initial ledger.

    ``strict`` turns the genericity and smallness flags into errors.
    """
    sites = tuple(int(v) for v in sites)
    d = len(sites)
    xi = np.asarray(xi, float)
    if xi.shape != (d,) or np.any(xi < 0):
        raise OrchestratorError("precondition", "xi must be a nonnegative vector of length d")
    if max(sites) > J:
        raise OrchestratorError("precondition", "sites exceed the truncation J")
    if Lb < 1:
        raise OrchestratorError("precondition", "Lb must be >= 1")
    flags = {}
    viol = genericity_scan(sites, scan_bound or 3 * max(sites))
    flags["non-generic-sites"] = len(viol)
    if d == 2:
        flags["d-equals-2"] = True
        warnings.warn("d = 2 lies outside the range covered by the existence theory", stacklevel=2)
    xi_abs = float(np.sum(np.abs(xi)))
    if xi_abs > 0:
        sm = check_smallness_at_xi(default_budget(d), xi_abs)
        flags["smallness-fails"] = [k for k, ok in sm.passed.items() if not ok] if hasattr(sm, "passed") else \
            (not sm.all_pass)
    if strict and (viol or flags.get("smallness-fails")):
        raise OrchestratorError("non-generic-sites" if viol else "smallness", f"{len(viol)} violations",
                                ledger=flags)
    grid = TorusGrid(d, Lb, J)
    U = leading_table(grid, sites, xi)
    fixed = np.abs(U) > 0
    om0 = np.asarray(sites, float) ** 2 - twist_matrix(a, sites, check=False).M @ xi
    st = IterationState(0, a, sites, xi, grid, U, om0.astype(np.longdouble), om0, fixed, [], flags,
                        gamma=gamma0 * xi_abs, eps0=xi_abs**0.25, K0=K0)
    st.ledger.append(_ledger_entry(st, None, None))
    return st


def _ledger_entry(st: IterationState, corr: float | None, info: dict | None) -> dict:
    F = residual(st.a, st.grid, st.U, st.omega)
    dfc = float(np.sqrt(np.sum(np.abs(F) ** 2)))
    lead = leading_table(st.grid, st.sites, st.xi)
    out = {
        "n": st.n,
        "defect": dfc,
        "delta": dfc / st.gamma if st.gamma > 0 else (0.0 if dfc == 0 else math.inf),
        "correction": corr,
        "omega": [float(w) for w in st.omega],
        "omega_drift": float(np.max(np.abs(st.omega.astype(float) - st.omega0))),
        "embedding_correction": float(np.sqrt(np.sum(np.abs(st.U - lead) ** 2))),
        "K": st.K0 ** (1.5 ** st.n),
    }
    if info:
        out.update(info)
    return out


def _resonant_mask(st: IterationState) -> np.ndarray:
    g = st.grid
    div = g.lvec().astype(float) @ st.omega.astype(float) - g.jgrid() ** 2.0
    return (np.abs(div) < RESONANT_CUT) & g.support


def kam_step(st: IterationState) -> IterationState:
    """One sweep: resonant block with ``delta omega``, then diagonal division."""
    g = st.grid
    a = st.a
    res = _resonant_mask(st)
    F = residual(a, g, st.U, st.omega)
    if not np.any(F):
        new = _copy(st)
        new.n += 1
        new.ledger.append(_ledger_entry(new, 0.0, {"resonant_modes": int(res.sum()), "block_residual": 0.0}))
        return new
    U = st.U.copy()
    omega = st.omega.copy()
    rows = np.argwhere(res)
    free = np.argwhere(res & ~st.fixed)
    ks = sorted({k for i, k1, k2, k3, _ in _CHI_TERMS if a.as_tuple()[i] != 0 for k in (k1, k2, k3)}) or [0]
    u = _derivs(g, U, ks)
    om = omega
    div = g.lvec().astype(np.longdouble) @ om - g.jgrid().astype(np.longdouble) ** 2
    cols = []
    for idx in free:
        for unit in (LD(1), LD(1j)):
            D = np.zeros(g.shape, LD)
            D[tuple(idx)] = unit
            col = div * D + nonlinearity_jvp(a, g, u, D)
            cols.append(col[tuple(rows.T)])
    lv = g.lvec()
    for i in range(g.d):
        cols.append((lv[..., i].astype(np.longdouble) * U)[tuple(rows.T)])
    A = np.array(cols).T
    Ar = np.vstack([A.real, A.imag]).astype(float)
    rhs = -F[tuple(rows.T)]
    br = np.concatenate([rhs.real, rhs.imag]).astype(float)
    sol, *_ = np.linalg.lstsq(Ar, br, rcond=None)
    block_res = float(np.linalg.norm(Ar @ sol - br))
    sol = sol.astype(np.longdouble)
    nf = len(free)
    for t, idx in enumerate(free):
        U[tuple(idx)] += sol[2 * t] + LD(1j) * sol[2 * t + 1]
    omega = omega + sol[2 * nf:]
    F2 = residual(a, g, U, omega)
    div2 = g.lvec().astype(np.longdouble) @ omega - g.jgrid().astype(np.longdouble) ** 2
    nonres = g.support & ~res
    dU = np.where(nonres, -F2 / np.where(nonres, div2, 1), 0)
    U = U + dU
    corr = float(np.sqrt(np.sum(np.abs(dU) ** 2) + np.sum(sol[:2 * nf].astype(float) ** 2)))
    new = _copy(st)
    new.U, new.omega, new.n = U, omega, st.n + 1
    info = {"resonant_modes": int(res.sum()), "block_residual": block_res,
            "delta_omega": [float(x) for x in sol[2 * nf:]]}
    new.ledger.append(_ledger_entry(new, corr, info))
    return new


def _copy(st: IterationState) -> IterationState:
    return IterationState(st.n, st.a, st.sites, st.xi, st.grid, st.U.copy(), st.omega.copy(), st.omega0,
                          st.fixed, list(st.ledger), dict(st.flags), st.gamma, st.eps0, st.K0, st.excluded)


def run(st: IterationState, steps: int = 3, stop_on_truncation: bool = True) -> IterationState:
    """Iterate ``kam_step``; stops early with ``truncation-bound`` when ``K_n`` exceeds the box."""
    cur = st
    for _ in range(steps):
        K_next = cur.K0 ** (1.5 ** (cur.n + 1))
        if stop_on_truncation and K_next > cur.grid.Lb:
            cur.flags["truncation-bound"] = cur.n
            break
        cur = kam_step(cur)
    return cur


def extract_embedding(st: IterationState) -> dict:
    """Torus coefficients, the correction to the leading part and symmetry errors.

    Odd symmetry ``v(phi, -x) = -v(phi, x)`` compares ``U[l, -j]`` with
    ``-U[l, j]``; reversibility ``v(phi, x) = conj v(-phi, x)`` compares
    ``U[l, j]`` with ``conj U[l, -j]``.
    """
    U = st.U
    lead = leading_table(st.grid, st.sites, st.xi)
    corr = U - lead
    odd = float(np.max(np.abs(U + U[..., ::-1]), initial=0.0))
    rev = float(np.max(np.abs(U - np.conj(U[..., ::-1])), initial=0.0))
    scale = float(np.sqrt(np.sum(st.xi)))
    return {
        "coefficients": U,
        "omega_inf": st.omega.astype(float),
        "omega0": st.omega0,
        "omega_drift": float(np.max(np.abs(st.omega.astype(float) - st.omega0))),
        "correction_norm": float(np.sqrt(np.sum(np.abs(corr) ** 2))),
        "leading_scale": scale,
        "odd_error": odd,
        "reversibility_error": rev,
    }
