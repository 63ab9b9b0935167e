"""Schroedinger-type pseudo-differential operators on truncated Fourier data.

An operator acts on pairs ``w = (w+, w-)`` of functions of ``(theta, x)``:

    P w = -iE [ (m + Q2) w_xx + Q1 w_x + Q0 w ] + sum_m <w, c_m>_x d_m,

where ``E = diag(1, -1)``, each ``Qk`` is a 2x2 array of
:class:`~kamnls.spaces.FourierScalar` and ``<., .>_x`` is the sesquilinear
``L^2`` pairing in ``x`` taken pointwise in ``theta``.  When tangential sites
are attached, the operator lives on the range of ``Pi_S^perp`` and the
finite-rank pairs absorb the commutators with that projector.

Conjugations take the transport field ``F(theta)`` (the ``theta`` component of
the surrounding vector field) so that the term ``-Phi^{-1} (F . d_theta Phi)``
is included.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.fft import fftn, ifftn, next_fast_len

from .spaces import FourierScalar, SpaceError, ell_grid

__all__ = [
    "PsiDError",
    "PsiDOp",
    "Workspace",
    "DecayMatrix",
    "apply",
    "assemble_dense",
    "decay_norm",
    "invert_diffeo",
    "invert_angle_diffeo",
    "conj_space_diffeo",
    "conj_angle_diffeo",
    "conj_multiplication",
    "conj_finite_rank",
    "op_predicates",
    "symmetrize_op",
    "theta_field",
]

E_SIGN = (1.0, -1.0)
RANK_C = 5


class PsiDError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


def _zero_like(u: FourierScalar) -> FourierScalar:
    return u.with_coef(np.zeros_like(u.coef))


def theta_field(omega, d: int | None = None, L: int = 0) -> list:
    """Constant transport field ``omega`` as ``d`` theta-only scalars."""
    omega = np.atleast_1d(np.asarray(omega, float))
    d = len(omega) if d is None else d
    out = []
    for w in omega:
        u = FourierScalar.zeros(d, L, 0)
        u.coef[(L,) * d + (0,)] = w
        out.append(u)
    return out


@dataclass
class PsiDOp:
    m: float
    blocks: dict
    pairs: list = field(default_factory=list)
    sites: tuple = ()
    s_strip: float = 1.0
    a_strip: float = 1.0
    n_conj: int = 0
    rank0: int = 0
    history: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.blocks[2][0][0].d

    @property
    def L(self) -> int:
        return self.blocks[2][0][0].L

    @property
    def J(self) -> int:
        return self.blocks[2][0][0].J

    @property
    def signed_sites(self) -> tuple:
        return tuple(sorted(set(self.sites) | {-v for v in self.sites}))

    @property
    def rank(self) -> int:
        return len(self.pairs)

    def rank_cap(self) -> int:
        return self.rank0 + RANK_C * len(self.signed_sites) * max(self.n_conj, 0)

    def a(self, k: int) -> FourierScalar:
        return self.blocks[k][0][0]

    def b(self, k: int) -> FourierScalar:
        return self.blocks[k][0][1]

    @classmethod
    def zero(cls, d: int, L: int, J: int, m: float = 1.0, sites=()) -> "PsiDOp":
        z = lambda: FourierScalar.zeros(d, L, J)
        blocks = {k: [[z(), z()], [z(), z()]] for k in (2, 1, 0)}
        return cls(m=float(m), blocks=blocks, sites=tuple(sites))

    @classmethod
    def from_ab(cls, m, a2, b2, a1=None, b1=None, a0=None, b0=None, sites=()) -> "PsiDOp":
        """Operator with the real-on-real pattern ``[[a, b], [conj b, conj a]]``."""
        z = _zero_like(a2)
        blocks = {}
        for k, (a, b) in {2: (a2, b2), 1: (a1, b1), 0: (a0, b0)}.items():
            a = z if a is None else a
            b = z if b is None else b
            blocks[k] = [[a, b], [b.conj(), a.conj()]]
        return cls(m=float(m), blocks=blocks, sites=tuple(sites))

    def copy(self, **kw) -> "PsiDOp":
        blocks = {k: [[u.copy() for u in row] for row in B] for k, B in self.blocks.items()}
        base = replace(self, blocks=blocks, pairs=list(self.pairs), history=list(self.history))
        return replace(base, **kw) if kw else base


# ---------------------------------------------------------------------------
# grid workspace
# ---------------------------------------------------------------------------


class Workspace:
    """Uniform grid on ``T^d x T`` used for pointwise products and compositions."""

    def __init__(self, d: int, L: int, J: int, Nt: int | None = None, Nx: int | None = None):
        self.d, self.L, self.J = d, L, J
        self.Nt = (Nt or next_fast_len(max(3 * L + 3, 8))) if d else 1
        self.Nx = Nx or next_fast_len(max(3 * J + 8, 16))
        self.shape = (self.Nt,) * d + (self.Nx,)
        self.size = int(np.prod(self.shape))
        th = 2 * np.pi * np.arange(self.Nt) / self.Nt
        self.theta = np.stack(np.meshgrid(*([th] * d), indexing="ij"), axis=-1) if d else np.zeros((0,))
        self.x = 2 * np.pi * np.arange(self.Nx) / self.Nx
        self.kt = np.fft.fftfreq(self.Nt, 1.0 / self.Nt)
        self.kx = np.fft.fftfreq(self.Nx, 1.0 / self.Nx)

    # --- conversions ---------------------------------------------------
    def grid(self, u: FourierScalar) -> np.ndarray:
        if u.d != self.d:
            raise PsiDError("dimension-mismatch")
        if 2 * u.L + 1 > self.Nt or 2 * u.J + 1 > self.Nx:
            raise PsiDError("grid-too-small", "workspace grid cannot hold the coefficients")
        buf = np.zeros(self.shape, complex)
        idx_t = np.arange(-u.L, u.L + 1) % self.Nt
        idx_x = np.arange(-u.J, u.J + 1) % self.Nx
        buf[np.ix_(*([idx_t] * self.d), idx_x)] = u.coef
        return ifftn(buf) * self.size

    def coef(self, vals: np.ndarray, L: int | None = None, J: int | None = None, s=0.0, a=0.0) -> FourierScalar:
        L = self.L if L is None else L
        J = self.J if J is None else J
        c = fftn(vals) / self.size
        idx_t = np.arange(-L, L + 1) % self.Nt
        idx_x = np.arange(-J, J + 1) % self.Nx
        return FourierScalar(c[np.ix_(*([idx_t] * self.d), idx_x)], s, a)

    def const(self, value) -> np.ndarray:
        return np.full(self.shape, value, complex)

    # --- calculus --------------------------------------------------------
    def dx(self, vals: np.ndarray, k: int = 1) -> np.ndarray:
        c = np.fft.fft(vals, axis=-1)
        c *= (1j * self.kx) ** k
        return np.fft.ifft(c, axis=-1)

    def dtheta(self, vals: np.ndarray, i: int) -> np.ndarray:
        c = np.fft.fft(vals, axis=i)
        sh = [1] * vals.ndim
        sh[i] = -1
        c *= (1j * self.kt).reshape(sh)
        return np.fft.ifft(c, axis=i)

    def transport(self, F: list, vals: np.ndarray) -> np.ndarray:
        """``F(theta) . d_theta`` applied to grid values."""
        out = np.zeros(vals.shape, complex)
        for i, Fi in enumerate(F):
            out += self.grid_theta(Fi) * self.dtheta(vals, i)
        return out

    def grid_theta(self, u: FourierScalar) -> np.ndarray:
        """Grid values of a theta-only scalar (``J = 0``), broadcast over ``x``."""
        return self.grid(u) if u.J == 0 else self.grid(u)

    # --- x-Fourier modes per theta point ----------------------------------
    def xmodes(self, vals: np.ndarray, js) -> np.ndarray:
        c = np.fft.fft(vals, axis=-1) / self.Nx
        return c[..., np.asarray(js) % self.Nx]

    def from_xmodes(self, coeffs: np.ndarray, js) -> np.ndarray:
        ex = np.exp(1j * np.outer(np.asarray(js), self.x))
        return np.tensordot(coeffs, ex, axes=([-1], [0]))

    # --- compositions ------------------------------------------------------
    def compose_x(self, vals: np.ndarray, shift) -> np.ndarray:
        """Values of the band-limited function ``f`` at ``(theta, x + shift)``.

        ``shift`` is a grid array or a phase table from :meth:`x_phases`.
        """
        ph = (shift if isinstance(shift, _Phases) else self.x_phases(shift)).table
        c = np.fft.fft(vals, axis=-1) / self.Nx
        return np.matmul(ph, c[..., None])[..., 0]

    def x_phases(self, shift) -> "_Phases":
        pts = self.x + shift
        return _Phases(np.exp(1j * pts[..., None] * self.kx))

    def compose_theta(self, vals: np.ndarray, shift: list) -> np.ndarray:
        """Values of ``f`` at ``(theta + shift(theta), x)``; ``shift`` holds ``d`` grids of theta only."""
        d = self.d
        c = fftn(vals, axes=tuple(range(d))) / self.Nt**d
        kk = np.stack(np.meshgrid(*([self.kt] * d), indexing="ij"), axis=-1).reshape(-1, d)
        shift = [s[..., 0] if s.ndim == d + 1 else s for s in shift]
        pts = self.theta.reshape(-1, d) + np.stack([s.reshape(-1) for s in shift], axis=-1)
        ph = np.exp(1j * pts @ kk.T)
        flat = c.reshape(-1, self.Nx)
        return (ph @ flat).reshape(self.shape)


class _Phases:
    def __init__(self, table):
        self.table = table


def _theta_only(vals: np.ndarray) -> np.ndarray:
    """Slice a theta-only grid function at ``x = 0``."""
    return vals[..., 0]


# ---------------------------------------------------------------------------
# application and dense assembly
# ---------------------------------------------------------------------------


def _conv_crop(c: FourierScalar, u: FourierScalar, L: int, J: int) -> np.ndarray:
    from scipy.signal import fftconvolve

    full = fftconvolve(c.coef, u.coef)
    Lf = c.L + u.L
    Jf = c.J + u.J
    sl = tuple(slice(Lf - min(L, Lf), Lf + min(L, Lf) + 1) for _ in range(c.d)) + (
        slice(Jf - min(J, Jf), Jf + min(J, Jf) + 1),)
    out = np.zeros((2 * L + 1,) * c.d + (2 * J + 1,), complex)
    m = min(L, Lf)
    n = min(J, Jf)
    dst = tuple(slice(L - m, L + m + 1) for _ in range(c.d)) + (slice(J - n, J + n + 1),)
    out[dst] = full[sl]
    return out


def _proj_perp(u: FourierScalar, sites) -> FourierScalar:
    if not sites:
        return u
    c = u.coef.copy()
    for s in sites:
        if abs(s) <= u.J:
            c[..., s + u.J] = 0.0
    return u.with_coef(c)


def pair_inner(h, c, ws: Workspace) -> np.ndarray:
    """Pointwise-in-theta sesquilinear pairing ``sum_sigma <h^s, c^s>_x`` on the grid."""
    out = 0.0
    for s in range(2):
        hv = h[s] if isinstance(h[s], np.ndarray) else ws.grid(h[s])
        cv = c[s] if isinstance(c[s], np.ndarray) else ws.grid(c[s])
        out = out + np.mean(hv * np.conj(cv), axis=-1)
    return out


def apply(op: PsiDOp, w) -> tuple:
    """Apply the operator to ``w = (w+, w-)``; output keeps the truncation of ``w``."""
    wp, wm = w
    L, J = wp.L, wp.J
    sites = op.signed_sites
    w = (_proj_perp(wp, sites), _proj_perp(wm, sites))
    out = [np.zeros_like(wp.coef), np.zeros_like(wp.coef)]
    for s in range(2):
        acc = op.m * w[s].dx(2).coef
        for k in (2, 1, 0):
            for t in range(2):
                acc = acc + _conv_crop(op.blocks[k][s][t], w[t].dx(k), L, J)
        out[s] = -1j * E_SIGN[s] * acc
    res = [wp.with_coef(out[0]), wp.with_coef(out[1])]
    if op.pairs:
        Lw = max(L, op.L)
        Jw = max(J, op.J)
        ws = Workspace(op.d, 2 * Lw, 2 * Jw)
        for c, dvec in op.pairs:
            ip = pair_inner(w, c, ws)[..., None]
            for s in range(2):
                res[s] = res[s] + ws.coef(ip * ws.grid(dvec[s]), L, J)
    return _proj_perp(res[0], sites), _proj_perp(res[1], sites)


def assemble_dense(op: PsiDOp, L: int, J: int):
    """Dense matrix of the pseudo-differential part on the box ``(L, J)``.

    Index order is ``(sigma, l, j)`` in C order.  Used for decay norms and
    diagnostics; finite-rank pairs are included through their grid values.
    """
    d = op.d
    ells = ell_grid(d, L)
    js = np.arange(-J, J + 1)
    n1 = len(ells) * len(js)
    A = np.zeros((2 * n1, 2 * n1), complex)
    li = ells[:, None, :] - ells[None, :, :]
    for s in range(2):
        for t in range(2):
            blk = np.zeros((n1, n1), complex)
            for k in (2, 1, 0):
                Q = op.blocks[k][s][t]
                for a_, jo in enumerate(js):
                    for b_, ji in enumerate(js):
                        dj = jo - ji
                        if abs(dj) > Q.J:
                            continue
                        ok = np.all(np.abs(li) <= Q.L, axis=-1)
                        idx = tuple(np.where(ok, li[..., i] + Q.L, 0) for i in range(d)) + (dj + Q.J,)
                        vals = np.where(ok, Q.coef[idx], 0.0)
                        blk[a_::len(js), b_::len(js)] += vals * (1j * ji) ** k
                if k == 2 and s == t:
                    blk += np.diag(np.tile(op.m * (1j * js) ** 2, len(ells)))
            A[s * n1:(s + 1) * n1, t * n1:(t + 1) * n1] = -1j * E_SIGN[s] * blk
    return A


# ---------------------------------------------------------------------------
# decay norms
# ---------------------------------------------------------------------------


@dataclass
class DecayMatrix:
    """Dense matrix indexed by ``(sigma, l, j)`` over a truncation box."""

    A: np.ndarray
    d: int
    L: int
    J: int

    def index(self):
        ells = ell_grid(self.d, self.L)
        js = np.arange(-self.J, self.J + 1)
        l_idx = np.repeat(ells, len(js), axis=0)
        j_idx = np.tile(js, len(ells))
        return l_idx, j_idx

    def __matmul__(self, other: "DecayMatrix") -> "DecayMatrix":
        return DecayMatrix(self.A @ other.A, self.d, self.L, self.J)


def decay_norm(M, s: float, a: float, p: float) -> float:
    """Off-diagonal decay norm: sup over sigma blocks of the weighted l2 sum of
    the largest entry on each diagonal ``k - k' = (l, h)``."""
    if isinstance(M, PsiDOp):
        raise PsiDError("use-dense", "assemble the operator with assemble_dense first")
    l_idx, j_idx = M.index()
    n1 = len(j_idx)
    dl = l_idx[:, None, :] - l_idx[None, :, :]
    dj = j_idx[:, None] - j_idx[None, :]
    absl = np.abs(dl).sum(-1)
    keys = np.concatenate([dl.reshape(-1, M.d), dj.reshape(-1, 1)], axis=1)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    wl = np.abs(uniq[:, :-1]).sum(-1)
    wj = np.abs(uniq[:, -1])
    weight = np.maximum(1, wl + wj) ** p * np.exp(s * wl + a * wj)
    best = 0.0
    for sb in range(2):
        for tb in range(2):
            blk = np.abs(M.A[sb * n1:(sb + 1) * n1, tb * n1:(tb + 1) * n1]).reshape(-1)
            sup = np.zeros(len(uniq))
            np.maximum.at(sup, inv, blk)
            best = max(best, float(np.sqrt(np.sum((weight * sup) ** 2))))
    return best


# ---------------------------------------------------------------------------
# diffeomorphisms
# ---------------------------------------------------------------------------


def invert_diffeo(beta: FourierScalar, delta: float | None = None, tol: float = 1e-14,
                  max_iter: int = 200, ws: Workspace | None = None, L: int | None = None,
                  J: int | None = None) -> FourierScalar:
    """Inverse of ``x -> x + beta(theta, x)`` written as ``y -> y + beta~(theta, y)``.

    Fixed-point iteration ``beta~ = -beta(y + beta~)`` on the grid.  Raises
    ``diffeo-too-large`` when ``sup |beta_x| >= 1/2`` or when it exceeds
    ``delta`` (if given).
    """
    L = beta.L if L is None else L
    J = beta.J if J is None else J
    ws = ws or Workspace(beta.d, max(L, beta.L), max(J, beta.J))
    bv = ws.grid(beta)
    slope = float(np.max(np.abs(ws.dx(bv))))
    if slope >= 0.5 or (delta is not None and slope > delta):
        raise PsiDError("diffeo-too-large", f"sup|beta_x| = {slope:.3e}")
    if not np.any(bv):
        return FourierScalar.zeros(beta.d, L, J, beta.s, beta.a)
    inv = -bv.real.copy() if np.allclose(bv.imag, 0) else -bv.copy()
    real = np.allclose(bv.imag, 0, atol=1e-15)
    for _ in range(max_iter):
        new = -ws.compose_x(bv, inv)
        if real:
            new = new.real
        err = float(np.max(np.abs(new - inv)))
        inv = new
        if err < tol:
            break
    else:  # pragma: no cover - contraction factor <= 1/2 guarantees convergence
        raise PsiDError("diffeo-no-convergence")
    return ws.coef(inv.astype(complex), L, J, beta.s, beta.a)


def invert_angle_diffeo(beta: list, tol: float = 1e-14, max_iter: int = 200,
                        ws: Workspace | None = None, L: int | None = None) -> list:
    """Inverse of ``theta -> theta + beta(theta)`` for theta-only ``beta`` (a list of ``d`` scalars)."""
    d = len(beta)
    L = beta[0].L if L is None else L
    ws = ws or Workspace(d, max(L, beta[0].L), 0, Nx=1)
    bv = [ws.grid(b) for b in beta]
    jac = max(float(np.max(np.abs(ws.dtheta(bv[i], k)))) for i in range(d) for k in range(d))
    if jac >= 0.5 / max(d, 1):
        raise PsiDError("diffeo-too-large", f"sup|D beta| = {jac:.3e}")
    inv = [-b.real.copy() for b in bv]
    for _ in range(max_iter):
        new = [-ws.compose_theta(b, inv).real for b in bv]
        err = max(float(np.max(np.abs(n - o))) for n, o in zip(new, inv))
        inv = new
        if err < tol:
            break
    return [ws.coef(v.astype(complex), L, 0) for v in inv]


# ---------------------------------------------------------------------------
# conjugations
# ---------------------------------------------------------------------------


def _workspace_for(op: PsiDOp, L: int, J: int) -> Workspace:
    return Workspace(op.d, L, J)


def _out_box(op: PsiDOp, gen_L: int, gen_J: int, L_out, J_out):
    """Default output truncation: the operator box widened by twice the generator box."""
    return (op.L + 2 * gen_L if L_out is None else L_out), (op.J + 2 * gen_J if J_out is None else J_out)


def _blocks_grid(op: PsiDOp, ws: Workspace) -> dict:
    return {k: [[ws.grid(op.blocks[k][s][t]) for t in range(2)] for s in range(2)] for k in (2, 1, 0)}


def _mm(A, B):
    return [[A[i][0] * B[0][j] + A[i][1] * B[1][j] for j in range(2)] for i in range(2)]


def _add(A, B, c=1.0):
    return [[A[i][j] + c * B[i][j] for j in range(2)] for i in range(2)]


def _scal(A, c):
    return [[c * A[i][j] for j in range(2)] for i in range(2)]


def _inv2(M):
    det = M[0][0] * M[1][1] - M[0][1] * M[1][0]
    if np.min(np.abs(det)) < 1e-12:
        raise PsiDError("singular-multiplier", "M is not invertible on the grid")
    return [[M[1][1] / det, -M[0][1] / det], [-M[1][0] / det, M[0][0] / det]]


def _conjE(M):
    """``E M E``: flips the sign of the off-diagonal entries."""
    return [[M[0][0], -M[0][1]], [-M[1][0], M[1][1]]]


def _iE(M, c):
    """Left multiplication by ``c * E``."""
    return [[c * M[0][0], c * M[0][1]], [-c * M[1][0], -c * M[1][1]]]


def _eye(ws):
    return [[ws.const(1.0), ws.const(0.0)], [ws.const(0.0), ws.const(1.0)]]


def _pack(op: PsiDOp, ws: Workspace, Q: dict, **kw) -> PsiDOp:
    blocks = {k: [[ws.coef(Q[k][s][t], ws.L, ws.J) for t in range(2)] for s in range(2)] for k in (2, 1, 0)}
    new = op.copy(blocks=blocks, **kw)
    return new


def _consume_strip(op: PsiDOp, rho: float, what: str) -> dict:
    s_new = op.s_strip * (1 - rho)
    a_new = op.a_strip * (1 - rho)
    if rho < 0 or rho >= 1:
        raise PsiDError("strip-exhausted", f"{what}: invalid strip fraction {rho}")
    return {"s_strip": s_new, "a_strip": a_new,
            "history": op.history + [(what, op.s_strip - s_new, op.a_strip - a_new)]}


def _apply_grid(op_blocks_grid, m, ws: Workspace, w) -> list:
    """Pseudo-differential part on grid values ``w = [w+, w-]``."""
    out = []
    d1 = [ws.dx(w[t], 1) for t in range(2)]
    d2 = [ws.dx(w[t], 2) for t in range(2)]
    for s in range(2):
        acc = m * d2[s]
        for t in range(2):
            acc = acc + op_blocks_grid[2][s][t] * d2[t] + op_blocks_grid[1][s][t] * d1[t] + op_blocks_grid[0][s][t] * w[t]
        out.append(-1j * E_SIGN[s] * acc)
    return out


def _perp_grid(v, ws: Workspace, sites):
    if not sites:
        return v
    out = []
    for comp in v:
        c = np.fft.fft(comp, axis=-1)
        for s in sites:
            c[..., s % ws.Nx] = 0.0
        out.append(np.fft.ifft(c, axis=-1))
    return out


def _adjoint_on_mode(Qg: dict, m: float, ws: Workspace, sigma_idx: int, s: int) -> list:
    """``P^* e`` for ``e`` the unit mode ``e^{isx}`` in component ``sigma_idx``."""
    e = np.exp(1j * s * ws.x) * np.ones(ws.shape)
    out = []
    for t in range(2):
        acc = np.zeros(ws.shape, complex)
        for k in (2, 1, 0):
            f = 1j * E_SIGN[sigma_idx] * np.conj(Qg[k][sigma_idx][t]) * e
            if k == 2 and t == sigma_idx:
                f = f + 1j * E_SIGN[sigma_idx] * m * e
            acc = acc + (-1) ** k * ws.dx(f, k)
        out.append(acc)
    return out


class _PerpMap:
    """Grid realization of ``Phi_perp = Pi Phi Pi`` and friends for a pointwise-in-theta map."""

    def __init__(self, ws: Workspace, fwd, inv, adj, sites):
        self.ws, self.fwd, self.inv, self.adj, self.sites = ws, fwd, inv, adj, tuple(sites)
        if self.sites:
            cols = []
            for t in range(2):
                for s in self.sites:
                    e = [ws.const(0.0), ws.const(0.0)]
                    e[t] = np.exp(1j * s * ws.x) * np.ones(ws.shape)
                    cols.append(self.inv(e))
            self.inv_cols = cols
            n = len(cols)
            G = np.zeros(ws.shape[:-1] + (n, n), complex)
            for c, col in enumerate(cols):
                for t in range(2):
                    G[..., t * len(self.sites):(t + 1) * len(self.sites), c] = ws.xmodes(col[t], self.sites)
            self.G = G

    def perp_inv(self, v):
        """Solve ``Pi Phi u = v`` with ``u`` in the range of ``Pi``."""
        ws = self.ws
        u = self.inv(v)
        if not self.sites:
            return u
        r = np.concatenate([ws.xmodes(u[t], self.sites) for t in range(2)], axis=-1)
        tcoef = -np.linalg.solve(self.G, r[..., None])[..., 0]
        for c, col in enumerate(self.inv_cols):
            for t in range(2):
                u[t] = u[t] + tcoef[..., c][..., None] * col[t]
        return _perp_grid(u, ws, self.sites)


def _new_pairs(op: PsiDOp, ws: Workspace, pm: _PerpMap, Qg_old, Qg_new, m_new):
    """Finite-rank pairs of the conjugated operator restricted to the normal modes."""
    sites = op.signed_sites
    pairs = []
    for c, dvec in op.pairs:
        cg = [ws.grid(c[0]), ws.grid(c[1])]
        dg = [ws.grid(dvec[0]), ws.grid(dvec[1])]
        pairs.append((_perp_grid(pm.adj(cg), ws, sites), pm.perp_inv(dg)))
    for t in range(2):
        for s in sites:
            e = [ws.const(0.0), ws.const(0.0)]
            e[t] = np.exp(1j * s * ws.x) * np.ones(ws.shape)
            cA = _perp_grid(_adjoint_on_mode(Qg_new, m_new, ws, t, s), ws, sites)
            dA = pm.perp_inv(_perp_grid(pm.fwd(e), ws, sites))
            pairs.append((cA, dA))
            cB = _perp_grid(pm.adj(e), ws, sites)
            Pe = _apply_grid(Qg_old, op.m, ws, e)
            dB = pm.perp_inv(_perp_grid([-Pe[0], -Pe[1]], ws, sites))
            pairs.append((cB, dB))
    return [(tuple(ws.coef(v) for v in c), tuple(ws.coef(v) for v in dd)) for c, dd in pairs]


def _finish(op: PsiDOp, ws: Workspace, Qnew: dict, pm: _PerpMap | None, Qg_old, rho: float, what: str) -> PsiDOp:
    kw = _consume_strip(op, rho, what)
    new = _pack(op, ws, Qnew, n_conj=op.n_conj + 1, **kw)
    if pm is not None and (op.signed_sites or op.pairs):
        new.pairs = _new_pairs(op, ws, pm, Qg_old, Qnew, op.m)
        if new.rank > new.rank_cap():
            raise PsiDError("rank-cap", f"rank {new.rank} exceeds cap {new.rank_cap()}")
    return new


def conj_multiplication(op: PsiDOp, A: list, F: list, rho: float = 0.0, L_out: int | None = None,
                        J_out: int | None = None) -> PsiDOp:
    """Conjugate by the multiplier ``M = 1 + A`` (``A`` a 2x2 list of scalars).

    New operator ``M^{-1} P M - M^{-1} (F . d_theta M)``.
    """
    ws = _workspace_for(op, *_out_box(op, A[0][0].L, A[0][0].J, L_out, J_out))
    Ag = [[ws.grid(A[i][j]) for j in range(2)] for i in range(2)]
    M = _add(_eye(ws), Ag)
    Minv = _inv2(M)
    Mx = [[ws.dx(M[i][j], 1) for j in range(2)] for i in range(2)]
    Mxx = [[ws.dx(M[i][j], 2) for j in range(2)] for i in range(2)]
    Qg = _blocks_grid(op, ws)
    Q2m = _add(Qg[2], _scal(_eye(ws), op.m))
    L = _conjE(Minv)
    X2 = _mm(Q2m, M)
    X1 = _add(_scal(_mm(Q2m, Mx), 2.0), _mm(Qg[1], M))
    X0 = _add(_add(_mm(Q2m, Mxx), _mm(Qg[1], Mx)), _mm(Qg[0], M))
    FdM = [[ws.transport(F, M[i][j]) for j in range(2)] for i in range(2)]
    T0 = _iE(_mm(Minv, FdM), -1j)
    Qnew = {2: _add(_mm(L, X2), _scal(_eye(ws), -op.m)), 1: _mm(L, X1), 0: _add(_mm(L, X0), T0)}

    def fwd(v):
        return [M[0][0] * v[0] + M[0][1] * v[1], M[1][0] * v[0] + M[1][1] * v[1]]

    def inv(v):
        return [Minv[0][0] * v[0] + Minv[0][1] * v[1], Minv[1][0] * v[0] + Minv[1][1] * v[1]]

    def adj(v):
        return [np.conj(M[0][0]) * v[0] + np.conj(M[1][0]) * v[1], np.conj(M[0][1]) * v[0] + np.conj(M[1][1]) * v[1]]

    pm = _PerpMap(ws, fwd, inv, adj, op.signed_sites) if (op.signed_sites or op.pairs) else None
    return _finish(op, ws, Qnew, pm, Qg, rho, "multiplication")


def conj_space_diffeo(op: PsiDOp, alpha: FourierScalar, F: list, rho: float = 0.0,
                      L_out: int | None = None, J_out: int | None = None, check: bool = True) -> PsiDOp:
    """Conjugate by ``(T w)(theta, x) = w(theta, x + alpha(theta, x))``."""
    ws = _workspace_for(op, *_out_box(op, alpha.L, alpha.J, L_out, J_out))
    if check:
        if not alpha.is_real(1e-12):
            raise PsiDError("alpha-not-real")
        if not alpha.is_odd(1e-12):
            raise PsiDError("alpha-not-odd")
    alpha_t = invert_diffeo(alpha, ws=ws, L=ws.L, J=ws.J) if np.any(alpha.coef) else None
    av = ws.grid(alpha).real
    if alpha_t is None:
        return op.copy(n_conj=op.n_conj + 1, **_consume_strip(op, rho, "space-diffeo"))
    atv = ws.grid(alpha_t).real
    ax = ws.dx(av, 1).real
    axx = ws.dx(av, 2).real
    ph_inv, ph_fwd = ws.x_phases(atv), ws.x_phases(av)
    Tinv = lambda f: ws.compose_x(f, ph_inv)
    Tfwd = lambda f: ws.compose_x(f, ph_fwd)
    Qg = _blocks_grid(op, ws)
    Q2m = _add(Qg[2], _scal(_eye(ws), op.m))
    J1 = 1.0 + ax
    Qnew = {
        2: [[Tinv(Q2m[s][t] * J1**2) - (op.m if s == t else 0.0) for t in range(2)] for s in range(2)],
        1: [[Tinv(Q2m[s][t] * axx + Qg[1][s][t] * J1) for t in range(2)] for s in range(2)],
        0: [[Tinv(Qg[0][s][t]) for t in range(2)] for s in range(2)],
    }
    tr = Tinv(ws.transport(F, av))
    for s in range(2):
        Qnew[1][s][s] = Qnew[1][s][s] - 1j * E_SIGN[s] * tr
    jac_t = 1.0 + ws.dx(atv, 1).real

    def fwd(v):
        return [Tfwd(v[0]), Tfwd(v[1])]

    def inv(v):
        return [Tinv(v[0]), Tinv(v[1])]

    def adj(v):
        return [jac_t * Tinv(v[0]), jac_t * Tinv(v[1])]

    pm = _PerpMap(ws, fwd, inv, adj, op.signed_sites) if (op.signed_sites or op.pairs) else None
    return _finish(op, ws, Qnew, pm, Qg, rho, "space-diffeo")


def conj_angle_diffeo(op: PsiDOp, beta: list, F: list, rho: float = 0.0, L_out: int | None = None):
    """Conjugate by ``theta -> theta + beta(theta)``; returns ``(op', F')``.

    The transport field becomes ``T^{-1}[(1 + D beta) F]``; coefficients and
    finite-rank pairs are composed with the inverse map.
    """
    ws = _workspace_for(op, _out_box(op, beta[0].L, 0, L_out, None)[0], op.J)
    d = op.d
    if not any(np.any(b.coef) for b in beta):
        return op.copy(n_conj=op.n_conj + 1, **_consume_strip(op, rho, "angle-diffeo")), [f.copy() for f in F]
    bt = invert_angle_diffeo(beta, L=ws.L)
    btv = [ws.grid(b).real for b in bt]
    bv = [ws.grid(b).real for b in beta]
    Tinv = lambda f: ws.compose_theta(f, btv)
    Qnew = {k: [[Tinv(ws.grid(op.blocks[k][s][t])) for t in range(2)] for s in range(2)] for k in (2, 1, 0)}
    Fg = [ws.grid(f) for f in F]
    Fnew = []
    for i in range(d):
        acc = Fg[i].copy()
        for k in range(d):
            acc = acc + ws.dtheta(bv[i], k) * Fg[k]
        Fnew.append(ws.coef(Tinv(acc), ws.L, 0))
    kw = _consume_strip(op, rho, "angle-diffeo")
    new = _pack(op, ws, Qnew, n_conj=op.n_conj + 1, **kw)
    new.pairs = [(tuple(ws.coef(Tinv(ws.grid(v))) for v in c),
                  tuple(ws.coef(Tinv(ws.grid(v))) for v in dd)) for c, dd in op.pairs]
    return new, Fnew


def conj_finite_rank(vf, f, max_terms: int = 40, tol: float = 1e-15):
    """Push-forward of a vector field along the time-one flow of ``f``.

    ``f`` must have only the finite-dimensional components (constant or
    linear ``y`` part, ``w``-linear ``y`` part, constant ``w`` part), be
    real-on-real, reversibility preserving and gauge covariant.
    """
    from .spaces import decompose_NXR, structure_check, TruncatedVectorField

    _, X, R = decompose_NXR(f)
    if R.terms or any(k[0][0] == "th" for k in f.terms):
        raise PsiDError("not-finite-rank-class", "generator has components outside the finite-rank class")
    chk = structure_check(f)
    if not (chk["real_on_real"] and chk["gauge"] and reversibility_preserving(f)):
        raise PsiDError("not-finite-rank-class", f"structure flags {chk}")
    out = vf.copy()
    term = vf.copy()
    for n in range(1, max_terms):
        term = _vf_bracket(f, term)
        term = TruncatedVectorField(term.d, {k: -v / n for k, v in term.terms.items()}, term.degree)
        if not term.terms:
            break
        out = out.combine(term)
        if max(abs(v) for v in term.terms.values()) < tol * max(1.0, max((abs(v) for v in vf.terms.values()), default=1.0)):
            break
    return out


def reversibility_preserving(f) -> bool:
    """Generator of a map commuting with the involution (opposite parity to reversible fields)."""
    for (comp, ell, ymon, wmon), c in f.terms.items():
        fw = tuple(sorted((-s, j) for s, j in wmon))
        nl = tuple(-e for e in ell)
        if comp[0] == "w":
            partner, sign = ("w", -comp[1], comp[2]), 1.0
        else:
            partner, sign = comp, (-1.0 if comp[0] == "th" else 1.0)
        r = f.terms.get((partner, nl, ymon, fw), 0.0)
        if abs(c - sign * r) > 1e-12 * max(1.0, abs(c)):
            return False
    return True


def _vf_derivative(G, F, out_terms, sign):
    """Accumulate ``sign * DG . F`` for truncated vector fields (theta, y and w slots)."""
    d = G.d
    for (gc, gl, gy, gw), g in G.items():
        # theta derivative
        for i in range(d):
            if gl[i] == 0:
                continue
            for (fc, fl, fy, fw), fv in F.items():
                if fc != ("th", i):
                    continue
                _acc(out_terms, gc, tuple(a + b for a, b in zip(gl, fl)), tuple(a + b for a, b in zip(gy, fy)),
                     gw + fw, sign * g * 1j * gl[i] * fv, G.degree)
        for i in range(d):
            if gy[i] == 0:
                continue
            ny = list(gy)
            ny[i] -= 1
            for (fc, fl, fy, fw), fv in F.items():
                if fc != ("y", i):
                    continue
                _acc(out_terms, gc, tuple(a + b for a, b in zip(gl, fl)), tuple(a + b for a, b in zip(ny, fy)),
                     gw + fw, sign * g * gy[i] * fv, G.degree)
        seen = set()
        for fac in gw:
            if fac in seen:
                continue
            seen.add(fac)
            k = gw.count(fac)
            rest = list(gw)
            rest.remove(fac)
            for (fc, fl, fy, fw), fv in F.items():
                if fc != ("w",) + fac:
                    continue
                _acc(out_terms, gc, tuple(a + b for a, b in zip(gl, fl)), tuple(a + b for a, b in zip(gy, fy)),
                     tuple(rest) + fw, sign * g * k * fv, G.degree)


def _acc(terms, comp, ell, ymon, wmon, val, degree):
    wmon = tuple(sorted(wmon))
    if 2 * sum(ymon) + len(wmon) > degree or val == 0:
        return
    key = (comp, ell, ymon, wmon)
    v = terms.get(key, 0.0) + val
    if v == 0:
        terms.pop(key, None)
    else:
        terms[key] = v


def _vf_bracket(F, G):
    """``[F, G] = DG.F - DF.G`` for truncated vector fields."""
    from .spaces import TruncatedVectorField

    terms: dict = {}
    _vf_derivative(_Items(G), _Items(F), terms, 1.0)
    _vf_derivative(_Items(F), _Items(G), terms, -1.0)
    return TruncatedVectorField(G.d, terms, max(F.degree, G.degree))


class _Items:
    def __init__(self, vf):
        self.vf = vf
        self.d = vf.d
        self.degree = vf.degree

    def items(self):
        return self.vf.terms.items()


# ---------------------------------------------------------------------------
# structural predicates
# ---------------------------------------------------------------------------


def _flip_theta_conj(u: FourierScalar) -> np.ndarray:
    """Coefficients of ``conj(u(-theta, x))``."""
    return np.conj(u.coef[..., ::-1])


def _charge_mask(u: FourierScalar, q: int) -> np.ndarray:
    ells = np.indices((2 * u.L + 1,) * u.d).sum(0) - u.d * u.L
    return (ells == q)[..., None] * np.ones(2 * u.J + 1, bool)


def op_predicates(op: PsiDOp, tol: float = 1e-10) -> dict:
    """Real-on-real, reversibility and gauge flags of the symbol blocks."""
    scale = max(max(float(np.max(np.abs(op.blocks[k][s][t].coef), initial=0.0)) for s in range(2) for t in range(2))
                for k in (2, 1, 0)) or 1.0
    thr = tol * max(scale, abs(op.m))
    real = rev = gauge = parity = True
    for k in (2, 1, 0):
        B = op.blocks[k]
        if np.max(np.abs(B[1][1].coef - B[0][0].conj().coef)) > thr or \
           np.max(np.abs(B[1][0].coef - B[0][1].conj().coef)) > thr:
            real = False
        if np.max(np.abs(B[0][0].coef - _flip_theta_conj(B[0][0]))) > thr:
            rev = False
        if np.max(np.abs(B[0][1].coef - _flip_theta_conj(B[0][1]))) > thr:
            rev = False
        for s, t, q in ((0, 0, 0), (1, 1, 0), (0, 1, 2), (1, 0, -2)):
            if np.max(np.abs(np.where(_charge_mask(B[s][t], q), 0.0, B[s][t].coef))) > thr:
                gauge = False
        sgn = (-1) ** k
        for s in range(2):
            for t in range(2):
                c = B[s][t].coef
                if np.max(np.abs(c - sgn * c[..., ::-1])) > thr:
                    parity = False
    return {"real_on_real": real, "reversible": rev, "gauge": gauge, "parity": parity}


def symmetrize_op(op: PsiDOp) -> PsiDOp:
    """Project the symbol blocks onto the structured class checked by :func:`op_predicates`."""
    new = op.copy()
    for k in (2, 1, 0):
        B = new.blocks[k]
        sgn = (-1) ** k
        for (s, t, q) in ((0, 0, 0), (0, 1, 2)):
            u = B[s][t]
            c = np.where(_charge_mask(u, q), u.coef, 0.0)
            c = 0.5 * (c + sgn * c[..., ::-1])
            u = u.with_coef(c)
            flipped = _flip_theta_conj(u)
            u = u.with_coef(0.5 * (u.coef + flipped))
            B[s][t] = u
        B[1][1] = B[0][0].conj()
        B[1][0] = B[0][1].conj()
    return new
