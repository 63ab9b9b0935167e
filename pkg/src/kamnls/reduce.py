"""Reduction of the regularized operator to a diagonal plus a small remainder.

Operators that commute with angle translations up to a phase are stored as
Toeplitz blocks ``A[delta]`` indexed by the angle offset ``delta`` and acting
on the odd (sine) basis of the normal modes, both components stacked:
index ``(sigma, j)`` with ``sigma in (+, -)`` and ``j`` in ``basis.js``.
The operator ``omega . d_theta`` is kept apart; its commutator with a
Toeplitz operator multiplies block ``delta`` by ``i omega . delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .psido import PsiDOp, conj_multiplication
from .regularize import dx_inverse
from .spaces import FourierScalar, ell_grid

__all__ = [
    "ReduceError",
    "OddBasis",
    "Toeplitz",
    "ReducedOperator",
    "psido_to_toeplitz",
    "descent_step",
    "linear_bnf",
    "kam_reduce",
    "approx_invert",
    "transpose_reduce",
    "enumerate_divisors",
    "divisor_constants",
    "sigmas",
]

IMAG_TOL = 1e-12


class ReduceError(ValueError):
    def __init__(self, code: str, message: str = "", data=None):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.data = data


@dataclass(frozen=True)
class OddBasis:
    d: int
    Lt: int
    js: tuple

    @property
    def nj(self) -> int:
        return len(self.js)

    @property
    def n(self) -> int:
        return 2 * self.nj

    @property
    def offsets(self) -> np.ndarray:
        return ell_grid(self.d, self.Lt)

    @property
    def center(self) -> int:
        return (len(self.offsets) - 1) // 2

    def sig(self) -> np.ndarray:
        return np.repeat([1, -1], self.nj)

    def jj(self) -> np.ndarray:
        return np.tile(np.asarray(self.js), 2)


def sigmas(basis: OddBasis):
    return basis.sig(), basis.jj()


class Toeplitz:
    """Angle-Toeplitz operator truncated to offsets in ``[-Lt, Lt]^d``."""

    def __init__(self, basis: OddBasis, blocks: np.ndarray):
        self.basis = basis
        self.blocks = np.asarray(blocks, complex)

    @classmethod
    def zeros(cls, basis: OddBasis) -> "Toeplitz":
        return cls(basis, np.zeros((len(basis.offsets), basis.n, basis.n), complex))

    @classmethod
    def identity(cls, basis: OddBasis) -> "Toeplitz":
        T = cls.zeros(basis)
        T.blocks[basis.center] = np.eye(basis.n)
        return T

    @classmethod
    def diagonal(cls, basis: OddBasis, mu) -> "Toeplitz":
        T = cls.zeros(basis)
        T.blocks[basis.center] = np.diag(mu)
        return T

    def copy(self) -> "Toeplitz":
        return Toeplitz(self.basis, self.blocks.copy())

    def _grid(self) -> np.ndarray:
        b = self.basis
        return self.blocks.reshape((2 * b.Lt + 1,) * b.d + (b.n, b.n))

    def __add__(self, other: "Toeplitz") -> "Toeplitz":
        return Toeplitz(self.basis, self.blocks + other.blocks)

    def __sub__(self, other: "Toeplitz") -> "Toeplitz":
        return Toeplitz(self.basis, self.blocks - other.blocks)

    def __neg__(self) -> "Toeplitz":
        return Toeplitz(self.basis, -self.blocks)

    def scale(self, c) -> "Toeplitz":
        return Toeplitz(self.basis, c * self.blocks)

    def __matmul__(self, other: "Toeplitz") -> "Toeplitz":
        """Composition; offsets beyond the box are dropped."""
        b = self.basis
        A, B = self._grid(), other._grid()
        d, Lt, n = b.d, b.Lt, b.n
        out = np.zeros((4 * Lt + 1,) * d + (n, n), complex)
        flatA = A.reshape(-1, n, n)
        idxA = np.array(list(np.ndindex(*((2 * Lt + 1,) * d))))
        nzA = [i for i in range(len(flatA)) if np.any(flatA[i])]
        nzB = [i for i, blk in enumerate(B.reshape(-1, n, n)) if np.any(blk)]
        flatB = B.reshape(-1, n, n)
        for ia in nzA:
            for ib in nzB:
                pos = tuple(idxA[ia] + idxA[ib])
                out[pos] += flatA[ia] @ flatB[ib]
        sl = tuple(slice(Lt, 3 * Lt + 1) for _ in range(d))
        return Toeplitz(b, out[sl].reshape(-1, n, n))

    def offset_phase(self, omega) -> np.ndarray:
        return 1j * (self.basis.offsets @ np.asarray(omega, float))

    def commutator_transport(self, omega) -> "Toeplitz":
        """``[omega . d_theta, A]``."""
        return Toeplitz(self.basis, self.blocks * self.offset_phase(omega)[:, None, None])

    def inverse(self, tol: float = 1e-15, max_terms: int = 60) -> "Toeplitz":
        """Neumann inverse of ``1 + (A - 1)``; requires ``A`` close to the identity."""
        eye = Toeplitz.identity(self.basis)
        X = self - eye
        if X.max_abs() >= 0.5:
            raise ReduceError("not-near-identity", f"|A - 1| = {X.max_abs():.3e}")
        out = eye.copy()
        term = eye.copy()
        for _ in range(max_terms):
            term = -(term @ X)
            out = out + term
            if term.max_abs() < tol:
                break
        return out

    def bt(self) -> "Toeplitz":
        """Block transpose: each offset block is transposed in the mode indices."""
        return Toeplitz(self.basis, np.transpose(self.blocks, (0, 2, 1)).copy())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.blocks), initial=0.0))

    def diag_center(self) -> np.ndarray:
        return np.diag(self.blocks[self.basis.center]).copy()

    def decay_norm(self, s: float = 0.0, p: float = 0.0) -> float:
        """Weighted l2 over offsets ``(delta, j - k)`` of the largest entry on each diagonal."""
        b = self.basis
        jj = b.jj()
        dj = np.abs(jj[:, None] - jj[None, :])
        absl = np.abs(b.offsets).sum(-1)
        best = 0.0
        sig = b.sig()
        for s1 in (1, -1):
            for s2 in (1, -1):
                rows = sig == s1
                cols = sig == s2
                tot = 0.0
                for k, blk in enumerate(self.blocks):
                    sub = np.abs(blk[np.ix_(rows, cols)])
                    gaps = dj[np.ix_(rows, cols)]
                    for g in np.unique(gaps):
                        m = sub[gaps == g].max()
                        if m:
                            w = max(1, absl[k] + g) ** p * math.exp(s * absl[k])
                            tot += (w * m) ** 2
                best = max(best, math.sqrt(tot))
        return best

    def apply(self, g: np.ndarray, Lg: int) -> np.ndarray:
        """Act on a function stored as ``(2Lg+1)^d x n`` Fourier coefficients (box-truncated)."""
        b = self.basis
        d, n = b.d, b.n
        G = np.asarray(g, complex).reshape((2 * Lg + 1,) * d + (n,))
        A = self._grid()
        out = np.zeros(G.shape, complex)
        for idx in np.ndindex(*((2 * b.Lt + 1,) * d)):
            blk = A[idx]
            if not np.any(blk):
                continue
            shift = [i - b.Lt for i in idx]
            src = tuple(slice(max(0, -s), 2 * Lg + 1 - max(0, s)) for s in shift)
            dst = tuple(slice(max(0, s), 2 * Lg + 1 - max(0, -s)) for s in shift)
            out[dst] += G[src] @ blk.T
        return out.reshape(g.shape)


@dataclass
class ReducedOperator:
    """``omega . d_theta + diag(mu) + R`` with the accumulated conjugators."""

    omega: np.ndarray
    m: float
    mu: np.ndarray
    R: Toeplitz
    chain: list = field(default_factory=list)
    log: list = field(default_factory=list)
    excluded: tuple | None = None

    @property
    def basis(self) -> OddBasis:
        return self.R.basis

    def r(self) -> np.ndarray:
        """Real corrections ``r`` in ``mu = -i sigma (m j^2 + r)``."""
        sig, jj = sigmas(self.basis)
        return (1j * sig * self.mu).real - self.m * jj**2

    def full(self) -> Toeplitz:
        return Toeplitz.diagonal(self.basis, self.mu) + self.R

    def check_imaginary(self, tol: float = IMAG_TOL) -> bool:
        scale = np.maximum(np.abs(self.mu), 1.0)
        return bool(np.all(np.abs(self.mu.real) <= tol * scale))


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def _exp_block(Q: FourierScalar, delta_idx: tuple, diffs: np.ndarray) -> np.ndarray:
    """``Q_{delta, j - k}`` for an array of differences, zero outside the table."""
    out = np.zeros(diffs.shape, complex)
    if any(abs(e) > Q.L for e in delta_idx):
        return out
    ok = np.abs(diffs) <= Q.J
    sl = tuple(e + Q.L for e in delta_idx)
    out[ok] = Q.coef[sl][diffs[ok] + Q.J]
    return out


def psido_to_toeplitz(op: PsiDOp, omega, basis: OddBasis) -> ReducedOperator:
    """Toeplitz form of ``omega . d_theta - P`` on the odd normal basis.

    The diagonal of the zero-offset block becomes ``mu``; the rest is ``R``.
    """
    js = np.asarray(basis.js)
    nj = basis.nj
    blocks = np.zeros((len(basis.offsets), basis.n, basis.n), complex)
    E = (1.0, -1.0)
    for oi, delta in enumerate(basis.offsets):
        dl = tuple(int(e) for e in delta)
        for s in range(2):
            for t in range(2):
                blk = np.zeros((nj, nj), complex)
                for sgn_k in (1, -1):
                    kk = sgn_k * js
                    diffs = js[:, None] - kk[None, :]
                    acc = np.zeros((nj, nj), complex)
                    for k in (2, 1, 0):
                        acc += _exp_block(op.blocks[k][s][t], dl, diffs) * ((1j * kk) ** k)[None, :]
                    if s == t and not any(dl):
                        acc += np.where(diffs == 0, op.m * (1j * kk[None, :]) ** 2, 0.0)
                    blk += sgn_k * acc
                blocks[oi, s * nj:(s + 1) * nj, t * nj:(t + 1) * nj] = -1j * E[s] * blk
        for c, dv in op.pairs:
            for s in range(2):
                for t in range(2):
                    blocks[oi, s * nj:(s + 1) * nj, t * nj:(t + 1) * nj] += _pair_block(c[t], dv[s], dl, js)
    P = Toeplitz(basis, blocks)
    L = -P
    mu = L.diag_center()
    L.blocks[basis.center] -= np.diag(mu)
    return ReducedOperator(omega=np.asarray(omega, float), m=op.m, mu=mu, R=L)


def _pair_block(c: FourierScalar, dv: FourierScalar, delta, js) -> np.ndarray:
    """Offset block of ``h -> <h, c> d`` on the odd basis (negated later with ``P``)."""
    d = c.d
    out = np.zeros((len(js), len(js)), complex)
    cc = np.zeros((2 * c.L + 1,) * d + (len(js),), complex)
    okc = js <= c.J
    cc[..., okc] = np.conj(c.coef[..., c.J + js[okc]]) - np.conj(c.coef[..., c.J - js[okc]])
    dd = np.zeros((2 * dv.L + 1,) * d + (len(js),), complex)
    okd = js <= dv.J
    dd[..., okd] = dv.coef[..., dv.J + js[okd]]
    for idx in np.ndindex(*cc.shape[:-1]):
        l2 = np.array(idx) - c.L
        tgt = np.array(delta) + l2 + dv.L
        if np.any(tgt < 0) or np.any(tgt > 2 * dv.L):
            continue
        out += np.outer(dd[tuple(tgt)], cc[idx])
    return out


# ---------------------------------------------------------------------------
# descent
# ---------------------------------------------------------------------------


def descent_step(op: PsiDOp, F: list, tol: float = 1e-12):
    """Remove the diagonal first-order coefficient with the multiplier ``diag(e^q, e^conj(q))``.

    ``q = -(1/2m) dx^{-1} a1``.  Returns ``(op', q)``.
    """
    a1 = op.a(1)
    avg = np.max(np.abs(a1.coef[..., a1.J]), initial=0.0)
    if avg > tol * max(1.0, np.max(np.abs(a1.coef), initial=0.0)):
        raise ReduceError("structural", f"a1 has x-average {avg:.3e}")
    q = dx_inverse(a1).with_coef(-dx_inverse(a1).coef / (2 * op.m))
    if not np.any(q.coef):
        return op.copy(), q
    from .psido import Workspace

    ws = Workspace(op.d, op.L, op.J)
    qv = ws.grid(q)
    e1 = ws.coef(np.exp(qv) - 1.0)
    e2 = ws.coef(np.exp(np.conj(qv)) - 1.0)
    z = FourierScalar.zeros(op.d, op.L, op.J)
    new = conj_multiplication(op, [[e1, z], [z.copy(), e2]], F, L_out=op.L, J_out=op.J)
    return new, q


# ---------------------------------------------------------------------------
# linear Birkhoff normal form and KAM sweeps
# ---------------------------------------------------------------------------


def _integer_divisor(basis: OddBasis, sites) -> np.ndarray:
    """``v^2 . delta - sigma j^2 + sigma' k^2`` for every block entry."""
    sig, jj = sigmas(basis)
    v2 = np.asarray(sites, float) ** 2
    base = (basis.offsets @ v2)[:, None, None]
    return base - (sig * jj**2)[None, :, None] + (sig * jj**2)[None, None, :]


def _divisors(red: ReducedOperator) -> np.ndarray:
    b = red.basis
    return (1j * (b.offsets @ red.omega))[:, None, None] + red.mu[None, :, None] - red.mu[None, None, :]


def _conjugate(red: ReducedOperator, Psi: Toeplitz, tag: str) -> ReducedOperator:
    b = red.basis
    Phi = Toeplitz.identity(b) + Psi
    W = Psi.commutator_transport(red.omega) + red.full() @ Phi
    X = Phi.inverse() @ W
    mu = X.diag_center()
    X.blocks[b.center] -= np.diag(mu)
    out = ReducedOperator(red.omega, red.m, mu, X, red.chain + [Phi], list(red.log), red.excluded)
    return out


def linear_bnf(red: ReducedOperator, sites, min_divisor: float = 0.5):
    """Remove all non-resonant entries of the remainder at once.

    Resonance is decided by the integer divisor ``v^2 . delta - sigma j^2 +
    sigma' k^2``.  Resonant diagonal entries feed ``r^(0)``; resonant
    off-diagonal entries are left in place and counted.
    Returns ``(red', Psi, r0, info)``.
    """
    b = red.basis
    Z = _integer_divisor(b, sites)
    div = _divisors(red)
    R = red.R.blocks
    nonres = (Z != 0) & (np.abs(R) > 0)
    if np.any(nonres & (np.abs(div) < min_divisor)):
        k = np.argwhere(nonres & (np.abs(div) < min_divisor))[0]
        sig, jj = sigmas(b)
        tup = (int(sig[k[1]]), int(sig[k[2]]), int(jj[k[1]]), int(jj[k[2]]), tuple(int(e) for e in b.offsets[k[0]]))
        raise ReduceError("small-divisor", f"divisor {abs(div[tuple(k)]):.3e} at {tup}", data=tup)
    Psi = np.where(nonres, -R / np.where(nonres, div, 1.0), 0.0)
    diag_res = np.zeros_like(R, dtype=bool)
    diag_res[b.center] = np.eye(b.n, dtype=bool)
    off_res = (Z == 0) & ~diag_res & (np.abs(R) > 0)
    Psi_T = Toeplitz(b, Psi)
    new = _conjugate(red, Psi_T, "linear-bnf")
    r0 = new.r()
    info = {
        "resonant_offdiag": int(off_res.sum()),
        "resonant_offdiag_max": float(np.max(np.abs(R[off_res]), initial=0.0)),
        "min_divisor": float(np.min(np.abs(div[nonres]), initial=np.inf)),
        "psi_norm": Psi_T.max_abs(),
    }
    new.log.append({"stage": "linear-bnf", "R_max": new.R.max_abs(), **info})
    return new, Psi_T, r0, info


def _melnikov_ok(red: ReducedOperator, div: np.ndarray, gamma: float, tau: float, mask: np.ndarray):
    b = red.basis
    sig, jj = sigmas(b)
    gap = np.abs((sig * jj**2)[:, None] - (sig * jj**2)[None, :]).astype(float)
    gap = np.where(gap == 0, 1.0, gap)
    bra = np.maximum(1, np.abs(b.offsets).sum(-1)).astype(float)
    bound = gamma * gap[None, :, :] / bra[:, None, None] ** tau
    bad = mask & (np.abs(div) < bound)
    if np.any(bad):
        k = np.argwhere(bad)[0]
        return False, (tuple(int(e) for e in b.offsets[k[0]]), int(sig[k[1]]), int(jj[k[1]]),
                       int(sig[k[2]]), int(jj[k[2]]))
    return True, None


def kam_reduce(red: ReducedOperator, sweeps: int = 3, gamma: float = 0.0, tau: float = 3.0,
               K: list | None = None) -> ReducedOperator:
    """Quadratic elimination of the remainder, one full homological solve per sweep.

    ``K[nu]`` limits the offsets treated in sweep ``nu`` (all by default).  A
    Melnikov failure stops the iteration and tags the result with the tuple.
    """
    b = red.basis
    cur = ReducedOperator(red.omega, red.m, red.mu.copy(), red.R.copy(), list(red.chain), list(red.log), None)
    absl = np.abs(b.offsets).sum(-1)
    diag = np.zeros((len(b.offsets), b.n, b.n), bool)
    diag[b.center] = np.eye(b.n, dtype=bool)
    cur.log.append({"stage": "kam", "sweep": 0, "R_max": cur.R.max_abs(), "R_dec": cur.R.decay_norm()})
    for nu in range(sweeps):
        if cur.R.max_abs() == 0.0:
            break
        Kn = b.Lt * b.d if K is None else K[min(nu, len(K) - 1)]
        mask = (absl <= Kn)[:, None, None] & ~diag
        div = _divisors(cur)
        ok, tup = _melnikov_ok(cur, div, gamma, tau, mask & (np.abs(cur.R.blocks) > 0))
        if not ok:
            cur.excluded = tup
            cur.log.append({"stage": "kam", "sweep": nu + 1, "excluded": tup})
            return cur
        Psi = np.where(mask, -cur.R.blocks / np.where(mask, div, 1.0), 0.0)
        mu_prev = cur.mu.copy()
        cur = _conjugate(cur, Toeplitz(b, Psi), f"kam-{nu + 1}")
        if not cur.check_imaginary(1e-9):
            raise ReduceError("reversibility", "eigenvalues acquired a real part")
        cur.log.append({"stage": "kam", "sweep": nu + 1, "R_max": cur.R.max_abs(), "R_dec": cur.R.decay_norm(),
                        "mu_drift": float(np.max(np.abs(cur.mu - mu_prev)))})
    return cur


def _compose(chain: list, basis: OddBasis) -> Toeplitz:
    Q = Toeplitz.identity(basis)
    for Phi in chain:
        Q = Q @ Phi
    return Q


def approx_invert(red: ReducedOperator, L0: ReducedOperator, g: np.ndarray, Lg: int,
                  gamma: float = 0.0, tau: float = 3.0, p: float = 0.0):
    """Solve ``L0 h = g`` through the reduced diagonal.

    ``h = Q (i omega.l + mu)^{-1} Q^{-1} g`` with ``Q`` the composed conjugator.
    ``g`` lives on the box ``|l|_inf <= Lg``; the solve runs on a box enlarged
    by ``3 Lt`` so that no product is cut at the edge.  Returns ``(h, Lw, info)``
    with ``h`` on the enlarged box ``Lw`` and the residual of the original operator.
    """
    b = red.basis
    Lw = Lg + 3 * b.Lt
    G = _embed(np.asarray(g, complex).reshape(len(ell_grid(b.d, Lg)), b.n), b.d, Lg, Lw)
    ells = ell_grid(b.d, Lw)
    div = (1j * (ells @ red.omega))[:, None] + red.mu[None, :]
    sig, jj = sigmas(b)
    bra = np.maximum(1, np.abs(ells).sum(-1)).astype(float)
    first = gamma * (jj**2)[None, :] / bra[:, None] ** tau
    bad = np.abs(div) < np.maximum(first, 1e-14)
    if np.any(bad):
        k = np.argwhere(bad)[0]
        raise ReduceError("first-melnikov", f"at l={tuple(int(e) for e in ells[k[0]])}, "
                          f"sigma={int(sig[k[1]])}, j={int(jj[k[1]])}")
    Q = _compose(red.chain, b)
    Qinv = Q.inverse()
    h = Q.apply(Qinv.apply(G, Lw) / div, Lw)
    res = _apply_full(L0, h, Lw) - G
    wp = bra[:, None] ** p
    info = {
        "residual": float(np.sqrt(np.sum(np.abs(res * wp) ** 2))),
        "g_norm": float(np.sqrt(np.sum(np.abs(G * wp) ** 2))),
        "h_norm": float(np.sqrt(np.sum(np.abs(h * wp) ** 2))),
        "g_norm_shift": float(np.sqrt(np.sum(np.abs(G * bra[:, None] ** (p + 2 * tau + 1)) ** 2))),
        "remainder": red.R.max_abs(),
    }
    return h, Lw, info


def _embed(G: np.ndarray, d: int, L: int, Lw: int) -> np.ndarray:
    n = G.shape[-1]
    out = np.zeros((2 * Lw + 1,) * d + (n,), complex)
    sl = tuple(slice(Lw - L, Lw + L + 1) for _ in range(d))
    out[sl] = G.reshape((2 * L + 1,) * d + (n,))
    return out.reshape(-1, n)


def _apply_full(red: ReducedOperator, h: np.ndarray, Lg: int) -> np.ndarray:
    b = red.basis
    ells = ell_grid(b.d, Lg)
    H = h.reshape(len(ells), b.n)
    out = (1j * (ells @ red.omega))[:, None] * H + red.mu[None, :] * H
    return out + red.R.apply(H, Lg)


def transpose_reduce(red: ReducedOperator, L0: ReducedOperator):
    """Conjugators for the block-transposed operator, with consistency checks.

    Transposition is taken for the bilinear pairing, so ``omega . d_theta``
    changes sign while each offset block is transposed.  Returns ``(Qt, info)``
    where ``Qt = (Q^{-1})^T`` conjugates ``L0^T`` to ``-omega . d_theta + diag(mu)``
    plus the transposed remainder.
    """
    b = red.basis
    Q = _compose(red.chain, b)
    Qinv = Q.inverse()
    QtInv = Q.bt().inverse()
    inv_err = (QtInv - Qinv.bt()).max_abs()
    Qt = Qinv.bt()
    full0 = L0.full()
    A = full0.bt()
    Qt_inv = Q.bt()
    W = Qt.commutator_transport(-red.omega) + A @ Qt
    X = Qt_inv @ W
    mu_t = X.diag_center()
    X.blocks[b.center] -= np.diag(mu_t)
    info = {
        "inverse_consistency": inv_err,
        "diag_mismatch": float(np.max(np.abs(mu_t - red.mu))),
        "remainder_mismatch": (X - red.R.bt()).max_abs(),
        "remainder": X.max_abs(),
    }
    return Qt, info


# ---------------------------------------------------------------------------
# divisor tables
# ---------------------------------------------------------------------------


def enumerate_divisors(sites, jmax: int, lmax: int = 2, omega=None):
    """Integer and actual divisors over ``|delta|_1 <= lmax`` and normal modes ``1..jmax``.

    Gauge selection ``sum(delta) + sigma' = sigma`` restricts the offsets.
    Returns a dict with the minimal non-resonant integer divisor, the
    minimal actual divisor over non-resonant tuples, and the resonant list.
    """
    sites = tuple(int(v) for v in sites)
    d = len(sites)
    v2 = np.asarray(sites, float) ** 2
    om = v2 if omega is None else np.asarray(omega, float)
    js = [j for j in range(1, jmax + 1) if j not in sites]
    ells = [e for e in ell_grid(d, lmax) if np.abs(e).sum() <= lmax]
    best_int, best_act, res = math.inf, math.inf, []
    for e in ells:
        se = int(e.sum())
        for s1 in (1, -1):
            for s2 in (1, -1):
                if se + s2 != s1:
                    continue
                for j in js:
                    for k in js:
                        if not e.any() and s1 == s2 and j == k:
                            continue
                        Z = float(e @ v2) - s1 * j * j + s2 * k * k
                        A = float(e @ om) - s1 * j * j + s2 * k * k
                        if Z == 0:
                            res.append((tuple(int(x) for x in e), s1, j, s2, k))
                        else:
                            best_int = min(best_int, abs(Z))
                            best_act = min(best_act, abs(A))
    return {"min_nonresonant_integer": best_int, "min_nonresonant_actual": best_act, "resonant": res}


def divisor_constants(sites, jmax: int, lmax: int, omega, mu_fn=None):
    """Measured constants ``C`` in ``|div| >= C (j^2 + k^2)`` (opposite signs) and
    ``|div| >= C (j + k)`` (equal signs, ``j != k``), over non-resonant tuples."""
    sites = tuple(int(v) for v in sites)
    d = len(sites)
    om = np.asarray(omega, float)
    mu = mu_fn or (lambda j: float(j * j))
    v2 = np.asarray(sites, float) ** 2
    js = [j for j in range(1, jmax + 1) if j not in sites]
    ells = [e for e in ell_grid(d, lmax) if np.abs(e).sum() <= lmax]
    c_opp, c_same = math.inf, math.inf
    for e in ells:
        se = int(e.sum())
        for s1 in (1, -1):
            for s2 in (1, -1):
                if se + s2 != s1:
                    continue
                for j in js:
                    for k in js:
                        if s1 == s2 and j == k:
                            continue
                        Z = float(e @ v2) - s1 * j * j + s2 * k * k
                        if Z == 0:
                            continue
                        A = abs(float(e @ om) - s1 * mu(j) + s2 * mu(k))
                        if s1 != s2:
                            c_opp = min(c_opp, A / (j * j + k * k))
                        else:
                            c_same = min(c_same, A / (j + k))
    return {"opposite": c_opp, "same": c_same}
