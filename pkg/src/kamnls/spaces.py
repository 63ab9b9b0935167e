"""Truncated Fourier objects, weighted norms and structural predicates.

A :class:`FourierScalar` stores coefficients ``u_j(l)`` of a function of
``(theta, x)`` on the box ``|l_i| <= L``, ``|j| <= J``.  Frequencies are measured
with the l1 norm, the joint weight is ``<l, j> = max(1, |l| + |j|)`` and the
joint cutoff of :func:`project_K` uses ``max(|l|, |j|)``.

A :class:`TruncatedVectorField` is a sparse table of monomials in the
``(theta, y, w)`` coordinates of a phase space near a torus.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.signal import fftconvolve

__all__ = [
    "SpaceError",
    "SiteSet",
    "FourierScalar",
    "TruncatedVectorField",
    "NormContext",
    "norm_sap",
    "lip_norm",
    "project_K",
    "project_perp_K",
    "decompose_NXR",
    "structure_check",
    "xi_grid",
    "ell_grid",
]


class SpaceError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class SiteSet:
    """Tangential sites ``S+``, their signed closure and truncation bounds."""

    splus: tuple
    J: int
    L: int

    def __post_init__(self):
        sp = tuple(int(v) for v in self.splus)
        if any(v <= 0 for v in sp) or len(set(sp)) != len(sp):
            raise SpaceError("bad-sites", "tangential sites must be distinct positive integers")
        object.__setattr__(self, "splus", tuple(sorted(sp)))
        if sp and self.J <= max(sp):
            raise SpaceError("bad-sites", "J must exceed the largest tangential site")

    @property
    def d(self) -> int:
        return len(self.splus)

    @property
    def signed(self) -> tuple:
        return tuple(sorted(set(self.splus) | {-v for v in self.splus}))

    @property
    def normal(self) -> tuple:
        """Positive normal sites up to ``J``."""
        return tuple(j for j in range(1, self.J + 1) if j not in self.splus)

    def is_tangential(self, j: int) -> bool:
        return abs(j) in self.splus


def ell_grid(d: int, L: int) -> np.ndarray:
    """All ``l`` in ``[-L, L]^d`` in C order, shape ``((2L+1)^d, d)``."""
    ax = np.arange(-L, L + 1)
    return np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)


@dataclass
class FourierScalar:
    """Coefficient table over ``l in [-L, L]^d`` and ``j in [-J, J]``.

    ``coef`` has shape ``(2L+1,)*d + (2J+1,)``.  ``s`` and ``a`` bound the
    analyticity strip in ``theta`` and ``x``; ``a = 0`` is the Sobolev case.
    """

    coef: np.ndarray
    s: float = 0.0
    a: float = 0.0

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=complex)
        if self.coef.ndim < 1:
            raise SpaceError("bad-shape", "need at least the x axis")
        if any(n % 2 == 0 for n in self.coef.shape):
            raise SpaceError("bad-shape", "axes must have odd length")

    # --- shape helpers -------------------------------------------------
    @property
    def d(self) -> int:
        return self.coef.ndim - 1

    @property
    def L(self) -> int:
        return (self.coef.shape[0] - 1) // 2 if self.d else 0

    @property
    def J(self) -> int:
        return (self.coef.shape[-1] - 1) // 2

    @classmethod
    def zeros(cls, d: int, L: int, J: int, s: float = 0.0, a: float = 0.0) -> "FourierScalar":
        return cls(np.zeros((2 * L + 1,) * d + (2 * J + 1,), complex), s, a)

    @classmethod
    def mode(cls, d, L, J, ell, j, value=1.0, s=0.0, a=0.0) -> "FourierScalar":
        u = cls.zeros(d, L, J, s, a)
        u.coef[tuple(int(e) + L for e in ell) + (int(j) + J,)] = value
        return u

    @classmethod
    def random(cls, rng, d, L, J, decay=0.5, s=0.0, a=0.0, real=False, odd=False):
        shape = (2 * L + 1,) * d + (2 * J + 1,)
        c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        c *= np.exp(-decay * cls._absl(d, L)[..., None]) * np.exp(-decay * np.abs(np.arange(-J, J + 1)))
        u = cls(c, s, a)
        if odd:
            u = u.odd_part()
        if real:
            u = u.real_part()
        return u

    @staticmethod
    def _absl(d: int, L: int) -> np.ndarray:
        ax = np.abs(np.arange(-L, L + 1))
        out = np.zeros((2 * L + 1,) * d)
        for i in range(d):
            sh = [1] * d
            sh[i] = -1
            out = out + ax.reshape(sh)
        return out

    def abs_ell(self) -> np.ndarray:
        return self._absl(self.d, self.L)

    def jvec(self) -> np.ndarray:
        return np.arange(-self.J, self.J + 1)

    def copy(self) -> "FourierScalar":
        return FourierScalar(self.coef.copy(), self.s, self.a)

    def with_coef(self, coef) -> "FourierScalar":
        return FourierScalar(coef, self.s, self.a)

    # --- symmetries ------------------------------------------------------
    def reflected(self) -> np.ndarray:
        """Coefficients of ``u(-theta, -x)``: index ``(l, j) -> (-l, -j)``."""
        return self.coef[(slice(None, None, -1),) * self.coef.ndim]

    def conj(self) -> "FourierScalar":
        """Complex conjugate function."""
        return self.with_coef(np.conj(self.reflected()))

    def real_part(self) -> "FourierScalar":
        return self.with_coef(0.5 * (self.coef + self.conj().coef))

    def odd_part(self) -> "FourierScalar":
        return self.with_coef(0.5 * (self.coef - self.coef[..., ::-1]))

    def is_real(self, tol: float = 1e-13) -> bool:
        return np.max(np.abs(self.coef - self.conj().coef), initial=0.0) <= tol * max(1.0, np.max(np.abs(self.coef), initial=0.0))

    def is_odd(self, tol: float = 1e-13) -> bool:
        return np.max(np.abs(self.coef + self.coef[..., ::-1]), initial=0.0) <= tol * max(1.0, np.max(np.abs(self.coef), initial=0.0))

    # --- algebra ---------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, FourierScalar):
            L, J = max(self.L, other.L), max(self.J, other.J)
            return FourierScalar(self.resized(L, J).coef + other.resized(L, J).coef,
                                 min(self.s, other.s), min(self.a, other.a))
        c = self.coef.copy()
        c[(self.L,) * self.d + (self.J,)] += other
        return self.with_coef(c)

    __radd__ = __add__

    def __neg__(self):
        return self.with_coef(-self.coef)

    def __sub__(self, other):
        return self + (-other)

    def __rmul__(self, c):
        return self.with_coef(c * self.coef)

    def __mul__(self, other):
        if not isinstance(other, FourierScalar):
            return self.with_coef(self.coef * other)
        return FourierScalar(fftconvolve(self.coef, other.coef), min(self.s, other.s), min(self.a, other.a))

    def resized(self, L: int, J: int) -> "FourierScalar":
        """Zero-pad or truncate to the box ``[-L, L]^d x [-J, J]``."""
        out = np.zeros((2 * L + 1,) * self.d + (2 * J + 1,), complex)
        src, dst = [], []
        for n_old, n_new in [(self.L, L)] * self.d + [(self.J, J)]:
            m = min(n_old, n_new)
            src.append(slice(n_old - m, n_old + m + 1))
            dst.append(slice(n_new - m, n_new + m + 1))
        out[tuple(dst)] = self.coef[tuple(src)]
        return FourierScalar(out, self.s, self.a)

    def dx(self, k: int = 1) -> "FourierScalar":
        return self.with_coef(self.coef * (1j * self.jvec()) ** k)

    def average(self) -> complex:
        return complex(self.coef[(self.L,) * self.d + (self.J,)])

    def evaluate(self, theta, x) -> np.ndarray:
        """Pointwise values at arrays ``theta`` (..., d) and ``x`` (...)."""
        theta = np.asarray(theta, float)
        x = np.asarray(x, float)
        ells = ell_grid(self.d, self.L)
        flat = self.coef.reshape(len(ells), -1)
        ph = np.exp(1j * (theta.reshape(-1, self.d) @ ells.T))
        ex = np.exp(1j * np.outer(x.reshape(-1), self.jvec()))
        return np.einsum("pl,lj,pj->p", ph, flat, ex).reshape(x.shape)


@dataclass(frozen=True)
class NormContext:
    """Normalizing constants of the vector-field norm."""

    s0: float = 1.0
    r0: float = 1.0


def _joint_weight(u: FourierScalar) -> np.ndarray:
    return np.maximum(1.0, u.abs_ell()[..., None] + np.abs(u.jvec()))


def _check_strip(u: FourierScalar, s: float, a: float) -> None:
    if s > u.s + 1e-15 or a > u.a + 1e-15:
        raise SpaceError("outside-strip", f"weights (s={s}, a={a}) exceed strip (s={u.s}, a={u.a})")


def _scalar_norm(u: FourierScalar, s: float, a: float, p: float) -> float:
    _check_strip(u, s, a)
    w = _joint_weight(u) ** p * np.exp(s * u.abs_ell())[..., None] * np.exp(a * np.abs(u.jvec()))
    return float(np.sqrt(np.sum((w * np.abs(u.coef)) ** 2)))


def norm_sap(obj, s: float, a: float, p: float, ctx: NormContext | None = None) -> float:
    """Weighted analytic-Sobolev norm of a scalar or a vector field."""
    if isinstance(obj, FourierScalar):
        return _scalar_norm(obj, s, a, p)
    if isinstance(obj, TruncatedVectorField):
        return obj.norm(s, a, p, ctx or NormContext())
    raise TypeError(f"unsupported object {type(obj)!r}")


def lip_norm(family: list, gamma: float, s: float, a: float, p: float, ctx: NormContext | None = None):
    """Sup plus ``gamma`` times the largest difference quotient over samples.

    ``family`` is a list of ``(xi, obj)`` pairs.  Returns ``(value, lipschitz)``
    where ``lipschitz`` is ``None`` when fewer than two samples are supplied.
    """
    if not family:
        raise SpaceError("empty-family")
    sup = max(norm_sap(F, s, a, p, ctx) for _, F in family)
    if len(family) < 2:
        return sup, None
    q = 0.0
    for (x1, F1), (x2, F2) in itertools.combinations(family, 2):
        dist = float(np.max(np.abs(np.asarray(x1, float) - np.asarray(x2, float))))
        if dist == 0.0:
            continue
        q = max(q, norm_sap(_difference(F1, F2), s, a, p - 1, ctx) / dist)
    return sup + gamma * q, q


def _difference(A, B):
    if isinstance(A, FourierScalar):
        return A - B
    return A.combine(B, -1.0)


def _cutoff_mask(u: FourierScalar, K: float) -> np.ndarray:
    return np.maximum(u.abs_ell()[..., None], np.abs(u.jvec())) <= K


def project_K(obj, K: float):
    if isinstance(obj, FourierScalar):
        return obj.with_coef(np.where(_cutoff_mask(obj, K), obj.coef, 0.0))
    if isinstance(obj, TruncatedVectorField):
        return obj.filter(lambda key: _vf_freq(key) <= K)
    raise TypeError(f"unsupported object {type(obj)!r}")


def project_perp_K(obj, K: float):
    if isinstance(obj, FourierScalar):
        return obj.with_coef(np.where(_cutoff_mask(obj, K), 0.0, obj.coef))
    if isinstance(obj, TruncatedVectorField):
        return obj.filter(lambda key: _vf_freq(key) > K)
    raise TypeError(f"unsupported object {type(obj)!r}")


def xi_grid(d: int, eps: float) -> list:
    """Corners and centre of ``eps^2 [1/2, 3/2]^d``."""
    pts = [np.array(c, float) * eps**2 for c in itertools.product((0.5, 1.5), repeat=d)]
    pts.append(np.ones(d) * eps**2)
    return pts


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------
# A monomial key is (comp, ell, ymon, wmon):
#   comp  ("th", i) | ("y", i) | ("w", sigma, j)
#   ell   tuple of d ints, the theta Fourier mode
#   ymon  tuple of d non-negative ints, the power of y
#   wmon  sorted tuple of (sigma, j) factors of w, repetitions allowed


def _vf_freq(key) -> int:
    comp, ell, _, _ = key
    lj = sum(abs(e) for e in ell)
    jj = abs(comp[2]) if comp[0] == "w" else 0
    return max(lj, jj)


def _flip_w(wmon):
    return tuple(sorted((-s, j) for s, j in wmon))


def _neg(ell):
    return tuple(-e for e in ell)


@dataclass
class TruncatedVectorField:
    d: int
    terms: dict = field(default_factory=dict)
    degree: int = 5

    def add(self, comp, ell, ymon, wmon, value) -> None:
        key = (tuple(comp), tuple(int(e) for e in ell), tuple(int(m) for m in ymon),
               tuple(sorted((int(s), int(j)) for s, j in wmon)))
        if self.monomial_degree(key) > self.degree:
            return
        v = self.terms.get(key, 0.0) + value
        if v == 0:
            self.terms.pop(key, None)
        else:
            self.terms[key] = v

    @staticmethod
    def monomial_degree(key) -> int:
        """Degree with ``y`` counted twice, matching the polynomial grading."""
        _, _, ymon, wmon = key
        return 2 * sum(ymon) + len(wmon)

    def copy(self) -> "TruncatedVectorField":
        return TruncatedVectorField(self.d, dict(self.terms), self.degree)

    def filter(self, pred) -> "TruncatedVectorField":
        return TruncatedVectorField(self.d, {k: v for k, v in self.terms.items() if pred(k)}, self.degree)

    def combine(self, other: "TruncatedVectorField", c: complex = 1.0) -> "TruncatedVectorField":
        out = self.copy()
        for k, v in other.terms.items():
            out.add(k[0], k[1], k[2], k[3], c * v)
        return out

    def max_abs_diff(self, other: "TruncatedVectorField") -> float:
        keys = set(self.terms) | set(other.terms)
        return max((abs(self.terms.get(k, 0) - other.terms.get(k, 0)) for k in keys), default=0.0)

    def components(self) -> set:
        return {k[0] for k in self.terms}

    def evaluate(self, theta, y, w: dict) -> dict:
        """Component values at one phase-space point; ``w`` maps ``(sigma, j)`` to a number."""
        out: dict = {}
        theta = np.asarray(theta, float)
        y = np.asarray(y, complex)
        for (comp, ell, ymon, wmon), c in self.terms.items():
            val = c * np.exp(1j * float(np.dot(ell, theta))) * np.prod(y ** np.array(ymon))
            for f in wmon:
                val *= w.get(f, 0.0)
            out[comp] = out.get(comp, 0.0) + val
        return out

    def norm(self, s: float, a: float, p: float, ctx: NormContext) -> float:
        """Majorant norm: coefficients of each ``(component, l)`` are summed at radius ``r0``."""
        if s < 0 or a < 0:
            raise SpaceError("outside-strip", "negative weights")
        table: dict = {}
        for (comp, ell, ymon, wmon), c in self.terms.items():
            rad = ctx.r0 ** (2 * sum(ymon) + len(wmon))
            wgt = math.prod(math.exp(a * abs(j)) for _, j in wmon)
            table[(comp, ell)] = table.get((comp, ell), 0.0) + abs(c) * rad * wgt
        tot = 0.0
        for (comp, ell), m in table.items():
            lab = sum(abs(e) for e in ell)
            if comp[0] == "w":
                j = abs(comp[2])
                wt = max(1, lab + j) ** p * math.exp(s * lab + a * j) / ctx.r0
            else:
                wt = max(1, lab) ** p * math.exp(s * lab)
                wt /= ctx.s0 if comp[0] == "th" else ctx.r0**2
            tot += (wt * m) ** 2
        return math.sqrt(tot)


def decompose_NXR(vf: TruncatedVectorField):
    """Split into the normal-form part, the finite-dimensional part and the rest."""
    N = TruncatedVectorField(vf.d, degree=vf.degree)
    X = TruncatedVectorField(vf.d, degree=vf.degree)
    R = TruncatedVectorField(vf.d, degree=vf.degree)
    for key, c in vf.terms.items():
        comp, _, ymon, wmon = key
        ny, nw = sum(ymon), len(wmon)
        kind = comp[0]
        if kind == "th" and ny == 0 and nw == 0:
            target = N
        elif kind == "w" and ny == 0 and nw == 1:
            target = N
        elif kind == "y" and ny + nw == 0:
            target = X
        elif kind == "y" and (ny, nw) in ((1, 0), (0, 1)):
            target = X
        elif kind == "w" and ny + nw == 0:
            target = X
        else:
            target = R
        target.terms[key] = c
    return N, X, R


def structure_check(vf: TruncatedVectorField, tol: float = 1e-12) -> dict:
    """Reversibility, real-on-real and gauge predicates, checked per coefficient."""
    scale = max((abs(v) for v in vf.terms.values()), default=1.0) or 1.0
    thr = tol * scale
    rev = real = gauge = True
    for (comp, ell, ymon, wmon), c in vf.terms.items():
        fw = _flip_w(wmon)
        if comp[0] == "w":
            partner = ("w", -comp[1], comp[2])
            sign = -1.0
        else:
            partner = comp
            sign = 1.0 if comp[0] == "th" else -1.0
        r = vf.terms.get((partner, _neg(ell), ymon, fw), 0.0)
        if abs(c - sign * r) > thr:
            rev = False
        if abs(c - np.conj(r)) > thr:
            real = False
        charge = sum(ell) + sum(s for s, _ in wmon)
        target = comp[1] if comp[0] == "w" else 0
        if charge != target:
            gauge = False
    return {"reversible": rev, "real_on_real": real, "gauge": gauge}
