"""Cubic coefficient algebra and the weak Birkhoff normal form.

Polynomial vector fields in the Fourier variables ``u^sigma_j`` are stored as
:class:`PolyField`: a map from the output slot ``(sigma, j)`` to a dictionary
``monomial -> coefficient``, where a monomial is a sorted tuple of
``(sigma', j')`` factors.  The conjugate variable ``u^-_j`` is the complex
conjugate of ``u^+_j``, so the cubic field reads

    u^+_j' = i j^2 u^+_j - i sum chi(j1, j2, j3, j) u^+_{j1} u^-_{j2} u^+_{j3},

summed over ``j1 - j2 + j3 = j``.  Push-forwards are Lie series in the
bracket ``[F, G] = DG.F - DF.G``; the time-one flow of ``F`` maps ``X`` to
``X - [F, X] + [F, [F, X]]/2 - ...``.
"""
from __future__ import annotations

import itertools
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .spaces import SiteSet, TruncatedVectorField

__all__ = [
    "NFError",
    "CubicCoefficients",
    "ResonanceClass",
    "chi",
    "classify_tuple",
    "genericity_scan",
    "PolyField",
    "nls_field",
    "WBNFData",
    "wbnf_transform",
    "linearized_remainder_shape",
    "tuple_monomial",
    "action_angle_field",
]


class NFError(RuntimeError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class CubicCoefficients:
    a1: float = 0.0
    a2: float = 0.0
    a3: float = 0.0
    a4: float = 0.0
    a5: float = 0.0
    a6: float = 0.0
    a7: float = 0.0
    a8: float = 0.0

    @classmethod
    def from_sequence(cls, seq) -> "CubicCoefficients":
        seq = list(seq)
        if len(seq) != 8:
            raise ValueError("need exactly eight coefficients")
        return cls(*[float(x) for x in seq])

    def as_tuple(self) -> tuple:
        return (self.a1, self.a2, self.a3, self.a4, self.a5, self.a6, self.a7, self.a8)

    def is_zero(self) -> bool:
        return not any(self.as_tuple())


def chi(a: CubicCoefficients, j1: int, j2: int, j3: int, j: int = 0) -> float:
    """Coefficient of ``u_{j1} conj(u_{j2}) u_{j3}`` in the cubic nonlinearity.

    The output index ``j`` does not enter the polynomial; it is accepted so the
    call mirrors the four-index notation.
    """
    return (a.a1 - a.a2 * j3**2 + a.a3 * j1 * j2 - a.a6 * j2**2 - a.a7 * j1 * j2
            - a.a4 * j1 * j2 * j3**2 + a.a8 * j1 * j2**2 * j3 - a.a5 * j1**2 * j2**2 * j3**2)


@dataclass(frozen=True)
class ResonanceClass:
    tag: str
    divisor: int = 0


def _momentum(js) -> int:
    return sum(j if i % 2 == 0 else -j for i, j in enumerate(js))


def _divisor(js) -> int:
    return sum(j * j if i % 2 == 0 else -j * j for i, j in enumerate(js))


def _is_trivial(js) -> bool:
    return Counter(js[0::2]) == Counter(js[1::2])


def classify_tuple(js) -> ResonanceClass:
    """Classify an even-length tuple ``(j1, ..., j2k)``.

    The divisor is ``j1^2 - j2^2 + j3^2 - ...``; momentum uses the same signs.
    """
    js = tuple(int(j) for j in js)
    if len(js) % 2:
        raise ValueError("tuple length must be even")
    if _momentum(js) != 0:
        return ResonanceClass("off-momentum")
    Z = _divisor(js)
    if Z != 0:
        return ResonanceClass("non-resonant", Z)
    if _is_trivial(js):
        return ResonanceClass("trivial-resonance")
    return ResonanceClass("nontrivial-resonance")


def genericity_scan(splus, B: int) -> list:
    """Nontrivial 3-resonances with at least five entries in ``S = +-S+``.

    Five slots range over ``S``; the remaining slot is fixed by momentum and
    must satisfy ``|j| <= B``.  Returns sorted unique 6-tuples.
    """
    splus = sorted(int(v) for v in splus)
    if B < max(splus):
        raise ValueError("bound B must be >= max S+")
    if len(splus) < 2:
        warnings.warn("fewer than two tangential sites: scan is degenerate", stacklevel=2)
        return []
    S = sorted(set(splus) | {-v for v in splus})
    found = set()
    for free in range(6):
        sign_free = 1 if free % 2 == 0 else -1
        for rest in itertools.product(S, repeat=5):
            js = list(rest[:free]) + [0] + list(rest[free:])
            m = _momentum(js)
            jf = -m * sign_free
            if abs(jf) > B:
                continue
            js[free] = jf
            if _divisor(js) == 0 and not _is_trivial(js):
                found.add(tuple(js))
    return sorted(found)


def tuple_monomial(sigma: int, js) -> tuple:
    """Monomial ``u^s_{j1} u^-s_{j2} u^s_{j3} ...`` from an index tuple (output slot excluded)."""
    return tuple(sorted(((sigma if i % 2 == 0 else -sigma), int(j)) for i, j in enumerate(js)))


# ---------------------------------------------------------------------------
# polynomial fields
# ---------------------------------------------------------------------------


@dataclass
class PolyField:
    J: int
    comps: dict = field(default_factory=dict)

    def add(self, comp, mon, value) -> None:
        if value == 0:
            return
        d = self.comps.setdefault(comp, {})
        v = d.get(mon, 0.0) + value
        if v == 0:
            d.pop(mon, None)
        else:
            d[mon] = v

    def copy(self) -> "PolyField":
        return PolyField(self.J, {c: dict(m) for c, m in self.comps.items()})

    def coefficient(self, comp, mon) -> complex:
        return self.comps.get(comp, {}).get(mon, 0.0)

    def items(self):
        for c, mons in self.comps.items():
            for m, v in mons.items():
                yield c, m, v

    def degree_part(self, deg: int) -> "PolyField":
        out = PolyField(self.J)
        for c, m, v in self.items():
            if len(m) == deg:
                out.add(c, m, v)
        return out

    def combine(self, other: "PolyField", coef: complex = 1.0) -> "PolyField":
        out = self.copy()
        for c, m, v in other.items():
            out.add(c, m, coef * v)
        return out

    def scaled(self, coef: complex) -> "PolyField":
        out = PolyField(self.J)
        for c, m, v in self.items():
            out.add(c, m, coef * v)
        return out

    def max_abs(self) -> float:
        return max((abs(v) for _, _, v in self.items()), default=0.0)

    def n_terms(self) -> int:
        return sum(len(m) for m in self.comps.values())

    # --- numerical evaluation ---------------------------------------------
    def index(self, sigma: int, j: int) -> int:
        return (0 if sigma > 0 else 1) * (2 * self.J + 1) + j + self.J

    def _compiled(self):
        key = self.n_terms()
        cache = getattr(self, "_cache", None)
        if cache is not None and cache[0] == key:
            return cache[1]
        groups: dict = {}
        for c, m, v in self.items():
            if abs(c[1]) > self.J or any(abs(j) > self.J for _, j in m):
                continue
            g = groups.setdefault(len(m), ([], [], []))
            g[0].append(self.index(*c))
            g[1].append(v)
            g[2].append([self.index(*f) for f in m])
        comp = {k: (np.array(o), np.array(c, complex), np.array(f, int).reshape(len(o), k))
                for k, (o, c, f) in groups.items()}
        self._cache = (key, comp)
        return comp

    def __call__(self, q: np.ndarray) -> np.ndarray:
        """Evaluate at ``q`` of shape ``(2, 2J+1)`` (rows ``u^+``, ``u^-``)."""
        q = np.asarray(q, complex).reshape(-1)
        out = np.zeros_like(q)
        for deg, (o, c, f) in self._compiled().items():
            vals = c * (np.prod(q[f], axis=1) if deg else 1.0)
            np.add.at(out, o, vals)
        return out.reshape(2, -1)

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, complex).reshape(-1)
        n = q.size
        Jm = np.zeros((n, n), complex)
        for deg, (o, c, f) in self._compiled().items():
            if deg == 0:
                continue
            qf = q[f]
            for k in range(deg):
                others = np.delete(qf, k, axis=1)
                vals = c * (np.prod(others, axis=1) if deg > 1 else 1.0)
                np.add.at(Jm, (o, f[:, k]), vals)
        return Jm


def _derivative_apply(G: PolyField, F: PolyField, maxdeg: int, out: PolyField, sign: float) -> None:
    """Accumulate ``sign * DG.F`` into ``out`` (monomials above ``maxdeg`` dropped)."""
    for c, mon, g in G.items():
        cnt = Counter(mon)
        for f, k in cnt.items():
            Ff = F.comps.get(f)
            if not Ff:
                continue
            rest = list(mon)
            rest.remove(f)
            for m2, h in Ff.items():
                if len(rest) + len(m2) > maxdeg:
                    continue
                out.add(c, tuple(sorted(rest + list(m2))), sign * g * k * h)


def bracket(F: PolyField, G: PolyField, maxdeg: int = 5) -> PolyField:
    """Lie bracket ``[F, G] = DG.F - DF.G`` truncated at ``maxdeg``."""
    out = PolyField(max(F.J, G.J))
    _derivative_apply(G, F, maxdeg, out, 1.0)
    _derivative_apply(F, G, maxdeg, out, -1.0)
    return out


def nls_field(a: CubicCoefficients, J: int) -> PolyField:
    """Linear dispersion plus the cubic nonlinearity on modes ``|j| <= J``."""
    P = PolyField(J)
    for j in range(-J, J + 1):
        P.add((1, j), ((1, j),), 1j * j * j)
        P.add((-1, j), ((-1, j),), -1j * j * j)
    if a.is_zero():
        return P
    for j in range(-J, J + 1):
        for j1 in range(-J, J + 1):
            for j2 in range(-J, J + 1):
                j3 = j - j1 + j2
                if abs(j3) > J:
                    continue
                c = chi(a, j1, j2, j3, j)
                if c == 0:
                    continue
                P.add((1, j), tuple_monomial(1, (j1, j2, j3)), -1j * c)
                P.add((-1, j), tuple_monomial(-1, (j1, j2, j3)), 1j * c)
    return P


def _slot_divisor(comp, mon) -> int:
    s, j = comp
    return s * sum(sf * jf * jf for sf, jf in mon) - j * j


def _n_outside(comp, mon, S) -> int:
    return sum(1 for _, j in mon if j not in S) + (comp[1] not in S)


def _generator(part: PolyField, select) -> PolyField:
    """Homological solution ``c = i sigma X / Z`` on the selected monomials."""
    F = PolyField(part.J)
    for c, m, v in part.items():
        if not select(c, m):
            continue
        Z = _slot_divisor(c, m)
        if Z == 0:
            raise NFError("internal-inconsistency", f"zero divisor at {c}, {m}")
        F.add(c, m, 1j * c[0] * v / Z)
    return F


@dataclass
class WBNFData:
    sites: tuple
    J: int
    F3: PolyField
    F5: PolyField
    E: tuple
    field_in: PolyField
    field_out: PolyField
    degree3_removed: list
    degree5_removed: list
    notes: list = field(default_factory=list)


def _in_A1N(c, m, S) -> bool:
    return _n_outside(c, m, S) <= 1 and _slot_divisor(c, m) != 0


def wbnf_transform(F: PolyField | None, a: CubicCoefficients, sites, J: int | None = None,
                   check_generic: bool = True) -> tuple:
    """Remove the low-degree non-resonant monomials near the tangential sites.

    Returns the transformed field (degree <= 5) and a :class:`WBNFData`
    record holding both generators.
    """
    splus = tuple(sites.splus) if isinstance(sites, SiteSet) else tuple(sites)
    if F is None:
        if J is None:
            raise ValueError("give either a field or a truncation J")
        F = nls_field(a, J)
    J = F.J
    if check_generic and len(splus) >= 2 and genericity_scan(splus, max(J, max(splus))):
        raise NFError("non-generic", f"sites {splus} admit nontrivial 3-resonances")
    S = set(splus) | {-v for v in splus}
    N = F.degree_part(1)
    X3 = F.degree_part(3)
    X5 = F.degree_part(5)

    def sel3(c, m):
        if _slot_divisor(c, m) == 0:
            return False
        nout = _n_outside(c, m, S)
        return nout <= 1 or (c[1] in S and nout >= 2)

    F3 = _generator(X3, sel3)
    B3N = bracket(F3, N, 3)
    Y = N.combine(X3).combine(X5).combine(B3N, -1.0)
    Y5 = bracket(F3, X3, 5).scaled(-1.0).combine(bracket(F3, B3N, 5), 0.5)
    Y = Y.combine(Y5)
    F5 = _generator(Y.degree_part(5), lambda c, m: _in_A1N(c, m, S))
    out = Y.combine(bracket(F5, N, 5), -1.0)

    E = set(S)
    for G in (F3, F5):
        for c, m, _ in G.items():
            if _n_outside(c, m, S) <= 1:
                E.add(c[1])
    data = WBNFData(
        sites=splus, J=J, F3=F3, F5=F5, E=tuple(sorted(E)), field_in=F, field_out=out,
        degree3_removed=sorted({(c, m) for c, m, _ in F3.items()}),
        degree5_removed=sorted({(c, m) for c, m, _ in F5.items()}),
        notes=["B1 normal-site sum taken over all normal sites within truncation"],
    )
    return out, data


def linearized_remainder_shape(data: WBNFData, q: np.ndarray, u: np.ndarray | None = None,
                               tol: float = 1e-9) -> dict:
    """Finite-rank part of the linearization after the change of variables.

    ``R = dY(q) - dX(u)`` with ``u`` the preimage of ``q``; when ``u`` is not
    supplied it is approximated by ``q`` minus the degree-3 generator.
    The pairs ``(a, b)`` describe ``R h = sum (h, a) b``: columns indexed by
    ``E`` give ``a = e_k``; rows indexed by ``E`` give ``b = e_k``.  The block
    acting from and into the complement of ``E`` is returned as ``rest``.
    """
    J = data.J
    if u is None:
        u = q - data.F3(q)
    R = data.field_out.jacobian(q) - data.field_in.jacobian(u)
    n = R.shape[0]
    Eidx = np.zeros(n, bool)
    for s in (1, -1):
        for j in data.E:
            if abs(j) <= J:
                Eidx[data.field_out.index(s, j)] = True
    col = np.where(Eidx[None, :], R, 0.0)
    row = np.where(Eidx[:, None] & ~Eidx[None, :], R, 0.0)
    rest = np.where(~Eidx[:, None] & ~Eidx[None, :], R, 0.0)
    scale = np.linalg.norm(R) or 1.0
    sv = np.linalg.svd(R, compute_uv=False)
    rank = int(np.sum(sv > tol * max(sv[0], 1e-300))) if sv.size and sv[0] > 0 else 0
    pairs = []
    for k in np.flatnonzero(Eidx):
        if np.any(col[:, k]):
            pairs.append(("E-input", int(k), col[:, k].copy()))
        if np.any(row[k, :]):
            pairs.append(("E-output", int(k), row[k, :].conj().copy()))
    return {
        "rank": rank,
        "declared_bound": 2 * int(Eidx.sum()),
        "E": data.E,
        "pairs": pairs,
        "rest_relative": float(np.linalg.norm(rest) / scale),
        "norm": float(np.linalg.norm(R)),
    }


# ---------------------------------------------------------------------------
# action-angle field
# ---------------------------------------------------------------------------


def _binom(alpha: float, k: int) -> float:
    out = 1.0
    for i in range(k):
        out *= (alpha - i) / (i + 1)
    return out


def action_angle_field(P: PolyField, splus, xi, degree: int = 5) -> TruncatedVectorField:
    """Rewrite a Fourier-variable field in ``(theta, y, z)`` near the torus ``xi``.

    Tangential amplitudes are ``u^s_{+-v} = +-s sqrt(xi+y) e^{i s theta}/(2i)`` and
    normal ones ``u^s_j = s sign(j) z^s_{|j|}/(2i)``; the square roots are
    Taylor-expanded in ``y`` up to the requested graded degree.
    """
    splus = tuple(sorted(splus))
    d = len(splus)
    pos = {v: i for i, v in enumerate(splus)}
    xi = np.asarray(xi, float)
    out = TruncatedVectorField(d, degree=degree)
    for (s, j), mons in P.comps.items():
        if j == 0:
            continue
        tang = abs(j) in pos
        if tang and j < 0:
            continue
        if not tang and j < 0:
            continue
        for mon, c in mons.items():
            const = complex(c)
            ell = [0] * d
            npow = [0] * d
            wm = []
            dead = False
            for sf, jf in mon:
                if jf == 0:
                    dead = True
                    break
                if abs(jf) in pos:
                    i = pos[abs(jf)]
                    const *= np.sign(jf) * sf / 2j
                    npow[i] += 1
                    ell[i] += sf
                else:
                    const *= sf * np.sign(jf) / 2j
                    wm.append((sf, abs(jf)))
            if dead:
                continue
            targets = []
            if tang:
                i = pos[j]
                e_th = list(ell)
                n_th = list(npow)
                n_th[i] -= 1
                e_th[i] -= s
                targets.append((("th", i), 1.0, e_th, n_th))
                n_y = list(npow)
                n_y[i] += 1
                targets.append((("y", i), 2j * s, e_th, n_y))
            else:
                targets.append((("w", s, j), 2j * s, ell, npow))
            for comp, fac, e, npw in targets:
                _expand_into(out, comp, const * fac, e, npw, wm, xi, degree)
    return out


def _expand_into(out, comp, const, ell, npow, wm, xi, degree):
    d = len(ell)
    budget = (degree - len(wm)) // 2
    if budget < 0:
        return
    base = const * math.prod(xi[i] ** (npow[i] / 2) for i in range(d))
    series = []
    for i in range(d):
        series.append([_binom(npow[i] / 2, k) / xi[i] ** k for k in range(budget + 1)])
    for ks in itertools.product(range(budget + 1), repeat=d):
        if sum(ks) > budget:
            continue
        coef = base * math.prod(series[i][ks[i]] for i in range(d))
        if coef != 0:
            out.add(comp, ell, ks, wm, coef)
