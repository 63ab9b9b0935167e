"""Good-parameter sets and Monte Carlo estimates of the excluded measure.

The parameter box is ``xi in eps^2 [1/2, 3/2]^d``.  Three families of conditions
are checked, all with ``<l> = max(1, |l|_1)``:

* ``S``: ``|omega.l| >= 2 gamma / <l>^tau`` for ``l != 0``, ``sum(l) = 0``;
* ``P``: ``|omega.l - s mu_j| >= 2 gamma j^2 / <l>^tau`` with ``sum(l) = s``;
* ``Lambda``: ``|omega.l + s1 mu_j - s2 mu_k| >= 2 gamma |s1 j^2 - s2 k^2| / <l>^tau``
  with ``sum(l) + s1 = s2``, the diagonal ``(0, j, j, s, s)`` omitted.

Eigenvalues are ``mu_j = m j^2 + r_j``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .nf_cubic import CubicCoefficients
from .spaces import ell_grid
from .twist import normal_vector, twist_matrix

__all__ = [
    "MelnikovError",
    "MelnikovSpec",
    "MeasureReport",
    "spec_from_twist",
    "sample_box",
    "enumerate_tuples",
    "membership",
    "slab_measure",
    "slab_width_affine",
    "lipschitz_lower",
    "excluded_fraction",
    "cantor_measure",
    "gamma_scaling",
    "inclusion_check",
    "inclusion_scan",
]


class MelnikovError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass
class MelnikovSpec:
    """Eigenvalue model over the box plus the thresholds.

    ``omega(xi)`` maps ``(N, d)`` to ``(N, d)``; ``m(xi)`` maps to ``(N,)``;
    ``r(j, xi)`` maps to ``(N,)``.  When the model is affine, ``affine`` holds
    ``(omega_const, omega_lin, r_lin)`` with ``omega = omega_const + xi @ omega_lin.T``,
    ``r_j = xi @ r_lin(j)`` and ``m = 1``; it enables the exact gap guard.
    """

    d: int
    eps: float
    gamma: float
    tau: float
    K: int
    js: tuple
    omega: Callable
    m: Callable
    r: Callable
    affine: tuple | None = None
    sites: tuple = ()

    def lo_hi(self):
        return 0.5 * self.eps**2, 1.5 * self.eps**2

    def volume(self) -> float:
        return self.eps ** (2 * self.d)

    def mu(self, j: int, xi: np.ndarray) -> np.ndarray:
        return self.m(xi) * j * j + self.r(j, xi)

    def with_(self, **kw) -> "MelnikovSpec":
        from dataclasses import replace

        return replace(self, **kw)


def spec_from_twist(a: CubicCoefficients, sites, eps: float, gamma0: float, tau: float = 3.0,
                    K: int = 6, jmax: int = 20) -> MelnikovSpec:
    """Affine model ``omega = v^2 - M xi``, ``mu_j = j^2 - m_j . xi``; ``gamma = gamma0 eps^2``."""
    sites = tuple(int(v) for v in sites)
    d = len(sites)
    v2 = np.asarray(sites, float) ** 2
    M = twist_matrix(a, sites, check=False).M
    js = tuple(j for j in range(1, jmax + 1) if j not in sites)
    cache = {j: normal_vector(a, sites, j) for j in js}

    def r_lin(j):
        if j not in cache:
            cache[j] = normal_vector(a, sites, j)
        return -cache[j]

    return MelnikovSpec(
        d=d, eps=eps, gamma=gamma0 * eps**2, tau=tau, K=K, js=js,
        omega=lambda xi: v2[None, :] - np.atleast_2d(xi) @ M.T,
        m=lambda xi: np.ones(len(np.atleast_2d(xi))),
        r=lambda j, xi: np.atleast_2d(xi) @ r_lin(j),
        affine=(v2, -M, r_lin),
        sites=sites,
    )


def sample_box(spec: MelnikovSpec, n: int, seed: int = 0) -> np.ndarray:
    """Scrambled Sobol points in the box (reproducible for a fixed seed)."""
    if n < 1:
        raise MelnikovError("samples", "need at least one sample")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = qmc.Sobol(spec.d, scramble=True, seed=seed).random(n)
    lo, hi = spec.lo_hi()
    return lo + (hi - lo) * u


# ---------------------------------------------------------------------------
# tuples
# ---------------------------------------------------------------------------


@dataclass
class TupleSet:
    """Columns of admissible tuples for one family."""

    family: str
    ell: np.ndarray
    s1: np.ndarray
    j: np.ndarray
    s2: np.ndarray
    k: np.ndarray

    def __len__(self) -> int:
        return len(self.ell)

    def delta(self) -> np.ndarray:
        if self.family == "S":
            return np.ones(len(self.ell))
        if self.family == "P":
            return (self.j**2).astype(float)
        return np.abs(self.s1 * self.j**2 - self.s2 * self.k**2).astype(float)

    def bracket(self) -> np.ndarray:
        return np.maximum(1, np.abs(self.ell).sum(-1)).astype(float)

    def subset(self, mask) -> "TupleSet":
        return TupleSet(self.family, self.ell[mask], self.s1[mask], self.j[mask], self.s2[mask], self.k[mask])

    def row(self, i: int) -> tuple:
        return (self.family, tuple(int(e) for e in self.ell[i]), int(self.s1[i]), int(self.j[i]),
                int(self.s2[i]), int(self.k[i]))


def enumerate_tuples(spec: MelnikovSpec) -> dict:
    """All admissible tuples with ``|l|_1 <= K`` and modes in ``spec.js``."""
    ells = np.array([e for e in ell_grid(spec.d, spec.K) if np.abs(e).sum() <= spec.K], int)
    sums = ells.sum(-1)
    js = np.asarray(spec.js, int)
    out = {}
    nz = np.abs(ells).sum(-1) > 0
    S = ells[nz & (sums == 0)]
    z = np.zeros(len(S), int)
    out["S"] = TupleSet("S", S, z, z, z, z)
    rows = []
    for s in (1, -1):
        E = ells[sums == s]
        for j in js:
            rows.append((E, np.full(len(E), 0), np.full(len(E), j), np.full(len(E), s), np.zeros(len(E), int)))
    out["P"] = _stack("P", rows, spec.d)
    rows = []
    J1, J2 = np.meshgrid(js, js, indexing="ij")
    J1, J2 = J1.ravel(), J2.ravel()
    for s1 in (1, -1):
        for s2 in (1, -1):
            E = ells[sums + s1 == s2]
            if not len(E):
                continue
            ei = np.repeat(np.arange(len(E)), len(J1))
            jj = np.tile(J1, len(E))
            kk = np.tile(J2, len(E))
            El = E[ei]
            keep = ~((np.abs(El).sum(-1) == 0) & (s1 == s2) & (jj == kk))
            rows.append((El[keep], np.full(keep.sum(), s1), jj[keep], np.full(keep.sum(), s2), kk[keep]))
    out["Lambda"] = _stack("Lambda", rows, spec.d)
    return out


def _stack(fam, rows, d) -> TupleSet:
    if not rows:
        e = np.zeros((0, d), int)
        z = np.zeros(0, int)
        return TupleSet(fam, e, z, z, z, z)
    return TupleSet(fam, *(np.concatenate([r[i] for r in rows]) for i in range(5)))


def _psi(spec: MelnikovSpec, ts: TupleSet, xi: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Divisors, shape ``(len(ts), N)``."""
    xi = np.atleast_2d(xi)
    om = spec.omega(xi)
    base = ts.ell @ om.T
    if ts.family == "S":
        return base
    cache = {} if cache is None else cache

    def mu(j):
        if j not in cache:
            cache[j] = spec.mu(int(j), xi)
        return cache[j]

    out = base.copy()
    for i in range(len(ts)):
        if ts.family == "P":
            out[i] -= ts.s2[i] * mu(ts.j[i])
        else:
            out[i] += ts.s1[i] * mu(ts.j[i]) - ts.s2[i] * mu(ts.k[i])
    return out


def _threshold(spec: MelnikovSpec, ts: TupleSet, gamma: float | None = None) -> np.ndarray:
    g = spec.gamma if gamma is None else gamma
    return 2 * g * ts.delta() / ts.bracket() ** spec.tau


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


def _box_corners(spec: MelnikovSpec) -> np.ndarray:
    lo, hi = spec.lo_hi()
    c = np.array(np.meshgrid(*([[lo, hi]] * spec.d), indexing="ij")).reshape(spec.d, -1).T
    return c


def _omega_l_max(spec: MelnikovSpec, ts: TupleSet, probe: np.ndarray) -> np.ndarray:
    return np.max(np.abs(ts.ell @ spec.omega(probe).T), axis=1)


def prune(spec: MelnikovSpec, ts: TupleSet, probe: np.ndarray | None = None, gamma: float | None = None):
    """Split ``ts`` into (kept, pruned-by-size, pruned-by-gap).

    Size prune: ``|s1 j^2 - s2 k^2| > 16 max_box |omega.l|`` (the necessity
    bound with a 2x safety factor).  Gap guard: for an affine model with
    integer part ``Z != 0``, ``|Z| - max_box |c.xi| >= 1/4`` while the
    threshold stays below ``1/4``.
    """
    if probe is None:
        probe = _box_corners(spec) if spec.affine is not None else sample_box(spec, 256, seed=12345)
    thr = _threshold(spec, ts, gamma)
    if ts.family == "S":
        size = np.zeros(len(ts), bool)
    else:
        raw = (ts.s1 * ts.j**2 - ts.s2 * ts.k**2) if ts.family == "Lambda" else ts.j**2
        size = np.abs(raw) > 16 * _omega_l_max(spec, ts, probe)
    gap = np.zeros(len(ts), bool)
    if spec.affine is not None:
        Z, C = _affine_parts(spec, ts)
        lo, hi = spec.lo_hi()
        dev = np.abs(C).sum(-1) * hi
        gap = (np.abs(Z) >= 1) & (np.abs(Z) - dev >= 0.25) & (thr < 0.25) & ~size
    keep = ~(size | gap)
    return ts.subset(keep), ts.subset(size), ts.subset(gap)


def _affine_parts(spec: MelnikovSpec, ts: TupleSet):
    """``psi = Z + C.xi`` with the integer-like constant ``Z`` and slope ``C``."""
    v2, Wlin, r_lin = spec.affine
    Z = ts.ell @ v2
    C = ts.ell @ Wlin
    if ts.family == "P":
        Z = Z - ts.s2 * ts.j**2
        C = C - ts.s2[:, None] * np.array([r_lin(int(j)) for j in ts.j]).reshape(len(ts), spec.d)
    elif ts.family == "Lambda":
        Z = Z + ts.s1 * ts.j**2 - ts.s2 * ts.k**2
        rj = np.array([r_lin(int(j)) for j in ts.j]).reshape(len(ts), spec.d)
        rk = np.array([r_lin(int(k)) for k in ts.k]).reshape(len(ts), spec.d)
        C = C + ts.s1[:, None] * rj - ts.s2[:, None] * rk
    return Z.astype(float), C


# ---------------------------------------------------------------------------
# membership and slabs
# ---------------------------------------------------------------------------


def membership(xi, spec: MelnikovSpec) -> dict:
    """Membership of one parameter point in the three families with worst margins."""
    xi = np.atleast_2d(np.asarray(xi, float))
    tuples = enumerate_tuples(spec)
    out = {}
    name = {"S": "in_S", "P": "in_P", "Lambda": "in_Lambda"}
    for fam, ts in tuples.items():
        if not len(ts):
            out[name[fam]] = True
            out[fam] = {"margin": math.inf, "tuple": None}
            continue
        psi = np.abs(_psi(spec, ts, xi)[:, 0])
        margin = psi - _threshold(spec, ts)
        i = int(np.argmin(margin))
        out[name[fam]] = bool(margin[i] >= 0)
        out[fam] = {"margin": float(margin[i]), "tuple": ts.row(i)}
    return out


def slab_width_affine(Z: float, c, threshold: float, direction) -> float:
    """Exact length of ``{t : |Z + c.(x0 + t e)| < threshold}`` along a unit direction."""
    e = np.asarray(direction, float)
    e = e / np.linalg.norm(e)
    s = abs(float(np.dot(c, e)))
    if s == 0:
        return math.inf
    return 2 * threshold / s


def slab_measure(ell, j, k, s1, s2, spec: MelnikovSpec, samples: int = 100_000, seed: int = 0,
                 family: str = "Lambda", xi: np.ndarray | None = None) -> dict:
    """Monte Carlo measure of the slab where one condition fails.

    Returns hits, fraction with a 95% binomial interval, the measure, the
    reference scale ``gamma eps^(2(d-1)) <l>^(1-tau)`` and whether the tuple
    was pruned without sampling.
    """
    ell = np.atleast_2d(np.asarray(ell, int))
    ts = TupleSet(family, ell, np.array([s1]), np.array([j]), np.array([s2]), np.array([k]))
    kept, size, gap = prune(spec, ts)
    scale = spec.gamma * spec.eps ** (2 * (spec.d - 1)) * ts.bracket()[0] ** (1 - spec.tau)
    if len(size) or len(gap):
        return {"pruned": "size" if len(size) else "gap", "hits": 0, "fraction": 0.0, "ci": (0.0, 0.0),
                "measure": 0.0, "scale": scale, "samples": 0}
    pts = sample_box(spec, samples, seed) if xi is None else xi
    psi = np.abs(_psi(spec, ts, pts)[0])
    hits = int(np.sum(psi < _threshold(spec, ts)[0]))
    frac = hits / len(pts)
    return {"pruned": None, "hits": hits, "fraction": frac, "ci": _binomial_ci(hits, len(pts)),
            "measure": frac * spec.volume(), "scale": scale, "samples": len(pts)}


def _binomial_ci(hits: int, n: int, z: float = 1.96):
    """Wilson score interval."""
    if n == 0:
        return (0.0, 1.0)
    p = hits / n
    den = 1 + z * z / n
    ctr = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, ctr - half), min(1.0, ctr + half))


def lipschitz_lower(psi: Callable, xi: np.ndarray, h: float, ell=None, directions=None, tol: float = 1e-12) -> dict:
    """Lower bound of ``|psi(xi + h e) - psi(xi)| / h`` over sample points, per direction.

    ``psi`` maps ``(N, d)`` to ``(N,)``.  The usable bound is the best direction;
    it is flagged degenerate when below ``tol``.
    """
    xi = np.atleast_2d(np.asarray(xi, float))
    d = xi.shape[1]
    if xi.shape[0] < 2 or h <= 0:
        raise MelnikovError("degenerate-sampling", "need at least two points and h > 0")
    dirs = np.eye(d) if directions is None else np.atleast_2d(np.asarray(directions, float))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    base = np.asarray(psi(xi))
    per = []
    for e in dirs:
        q = np.abs(np.asarray(psi(xi + h * e)) - base) / h
        per.append(float(q.min()))
    best = max(per)
    out = {"per_direction": per, "bound": best, "min_direction": min(per), "degenerate": best < tol}
    if ell is not None:
        n1 = float(np.abs(np.asarray(ell)).sum())
        out["c_prime"] = best / n1 if n1 else math.inf
    return out


# ---------------------------------------------------------------------------
# excluded measure
# ---------------------------------------------------------------------------


def _excluded_mask(spec: MelnikovSpec, pts: np.ndarray, gamma: float | None = None, record: list | None = None):
    tuples = enumerate_tuples(spec)
    bad = np.zeros(len(pts), bool)
    for fam, ts in tuples.items():
        if not len(ts):
            continue
        kept, size, gap = prune(spec, ts, gamma=gamma)
        if not len(kept):
            continue
        thr = _threshold(spec, kept, gamma)
        cache = {}
        for start in range(0, len(kept), 256):
            sub = kept.subset(np.arange(start, min(len(kept), start + 256)))
            psi = np.abs(_psi(spec, sub, pts, cache))
            hit = psi < thr[start:start + len(sub)][:, None]
            bad |= hit.any(0)
            if record is not None:
                counts = hit.sum(1)
                for i in np.nonzero(counts)[0]:
                    record.append((sub.row(int(i)), int(counts[i]), float(sub.bracket()[i])))
    return bad


def excluded_fraction(spec: MelnikovSpec, samples: int = 100_000, seed: int = 0,
                      pts: np.ndarray | None = None) -> dict:
    pts = sample_box(spec, samples, seed) if pts is None else pts
    slabs = []
    bad = _excluded_mask(spec, pts, record=slabs)
    n = len(pts)
    hits = int(bad.sum())
    per_slab = [{"tuple": t, "hits": h, "measure": h / n * spec.volume(),
                 "scale": spec.gamma * spec.eps ** (2 * (spec.d - 1)) * br ** (1 - spec.tau)}
                for t, h, br in slabs]
    return {"fraction": hits / n, "ci": _binomial_ci(hits, n), "hits": hits, "samples": n, "per_slab": per_slab}


@dataclass
class MeasureReport:
    excluded_fraction: float
    ci: tuple
    samples: int
    seed: int
    per_step: list = field(default_factory=list)
    per_slab: list = field(default_factory=list)
    gamma_fit: dict | None = None
    nested: bool = True

    def as_dict(self) -> dict:
        return {
            "excluded_fraction": self.excluded_fraction,
            "ci": list(self.ci),
            "samples": self.samples,
            "seed": self.seed,
            "per_step": self.per_step,
            "per_slab": [{**s, "tuple": list(s["tuple"])} for s in self.per_slab],
            "gamma_fit": self.gamma_fit,
            "nested": self.nested,
        }


def cantor_measure(specs: list, samples: int = 100_000, seed: int = 0) -> MeasureReport:
    """Fraction of the box surviving every step ``n`` of the spec sequence.

    Each spec carries that step's ``gamma_n`` and ``K_n``; survival is the
    running intersection, so the surviving sets are nested by construction.
    """
    if not specs:
        raise MelnikovError("empty", "need at least one step")
    pts = sample_box(specs[0], samples, seed)
    alive = np.ones(len(pts), bool)
    per_step = []
    slabs = []
    prev = len(pts)
    nested = True
    for n, spec in enumerate(specs):
        rec = [] if n == len(specs) - 1 else None
        bad = _excluded_mask(spec, pts, record=rec)
        if rec is not None:
            slabs = rec
        alive &= ~bad
        cur = int(alive.sum())
        nested &= cur <= prev
        per_step.append({"n": n, "gamma": spec.gamma, "K": spec.K, "step_excluded": float(bad.mean()),
                         "surviving": cur / len(pts)})
        prev = cur
    n = len(pts)
    hits = n - int(alive.sum())
    last = specs[-1]
    per_slab = [{"tuple": t, "hits": h, "measure": h / n * last.volume(),
                 "scale": last.gamma * last.eps ** (2 * (last.d - 1)) * br ** (1 - last.tau)}
                for t, h, br in slabs]
    return MeasureReport(hits / n, _binomial_ci(hits, n), n, seed, per_step, per_slab, None, nested)


def gamma_scaling(spec: MelnikovSpec, gamma0s, samples: int = 100_000, seed: int = 0) -> dict:
    """Excluded fraction for each ``gamma0`` (``gamma = gamma0 eps^2``) and a log-log fit."""
    pts = sample_box(spec, samples, seed)
    fr = []
    for g0 in gamma0s:
        s = spec.with_(gamma=g0 * spec.eps**2)
        fr.append(float(_excluded_mask(s, pts).mean()))
    g = np.log(np.asarray(gamma0s, float))
    f = np.asarray(fr)
    if np.any(f <= 0):
        return {"gamma0": list(map(float, gamma0s)), "fraction": fr, "slope": float("nan"), "r2": float("nan")}
    y = np.log(f)
    slope, icpt = np.polyfit(g, y, 1)
    pred = slope * g + icpt
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"gamma0": list(map(float, gamma0s)), "fraction": fr, "slope": float(slope), "r2": r2}


def _drifted(spec: MelnikovSpec, drift: float) -> MelnikovSpec:
    """Same model with every ``mu_j`` shifted by a fixed amount in ``[-drift, drift]``."""
    base = spec.r

    def r(j, xi):
        return base(j, xi) + drift * math.sin(0.7548776662466927 * j + 0.5)

    return spec.with_(r=r, affine=spec.affine if drift < 1 / 16 else None)


def inclusion_check(prev: MelnikovSpec, nxt: MelnikovSpec, drift: float, samples: int = 20_000,
                    seed: int = 0) -> dict:
    """Count points kept by ``prev`` but lost by ``nxt`` once its eigenvalues move by ``drift``.

    Both specs should share ``K`` so the comparison is over the same tuples;
    ``nxt`` normally carries the smaller ``gamma``.
    """
    pts = sample_box(prev, samples, seed)
    keep_prev = ~_excluded_mask(prev, pts)
    keep_next = ~_excluded_mask(_drifted(nxt, drift), pts)
    viol = int(np.sum(keep_prev & ~keep_next))
    return {"violations": viol, "kept_prev": int(keep_prev.sum()), "kept_next": int(keep_next.sum()),
            "samples": len(pts), "drift": drift}


def inclusion_scan(a: CubicCoefficients, sites, eps_values, gamma0: float = 1e-3, tau: float = 3.0,
                   K: int = 4, jmax: int = 12, drift_coeff: float = 1.0, drift_power: float = 2.0,
                   samples: int = 20_000, seed: int = 0) -> dict:
    """Empirical step-to-step inclusion of the good sets over a range of box sizes.

    The earlier step uses ``1.5 gamma``, the later one ``1.25 gamma`` with
    eigenvalues drifted by ``drift_coeff |xi|^drift_power`` (``|xi|`` at the box
    center); both use the same ``K``.  ``smallest_xi_ok`` is the largest scanned
    ``|xi|`` at which the inclusion held there and at every smaller size.
    """
    rows = []
    for eps in sorted(float(e) for e in eps_values):
        base = spec_from_twist(a, sites, eps, gamma0, tau, K, jmax)
        xi_abs = len(base.sites) * eps**2
        drift = drift_coeff * xi_abs**drift_power
        r = inclusion_check(base.with_(gamma=1.5 * base.gamma), base.with_(gamma=1.25 * base.gamma),
                            drift, samples, seed)
        rows.append({"eps": eps, "xi_abs": xi_abs, **r})
    ok = None
    for row in rows:
        if row["violations"]:
            break
        ok = row["xi_abs"]
    return {"rows": rows, "smallest_xi_ok": ok}
