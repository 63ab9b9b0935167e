"""Twist matrix, frequency maps and coefficient classifiers.

Sign conventions follow the action-angle field built from the cubic
nonlinearity: tangential frequencies are ``omega0 = v^2 - M xi`` and the
integrable normal frequencies are ``Omega_j = j^2 - m_j . xi``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .nf_cubic import CubicCoefficients, chi

__all__ = [
    "TwistError",
    "TwistData",
    "cross_coefficient",
    "twist_matrix",
    "homogeneous_parts",
    "normal_vector",
    "omega0",
    "normal_frequency",
    "classify_coefficients",
    "twist_polynomial",
    "melnikov_affine",
    "melnikov_affine_closed_form",
    "rank_oracle",
    "rank2_eigs",
]


class TwistError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


def cross_coefficient(a: CubicCoefficients, j: int, k: int):
    """``C_j^k``: the self-interaction for ``k == j`` and the cross term otherwise."""
    if j == k:
        return chi(a, j, j, j, j)
    return chi(a, k, k, j, j) + chi(a, j, k, k, j)


def _mat(rows, exact):
    if exact:
        return [list(r) for r in rows]
    return np.array(rows, dtype=float)


@dataclass
class TwistData:
    sites: tuple
    M: np.ndarray
    parts: dict
    identity_residual: float

    @property
    def d(self) -> int:
        return len(self.sites)


def homogeneous_parts(a: CubicCoefficients, sites, exact: bool = False) -> dict:
    """Parts of degree 0, 2, 4, 6 in the sites; their sum over four is the twist matrix.

    With ``exact=True`` the entries are :class:`fractions.Fraction`.
    """
    conv = Fraction if exact else float
    a1, a2, a3, a4, a5, a6, a7, a8 = (conv(x) for x in a.as_tuple())
    v2 = [conv(v) ** 2 for v in sites]
    d = len(v2)
    delta = [[conv(1 if i == k else 0) for k in range(d)] for i in range(d)]
    lam2 = a3 - a2 - a6 - a7
    alpha = 2 * (a3 - a2 - 2 * a6 - a7)
    M0 = [[a1 * (4 - delta[i][k]) for k in range(d)] for i in range(d)]
    M2 = [[-lam2 * v2[i] * delta[i][k] + alpha * v2[k] - 2 * a2 * v2[i] for k in range(d)] for i in range(d)]
    M4 = [[-(-a4 + a8) * v2[i] ** 2 * delta[i][k] - 2 * a4 * v2[i] * v2[k] for k in range(d)] for i in range(d)]
    M6 = [[-a5 * v2[i] * (4 - delta[i][k]) * v2[k] ** 2 for k in range(d)] for i in range(d)]
    return {0: _mat(M0, exact), 2: _mat(M2, exact), 4: _mat(M4, exact), 6: _mat(M6, exact)}


def twist_matrix(a: CubicCoefficients, sites, check: bool = True) -> TwistData:
    sites = tuple(int(v) for v in sites)
    d = len(sites)
    M = np.array([[0.25 * (cross_coefficient(a, sites[k], sites[h]) + cross_coefficient(a, sites[k], -sites[h]))
                   for h in range(d)] for k in range(d)])
    parts = homogeneous_parts(a, sites)
    recon = 0.25 * sum(parts.values())
    scale = max(np.max(np.abs(M)), 1e-300)
    res = float(np.max(np.abs(recon - M)) / scale) if np.any(M) else float(np.max(np.abs(recon)))
    if check and res > 1e-12:
        raise TwistError("decomposition-mismatch", f"relative residual {res:.3e}")
    return TwistData(sites=sites, M=M, parts=parts, identity_residual=res)


def normal_vector(a: CubicCoefficients, sites, j: int) -> np.ndarray:
    """``m_j`` with components ``(C_j^{v_i} + C_j^{-v_i}) / 4``."""
    return np.array([0.25 * (cross_coefficient(a, j, v) + cross_coefficient(a, j, -v)) for v in sites])


def omega0(a: CubicCoefficients, sites, xi) -> np.ndarray:
    sites = np.asarray(sites)
    return sites.astype(float) ** 2 - twist_matrix(a, sites, check=False).M @ np.asarray(xi, float)


def normal_frequency(a: CubicCoefficients, sites, j: int, xi) -> float:
    return float(j * j - normal_vector(a, sites, j) @ np.asarray(xi, float))


def classify_coefficients(a: CubicCoefficients, d: int, tol: float = 0.0) -> dict:
    """Evaluate the resonant and non-resonant branch lists verbatim.

    ``d`` is bound to the torus dimension.  Returns the fired branches of
    each list; ``verdict`` is ``resonant``, ``non-resonant``, ``both`` or
    ``unclassified``.
    """
    a1, a2, a3, a4, a5, a6, a7, a8 = a.as_tuple()
    z = lambda x: abs(x) <= tol
    nz = lambda x: not z(x)
    lam = a3 - a2 - a6 - a7
    res = []
    if z(a5) and z(a1) and z(a4 - a8) and z(lam):
        res.append(1)
    if z(a5) and z(a1) and z(a4 - a8) and nz(lam):
        if (z(a2) and z(a3 - a7 - (6 * d + 1) / (2 * d + 1) * a6)) or \
           (nz(a2) and z(a3 - (1 + 3 * d) * a2 - a7) and z(a2 - a6 / d)):
            res.append(2)
    if z(a5) and z(a1) and z(lam) and nz(a4 - a8) and z((2 * d - 1) * a4 - a8):
        res.append(3)
    non = []
    if nz(a5):
        non.append("1")
    if z(a5) and nz(a1):
        non.append("2")
    if z(a5) and z(a1) and nz(-a4 + a8):
        if z(a4):
            non.append("3a")
        elif nz((2 * d - 1) * a4 - a8):
            non.append("3b")
    if z(a5) and z(a1) and z(-a4 + a8) and nz(lam):
        if z(a2) and z(a3 - 3 * a6 - a7):
            non.append("4a")
        if nz(a2) and nz(a3 - a2 - 3 * a6 - a7):
            non.append("4b")
        if z(a2) and nz(a3 - 3 * a6 - a7) and nz(a3 - (6 * d + 1) / (2 * d + 1) * a6 - a7):
            non.append("4c")
        if nz(a2) and z(a3 - a2 - 3 * a6 - a7) and nz(d * a2 - a6):
            non.append("4d")
    if res and non:
        verdict = "both"
    elif res:
        verdict = "resonant"
    elif non:
        verdict = "non-resonant"
    else:
        verdict = "unclassified"
    return {"verdict": verdict, "resonant_branches": res, "nonresonant_branches": non, "d": d}


def twist_polynomial(a: CubicCoefficients) -> dict:
    """Coefficients of ``p(x)`` in ascending powers ``x^0 .. x^6``."""
    a1, a2, a3, a4, a5, a6, a7, a8 = a.as_tuple()
    coeffs = [a1, 0.0, a3 - a2 - a6 - a7, 0.0, -a4 + a8, 0.0, -a5]
    return {"coeffs": coeffs, "degenerate": not any(coeffs)}


def _polyval(coeffs, x):
    return sum(c * x**k for k, c in enumerate(coeffs))


def twist_polynomial_sites_ok(a: CubicCoefficients, sites) -> bool:
    """True when ``p`` vanishes at none of the sites (and is not identically zero)."""
    p = twist_polynomial(a)
    if p["degenerate"]:
        return False
    return all(_polyval(p["coeffs"], float(v)) != 0 for v in sites)


def melnikov_affine(a: CubicCoefficients, sites, ell, j: int, k: int, s1: int, s2: int):
    """Constant and linear part of ``xi -> omega0.l + s1 Omega_j - s2 Omega_k``."""
    ell = np.asarray(ell, int)
    if int(ell.sum()) + s1 != s2:
        raise TwistError("selection-rule", "sum(l) + s1 must equal s2")
    if s1 == s2 and not ell.any() and j == k:
        raise TwistError("excluded-diagonal", "(l, j, k) = (0, j, j) with s1 = s2")
    v2 = np.asarray(sites, float) ** 2
    Z = float(v2 @ ell) + s1 * j * j - s2 * k * k
    M = twist_matrix(a, sites, check=False).M
    c = -(M.T @ ell) - s1 * normal_vector(a, sites, j) + s2 * normal_vector(a, sites, k)
    return Z, c


def melnikov_affine_closed_form(a: CubicCoefficients, sites, ell) -> np.ndarray:
    """Linear part on the resonant set ``Z = 0`` through a single matrix applied to ``l``."""
    a1, a2, a3, a4, a5, a6, a7, a8 = a.as_tuple()
    v = np.asarray(sites, float)
    d = len(v)
    V2, V4 = np.diag(v**2), np.diag(v**4)
    A, I = np.ones((d, d)), np.eye(d)
    M = twist_matrix(a, sites, check=False).M
    B = M.T + 0.5 * (a2 * I + a4 * V2 + 2 * a5 * V4) @ A @ V2 - 0.5 * (2 * a1 * I + (a3 - a2 - 2 * a6 - a7) * V2) @ A
    return -(B @ np.asarray(ell, float))


def rank_oracle(M, tol: float = 1e-9) -> int:
    sv = np.linalg.svd(np.asarray(M, float), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def rank2_eigs(lam: float, alpha: float, beta: float, C1: float, C2: float, d: int):
    if lam == 0:
        raise TwistError("zero-lambda", "lambda must be nonzero")
    disc = complex(d * d * (beta - alpha) ** 2 + 4 * alpha * beta * C1 * C2) ** 0.5
    mu1 = (d * (alpha + beta) + disc) / (2 * lam)
    mu2 = (d * (alpha + beta) - disc) / (2 * lam)
    if abs(mu1.imag) < 1e-300 and abs(mu2.imag) < 1e-300:
        return mu1.real, mu2.real
    return mu1, mu2
