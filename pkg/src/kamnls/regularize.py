"""Regularization of the linearized operator and of the angle transport.

A :class:`LinearField` bundles the transport field ``F(theta)`` (the
``theta`` component at ``y = 0, w = 0``), its reference frequency ``omega``
and the operator acting on the normal variables.  The four steps make the
second-order symbol constant and the transport constant up to quadratically
small errors and a Fourier tail beyond the cutoff ``K``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nf_cubic import CubicCoefficients, genericity_scan
from .psido import (PsiDOp, PsiDError, Workspace, conj_angle_diffeo, conj_multiplication,
                    conj_space_diffeo, op_predicates)
from .spaces import FourierScalar, ell_grid, norm_sap, project_K

__all__ = [
    "RegularizeError",
    "LinearField",
    "StepRecord",
    "torus_profile",
    "linearized_nls_operator",
    "second_order_size",
    "transport_size",
    "dx_inverse",
    "omega_dtheta_inverse",
    "step1_diagonalize",
    "step2_straighten",
    "step3_time_reparam",
    "step4_average_theta",
    "regularize_full",
    "preliminary_step",
    "compatible",
]

DIV_FLOOR = 1e-14

# (coefficient index, k1, k2, k3): powers of j1, j2, j3 in each monomial of chi
_CHI_TERMS = (
    (0, 0, 0, 0, +1), (1, 0, 0, 2, -1), (2, 1, 1, 0, +1), (5, 0, 2, 0, -1),
    (6, 1, 1, 0, -1), (3, 1, 1, 2, -1), (7, 1, 2, 1, +1), (4, 2, 2, 2, -1),
)


class RegularizeError(ValueError):
    def __init__(self, code: str, message: str = "", step: str | None = None):
        tag = f"[{step}] " if step else ""
        super().__init__(f"{tag}{code}: {message}" if message else f"{tag}{code}")
        self.code = code
        self.step = step


@dataclass
class LinearField:
    omega: np.ndarray
    F: list
    op: PsiDOp
    factors: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return len(self.omega)

    def H(self) -> list:
        """Transport minus the reference frequency."""
        return [f - float(w) for f, w in zip(self.F, self.omega)]


@dataclass
class StepRecord:
    name: str
    data: dict


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def torus_profile(sites, xi, L: int, J: int) -> FourierScalar:
    """``sum_i sqrt(xi_i) e^{i theta_i} sin(v_i x)`` as a Fourier table."""
    d = len(sites)
    u = FourierScalar.zeros(d, L, J)
    for i, (v, x) in enumerate(zip(sites, xi)):
        ell = [0] * d
        ell[i] = 1
        amp = np.sqrt(x) / 2j
        u.coef[tuple(e + L for e in ell) + (v + J,)] += amp
        u.coef[tuple(e + L for e in ell) + (-v + J,)] -= amp
    return u


def linearized_nls_operator(a: CubicCoefficients, u: FourierScalar, sites=(), L: int | None = None,
                            J: int | None = None) -> PsiDOp:
    """Linearization of the cubic field at the profile ``u``.

    The coefficients of ``w_xx, w_x, w`` are products of derivatives of ``u``
    and ``conj(u)`` evaluated exactly on a grid.
    """
    L = 3 * u.L if L is None else L
    J = 3 * u.J + 4 if J is None else J
    ws = Workspace(u.d, L, J)
    coef = a.as_tuple()
    uv = ws.grid(u.resized(L, J))
    ub = np.conj(uv)
    du = {k: (-1j) ** k * ws.dx(uv, k) for k in range(3)}
    db = {k: (1j) ** k * ws.dx(ub, k) for k in range(3)}
    Q = {k: [[np.zeros(ws.shape, complex) for _ in range(2)] for _ in range(2)] for k in (0, 1, 2)}
    for idx, k1, k2, k3, sgn in _CHI_TERMS:
        c = sgn * coef[idx]
        if c == 0:
            continue
        Q[k1][0][0] += c * (-1j) ** k1 * db[k2] * du[k3]
        Q[k3][0][0] += c * (-1j) ** k3 * du[k1] * db[k2]
        Q[k2][0][1] += c * (1j) ** k2 * du[k1] * du[k3]
    blocks = {}
    for k in (2, 1, 0):
        q00 = ws.coef(Q[k][0][0])
        q01 = ws.coef(Q[k][0][1])
        blocks[k] = [[q00, q01], [q01.conj(), q00.conj()]]
    return PsiDOp(m=1.0, blocks=blocks, sites=tuple(sites))


def _fs_norm(u: FourierScalar, p: float = 0.0) -> float:
    return norm_sap(FourierScalar(u.coef), 0.0, 0.0, p)


def second_order_size(op: PsiDOp, p: float = 0.0) -> float:
    """Size of the variable part of the second-order symbol (``a2`` minus its mean, plus ``b2``)."""
    a2 = op.a(2)
    avg = a2.average()
    return _fs_norm(a2 - avg, p) + _fs_norm(op.b(2), p)


def transport_size(lf: LinearField, p: float = 0.0) -> float:
    return float(np.sqrt(sum(_fs_norm(h, p) ** 2 for h in lf.H())))


def dx_inverse(u: FourierScalar) -> FourierScalar:
    """Zero-average primitive in ``x``; requires a vanishing ``x``-average per angle."""
    js = u.jvec()
    c = u.coef.copy()
    if np.max(np.abs(c[..., u.J]), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(c), initial=0.0)):
        raise RegularizeError("nonzero-x-average", "dx^{-1} needs zero x-average")
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(js != 0, c / (1j * js), 0.0)
    return u.with_coef(c)


def _diophantine_check(omega, K: int, gamma: float, tau: float, L: int):
    d = len(omega)
    ells = ell_grid(d, L)
    absl = np.abs(ells).sum(-1)
    sel = (absl > 0) & (np.maximum(absl, 0) <= K)
    vals = np.abs(ells[sel] @ np.asarray(omega, float))
    if vals.size == 0:
        return
    bound = gamma / absl[sel].astype(float) ** tau
    bad = np.where((vals < bound) | (vals < DIV_FLOOR))[0]
    if bad.size:
        i = bad[np.argmin(vals[bad])]
        raise RegularizeError("diophantine", f"|omega.l| = {vals[i]:.3e} at l = {tuple(ells[sel][i])}")


def omega_dtheta_inverse(u: FourierScalar, omega, K: int | None = None) -> FourierScalar:
    """``(omega . d_theta)^{-1}`` on modes ``0 < |l| <= K``; the mean must vanish."""
    d = u.d
    ells = ell_grid(d, u.L)
    div = 1j * (ells @ np.asarray(omega, float))
    absl = np.abs(ells).sum(-1)
    keep = absl > 0
    if K is not None:
        keep &= absl <= K
    if np.any(keep & (np.abs(div) < DIV_FLOOR)):
        raise RegularizeError("small-divisor", "omega . l below the hard floor")
    c = u.coef.reshape(len(ells), -1).copy()
    out = np.zeros_like(c)
    out[keep] = c[keep] / div[keep][:, None]
    return u.with_coef(out.reshape(u.coef.shape))


def _theta_only(u: FourierScalar) -> FourierScalar:
    """x-average of a scalar as a theta-only table."""
    return FourierScalar(u.coef[..., u.J:u.J + 1].copy(), u.s, u.a)


# ---------------------------------------------------------------------------
# the four steps
# ---------------------------------------------------------------------------


def step1_diagonalize(lf: LinearField, K: int | None = None):
    """Conjugate by a multiplier making the second-order block diagonal.

    ``M = [[1, -b/c], [-conj(b)/c, 1]]`` with ``c = 2m + a2 + a2~`` and
    ``a2~ = sqrt((m + a2)^2 - |b2|^2) - m``.  Returns ``(lf', A, info)``.
    """
    op = lf.op
    ws = Workspace(op.d, op.L, op.J)
    a2 = ws.grid(op.a(2))
    b2 = ws.grid(op.b(2))
    if np.max(np.abs(a2.imag)) > 1e-10 * max(1.0, np.max(np.abs(a2))):
        raise RegularizeError("a2-not-real", step="step1")
    a2 = a2.real
    disc = (op.m + a2) ** 2 - np.abs(b2) ** 2
    if np.min(disc) <= 0 or np.min(op.m + a2) <= 0:
        raise RegularizeError("hyperbolicity-lost", "(m + a2)^2 <= |b2|^2 somewhere", step="step1")
    lam = np.sqrt(disc)
    at2 = lam - op.m
    c = op.m + a2 + lam
    off = -b2 / c
    A01 = ws.coef(off)
    if K is not None:
        A01 = project_K(A01, K)
    z = FourierScalar.zeros(op.d, op.L, op.J)
    A = [[z, A01], [A01.conj(), z.copy()]]
    det = 1.0 - np.abs(off) ** 2
    try:
        new = conj_multiplication(op, A, lf.F, L_out=op.L, J_out=op.J)
    except PsiDError as e:
        raise RegularizeError(e.code, str(e), step="step1") from e
    info = {
        "a2_tilde": ws.coef(at2.astype(complex)),
        "det": det,
        "det_scaled": det * c**2 / (4 * op.m**2),
        "offdiag_in": _fs_norm(op.b(2)),
        "offdiag_out": _fs_norm(new.b(2)),
    }
    return LinearField(lf.omega, lf.F, new, list(lf.factors)), A, info


def step2_straighten(lf: LinearField, K: int | None = None):
    """Space diffeomorphism making the second-order coefficient independent of ``x``.

    Returns ``(lf', alpha, m2)`` where ``m2(theta)`` is the new coefficient minus ``m``.
    """
    op = lf.op
    ws = Workspace(op.d, op.L, op.J)
    at2 = ws.grid(op.a(2)).real
    base = op.m + at2
    if np.min(base) <= 0:
        raise RegularizeError("hyperbolicity-lost", "m + a2 must stay positive", step="step2")
    inv_sqrt = base ** -0.5
    mean_x = inv_sqrt.mean(axis=-1, keepdims=True)
    cth = 1.0 / mean_x
    rho = cth * inv_sqrt - 1.0
    m2 = ws.coef((cth**2 - op.m) * np.ones_like(base) + 0j)
    m2 = _theta_only(m2)
    rho_fs = ws.coef(rho + 0j)
    if K is not None:
        rho_fs = project_K(rho_fs, K)
    rho_fs.coef[..., rho_fs.J] = 0.0
    alpha = dx_inverse(rho_fs).real_part()
    if not np.any(alpha.coef):
        return LinearField(lf.omega, lf.F, op.copy(), list(lf.factors)), alpha, m2
    try:
        new = conj_space_diffeo(op, alpha, lf.F, L_out=op.L, J_out=op.J, check=False)
    except PsiDError as e:
        raise RegularizeError(e.code, str(e), step="step2") from e
    return LinearField(lf.omega, lf.F, new, list(lf.factors)), alpha, m2


def step3_time_reparam(lf: LinearField, K: int, gamma: float, tau: float = 3.0):
    """Time rescaling plus angle diffeomorphism making the second-order coefficient constant.

    With ``c = <m2>`` and ``1 + h = (m + m2) / (m + c)``, the field is divided
    by ``1 + h`` and then conjugated by ``theta -> theta + omega beta(theta)``
    where ``omega . d_theta beta = Pi_K h``.  Returns ``(lf', beta, m_plus, info)``.
    """
    op = lf.op
    _diophantine_check(lf.omega, K, gamma, tau, max(op.L, K))
    ws = Workspace(op.d, op.L, op.J)
    m2 = _theta_only(op.a(2)).resized(op.L, 0)
    m2 = m2.real_part()
    cc = m2.average().real
    m_plus = op.m + cc
    h = m2.with_coef(m2.coef / m_plus)
    h.coef[(op.L,) * op.d + (0,)] = 0.0
    beta = omega_dtheta_inverse(project_K(h, K), lf.omega, K).real_part()
    hv = ws.grid(h).real
    scale = 1.0 / (1.0 + hv)
    Qg = {k: [[ws.grid(op.blocks[k][s][t]) for t in range(2)] for s in range(2)] for k in (2, 1, 0)}
    blocks = {}
    for k in (2, 1, 0):
        rows = []
        for s in range(2):
            row = []
            for t in range(2):
                val = Qg[k][s][t] * scale
                if k == 2 and s == t:
                    val = val + op.m * scale - m_plus
                row.append(ws.coef(val))
            rows.append(row)
        blocks[k] = rows
    pairs = [(c, tuple(ws.coef(ws.grid(v) * scale) for v in dv)) for c, dv in op.pairs]
    scaled = op.copy(m=m_plus, blocks=blocks, pairs=pairs)
    Fs = [ws.coef(ws.grid(f) * scale, op.L, 0) for f in lf.F]
    bvec = [beta.with_coef(beta.coef * w) for w in lf.omega]
    if any(np.any(b.coef) for b in bvec):
        try:
            new, Fn = conj_angle_diffeo(scaled, bvec, Fs, L_out=op.L)
        except PsiDError as e:
            raise RegularizeError(e.code, str(e), step="step3") from e
    else:
        new, Fn = scaled, Fs
    Fn = [f.resized(op.L, 0) for f in Fn]
    info = {"c": cc, "h": h, "m2_norm": _fs_norm(m2 - cc)}
    factors = list(lf.factors) + [("time-rescale", h)]
    return LinearField(lf.omega, Fn, new, factors), beta, m_plus, info


def step4_average_theta(lf: LinearField, K: int, gamma: float, tau: float = 3.0):
    """Angle diffeomorphism removing the non-constant transport modes up to ``K``.

    ``theta -> theta + g`` with ``omega . d_theta g = -Pi_K (H - <H>)``; the new
    frequency is ``omega + <H>``.  Returns ``(lf', g, omega_plus, info)``.
    """
    op = lf.op
    _diophantine_check(lf.omega, K, gamma, tau, max(op.L, K))
    H = [h.resized(op.L, 0) for h in lf.H()]
    avg = np.array([h.average().real for h in H])
    g = []
    for h in H:
        hh = h.copy()
        hh.coef[(op.L,) * op.d + (0,)] = 0.0
        g.append((-1.0 * omega_dtheta_inverse(project_K(hh, K), lf.omega, K)).real_part())
    omega_plus = np.asarray(lf.omega, float) + avg
    if any(np.any(x.coef) for x in g):
        try:
            new, Fn = conj_angle_diffeo(op, g, [f.resized(op.L, 0) for f in lf.F], L_out=op.L)
        except PsiDError as e:
            raise RegularizeError(e.code, str(e), step="step4") from e
    else:
        new, Fn = op.copy(), [f.copy() for f in lf.F]
    Fn = [f.resized(op.L, 0) for f in Fn]
    out = LinearField(omega_plus, Fn, new, list(lf.factors))
    tail = float(np.sqrt(sum(_fs_norm(h - project_K(h, K)) ** 2 for h in H)))
    size_in = float(np.sqrt(sum(_fs_norm(h - h.average()) ** 2 for h in H)))
    info = {"H_in": size_in, "tail": tail, "H_out": transport_size(out), "avg": avg}
    return out, g, omega_plus, info


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


def regularize_full(lf: LinearField, K: int, gamma: float, tau: float = 3.0):
    """Run steps 1-4 and record a size ledger.

    Returns ``(records, lf', ledger)``.
    """
    ledger = {
        "delta2_in": second_order_size(lf.op),
        "delta1_in": transport_size(lf),
        "m_in": lf.op.m,
        "omega_in": np.asarray(lf.omega, float).tolist(),
        "flags_in": op_predicates(lf.op),
    }
    records = []
    lf1, A, i1 = step1_diagonalize(lf, K)
    records.append(StepRecord("step1", {"offdiag_out": i1["offdiag_out"]}))
    lf2, alpha, m2 = step2_straighten(lf1, K)
    records.append(StepRecord("step2", {"alpha_norm": _fs_norm(alpha)}))
    lf3, beta, m_plus, i3 = step3_time_reparam(lf2, K, gamma, tau)
    records.append(StepRecord("step3", {"beta_norm": _fs_norm(beta), "c": i3["c"]}))
    lf4, g, omega_plus, i4 = step4_average_theta(lf3, K, gamma, tau)
    records.append(StepRecord("step4", {"g_norm": float(np.sqrt(sum(_fs_norm(x) ** 2 for x in g)))}))
    ledger.update({
        "delta2_out": second_order_size(lf4.op),
        "delta1_out": transport_size(lf4),
        "m_out": lf4.op.m,
        "omega_out": omega_plus.tolist(),
        "m_drift": abs(lf4.op.m - lf.op.m),
        "omega_drift": float(np.max(np.abs(omega_plus - np.asarray(lf.omega, float)))),
        "step4_tail": i4["tail"],
        "flags_out": op_predicates(lf4.op),
        "rank": lf4.op.rank,
    })
    return records, lf4, ledger


def compatible(ledger: dict, cap: float = 2.0) -> bool:
    """Drift bounds plus structure preservation for one regularization pass."""
    ok = ledger["omega_drift"] <= cap * max(ledger["delta1_in"], 1e-300) or ledger["omega_drift"] == 0.0
    ok &= ledger["m_drift"] <= cap * max(ledger["delta2_in"], 1e-300) or ledger["m_drift"] == 0.0
    ok &= ledger["delta2_out"] <= max(ledger["delta2_in"], 1e-15)
    ok &= all(ledger["flags_out"].values())
    return bool(ok)


def preliminary_step(a: CubicCoefficients, sites, xi, K: int, gamma: float, L: int, J: int,
                     tau: float = 3.0, scan_bound: int | None = None):
    """First regularization pass on the linearization at the leading torus.

    Refuses non-generic site sets.  Returns ``(records, lf', ledger)`` with
    ``ledger['m0']`` the full average of ``a2`` and the list of angle modes of
    ``m2`` with their integer divisors.
    """
    sites = tuple(sorted(int(v) for v in sites))
    viol = genericity_scan(sites, scan_bound or 2 * max(sites) + 2)
    if viol:
        raise RegularizeError("non-generic-sites", f"{len(viol)} resonant tuples, e.g. {viol[0]}", step="preliminary")
    from .twist import omega0

    u = torus_profile(sites, xi, 1, max(sites))
    op = linearized_nls_operator(a, u, sites=sites, L=L, J=J)
    om = omega0(a, sites, xi)
    lf = LinearField(om, [FourierScalar.zeros(len(sites), L, 0) + float(w) for w in om], op)
    a2 = op.a(2)
    m0 = a2.average().real
    ells = ell_grid(len(sites), a2.L)
    modes = []
    flat = a2.coef.reshape(len(ells), -1)
    v2 = np.asarray(sites, float) ** 2
    for k, ell in enumerate(ells):
        if np.any(np.abs(flat[k]) > 1e-14) and np.any(ell):
            modes.append((tuple(int(e) for e in ell), float(abs(ell @ v2))))
    small = [m for m in modes if m[1] < 0.5]
    if small:
        raise RegularizeError("small-divisor", f"angle modes {small} of m2 hit small divisors", step="preliminary")
    if second_order_size(op) == 0.0 and transport_size(lf) == 0.0:
        return [], lf, {"m0": m0, "modes": modes, "identity": True}
    records, out, ledger = regularize_full(lf, K, gamma, tau)
    ledger.update({"m0": m0, "modes": modes, "identity": False})
    return records, out, ledger
