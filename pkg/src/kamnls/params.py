"""Exponent budget, iteration schedules and smallness inequalities.

All integer-valued exponents are kept as :class:`fractions.Fraction` so the
constraint system can be re-checked exactly.  The cutoffs ``K_n`` grow doubly
exponentially and are therefore stored through ``log2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from fractions import Fraction

__all__ = [
    "BudgetError",
    "ExponentBudget",
    "IterationSchedule",
    "SmallnessReport",
    "derive_budget",
    "constraint_residuals",
    "check_smallness",
    "check_smallness_at_xi",
    "smallness_threshold",
    "schedule",
    "default_budget",
]

SWEEP_CEILING = 10**6


class BudgetError(ValueError):
    """Raised when the exponent constraints cannot be met."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _F(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class ExponentBudget:
    d: int
    tau: Fraction
    p0: Fraction
    p1: Fraction
    p2: Fraction
    mu1: Fraction
    mu: Fraction
    eta: Fraction
    eta1: Fraction
    kappa0: Fraction
    kappa1: Fraction
    kappa2: Fraction
    kappa3: Fraction
    kappa4: Fraction
    kappa5: Fraction
    m1: Fraction
    m2: Fraction
    dp: Fraction
    nu: int = 2
    a_exp: Fraction = Fraction(0)
    flags: tuple = field(default_factory=tuple)

    def as_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, Fraction):
                out[k] = float(v) if v.denominator != 1 else int(v)
            elif isinstance(v, tuple):
                out[k] = list(v)
            else:
                out[k] = v
        return out


def constraint_residuals(b: ExponentBudget) -> dict:
    """Strict-inequality slacks ``lhs - rhs`` of the four exponent constraints.

    All four must be positive for a valid budget.
    """
    k0, k1, k2, k3 = b.kappa0, b.kappa1, b.kappa2, b.kappa3
    half = Fraction(1, 2)
    return {
        "exp1": k1 - max(Fraction(2, 3) * (k0 + k3), 2 * k0, 6 * k0 + k2 + 1),
        "exp2": k2 - max(4 * k0, k0 + 2 * max(k1, k3) - Fraction(3, 2) * k1),
        "exp3": b.eta - (b.mu + half * k2 + 1),
        "exp4": b.dp - max(k0 + Fraction(3, 2) * k2 + max(k1, k3),
                           5 * k0 + Fraction(3, 2) * k2 + k1 + 1),
    }


def _next_int_above(x: Fraction) -> Fraction:
    return Fraction(math.floor(x) + 1)


def derive_budget(d: int = 2, tau=None, mu1=0, kappa1_seed=0, kappa2_seed=0,
                  p0=None, ceiling: int = SWEEP_CEILING) -> ExponentBudget:
    """Smallest integer exponents at or above the seeds meeting all constraints.

    The constraint system is monotone, so iterating the individual lower
    bounds from the seeds reaches the least admissible fixed point.
    """
    if d < 2:
        raise BudgetError("precondition", "torus dimension d must be >= 2")
    tau = _F(d + 2 if tau is None else tau)
    if tau < d + 1:
        raise BudgetError("precondition", "tau must be >= d+1")
    mu1 = _F(mu1)
    if mu1 < 0:
        raise BudgetError("precondition", "mu1 must be >= 0")
    p0 = _F(math.ceil(Fraction(d + 1, 2)) if p0 is None else p0)

    mu = 5 * (mu1 + 7)
    k0 = mu + 6
    eta1 = 2 * p0 + 2 * tau + 4
    k1, k2 = _F(kappa1_seed), _F(kappa2_seed)
    for _ in range(64):
        k3 = k1 + eta1
        need2 = _next_int_above(max(4 * k0, k0 + 2 * max(k1, k3) - Fraction(3, 2) * k1))
        k2n = max(k2, need2)
        k3 = k1 + eta1
        need1 = _next_int_above(max(Fraction(2, 3) * (k0 + k3), 2 * k0, 6 * k0 + k2n + 1))
        k1n = max(k1, need1)
        if k1n > ceiling or k2n > ceiling:
            which = "exp1" if k1n > ceiling else "exp2"
            raise BudgetError("unsatisfiable", f"sweep exceeded ceiling {ceiling} on {which}")
        if (k1n, k2n) == (k1, k2):
            break
        k1, k2 = k1n, k2n
    else:  # pragma: no cover - the fixed point is reached in a handful of sweeps
        raise BudgetError("unsatisfiable", "exp1/exp2 sweep did not settle")
    k3 = k1 + eta1
    eta = _next_int_above(mu + Fraction(1, 2) * k2 + 1)
    dp = _next_int_above(max(k0 + Fraction(3, 2) * k2 + max(k1, k3),
                             5 * k0 + Fraction(3, 2) * k2 + k1 + 1))
    if max(eta, dp) > ceiling:
        raise BudgetError("unsatisfiable", "exp3/exp4 exceed the sweep ceiling")
    m1 = d + 2 * p0 + 10
    k5 = 7 * tau + 5
    flags = ("below-theorem-dimension",) if d == 2 else ()
    b = ExponentBudget(
        d=d, tau=tau, p0=p0, p1=p0, p2=p0 + dp, mu1=mu1, mu=mu, eta=eta, eta1=eta1,
        kappa0=k0, kappa1=k1, kappa2=k2, kappa3=k3, kappa4=7 * tau + 3, kappa5=k5,
        m1=m1, m2=m1 + k5, dp=dp, nu=2, a_exp=Fraction(1) / (4 * k0 + k2 + 1), flags=flags,
    )
    bad = [k for k, v in constraint_residuals(b).items() if v <= 0]
    if bad:  # pragma: no cover - guarded by construction
        raise BudgetError("unsatisfiable", f"constraints violated: {bad}")
    return b


def default_budget(d: int = 2) -> ExponentBudget:
    return derive_budget(d=d, tau=d + 2, mu1=0)


@dataclass
class SmallnessReport:
    passed: dict
    log10_lhs: dict

    @property
    def all_pass(self) -> bool:
        return all(self.passed.values())

    def lhs(self, key: str) -> float:
        v = self.log10_lhs[key]
        return math.inf if v > 300 else 10.0 ** v


def check_smallness(b: ExponentBudget, eps0: float, G0: float, R0: float, K0: float) -> SmallnessReport:
    """Evaluate the four smallness conditions in log space.

    Each entry of ``log10_lhs`` is the base-10 logarithm of a left-hand side
    whose threshold is 1.
    """
    if min(eps0, G0, R0, K0) <= 0:
        raise BudgetError("precondition", "eps0, G0, R0, K0 must be positive")
    le, lg, lr, lk = (math.log10(x) for x in (eps0, G0, R0, K0))
    k0, k1, k2, k3, dp = (float(x) for x in (b.kappa0, b.kappa1, b.kappa2, b.kappa3, b.dp))
    L = {
        "sss111:eps<=R": le - lr,
        "sss111:R<=G": lr - lg,
        "sss111:epsG3": le + 3 * lg,
        "sss111:epsG2/R": le + 2 * lg - lr,
        "1s1": 2 * lg - lr + le + k0 * lk + max(0.0, lr + lg + (k0 + 0.5 * k2) * lk),
        "4s2": max(k1 * lk, le + k3 * lk) + (k0 - dp + 0.5 * k2) * lk + lg - le,
        "6s2": max(k1 * lk, le + k3 * lk) + (k0 - 1.5 * k1) * lk + lg - lr,
    }
    strict = {"sss111:epsG3", "sss111:epsG2/R", "1s1"}
    passed = {k: (v < 0.0 if k in strict else v <= 0.0) for k, v in L.items()}
    return SmallnessReport(passed=passed, log10_lhs=L)


def _coupled(b: ExponentBudget, xi_abs: float, A0: float):
    eps0 = xi_abs ** 0.25
    G0 = A0
    R0 = A0 * math.sqrt(eps0)
    K0 = eps0 ** (-float(b.a_exp)) * G0
    return eps0, G0, R0, K0


def check_smallness_at_xi(b: ExponentBudget, xi_abs: float, A0: float = 1.0) -> SmallnessReport:
    """Smallness conditions with the sizes tied to ``|xi|`` as in the initial step."""
    return check_smallness(b, *_coupled(b, xi_abs, A0))


def smallness_threshold(b: ExponentBudget, A0: float = 1.0, iters: int = 200) -> float:
    """Largest ``|xi|`` (to bisection accuracy) at which all conditions pass.

    Bisection runs on ``log10|xi|`` over a fixed bracket with a fixed number of
    iterations so the result is reproducible bit for bit.
    """
    lo, hi = -300.0, 0.0
    if not check_smallness_at_xi(b, 10.0 ** lo, A0).all_pass:
        raise BudgetError("unsatisfiable", "smallness fails even at |xi| = 1e-300")
    if check_smallness_at_xi(b, 10.0 ** hi, A0).all_pass:
        return 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if check_smallness_at_xi(b, 10.0 ** mid, A0).all_pass:
            lo = mid
        else:
            hi = mid
    return 10.0 ** lo


@dataclass(frozen=True)
class IterationSchedule:
    n: int
    log2K: float
    gamma: float
    G: float
    R: float
    a: float
    r: float
    s: float
    rho: float
    n_star: int

    @property
    def K(self) -> float:
        return 2.0 ** self.log2K if self.log2K < 1023 else math.inf


def schedule(b: ExponentBudget, n: int, K0: float, gamma0: float, a0: float, r0: float,
             s0: float, G0: float, R0: float) -> IterationSchedule:
    if n < 0:
        raise BudgetError("precondition", "n must be >= 0")
    geo = sum(Fraction(1, 2 ** j) for j in range(1, n + 1))
    gamma = gamma0
    for k in range(1, n + 1):
        gamma *= 1.0 - 2.0 ** (-(k + 2))
    shrink = float(1 - geo / 2)
    grow = float(1 + geo)
    n_star = math.ceil(n + math.log(float(b.kappa2) / float(b.kappa4)) / math.log(1.5))
    return IterationSchedule(
        n=n, log2K=math.log2(K0) * 1.5 ** n, gamma=gamma, G=G0 * grow, R=R0 * grow,
        a=a0 * shrink, r=r0 * shrink, s=s0 * shrink,
        rho=0.0 if n == 0 else 2.0 ** (-(n + 8)), n_star=n_star,
    )
