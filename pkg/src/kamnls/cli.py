"""Command line drivers.

Every subcommand reads one config file (YAML, or JSON which YAML also
parses), writes ``result.json`` plus CSV tables into ``--out`` and, with
``--plot``, two-column ``.dat`` series.  Exit codes: 0 ok, 2 config error,
3 precondition or structural error, 4 the parameter point is excluded.
"""
from __future__ import annotations

import csv
import json
import math
import sys
import warnings
from fractions import Fraction
from pathlib import Path
from typing import Optional

import click
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_EXCLUDED = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Truncation(_Strict):
    J: int = Field(24, gt=0)
    L: int = Field(5, gt=0)
    K: int = Field(8, gt=0)
    K0: float = Field(1.2, gt=1.0)


class BudgetSeeds(_Strict):
    mu1: int = Field(0, ge=0)
    kappa1_seed: int = Field(0, ge=0)
    kappa2_seed: int = Field(0, ge=0)


class ReduceOptions(_Strict):
    L: int = Field(6, gt=0)
    J: int = Field(12, gt=0)
    Lt: int = Field(2, gt=0)
    jmax: int = Field(10, gt=0)
    sweeps: int = Field(3, ge=0)


class RunConfig(_Strict):
    coefficients: list[float] = Field(default_factory=lambda: [1.0] + [0.0] * 7)
    sites: list[int] = Field(default_factory=lambda: [1, 4])
    xi: Optional[list[float]] = None
    xi_abs: float = Field(1e-4, ge=0)
    eps: float = Field(0.05, gt=0)
    gamma0: float = Field(1e-3, gt=0)
    gamma0_list: Optional[list[float]] = None
    tau: float = Field(3.0, gt=0)
    jmax: int = Field(20, gt=0)
    samples: int = Field(100_000, gt=0)
    steps: int = Field(3, ge=0)
    seed: int = Field(0, ge=0)
    nf_J: int = Field(6, gt=0)
    truncation: Truncation = Field(default_factory=Truncation)
    budget: BudgetSeeds = Field(default_factory=BudgetSeeds)
    reduce: ReduceOptions = Field(default_factory=ReduceOptions)

    @field_validator("coefficients")
    @classmethod
    def _eight(cls, v):
        if len(v) != 8:
            raise ValueError("coefficients must list a1..a8")
        return v

    @field_validator("sites")
    @classmethod
    def _sites(cls, v):
        if not v or any(s <= 0 for s in v) or len(set(v)) != len(v):
            raise ValueError("sites must be distinct positive integers")
        return sorted(v)

    @model_validator(mode="after")
    def _xi(self):
        if self.xi is not None:
            if len(self.xi) != len(self.sites) or any(x < 0 for x in self.xi):
                raise ValueError("xi must be nonnegative with one entry per site")
        if self.gamma0_list is not None and any(g <= 0 for g in self.gamma0_list):
            raise ValueError("gamma0_list entries must be positive")
        return self

    def xi_vector(self) -> np.ndarray:
        if self.xi is not None:
            return np.asarray(self.xi, float)
        w = 1.0 + np.mod(np.arange(1, len(self.sites) + 1) * 0.6180339887498949, 1.0)
        return self.xi_abs * w / w.sum()


class ConfigError(Exception):
    pass


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# deterministic output
# ---------------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, Fraction):
        return float(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, BaseModel):
        return _plain(obj.model_dump())
    return str(obj)


def dumps(obj, indent: int = 2) -> str:
    """JSON text with sorted keys and floats at 17 significant digits."""

    def enc(o, lvl):
        pad = " " * (indent * (lvl + 1))
        end = " " * (indent * lvl)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(k)}: {enc(o[k], lvl + 1)}" for k in sorted(o)]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, list):
            if not o:
                return "[]"
            return "[\n" + ",\n".join(pad + enc(v, lvl + 1) for v in o) + "\n" + end + "]"
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, int):
            return str(o)
        if isinstance(o, float):
            return format(o, ".17g") if math.isfinite(o) else "null"
        return json.dumps(o)

    return enc(_plain(obj), 0) + "\n"


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header: list, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_dat(path: Path, xs, ys, label: str) -> None:
    """Two whitespace-separated columns preceded by a ``#`` header line."""
    with path.open("w") as fh:
        fh.write(f"# {label}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{fmt(x)} {fmt(y)}\n")


class Outcome:
    def __init__(self, results: dict, tables: dict | None = None, series: dict | None = None,
                 status: int = EXIT_OK):
        self.results = results
        self.tables = tables or {}
        self.series = series or {}
        self.status = status


def emit(out: Path, command: str, cfg: RunConfig, outcome: Outcome, plot: bool, error: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.model_dump(),
        "status": outcome.status,
        "results": outcome.results,
    }
    if error:
        doc["error"] = error
    (out / "result.json").write_text(dumps(doc))
    for name, (header, rows) in outcome.tables.items():
        write_csv(out / f"{name}.csv", header, rows)
    if plot:
        for name, (xs, ys, label) in outcome.series.items():
            write_dat(out / f"{name}.dat", xs, ys, label)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _coeffs(cfg):
    from .nf_cubic import CubicCoefficients

    return CubicCoefficients.from_sequence(cfg.coefficients)


def do_classify(cfg: RunConfig) -> Outcome:
    from .twist import classify_coefficients, rank_oracle, twist_matrix, twist_polynomial

    a = _coeffs(cfg)
    d = len(cfg.sites)
    cls = classify_coefficients(a, d)
    M = twist_matrix(a, cfg.sites).M
    rank = rank_oracle(M)
    names = {"1": "a5 nonzero", "2": "a1 nonzero", "3a": "a4 zero, a8 nonzero", "3b": "a4 - a8 and (2d-1)a4 - a8 nonzero",
             "4a": "4a", "4b": "4b", "4c": "4c", "4d": "4d"}
    res = {
        "verdict": cls["verdict"],
        "resonant_branches": cls["resonant_branches"],
        "nonresonant_branches": cls["nonresonant_branches"],
        "branch_labels": [names.get(b, b) for b in cls["nonresonant_branches"]],
        "rank": rank,
        "d": d,
        "twist_polynomial": twist_polynomial(a)["coeffs"],
    }
    rows = [("resonant", b) for b in cls["resonant_branches"]] + [("non-resonant", b) for b in cls["nonresonant_branches"]]
    return Outcome(res, {"branches": (["list", "branch"], rows)})


def do_nf(cfg: RunConfig) -> Outcome:
    from .nf_cubic import _in_A1N, wbnf_transform

    a = _coeffs(cfg)
    out, data = wbnf_transform(None, a, cfg.sites, J=cfg.nf_J)
    S = set(cfg.sites) | {-v for v in cfg.sites}
    ref = max((abs(v) for c, m, v in data.field_in.degree_part(3).items()), default=0.0) or 1.0
    worst = 0.0
    for c, m, v in out.degree_part(3).items():
        if _in_A1N(c, m, S):
            worst = max(worst, abs(v) / ref)
    res = {
        "J": data.J,
        "removed_degree3": len(data.degree3_removed),
        "removed_degree5": len(data.degree5_removed),
        "exceptional_set": list(data.E),
        "max_relative_A1N_degree3": worst,
        "output_terms": out.n_terms(),
    }
    rows = [(c[0], c[1], " ".join(f"{s}:{j}" for s, j in m)) for c, m in data.degree3_removed]
    return Outcome(res, {"removed_degree3": (["sigma", "j", "monomial"], rows)})


def do_twist(cfg: RunConfig) -> Outcome:
    from .twist import (melnikov_affine, normal_vector, rank_oracle, twist_matrix, twist_polynomial)

    a = _coeffs(cfg)
    td = twist_matrix(a, cfg.sites)
    d = td.d
    xi = cfg.xi_vector()
    rows, scan = [], []
    from .spaces import ell_grid

    for ell in ell_grid(d, 2):
        if np.abs(ell).sum() > 2:
            continue
        for s1 in (1, -1):
            for s2 in (1, -1):
                if int(ell.sum()) + s1 != s2:
                    continue
                for j in range(1, min(cfg.jmax, 8) + 1):
                    for k in range(1, min(cfg.jmax, 8) + 1):
                        if j in cfg.sites or k in cfg.sites or (s1 == s2 and not ell.any() and j == k):
                            continue
                        Z, c = melnikov_affine(a, cfg.sites, ell, j, k, s1, s2)
                        scan.append((tuple(int(e) for e in ell), s1, j, s2, k, Z, float(np.linalg.norm(c))))
    res = {
        "M": td.M,
        "rank": rank_oracle(td.M),
        "identity_residual": td.identity_residual,
        "twist_polynomial": twist_polynomial(a)["coeffs"],
        "omega0": cfg.sites and (np.asarray(cfg.sites, float) ** 2 - td.M @ xi),
        "affine_scan_size": len(scan),
        "affine_min_slope": min((s[6] for s in scan if s[5] == 0), default=None),
    }
    rows = [(i, k, td.M[i, k]) for i in range(d) for k in range(d)]
    tables = {
        "twist_matrix": (["row", "col", "value"], rows),
        "affine_scan": (["ell", "s1", "j", "s2", "k", "Z", "slope_norm"],
                        [(" ".join(map(str, s[0])),) + s[1:] for s in scan]),
        "normal_vectors": (["j"] + [f"m{i}" for i in range(d)],
                           [(j, *normal_vector(a, cfg.sites, j)) for j in range(1, cfg.jmax + 1)]),
    }
    return Outcome(res, tables)


def do_regularize(cfg: RunConfig) -> Outcome:
    from .regularize import preliminary_step

    a = _coeffs(cfg)
    t = cfg.reduce
    records, lf, ledger = preliminary_step(a, cfg.sites, cfg.xi_vector(), cfg.truncation.K,
                                           cfg.gamma0 * cfg.xi_abs, t.L, t.J, cfg.tau)
    res = {"ledger": ledger, "records": [{"name": r.name, **r.info} for r in records]}
    rows = [(k, v) for k, v in ledger.items() if isinstance(v, (int, float))]
    return Outcome(res, {"ledger": (["quantity", "value"], rows)})


def do_reduce(cfg: RunConfig) -> Outcome:
    from .reduce import (OddBasis, descent_step, divisor_constants, enumerate_divisors, kam_reduce,
                         linear_bnf, psido_to_toeplitz)
    from .regularize import preliminary_step

    a = _coeffs(cfg)
    t = cfg.reduce
    _, lf, ledger = preliminary_step(a, cfg.sites, cfg.xi_vector(), cfg.truncation.K,
                                     cfg.gamma0 * cfg.xi_abs, t.L, t.J, cfg.tau)
    op, q = descent_step(lf.op, lf.F)
    a1_out = float(np.max(np.abs(op.a(1).coef), initial=0.0))
    js = tuple(j for j in range(1, t.jmax + 1) if j not in cfg.sites)
    basis = OddBasis(len(cfg.sites), t.Lt, js)
    red = psido_to_toeplitz(op, lf.omega, basis)
    red1, psi, r0, info = linear_bnf(red, cfg.sites)
    fin = kam_reduce(red1, t.sweeps, gamma=cfg.gamma0 * cfg.xi_abs, tau=cfg.tau)
    div = enumerate_divisors(cfg.sites, cfg.jmax, 2, omega=lf.omega)
    const = divisor_constants(cfg.sites, cfg.jmax, 2, lf.omega)
    sweeps = [e for e in fin.log if e.get("stage") == "kam" and "R_max" in e]
    res = {
        "a1_after_descent": a1_out,
        "q_norm": float(np.sqrt(np.sum(np.abs(q.coef) ** 2))),
        "linear_bnf": info,
        "r0": r0[: len(js)],
        "sweeps": sweeps,
        "excluded": fin.excluded,
        "mu_imaginary": fin.check_imaginary(),
        "min_nonresonant_integer_divisor": div["min_nonresonant_integer"],
        "min_nonresonant_actual_divisor": div["min_nonresonant_actual"],
        "resonant_tuples": len(div["resonant"]),
        "divisor_constants": const,
    }
    status = EXIT_EXCLUDED if fin.excluded else EXIT_OK
    tables = {"sweeps": (["sweep", "R_max", "R_dec"], [(e["sweep"], e["R_max"], e["R_dec"]) for e in sweeps]),
              "r0": (["j", "r0"], list(zip(js, r0[: len(js)])))}
    series = {"kam_sweeps": ([e["sweep"] for e in sweeps], [e["R_max"] for e in sweeps], "sweep R_max")}
    return Outcome(res, tables, series, status)


def do_measure(cfg: RunConfig) -> Outcome:
    from .melnikov import cantor_measure, gamma_scaling, inclusion_scan, membership, spec_from_twist

    a = _coeffs(cfg)
    spec = spec_from_twist(a, cfg.sites, cfg.eps, cfg.gamma0, cfg.tau, cfg.truncation.K, cfg.jmax)
    gl = cfg.gamma0_list or [cfg.gamma0, 2 * cfg.gamma0, 4 * cfg.gamma0]
    fit = gamma_scaling(spec, gl, cfg.samples, cfg.seed)
    steps = max(1, cfg.steps)
    seq = [spec.with_(gamma=spec.gamma * (1 + 2.0**-n), K=max(1, cfg.truncation.K - steps + 1 + n))
           for n in range(steps)]
    rep = cantor_measure(seq, cfg.samples, cfg.seed)
    rep.gamma_fit = fit
    if cfg.xi is None:
        w = np.mod(np.arange(1, len(cfg.sites) + 1) * 0.6180339887498949, 1.0)
        xi = cfg.eps**2 * (0.5 + w)
    else:
        xi = cfg.xi_vector()
    mem = membership(xi, spec)
    excluded = not (mem["in_S"] and mem["in_P"] and mem["in_Lambda"])
    inc = inclusion_scan(a, cfg.sites, [cfg.eps * f for f in (0.01, 0.03, 0.1, 0.3, 1.0)], cfg.gamma0,
                         cfg.tau, min(cfg.truncation.K, 4), min(cfg.jmax, 12),
                         samples=min(cfg.samples, 20_000), seed=cfg.seed)
    fr = fit["fraction"]
    res = {"report": rep.as_dict(), "membership": mem, "xi": xi, "inclusion": inc,
           "ratio": fr[1] / fr[0] if len(fr) > 1 and fr[0] > 0 else None}
    tables = {
        "gamma_scaling": (["gamma0", "fraction"], list(zip(fit["gamma0"], fit["fraction"]))),
        "per_step": (["n", "gamma", "K", "step_excluded", "surviving"],
                     [(s["n"], s["gamma"], s["K"], s["step_excluded"], s["surviving"]) for s in rep.per_step]),
        "per_slab": (["tuple", "hits", "measure", "scale"],
                     [(" ".join(map(str, s["tuple"])), s["hits"], s["measure"], s["scale"]) for s in rep.per_slab]),
        "inclusion": (["eps", "xi_abs", "drift", "violations"],
                      [(r["eps"], r["xi_abs"], r["drift"], r["violations"]) for r in inc["rows"]]),
    }
    series = {"gamma_scaling": (fit["gamma0"], fit["fraction"], "gamma0 excluded_fraction")}
    return Outcome(res, tables, series, EXIT_EXCLUDED if excluded else EXIT_OK)


def do_iterate(cfg: RunConfig) -> Outcome:
    from .orchestrator import build_initial, extract_embedding, run

    a = _coeffs(cfg)
    tr = cfg.truncation
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        st = build_initial(a, cfg.sites, cfg.xi_vector(), Lb=tr.L, J=tr.J, gamma0=cfg.gamma0, K0=tr.K0)
    st = run(st, cfg.steps)
    emb = extract_embedding(st)
    led = st.ledger
    res = {
        "flags": st.flags,
        "ledger": led,
        "defects": [e["defect"] for e in led],
        "omega_inf": emb["omega_inf"],
        "omega0": emb["omega0"],
        "omega_drift": emb["omega_drift"],
        "correction_norm": emb["correction_norm"],
        "odd_error": emb["odd_error"],
        "reversibility_error": emb["reversibility_error"],
        "eps0": st.eps0,
    }
    tables = {"ledger": (["n", "defect", "delta", "correction", "omega_drift", "K"],
                         [(e["n"], e["defect"], e["delta"], e["correction"], e["omega_drift"], e["K"]) for e in led])}
    series = {"defect": ([e["n"] for e in led], [e["defect"] for e in led], "step defect")}
    return Outcome(res, tables, series)


def do_report(cfg: RunConfig, out: Path) -> Outcome:
    rows, found = [], {}
    for p in sorted(out.glob("*/result.json")):
        doc = json.loads(p.read_text())
        found[p.parent.name] = {"command": doc.get("command"), "status": doc.get("status")}
        rows.append((p.parent.name, doc.get("command"), doc.get("status")))
    from .params import derive_budget, constraint_residuals

    b = derive_budget(len(cfg.sites), mu1=cfg.budget.mu1, kappa1_seed=cfg.budget.kappa1_seed,
                      kappa2_seed=cfg.budget.kappa2_seed)
    res = {"runs": found, "budget": b.as_dict(), "budget_slack": {k: float(v) for k, v in constraint_residuals(b).items()}}
    return Outcome(res, {"summary": (["run", "command", "status"], rows)})


COMMANDS = {
    "classify": do_classify, "nf": do_nf, "twist": do_twist, "regularize": do_regularize,
    "reduce": do_reduce, "measure": do_measure, "iterate": do_iterate,
}


def _module_errors():
    from .melnikov import MelnikovError
    from .nf_cubic import NFError
    from .orchestrator import OrchestratorError
    from .params import BudgetError
    from .psido import PsiDError
    from .reduce import ReduceError
    from .regularize import RegularizeError
    from .spaces import SpaceError
    from .twist import TwistError

    return {MelnikovError: "melnikov", NFError: "nf_cubic", OrchestratorError: "orchestrator",
            BudgetError: "params", PsiDError: "psido", ReduceError: "reduce", RegularizeError: "regularize",
            SpaceError: "spaces", TwistError: "twist"}


def execute(command: str, config: Optional[str], out: str, seed: Optional[int], plot: bool,
            samples: Optional[int], steps: Optional[int]) -> int:
    try:
        cfg = load_config(config, {"seed": seed, "samples": samples, "steps": steps})
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    outp = Path(out)
    try:
        outcome = do_report(cfg, outp) if command == "report" else COMMANDS[command](cfg)
    except tuple(_module_errors()) as exc:
        tag = _module_errors()[type(exc)]
        code = getattr(exc, "code", "error")
        click.echo(f"[{tag}] {exc}", err=True)
        emit(outp, command, cfg, Outcome({}, status=EXIT_PRECONDITION), False,
             {"module": tag, "code": code, "message": str(exc)})
        return EXIT_PRECONDITION
    emit(outp, command, cfg, outcome, plot)
    return outcome.status


def _common(f):
    f = click.option("--steps", type=int, default=None, help="Iteration steps.")(f)
    f = click.option("--samples", type=int, default=None, help="Monte Carlo samples.")(f)
    f = click.option("--plot", is_flag=True, help="Also write .dat plot series.")(f)
    f = click.option("--seed", type=int, default=None, help="Random seed.")(f)
    f = click.option("--out", "out", type=click.Path(file_okay=False), default="out", show_default=True)(f)
    f = click.option("--config", "config", type=click.Path(dir_okay=False), default=None)(f)
    return f


@click.group()
@click.version_option(__version__)
def main():
    """KAM toolkit for quasi-linear Schroedinger equations."""


def _register(name: str, help_text: str):
    @main.command(name=name, help=help_text)
    @_common
    def _cmd(config, out, seed, plot, samples, steps):
        sys.exit(execute(name, config, out, seed, plot, samples, steps))

    return _cmd


for _name, _help in [
    ("classify", "Classify the cubic coefficients and report the twist rank."),
    ("nf", "Weak normal form certificate."),
    ("twist", "Twist matrix, twist polynomial and affine divisor scan."),
    ("regularize", "One regularization pass at the leading torus."),
    ("reduce", "Descent, linear normal form and reduction sweeps."),
    ("measure", "Monte Carlo excluded measure and gamma scaling."),
    ("iterate", "Quasi-Newton torus iteration."),
    ("report", "Aggregate result files found under --out."),
]:
    _register(_name, _help)


if __name__ == "__main__":  # pragma: no cover
    main()
