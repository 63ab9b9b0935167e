"""Measure-suite helpers: pruning soundness and per-slab bounds with a model-derived constant."""
import numpy as np

from kamnls.melnikov import (
    TupleSet, _affine_parts, _binomial_ci, _psi, _threshold, enumerate_tuples, excluded_fraction, prune, sample_box,
)

CUBE_SECTION = np.sqrt(2.0)


def pruned_hits(spec, pts, chunk=64):
    """Sampled hits of every tuple discarded by the size prune or the gap guard, per family and rule."""
    out = {}
    for fam, ts in enumerate_tuples(spec).items():
        _, size, gap = prune(spec, ts)
        for rule, sub in (("size", size), ("gap", gap)):
            thr = _threshold(spec, sub)
            hits = 0
            for st in range(0, len(sub), chunk):
                idx = np.arange(st, min(len(sub), st + chunk))
                hits += int((np.abs(_psi(spec, sub.subset(idx), pts)) < thr[idx][:, None]).sum())
            out[(fam, rule)] = (len(sub), hits)
    return out


def slab_constant(spec, row):
    """``4 sqrt(2) |Delta| / (|c| <l>)``: the affine slab volume over ``gamma eps^(2(d-1)) <l>^(1-tau)``.

    A slab ``|Z + c.xi| < t`` meets the cube of side ``eps^2`` in at most
    ``(2t/|c|) sqrt(2) eps^(2(d-1))`` (largest hyperplane section of a cube).
    """
    fam, ell, s1, j, s2, k = row
    ts = TupleSet(fam, np.array([ell]), np.array([s1]), np.array([j]), np.array([s2]), np.array([k]))
    _, C = _affine_parts(spec, ts)
    c = float(np.linalg.norm(C[0]))
    return 4 * CUBE_SECTION * ts.delta()[0] / (c * ts.bracket()[0])


def slab_check(spec, samples, seed=0):
    """Per-slab measures against the fitted constant ``max_t slab_constant``."""
    r = excluded_fraction(spec, samples, seed)
    rows = [s["tuple"] for s in r["per_slab"]]
    if not rows:
        return {"C": 0.0, "worst": 0.0, "n": 0}
    C = max(slab_constant(spec, t) for t in rows)
    n = r["samples"]
    point = max(s["measure"] / s["scale"] for s in r["per_slab"])
    low = max(_binomial_ci(s["hits"], n)[0] * spec.volume() / s["scale"] for s in r["per_slab"])
    return {"C": C, "worst": point, "worst_ci_low": low, "n": len(rows), "fraction": r["fraction"]}
