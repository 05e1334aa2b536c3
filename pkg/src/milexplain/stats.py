"""Cohort-level comparison of explanation methods from per-bag SRG scores.

Wilcoxon signed-rank effect size on paired differences d_i:

    W+ = sum of positive-difference ranks (ties get average ranks, zero
         differences are dropped)
    mu = n(n+1)/4,  sigma = sqrt(n(n+1)(2n+1)/24)
    z  = (W+ - mu) / sigma,  r = z / sqrt(n)

A positive r means the first method scored higher. Two-sided p-values come
from exact enumeration of all 2^n sign assignments for n <= 12 and from the
normal approximation (no continuity correction) above that; below n = 5 the
p-value is flagged unreliable. The robust companion effect is the
standardized median median(d) / (1.4826 * MAD(d)). Families of p-values are
Benjamini-Hochberg adjusted, magnitudes use the conventional thresholds
(|r| < 0.2 negligible, 0.2-0.5 weak to moderate, > 0.5 strong), and the
Mean Rank Score averages each method's per-bag faithfulness rank
(highest SRG = rank 1; average ranks on ties).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

MAD_NORMAL_CONSTANT = 1.4826

MAGNITUDE_THRESHOLDS = (0.2, 0.5)

EXACT_P_MAX_N = 12

MIN_RELIABLE_N = 5


@dataclass
class WilcoxonResult:
    effect_size: float
    p_value: float
    statistic: float      # W+
    n: int                # non-zero differences
    reliable: bool        # n >= 5


def wilcoxon_effect(diffs) -> WilcoxonResult:
    """Signed-rank effect size and two-sided p for paired differences."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise ValueError("all differences are zero; no test possible")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    mu = n * (n + 1) / 4.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0)
    z = (w_plus - mu) / sigma
    r = z / math.sqrt(n)
    if n <= EXACT_P_MAX_N:
        p = _exact_p(ranks, w_plus, mu)
    else:
        p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(effect_size=r, p_value=min(p, 1.0),
                          statistic=w_plus, n=n,
                          reliable=n >= MIN_RELIABLE_N)


def _exact_p(ranks, w_plus, mu):
    """P(|W - mu| >= |w_plus - mu|) by dynamic programming over the rank
    multiset (ranks are integers or half-integers; scale by 2)."""
    scaled = np.rint(2 * ranks).astype(int)
    total = scaled.sum()
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for s in scaled:
        shifted = np.zeros_like(counts)
        shifted[s:] = counts[:total + 1 - s]
        counts = counts + shifted
    counts /= counts.sum()
    sums = np.arange(total + 1) / 2.0
    return float(counts[np.abs(sums - mu) >= abs(w_plus - mu) - 1e-12].sum())


def median_mad_effect(diffs) -> float:
    """Standardized median median(d) / (1.4826 * MAD(d)); a zero MAD yields
    a signed infinity sentinel (0/0 stays 0)."""
    d = np.asarray(diffs, dtype=float)
    med = float(np.median(d))
    mad = float(np.median(np.abs(d - med)))
    if mad == 0.0:
        if med == 0.0:
            return 0.0
        return math.copysign(math.inf, med)
    return med / (MAD_NORMAL_CONSTANT * mad)


def fdr_adjust(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjustment, capped at 1."""
    p = np.asarray(pvals, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 1.0
    for rank in range(m - 1, -1, -1):
        i = order[rank]
        running = min(running, p[i] * m / (rank + 1))
        adjusted[i] = running
    return adjusted


def magnitude_class(effect: float) -> str:
    a = abs(effect)
    if a < MAGNITUDE_THRESHOLDS[0]:
        return "negligible"
    if a <= MAGNITUDE_THRESHOLDS[1]:
        return "weak-moderate"
    return "strong"


def mean_rank_scores(srg_matrix, methods) -> dict:
    """Per-bag ranks (highest SRG = rank 1, ties averaged) averaged over
    bags; matrix is [n_bags, n_methods]."""
    m = np.asarray(srg_matrix, dtype=float)
    if m.ndim != 2 or m.shape[1] != len(methods):
        raise ValueError("matrix must be [n_bags, n_methods]")
    if not np.all(np.isfinite(m)):
        raise ValueError("missing or non-finite SRG cells")
    ranks = np.apply_along_axis(lambda row: rankdata(-row), 1, m)
    return {meth: float(ranks[:, j].mean())
            for j, meth in enumerate(methods)}


# --------------------------------------------------------------------------
# comparison tables
# --------------------------------------------------------------------------

@dataclass
class PairComparison:
    method_a: str
    method_b: str
    effect_size: float
    median_mad: float
    p_raw: float
    p_adjusted: float = math.nan
    magnitude: str = ""
    n: int = 0
    reliable: bool = True


@dataclass
class ComparisonTable:
    methods: list
    pairs: list                       # PairComparison, FDR-adjusted
    mrs: dict                         # method -> mean rank score
    meta: dict = field(default_factory=dict)

    def pair(self, a: str, b: str) -> PairComparison:
        for p in self.pairs:
            if (p.method_a, p.method_b) == (a, b):
                return p
            if (p.method_a, p.method_b) == (b, a):
                return PairComparison(b, a, -p.effect_size, -p.median_mad,
                                      p.p_raw, p.p_adjusted, p.magnitude,
                                      p.n, p.reliable)
        raise KeyError((a, b))


def compare_methods(srg_matrix, methods, meta=None) -> ComparisonTable:
    """All pairwise Wilcoxon comparisons with FDR correction plus MRS."""
    m = np.asarray(srg_matrix, dtype=float)
    pairs = []
    for i, j in itertools.combinations(range(len(methods)), 2):
        d = m[:, i] - m[:, j]
        res = wilcoxon_effect(d)
        pairs.append(PairComparison(
            methods[i], methods[j], res.effect_size,
            median_mad_effect(d), res.p_value, n=res.n,
            reliable=res.reliable))
    adjusted = fdr_adjust([p.p_raw for p in pairs])
    for pair_row, adj in zip(pairs, adjusted):
        pair_row.p_adjusted = float(adj)
        pair_row.magnitude = magnitude_class(pair_row.effect_size)
    return ComparisonTable(list(methods), pairs,
                           mean_rank_scores(m, methods), dict(meta or {}))


def aggregate_effects(tables, group_name="overall") -> ComparisonTable:
    """Arithmetic mean of pairwise effect sizes (and MRS) across settings;
    p-values do not aggregate and are left out."""
    if not tables:
        raise ValueError("no tables to aggregate")
    methods = tables[0].methods
    for t in tables:
        if t.methods != methods:
            raise ValueError("method sets differ across tables")
    pairs = []
    for idx in range(len(tables[0].pairs)):
        rows = [t.pairs[idx] for t in tables]
        eff = float(np.mean([r.effect_size for r in rows]))
        med = float(np.mean([r.median_mad for r in rows]))
        pairs.append(PairComparison(rows[0].method_a, rows[0].method_b,
                                    eff, med, math.nan, math.nan,
                                    magnitude_class(eff),
                                    n=sum(r.n for r in rows)))
    mrs = {meth: float(np.mean([t.mrs[meth] for t in tables]))
           for meth in methods}
    return ComparisonTable(methods, pairs, mrs, {"group": group_name,
                                                 "n_settings": len(tables)})


def best_method(table: ComparisonTable) -> str:
    """Lowest MRS wins; ties break on mean pairwise effect size."""
    def mean_effect(meth):
        vals = []
        for other in table.methods:
            if other != meth:
                vals.append(table.pair(meth, other).effect_size)
        return float(np.mean(vals))

    return min(table.methods, key=lambda m: (table.mrs[m], -mean_effect(m)))


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def table_to_json(table: ComparisonTable) -> dict:
    return {
        "methods": table.methods,
        "mrs": {k: table.mrs[k] for k in sorted(table.mrs)},
        "pairs": [{
            "method_a": p.method_a, "method_b": p.method_b,
            "effect_size": p.effect_size, "median_mad": p.median_mad,
            "p_raw": p.p_raw, "p_adjusted": p.p_adjusted,
            "magnitude": p.magnitude, "n": p.n, "reliable": p.reliable,
        } for p in table.pairs],
        "meta": table.meta,
    }


def save_table_json(table: ComparisonTable, path) -> None:
    def clean(obj):
        if isinstance(obj, float) and math.isnan(obj):
            return None
        if isinstance(obj, float) and math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    Path(path).write_text(json.dumps(clean(table_to_json(table)), indent=2,
                                     sort_keys=True) + "\n")


def save_table_csv(table: ComparisonTable, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method_a", "method_b", "effect_size", "median_mad",
                         "p_raw", "p_adjusted", "magnitude", "n"])
        for p in table.pairs:
            writer.writerow([p.method_a, p.method_b,
                             repr(float(p.effect_size)),
                             repr(float(p.median_mad)),
                             repr(float(p.p_raw)),
                             repr(float(p.p_adjusted)),
                             p.magnitude, p.n])
