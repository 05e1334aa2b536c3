"""Patch flipping: progressive instance removal guided by heatmap order.

Instances are stable-sorted by score (ties broken by instance index), split
into 100 contiguous chunks of size floor(N*i/100) - floor(N*(i-1)/100), and
removed chunk by chunk while the model output is re-recorded:

    X_0 = X,   X_m = union of chunks m+1..100,   m = 1..100

At m = 100 the bag is empty and a single all-zero feature vector is passed
instead. The area under the 101-point curve is AUPC = sum(curve) / 100, and
SRG = AUPC(ascending) - AUPC(descending); a larger SRG means a more
faithful heatmap. Only the score ordering enters the partitioning, so SRG
is exactly invariant under strictly increasing transforms of the scores.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bags import Bag
from .explain import ExplanationTarget, Heatmap, tracked_output
from .models import ModelCheckpoint, forward_bag

N_CHUNKS = 100

ORDERINGS = ("ascending", "descending")


@dataclass
class PartitionPlan:
    ordering: str
    chunks: list  # 100 index arrays; chunk 0 holds the extreme instances

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")


@dataclass
class PerturbationRecord:
    bag_id: str
    method: str
    curve_ascending: np.ndarray      # 101 outputs
    curve_descending: np.ndarray
    aupc_ascending: float
    aupc_descending: float
    srg: float


def partition_patches(heatmap: Heatmap, ordering: str) -> PartitionPlan:
    """Stable sort by (score under the ordering, then instance index) and
    slice into 100 contiguous chunks; chunks may be empty when N < 100."""
    scores = heatmap.scores
    n = scores.shape[0]
    if n < 1:
        raise ValueError("need at least one instance")
    key = scores if ordering == "ascending" else -scores
    order = np.argsort(key, kind="stable")
    bounds = [(n * i) // N_CHUNKS for i in range(N_CHUNKS + 1)]
    chunks = [order[bounds[i]:bounds[i + 1]] for i in range(N_CHUNKS)]
    return PartitionPlan(ordering, chunks)


def flip_curve(checkpoint: ModelCheckpoint, bag: Bag, plan: PartitionPlan,
               target: ExplanationTarget, track: str = "softmax",
               full_output: float = None) -> np.ndarray:
    """The 101 tracked outputs along the removal schedule. ``full_output``
    (the m = 0 value) can be passed in so both orderings share it."""
    n = bag.n_instances
    total = sum(len(c) for c in plan.chunks)
    if total != n:
        raise ValueError("partition plan does not cover the bag")
    outputs = np.empty(N_CHUNKS + 1)
    if full_output is None:
        full_output = tracked_output(target,
                                     forward_bag(checkpoint, bag.features),
                                     track)
    outputs[0] = full_output
    mask = np.ones(n, dtype=bool)
    for m in range(1, N_CHUNKS + 1):
        mask[plan.chunks[m - 1]] = False
        remaining = np.flatnonzero(mask)  # original instance order
        if remaining.size:
            feats = bag.features[remaining]
        else:
            feats = np.zeros((1, bag.features.shape[1]))
        outputs[m] = tracked_output(target, forward_bag(checkpoint, feats),
                                    track)
    return outputs


def aupc(curve) -> float:
    """Area under the perturbation curve: sum of the 101 outputs / 100."""
    curve = np.asarray(curve, dtype=float)
    if curve.shape != (N_CHUNKS + 1,):
        raise ValueError(f"curve must have {N_CHUNKS + 1} points")
    return float(curve.sum() / N_CHUNKS)


def srg(record: PerturbationRecord) -> float:
    return record.aupc_ascending - record.aupc_descending


def evaluate_heatmap(checkpoint: ModelCheckpoint, bag: Bag,
                     heatmap: Heatmap, track: str = "softmax"
                     ) -> PerturbationRecord:
    """Both orderings for one (bag, heatmap); m = 0 is computed once."""
    target = heatmap.target
    full = tracked_output(target, forward_bag(checkpoint, bag.features),
                          track)
    curve_asc = flip_curve(checkpoint, bag,
                           partition_patches(heatmap, "ascending"),
                           target, track, full_output=full)
    curve_desc = flip_curve(checkpoint, bag,
                            partition_patches(heatmap, "descending"),
                            target, track, full_output=full)
    a_asc, a_desc = aupc(curve_asc), aupc(curve_desc)
    return PerturbationRecord(bag.id, heatmap.method, curve_asc, curve_desc,
                              a_asc, a_desc, a_asc - a_desc)


@dataclass
class CohortResult:
    bag_ids: list
    methods: list
    srg_matrix: np.ndarray           # [n_bags, n_methods]
    records: list                    # PerturbationRecord, bag-major order


def evaluate_cohort(checkpoint: ModelCheckpoint, bags: list, heatmaps: dict,
                    track: str = "softmax", threads: int = 1) -> CohortResult:
    """Flip every (bag, method) cell. ``heatmaps`` maps (bag_id, method) to
    a Heatmap; a missing cell is an error. Cells are independent, so they
    may be evaluated in parallel; results merge in (bag, method) order."""
    bag_ids = [b.id for b in bags]
    methods = sorted({m for (_, m) in heatmaps})
    cells = []
    for bag in bags:
        for method in methods:
            if (bag.id, method) not in heatmaps:
                raise KeyError(f"missing heatmap for ({bag.id}, {method})")
            cells.append((bag, heatmaps[(bag.id, method)]))

    def work(cell):
        bag, hm = cell
        return evaluate_heatmap(checkpoint, bag, hm, track)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, cells))
    else:
        records = [work(c) for c in cells]
    matrix = np.array([r.srg for r in records]).reshape(len(bags),
                                                        len(methods))
    return CohortResult(bag_ids, methods, matrix, records)


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

def save_curves_csv(records: list, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag_id", "method", "ordering", "m", "output"])
        for rec in records:
            for name, curve in (("ascending", rec.curve_ascending),
                                ("descending", rec.curve_descending)):
                for m, out in enumerate(curve):
                    writer.writerow([rec.bag_id, rec.method, name, m,
                                     repr(float(out))])


def save_srg_csv(records: list, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag_id", "method", "aupc_asc", "aupc_desc", "srg"])
        for rec in records:
            writer.writerow([rec.bag_id, rec.method,
                             repr(float(rec.aupc_ascending)),
                             repr(float(rec.aupc_descending)),
                             repr(float(rec.srg))])


def load_srg_csv(path):
    """Returns (bag_ids, methods, srg matrix) from a flip-stage CSV."""
    rows = list(csv.reader(Path(path).open()))
    if not rows or rows[0][:2] != ["bag_id", "method"]:
        raise ValueError(f"bad SRG CSV header in {path}")
    cells = {(r[0], r[1]): float(r[4]) for r in rows[1:]}
    bag_ids = sorted({k[0] for k in cells})
    methods = sorted({k[1] for k in cells})
    matrix = np.empty((len(bag_ids), len(methods)))
    for i, bid in enumerate(bag_ids):
        for j, m in enumerate(methods):
            if (bid, m) not in cells:
                raise ValueError(f"missing SRG cell ({bid}, {m})")
            matrix[i, j] = cells[(bid, m)]
    return bag_ids, methods, matrix
