"""Synthetic bag generation with instance-level ground truth, plus bag I/O.

A bag is N instance feature vectors (N x D float64) with one task label.
Synthetic generators plant a known signal: key instances are shifted along a
fixed random direction, and ``truth_mask`` records which instances carry it.
The mask is evaluation metadata only; models and explainers never see it.

Bag file format (little endian): 8 ASCII magic bytes ``XMILBAG1``, u32 N,
u32 D, N*D f64 features row major, u8 mask-present flag, then N bytes of 0/1
if present. Labels and split assignments live in the dataset manifest (JSON),
keyed by bag id.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

BAG_MAGIC = b"XMILBAG1"


class BagFormatError(ValueError):
    """Raised when a bag file or manifest fails to parse or validate."""


@dataclass
class TaskLabel:
    """Exactly one task variant: class index, real value, or survival triple."""

    kind: str  # "classification" | "regression" | "survival"
    class_index: Optional[int] = None
    value: Optional[float] = None
    interval: Optional[int] = None   # discretized event time in [1, K]
    censored: Optional[int] = None   # 1 = censored
    raw_time: Optional[float] = None

    def to_json(self) -> dict:
        if self.kind == "classification":
            return {"kind": self.kind, "class": self.class_index}
        if self.kind == "regression":
            return {"kind": self.kind, "value": self.value}
        return {"kind": self.kind, "interval": self.interval,
                "censored": self.censored, "raw_time": self.raw_time}

    @staticmethod
    def from_json(d: dict) -> "TaskLabel":
        kind = d["kind"]
        if kind == "classification":
            return TaskLabel(kind, class_index=int(d["class"]))
        if kind == "regression":
            return TaskLabel(kind, value=float(d["value"]))
        if kind == "survival":
            return TaskLabel(kind, interval=int(d["interval"]),
                             censored=int(d["censored"]),
                             raw_time=float(d["raw_time"]))
        raise BagFormatError(f"unknown label kind {kind!r}")


@dataclass
class Bag:
    id: str
    features: np.ndarray                       # [N, D] float64
    label: Optional[TaskLabel] = None
    positions: Optional[np.ndarray] = None     # [N, 2] int grid coords
    truth_mask: Optional[np.ndarray] = None    # [N] bool

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]


def grid_positions(n: int) -> np.ndarray:
    """Row-major square grid coordinates for plotting n instances."""
    side = max(1, math.ceil(math.sqrt(n)))
    idx = np.arange(n)
    return np.stack([idx // side, idx % side], axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# bag file I/O
# --------------------------------------------------------------------------

def save_bag(bag: Bag, path) -> None:
    feats = np.ascontiguousarray(bag.features, dtype="<f8")
    n, d = feats.shape
    blob = bytearray()
    blob += BAG_MAGIC
    blob += struct.pack("<II", n, d)
    blob += feats.tobytes()
    if bag.truth_mask is not None:
        if len(bag.truth_mask) != n:
            raise BagFormatError("truth_mask length does not match N")
        blob += b"\x01"
        blob += np.asarray(bag.truth_mask, dtype=np.uint8).tobytes()
    else:
        blob += b"\x00"
    Path(path).write_bytes(bytes(blob))


def load_bag(path, label: Optional[TaskLabel] = None) -> Bag:
    raw = Path(path).read_bytes()
    if len(raw) < len(BAG_MAGIC) + 8:
        raise BagFormatError(f"truncated bag file {path}")
    if raw[:8] != BAG_MAGIC:
        raise BagFormatError(
            f"bad magic {raw[:8]!r} in {path} (expected {BAG_MAGIC!r})")
    n, d = struct.unpack_from("<II", raw, 8)
    if n < 1 or d < 1:
        raise BagFormatError(f"invalid dimensions N={n}, D={d} in {path}")
    off = 16
    nbytes = n * d * 8
    if len(raw) < off + nbytes + 1:
        raise BagFormatError(f"truncated feature block in {path}")
    feats = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off)
    feats = feats.reshape(n, d).copy()
    off += nbytes
    has_mask = raw[off]
    off += 1
    mask = None
    if has_mask == 1:
        if len(raw) < off + n:
            raise BagFormatError(f"truncated truth mask in {path}")
        mask = np.frombuffer(raw, dtype=np.uint8, count=n,
                             offset=off).astype(bool)
    elif has_mask != 0:
        raise BagFormatError(f"invalid mask flag {has_mask} in {path}")
    return Bag(id=Path(path).stem, features=feats, label=label,
               positions=grid_positions(n), truth_mask=mask)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory dataset: bags plus the manifest-level metadata."""

    task: str
    bags: list
    d: int
    splits: dict = field(default_factory=dict)   # split name -> list of ids
    groups: dict = field(default_factory=dict)   # bag id -> fold group [0,5)
    n_classes: Optional[int] = None
    n_intervals: Optional[int] = None
    reference_value: Optional[float] = None
    generator: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def bag_by_id(self, bag_id: str) -> Bag:
        for b in self.bags:
            if b.id == bag_id:
                return b
        raise KeyError(bag_id)

    def split_bags(self, split: str) -> list:
        ids = set(self.splits.get(split, []))
        return [b for b in self.bags if b.id in ids]


def _assign_splits(ids, seed, fractions=(0.6, 0.2, 0.2)):
    rng = np.random.default_rng(seed)
    order = list(ids)
    rng.shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    splits = {"train": sorted(order[:n_train]),
              "val": sorted(order[n_train:n_train + n_val]),
              "test": sorted(order[n_train + n_val:])}
    groups = {bid: i % 5 for i, bid in enumerate(order)}
    return splits, groups


def _finalize(task, bags, d, seed, generator, **extra) -> Dataset:
    splits, groups = _assign_splits([b.id for b in bags], seed + 777)
    return Dataset(task=task, bags=bags, d=d, splits=splits, groups=groups,
                   generator=generator, seed=seed, **extra)


def generate_classification_bags(n_bags, n_range=(96, 320), d=24,
                                 witness_rate=0.1, signal_shift=2.0,
                                 seed=0, positive_fraction=0.5) -> Dataset:
    """Balanced binary bags: a bag is positive iff it contains at least one
    key instance; key instances are background noise shifted by
    ``signal_shift`` along a fixed random unit direction."""
    if not 0.0 <= witness_rate <= 1.0:
        raise ValueError("witness_rate must be in [0, 1]")
    if signal_shift <= 0:
        raise ValueError("signal_shift must be positive")
    n_pos = int(round(positive_fraction * n_bags))
    if witness_rate == 0.0 and n_pos > 0:
        raise ValueError("cannot construct positive bags with witness_rate 0")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    bags = []
    for i in range(n_bags):
        label = 1 if i < n_pos else 0
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        feats = rng.standard_normal((n, d))
        mask = np.zeros(n, dtype=bool)
        if label == 1:
            mask = rng.random(n) < witness_rate
            if not mask.any():
                mask[int(rng.integers(n))] = True
            feats[mask] += signal_shift * direction
        bags.append(Bag(id=f"bag{i:04d}", features=feats,
                        label=TaskLabel("classification", class_index=label),
                        positions=grid_positions(n), truth_mask=mask))
    gen = {"name": "classification", "n_bags": n_bags,
           "n_range": list(n_range), "d": d, "witness_rate": witness_rate,
           "signal_shift": signal_shift,
           "positive_fraction": positive_fraction,
           "direction": direction.tolist()}
    return _finalize("classification", bags, d, seed, gen, n_classes=2)


def generate_regression_bags(n_bags, n_range=(96, 320), d=24,
                             signal_scale=2.0, noise_sd=0.1,
                             seed=0) -> Dataset:
    """Bag value = mean instance contribution * scale + noise, where the
    contribution is the projection onto a fixed direction. truth_mask marks
    the top-quartile contributors of each bag."""
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    bags = []
    for i in range(n_bags):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        feats = rng.standard_normal((n, d))
        contrib = feats @ direction
        value = float(np.mean(contrib) * signal_scale
                      + rng.normal(0.0, noise_sd))
        mask = contrib >= np.quantile(contrib, 0.75)
        bags.append(Bag(id=f"bag{i:04d}", features=feats,
                        label=TaskLabel("regression", value=value),
                        positions=grid_positions(n), truth_mask=mask))
    gen = {"name": "regression", "n_bags": n_bags, "n_range": list(n_range),
           "d": d, "signal_scale": signal_scale, "noise_sd": noise_sd,
           "direction": direction.tolist()}
    ds = _finalize("regression", bags, d, seed, gen)
    train_ids = set(ds.splits["train"])
    train_vals = [b.label.value for b in bags if b.id in train_ids]
    ds.reference_value = float(np.median(train_vals)) if train_vals else 0.0
    return ds


def generate_survival_bags(n_bags, n_range=(96, 320), d=24, base_rate=0.1,
                           censor_rate=0.05, k_intervals=4, seed=0,
                           witness_rate=0.2, signal_shift=2.0) -> Dataset:
    """Latent risk = fraction of key instances; event times are exponential
    with rate base_rate * exp(risk); censoring is an independent exponential
    clock. Intervals come from ``discretize_event_times``."""
    if k_intervals < 2:
        raise ValueError("k_intervals must be >= 2")
    if base_rate <= 0 or censor_rate <= 0:
        raise ValueError("rates must be positive")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    feats_all, masks, times, censored = [], [], [], []
    for _ in range(n_bags):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        feats = rng.standard_normal((n, d))
        mask = rng.random(n) < witness_rate
        feats[mask] += signal_shift * direction
        risk = float(mask.mean())
        t_event = rng.exponential(1.0 / (base_rate * math.exp(risk)))
        t_cens = rng.exponential(1.0 / censor_rate)
        feats_all.append(feats)
        masks.append(mask)
        times.append(min(t_event, t_cens))
        censored.append(1 if t_cens < t_event else 0)
    intervals = discretize_event_times(np.array(times), np.array(censored),
                                       k_intervals)
    bags = []
    for i, (feats, mask) in enumerate(zip(feats_all, masks)):
        label = TaskLabel("survival", interval=int(intervals[i]),
                          censored=censored[i], raw_time=float(times[i]))
        bags.append(Bag(id=f"bag{i:04d}", features=feats, label=label,
                        positions=grid_positions(len(feats)),
                        truth_mask=mask))
    gen = {"name": "survival", "n_bags": n_bags, "n_range": list(n_range),
           "d": d, "base_rate": base_rate, "censor_rate": censor_rate,
           "k_intervals": k_intervals, "witness_rate": witness_rate,
           "signal_shift": signal_shift, "direction": direction.tolist()}
    return _finalize("survival", bags, d, seed, gen, n_intervals=k_intervals)


def discretize_event_times(times, censored_flags, k_intervals=4) -> np.ndarray:
    """Map observed times to intervals 1..K whose edges are the K-quantiles
    of the uncensored event times. Times beyond the last edge (censored or
    not) clamp to interval K; degenerate edges collapse to interval 1."""
    times = np.asarray(times, dtype=float)
    censored_flags = np.asarray(censored_flags, dtype=int)
    uncensored = times[censored_flags == 0]
    if uncensored.size < k_intervals:
        raise ValueError(
            f"need at least {k_intervals} uncensored events, "
            f"got {uncensored.size}")
    qs = [i / k_intervals for i in range(1, k_intervals)]
    edges = np.quantile(uncensored, qs)
    return np.searchsorted(edges, times, side="left") + 1


# --------------------------------------------------------------------------
# manifest I/O
# --------------------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write bag files plus manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for bag in ds.bags:
        rel = f"bags/{bag.id}.xmb"
        save_bag(bag, out_dir / rel)
        entries[bag.id] = {"path": rel, "label": bag.label.to_json(),
                           "group": ds.groups.get(bag.id, 0)}
    manifest = {
        "task": ds.task,
        "dims": ds.d,
        "n_classes": ds.n_classes,
        "n_intervals": ds.n_intervals,
        "reference_value": ds.reference_value,
        "splits": ds.splits,
        "bags": entries,
        "generator": ds.generator,
        "seed": ds.seed,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BagFormatError(f"manifest is not valid JSON: {exc}") from exc
    root = manifest_path.parent
    splits = manifest["splits"]
    seen = {}
    for name, ids in splits.items():
        for bid in ids:
            if bid in seen:
                raise BagFormatError(
                    f"bag {bid!r} assigned to both {seen[bid]!r} and {name!r}")
            seen[bid] = name
    bags, groups = [], {}
    for bid in sorted(manifest["bags"]):
        entry = manifest["bags"][bid]
        path = root / entry["path"]
        if not path.exists():
            raise BagFormatError(f"missing bag file {path}")
        bag = load_bag(path, label=TaskLabel.from_json(entry["label"]))
        bag.id = bid
        bags.append(bag)
        groups[bid] = int(entry.get("group", 0))
    ref = manifest.get("reference_value")
    return Dataset(task=manifest["task"], bags=bags, d=int(manifest["dims"]),
                   splits=splits, groups=groups,
                   n_classes=manifest.get("n_classes"),
                   n_intervals=manifest.get("n_intervals"),
                   reference_value=None if ref is None else float(ref),
                   generator=manifest.get("generator", {}),
                   seed=manifest.get("seed"))


def generate_dataset(config: dict, seed: int) -> Dataset:
    """Dispatch on config['name'] to the matching generator."""
    cfg = dict(config)
    name = cfg.pop("name")
    cfg.pop("direction", None)
    if name == "classification":
        return generate_classification_bags(seed=seed, **cfg)
    if name == "regression":
        return generate_regression_bags(seed=seed, **cfg)
    if name == "survival":
        return generate_survival_bags(seed=seed, **cfg)
    raise ValueError(f"unknown generator {name!r}")
