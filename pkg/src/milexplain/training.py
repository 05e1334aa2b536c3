"""Losses, optimizers, the bag-sampling training loop, and task metrics.

Training samples at most ``bag_sample_size`` instances per bag per epoch
(default 2048) and validates on full bags. The checkpoint with the best
validation metric (AUROC / Spearman / C-Index by task) is kept. Gradients
come from the computation graph; loss derivatives w.r.t. the head
pre-activations are analytic and seeded directly at the logits node.

Survival loss (discrete time, K intervals, S_0 = 1):
    L      = -c log S_y - (1 - c) [log S_{y-1} + log h_y]
    L_unc  = -(1 - c) [log S_{y-1} + log h_y]
    total  = (1 - beta) L + beta L_unc
Hazards are clamped to [1e-7, 1 - 1e-7] before the logs; saturated sigmoids
otherwise produce infinite loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata, spearmanr

from .bags import Dataset
from .models import ModelCheckpoint, ModelSpec, forward_bag, init_checkpoint

HAZARD_CLAMP = 1e-7


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"            # "sgd" | "adam"
    bag_sample_size: int = 2048
    batch_size: int = 16
    survival_beta: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.survival_beta <= 1.0:
            raise ValueError("survival beta must be in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate,
                "weight_decay": self.weight_decay,
                "optimizer": self.optimizer,
                "bag_sample_size": self.bag_sample_size,
                "batch_size": self.batch_size,
                "survival_beta": self.survival_beta, "seed": self.seed}


@dataclass
class FoldPlan:
    """Five cyclic (train/val/test) partitions by bag id."""

    folds: list  # list of dicts with train/val/test id lists

    @staticmethod
    def from_groups(groups: dict) -> "FoldPlan":
        ids_by_group = {g: [] for g in range(5)}
        for bid in sorted(groups):
            ids_by_group[groups[bid] % 5].append(bid)
        folds = []
        for i in range(5):
            test = ids_by_group[i]
            val = ids_by_group[(i + 1) % 5]
            train = sorted(bid for g in range(5)
                           if g not in (i, (i + 1) % 5)
                           for bid in ids_by_group[g])
            folds.append({"train": train, "val": val, "test": test})
        return FoldPlan(folds)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def loss_classification(logits, class_index: int) -> float:
    """Cross-entropy -log softmax(logits)[class]."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= class_index < logits.size:
        raise ValueError("class index out of range")
    z = logits - logits.max()
    return float(np.log(np.sum(np.exp(z))) - z[class_index])


def grad_classification(logits, class_index: int) -> np.ndarray:
    z = logits - logits.max()
    p = np.exp(z) / np.sum(np.exp(z))
    p[class_index] -= 1.0
    return p


def loss_regression(pred_diff: float, target: float, reference: float) -> float:
    """Squared error of the difference prediction against target - reference."""
    return float((pred_diff - (target - reference)) ** 2)


def grad_regression(pred_diff: float, target: float, reference: float) -> float:
    return 2.0 * (pred_diff - (target - reference))


def _clamped(hazards) -> np.ndarray:
    return np.clip(np.asarray(hazards, dtype=float),
                   HAZARD_CLAMP, 1.0 - HAZARD_CLAMP)


def loss_survival(hazards, interval: int, censored: int, beta: float) -> float:
    h = _clamped(hazards)
    k = h.size
    if not 1 <= interval <= k:
        raise ValueError("interval out of range")
    log_s = np.concatenate([[0.0], np.cumsum(np.log(1.0 - h))])  # log S_0..K
    y = interval
    uncens = -(1 - censored) * (log_s[y - 1] + math.log(h[y - 1]))
    base = -censored * log_s[y] + uncens
    return float((1.0 - beta) * base + beta * uncens)


def grad_survival_hazards(hazards, interval: int, censored: int,
                          beta: float) -> np.ndarray:
    """d loss / d hazards (pre-clamp values outside the clamp get 0)."""
    raw = np.asarray(hazards, dtype=float)
    h = _clamped(raw)
    k = h.size
    y = interval
    g = np.zeros(k)
    j = np.arange(k)
    # -c log S_y: + c / (1 - h_j) for j <= y (1-indexed)
    g += (1.0 - beta) * censored * (j < y) / (1.0 - h)
    # -(1-c) log S_{y-1}: + (1-c)/(1-h_j) for j <= y-1; coefficient 1
    g += (1 - censored) * (j < y - 1) / (1.0 - h)
    # -(1-c) log h_y
    g[y - 1] -= (1 - censored) / h[y - 1]
    g[(raw < HAZARD_CLAMP) | (raw > 1.0 - HAZARD_CLAMP)] = 0.0
    return g


def _head_seed(trace, bag, beta, reference) -> np.ndarray:
    """Gradient of the per-bag loss w.r.t. the head pre-activations."""
    label = bag.label
    if label.kind == "classification":
        return grad_classification(trace.logits, label.class_index)
    if label.kind == "regression":
        return np.array([grad_regression(trace.value, label.value, reference)])
    gh = grad_survival_hazards(trace.hazards, label.interval, label.censored,
                               beta)
    return gh * trace.hazards * (1.0 - trace.hazards)  # through sigmoid


def bag_loss(trace, bag, beta, reference) -> float:
    label = bag.label
    if label.kind == "classification":
        return loss_classification(trace.logits, label.class_index)
    if label.kind == "regression":
        return loss_regression(trace.value, label.value, reference)
    return loss_survival(trace.hazards, label.interval, label.censored, beta)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

class Sgd:
    def __init__(self, lr, weight_decay=0.0):
        self.lr, self.wd = lr, weight_decay

    def step(self, params, grads):
        for name in params:
            params[name] -= self.lr * (grads[name] + self.wd * params[name])


class Adam:
    def __init__(self, lr, weight_decay=0.0, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        for name in params:
            g = grads[name] + self.wd * params[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m += (1 - self.b1) * (g - m)
            v += (1 - self.b2) * (g * g - v)
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def metric_auroc(scores, labels) -> float:
    """Rank-based AUROC; tied scores get 0.5 credit."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.size < 2:
        raise ValueError("need at least 2 samples")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2)
                 / (n_pos * n_neg))


def metric_spearman(preds, targets) -> float:
    preds = np.asarray(preds, dtype=float)
    if preds.size < 2:
        raise ValueError("need at least 2 samples")
    rho, _ = spearmanr(preds, targets)
    return float(rho)


def metric_cindex(risks, times, censored) -> float:
    """Harrell's C: concordance over comparable pairs (uncensored i with
    t_i < t_j); risk ties get 0.5 credit."""
    risks = np.asarray(risks, dtype=float)
    times = np.asarray(times, dtype=float)
    censored = np.asarray(censored, dtype=int)
    num = den = 0.0
    n = risks.size
    for i in range(n):
        if censored[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                den += 1.0
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    if den == 0:
        raise ValueError("no comparable pairs; C-Index undefined")
    return num / den


def _val_metric(ckpt, bags, reference) -> float:
    kind = ckpt.spec.head.kind
    traces = [forward_bag(ckpt, b.features) for b in bags]
    if kind == "classification":
        scores = [t.probs[1] for t in traces]
        labels = [b.label.class_index for b in bags]
        return metric_auroc(scores, labels)
    if kind == "regression":
        preds = [t.value + reference for t in traces]
        targets = [b.label.value for b in bags]
        return metric_spearman(preds, targets)
    risks = [t.risk for t in traces]
    times = [b.label.raw_time for b in bags]
    cens = [b.label.censored for b in bags]
    return metric_cindex(risks, times, cens)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def train(dataset: Dataset, spec: ModelSpec, config: TrainConfig,
          train_ids=None, val_ids=None, log_path=None) -> ModelCheckpoint:
    """Train on the dataset's train split, select on val, return the best
    checkpoint. Deterministic given (dataset, spec, config)."""
    train_bags = (dataset.split_bags("train") if train_ids is None
                  else [dataset.bag_by_id(i) for i in train_ids])
    val_bags = (dataset.split_bags("val") if val_ids is None
                else [dataset.bag_by_id(i) for i in val_ids])
    if not train_bags or not val_bags:
        raise ValueError("train and val splits must be nonempty")
    reference = dataset.reference_value or 0.0
    rng = np.random.default_rng(config.seed)
    ckpt = init_checkpoint(spec, seed=config.seed)
    ckpt.metadata.update({"train_seed": config.seed,
                          "reference_value": reference})
    opt = (Adam(config.learning_rate, config.weight_decay)
           if config.optimizer == "adam"
           else Sgd(config.learning_rate, config.weight_decay))
    best_metric = _val_metric(ckpt, val_bags, reference)
    best = ckpt.copy()
    log_rows = []
    param_names = list(ckpt.params)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_bags))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = {n: np.zeros_like(ckpt.params[n]) for n in param_names}
            for bi in batch:
                bag = train_bags[bi]
                feats = bag.features
                if feats.shape[0] > config.bag_sample_size:
                    keep = rng.choice(feats.shape[0], config.bag_sample_size,
                                      replace=False)
                    feats = feats[np.sort(keep)]
                trace = forward_bag(ckpt, feats, train_rng=rng)
                loss = bag_loss(trace, bag, config.survival_beta, reference)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, bag {bag.id}")
                epoch_loss += loss
                seed = _head_seed(trace, bag, config.survival_beta, reference)
                g = trace.graph.backward(seed, at=trace.logits_node)
                for name in param_names:
                    grads[name] += g[name]
            for name in param_names:
                grads[name] /= len(batch)
            opt.step(ckpt.params, grads)
        epoch_loss /= len(train_bags)
        metric = _val_metric(ckpt, val_bags, reference)
        log_rows.append((epoch, epoch_loss, metric))
        if metric > best_metric:
            best_metric = metric
            best = ckpt.copy()
    best.metadata.update({"epochs": config.epochs,
                          "val_metric": best_metric,
                          "train_config": config.to_json()})
    if log_path is not None:
        with Path(log_path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_metric"])
            for row in log_rows:
                writer.writerow([row[0], repr(float(row[1])),
                                 repr(float(row[2]))])
    return best
