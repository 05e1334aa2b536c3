"""Instance attribution heatmaps: attention, gradient x input, squared
gradients, integrated gradients, single-instance perturbation, and a random
baseline. Relevance-propagation heatmaps live in ``lrp``.

Every method produces one score per instance for a scalar explanation
target: a class logit (classification; Single tracks the softmax probability
of that class instead), the difference-to-reference output (regression), or
the survival risk score. Attention scores come straight from the recorded
trace: raw pooling weights for attnmil/mambamil, and for transmil the
rollout product of per-layer head-averaged matrices A~ = prod(0.5 A + 0.5 I),
reading the class-token row over the instance columns.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .bags import Bag
from .models import ForwardTrace, ModelCheckpoint, forward_bag

METHODS = ("attention", "gxi", "grad2", "ig", "single", "lrp", "random")

SIGNED_METHODS = {"gxi", "ig", "lrp"}


@dataclass(frozen=True)
class ExplanationTarget:
    kind: str                        # class_logit | regression_diff | survival_risk
    class_index: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("class_logit", "regression_diff",
                             "survival_risk"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "class_logit" and self.class_index is None:
            raise ValueError("class_logit target needs a class index")

    def tag(self) -> str:
        if self.kind == "class_logit":
            return f"class_logit:{self.class_index}"
        return self.kind


@dataclass
class Heatmap:
    bag_id: str
    method: str
    scores: np.ndarray               # [N]
    target: ExplanationTarget
    signed: bool

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"non-finite heatmap scores for {self.bag_id}")


def default_target(checkpoint: ModelCheckpoint, trace=None,
                   class_index=None) -> ExplanationTarget:
    """Task-appropriate target; classification defaults to the predicted
    class of the given trace unless an explicit class is requested."""
    kind = checkpoint.spec.head.kind
    if kind == "regression":
        return ExplanationTarget("regression_diff")
    if kind == "survival":
        return ExplanationTarget("survival_risk")
    if class_index is None:
        if trace is None:
            raise ValueError("classification target needs a trace or class")
        class_index = int(np.argmax(trace.logits))
    return ExplanationTarget("class_logit", class_index=class_index)


def gradient_seed(target: ExplanationTarget, trace: ForwardTrace) -> np.ndarray:
    """Seed on the graph output selecting the scalar target."""
    out = trace.graph.value(trace.output_node)
    if target.kind == "class_logit":
        seed = np.zeros_like(out)
        seed[target.class_index] = 1.0
        return seed
    if target.kind == "regression_diff":
        return np.ones_like(out)
    return np.asarray(1.0) if out.ndim == 0 else np.ones_like(out)


def target_value(target: ExplanationTarget, trace: ForwardTrace) -> float:
    """The scalar the explanation refers to (logit, diff output, or risk)."""
    if target.kind == "class_logit":
        return float(trace.logits[target.class_index])
    if target.kind == "regression_diff":
        return float(trace.value)
    return float(trace.risk)


def tracked_output(target: ExplanationTarget, trace: ForwardTrace,
                   track: str = "softmax") -> float:
    """Model output monitored by perturbation methods: softmax probability
    (or raw logit with track='logit') of the explained class, the diff
    output, or the risk score."""
    if target.kind == "class_logit":
        if track == "logit":
            return float(trace.logits[target.class_index])
        return float(trace.probs[target.class_index])
    return target_value(target, trace)


def _input_gradient(trace: ForwardTrace, target: ExplanationTarget):
    grads = trace.graph.backward(gradient_seed(target, trace))
    return grads["x"]


# --------------------------------------------------------------------------
# the methods
# --------------------------------------------------------------------------

def explain_attention(trace: ForwardTrace, bag_id: str,
                      target: Optional[ExplanationTarget] = None) -> Heatmap:
    """Raw pooling weights, or attention rollout for transformer traces.

    Attention is target-agnostic; the target only tags the heatmap.
    """
    if target is None:
        target = ExplanationTarget("class_logit", 0) if trace.spec.head.kind \
            == "classification" else ExplanationTarget(
                "regression_diff" if trace.spec.head.kind == "regression"
                else "survival_risk")
    if trace.pooling_weights is not None:
        scores = trace.pooling_weights.copy()
    elif trace.attn_layers:
        t = trace.attn_layers[0].shape[0]
        rollout = np.eye(t)
        for attn in trace.attn_layers:
            rollout = (0.5 * attn + 0.5 * np.eye(t)) @ rollout
        scores = rollout[0, 1:].copy()
    else:
        raise ValueError("trace has no attention record")
    return Heatmap(bag_id, "attention", scores, target, signed=False)


def explain_gxi(trace: ForwardTrace, target: ExplanationTarget,
                bag_id: str) -> Heatmap:
    """Per-instance dot product of the input gradient with the input."""
    x = trace.graph.value(trace.feature_node)
    g = _input_gradient(trace, target)
    return Heatmap(bag_id, "gxi", (g * x).sum(axis=1), target, signed=True)


def explain_grad2(trace: ForwardTrace, target: ExplanationTarget,
                  bag_id: str) -> Heatmap:
    """Per-instance sum of squared input gradients."""
    g = _input_gradient(trace, target)
    return Heatmap(bag_id, "grad2", (g * g).sum(axis=1), target, signed=False)


def explain_ig(checkpoint: ModelCheckpoint, bag: Bag,
               target: ExplanationTarget, steps: int = 64) -> Heatmap:
    """Integrated gradients from a zero baseline, midpoint quadrature.

    Completeness: the scores sum to target(X) - target(0) up to the
    quadrature error of ``steps`` midpoint samples.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(bag.features, dtype=float)
    total = np.zeros_like(x)
    for s in range(steps):
        alpha = (s + 0.5) / steps
        trace = forward_bag(checkpoint, alpha * x)
        total += _input_gradient(trace, target)
    scores = (x * total / steps).sum(axis=1)
    return Heatmap(bag.id, "ig", scores, target, signed=True)


def explain_single(checkpoint: ModelCheckpoint, bag: Bag,
                   target: ExplanationTarget,
                   track: str = "softmax") -> Heatmap:
    """Model output on each singleton bag {x_n}."""
    scores = np.empty(bag.n_instances)
    for n in range(bag.n_instances):
        trace = forward_bag(checkpoint, bag.features[n:n + 1])
        scores[n] = tracked_output(target, trace, track)
    signed = target.kind != "class_logit"
    return Heatmap(bag.id, "single", scores, target, signed=signed)


def explain_random(bag: Bag, target: ExplanationTarget, seed: int) -> Heatmap:
    """I.i.d. uniform(0, 1) scores; the stream is derived from the seed and
    the bag id so cohorts rerun identically."""
    digest = hashlib.sha256(bag.id.encode()).digest()
    mix = int.from_bytes(digest[:8], "little") ^ (seed & 0xFFFFFFFFFFFFFFFF)
    rng = np.random.default_rng(mix)
    return Heatmap(bag.id, "random", rng.random(bag.n_instances), target,
                   signed=False)


def compute_heatmap(method: str, checkpoint: ModelCheckpoint, bag: Bag,
                    target=None, seed: int = 0, ig_steps: int = 64,
                    track: str = "softmax", lrp_eps: float = 1e-9,
                    lrp_gamma: float = 0.0) -> Heatmap:
    """Uniform dispatcher used by the pipeline stages."""
    from .lrp import lrp_explain
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    needs_trace = method in ("attention", "gxi", "grad2")
    trace = forward_bag(checkpoint, bag.features) if needs_trace or \
        target is None else None
    if target is None:
        target = default_target(checkpoint, trace)
    if method == "attention":
        return explain_attention(trace, bag.id, target)
    if method == "gxi":
        return explain_gxi(trace, target, bag.id)
    if method == "grad2":
        return explain_grad2(trace, target, bag.id)
    if method == "ig":
        return explain_ig(checkpoint, bag, target, steps=ig_steps)
    if method == "single":
        return explain_single(checkpoint, bag, target, track=track)
    if method == "lrp":
        return lrp_explain(checkpoint, bag, target, eps=lrp_eps,
                           gamma=lrp_gamma)
    return explain_random(bag, target, seed)


# --------------------------------------------------------------------------
# heatmap CSV I/O
# --------------------------------------------------------------------------

def save_heatmap_csv(heatmap: Heatmap, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bag_id", "method", "target", "instance_index",
                         "score"])
        for i, s in enumerate(heatmap.scores):
            writer.writerow([heatmap.bag_id, heatmap.method,
                             heatmap.target.tag(), i, repr(float(s))])


def load_heatmap_csv(path) -> Heatmap:
    rows = list(csv.reader(Path(path).open()))
    if not rows or rows[0] != ["bag_id", "method", "target",
                               "instance_index", "score"]:
        raise ValueError(f"bad heatmap CSV header in {path}")
    body = rows[1:]
    scores = np.array([float(r[4]) for r in body])
    tag = body[0][2]
    if tag.startswith("class_logit:"):
        target = ExplanationTarget("class_logit", int(tag.split(":")[1]))
    else:
        target = ExplanationTarget(tag)
    method = body[0][1]
    return Heatmap(body[0][0], method, scores, target,
                   signed=method in SIGNED_METHODS)
