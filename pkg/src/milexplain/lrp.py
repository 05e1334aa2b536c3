"""Layer-wise relevance propagation over recorded computation graphs.

Relevance is seeded at the explanation target with the target's own value
(class logit, difference output) and redistributed backward node by node
under a conservation principle: each rule splits a node's relevance across
its inputs in proportion to their contributions, with a signed relative
epsilon stabilizing the denominators. The per-instance score is the sum of
the relevance landing on that instance's feature vector.

Rule set:

* linear / matmul  -- epsilon rule with optional gamma weight lift
  rho(w) = w + gamma * max(w, 0); attention matrices (softmax outputs) are
  held constant, so a matmul against attention probabilities redistributes
  everything to the value path and nothing into the softmax.
* add              -- proportional split (covers residual connections);
  additive parameters (biases) forfeit their share.
* layernorm        -- centering map with the std held constant, mixing along
  the normalized axis; a length-1 axis degenerates and passes through.
* silu / relu / tanh / sigmoid -- identity pass-through (SiLU's sigmoid
  factor, like any elementwise activation here, is treated as constant).
* multiplicative gate -- both computed factors get exactly half.
* selective scan   -- decay/input/output vectors held constant; state
  relevance splits between the previous state and the step input in
  proportion to their contributions, output relevance flows into the state.
* softmax          -- blocks (attention weights are constants).
* sum / mean / concat / slice -- proportional or structural.

For survival models, the composite explanation first forms the relevance of
the K hazard logits as l_k * d(risk)/d(l_k) (gradient x input at the
logits) and propagates that vector back to the instances.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .bags import Bag
from .explain import ExplanationTarget, Heatmap, target_value
from .graph import CompGraph
from .models import ForwardTrace, ModelCheckpoint, forward_bag

DEFAULT_EPS = 1e-9


class LrpError(ValueError):
    pass


def stabilize(z, eps: float) -> np.ndarray:
    """Signed relative stabilization z * (1 + eps); exact zeros become a
    tiny positive floor so 0/0 never produces NaN."""
    z = np.asarray(z, dtype=float)
    out = z * (1.0 + eps)
    return np.where(out == 0.0, eps, out)


# --------------------------------------------------------------------------
# standalone rules (shared by the graph walker and directly testable)
# --------------------------------------------------------------------------

def lrp_linear(activations, weights, relevance, eps: float = DEFAULT_EPS,
               gamma: float = 0.0) -> np.ndarray:
    """Generic rule for a linear layer y = a @ w:
    r_i = sum_j a_i rho(w_ij) / stab(sum_i' a_i' rho(w_i'j)) * R_j."""
    a = np.asarray(activations, dtype=float)
    w = np.asarray(weights, dtype=float)
    if gamma < 0:
        raise LrpError("gamma must be nonnegative")
    rho = w + gamma * np.maximum(w, 0.0) if gamma else w
    z = a @ rho
    s = np.asarray(relevance, dtype=float) / stabilize(z, eps)
    out = a * (s @ rho.T)
    if not np.all(np.isfinite(out)):
        raise LrpError("non-finite relevance; epsilon too small")
    return out


def lrp_attention_ah(embeddings, attention, relevance,
                     eps: float = DEFAULT_EPS) -> np.ndarray:
    """AH rule: attention held constant. With y_jd = sum_k p_kj z_kd,
    R(z_kd) = sum_j z_kd p_kj / stab(sum_i z_id p_ij) * R(y_jd)."""
    z = np.asarray(embeddings, dtype=float)
    p = np.asarray(attention, dtype=float)
    y = np.einsum("kj,kd->jd", p, z)
    s = np.asarray(relevance, dtype=float) / stabilize(y, eps)
    return z * (p @ s)


def lrp_layernorm_ln(inputs, relevance, axis: int = 0,
                     eps: float = DEFAULT_EPS) -> np.ndarray:
    """LN rule: propagate through the centering map with std constant,
    R(z_k) = sum_j z_k (delta_kj - 1/N) / stab(c_j) * R(y_j) along ``axis``
    where c = z - mean(z). A length-1 axis passes relevance through."""
    z = np.asarray(inputs, dtype=float)
    r = np.asarray(relevance, dtype=float)
    if z.shape[axis] == 1:
        return r.copy()
    c = z - z.mean(axis=axis, keepdims=True)
    s = r / stabilize(c, eps)
    return z * (s - s.mean(axis=axis, keepdims=True))


def lrp_silu(relevance) -> np.ndarray:
    """SiLU rule: identity (the sigmoid factor is a constant)."""
    return np.asarray(relevance, dtype=float).copy()


def lrp_gate(relevance) -> tuple:
    """Multiplicative gate y = z_a * z_b: half of the relevance per factor."""
    r = np.asarray(relevance, dtype=float)
    return 0.5 * r, 0.5 * r


def lrp_ssm(a_seq, b_seq, c_seq, x_seq, states, relevance_y,
            eps: float = DEFAULT_EPS, relevance_h_final=None) -> np.ndarray:
    """Relevance through the selective scan, decay/input/output vectors
    constant. ``states``: cached [T+1, S, E] with states[0] = 0. Splits
    R(H[t]) between H[t-1] (share a[t] * H[t-1]) and x[t] (share
    b[t] (x) x[t]) over the shared denominator H[t], and routes R(y[t]) into
    H[t-1] over denominator y[t]. Returns R(x) of shape [T, E]."""
    a = np.asarray(a_seq, dtype=float)
    b = np.asarray(b_seq, dtype=float)
    c = np.asarray(c_seq, dtype=float)
    x = np.asarray(x_seq, dtype=float)
    ry = np.asarray(relevance_y, dtype=float)
    t_len = a.shape[0]
    rh = (np.zeros_like(states[0]) if relevance_h_final is None
          else np.asarray(relevance_h_final, dtype=float))
    rx = np.zeros_like(x)
    for t in range(t_len - 1, -1, -1):
        share = rh / stabilize(states[t + 1], eps)
        rx[t] = ((b[t][:, None] * x[t][None, :]) * share).sum(axis=0)
        rh_prev = (a[t][:, None] * states[t]) * share
        y_t = c[t] @ states[t]
        rh_prev += (c[t][:, None] * states[t]) * (ry[t] / stabilize(y_t, eps))
        rh = rh_prev
    if not np.all(np.isfinite(rx)):
        raise LrpError("non-finite scan relevance")
    return rx


# --------------------------------------------------------------------------
# graph walker
# --------------------------------------------------------------------------

def _is_constant_side(graph: CompGraph, nid: int, feature_node: int) -> bool:
    """Parameters, literals, and softmax outputs are held constant."""
    node = graph.nodes[nid]
    if node.kind == "softmax" or node.kind == "const":
        return True
    return node.kind == "input" and nid != feature_node


def propagate(graph: CompGraph, seed_node: int, seed_value, feature_node: int,
              eps: float = DEFAULT_EPS, gamma: float = 0.0):
    """Walk the graph from ``seed_node`` down to the leaves.

    Returns (relevance at feature_node, ledger) where the ledger lists
    (node id, kind, relevance sum) for every node that received relevance;
    on conserving graphs the sums match the seed total.
    """
    rel: list = [None] * len(graph.nodes)
    rel[seed_node] = np.asarray(seed_value, dtype=float).copy()
    ledger = []
    for nid in range(seed_node, -1, -1):
        r = rel[nid]
        if r is None:
            continue
        node = graph.nodes[nid]
        ledger.append((nid, node.kind, float(np.sum(r))))
        if node.kind in ("input", "const"):
            continue
        for inp, ri in _apply_rule(graph, nid, r, feature_node, eps, gamma):
            rel[inp] = ri if rel[inp] is None else rel[inp] + ri
    out = rel[feature_node]
    if out is None:
        out = np.zeros_like(graph.value(feature_node))
    if not np.all(np.isfinite(out)):
        raise LrpError("non-finite relevance at the input layer")
    return out, ledger


def _apply_rule(graph, nid, r, feature_node, eps, gamma):
    node = graph.nodes[nid]
    k = node.kind
    vals = [graph.value(i) for i in node.inputs]

    if k == "matmul":
        ia, ib = node.inputs
        a, b = vals
        if node.attrs["ta"]:
            a = a.T
        if node.attrs["tb"]:
            b = b.T
        alpha = node.attrs["alpha"]
        const_a = _is_constant_side(graph, ia, feature_node)
        const_b = _is_constant_side(graph, ib, feature_node)
        if const_a and const_b:
            return []
        if const_b:
            w = alpha * b
            if graph.nodes[ib].kind == "input" and gamma:
                w = w + gamma * np.maximum(w, 0.0)
            z = a @ w
            s = r / stabilize(z, eps)
            ra = a * (s @ w.T)
            if node.attrs["ta"]:
                ra = ra.T
            return [(ia, ra)]
        if const_a:
            w = alpha * a
            if graph.nodes[ia].kind == "input" and gamma:
                w = w + gamma * np.maximum(w, 0.0)
            z = w @ b
            s = r / stabilize(z, eps)
            rb = b * (w.T @ s)
            if node.attrs["tb"]:
                rb = rb.T
            return [(ib, rb)]
        raise LrpError(f"matmul node {nid} has two non-constant inputs; "
                       "no rule applies")

    if k == "mul":
        ia, ib = node.inputs
        const_a = _is_constant_side(graph, ia, feature_node)
        const_b = _is_constant_side(graph, ib, feature_node)
        if const_a and const_b:
            return []
        if const_a or const_b:
            live, live_val = (ib, vals[1]) if const_a else (ia, vals[0])
            return [(live, _reduce_to(r, live_val.shape))]
        ra, rb = lrp_gate(r)
        return [(ia, _reduce_to(ra, vals[0].shape)),
                (ib, _reduce_to(rb, vals[1].shape))]

    if k == "add":
        z = graph.value(nid)
        s = r / stabilize(z, eps)
        out = []
        for inp, val in zip(node.inputs, vals):
            if _is_constant_side(graph, inp, feature_node):
                continue  # bias share is discarded
            out.append((inp, _reduce_to(np.broadcast_to(val, z.shape) * s,
                                        val.shape)))
        return out

    if k in ("relu", "silu", "tanh", "sigmoid"):
        return [(node.inputs[0], lrp_silu(r))]

    if k == "softmax":
        return []  # attention weights are constants

    if k == "layernorm":
        return [(node.inputs[0],
                 lrp_layernorm_ln(vals[0], r, axis=node.attrs["axis"],
                                  eps=eps))]

    if k == "ssm":
        a, b, c, x = vals
        rx = lrp_ssm(a, b, c, x, graph.states(nid), r, eps=eps)
        return [(node.inputs[3], rx)]

    if k == "sum":
        ax = node.attrs["axis"]
        x = vals[0]
        z = graph.value(nid)
        if ax is None:
            s = r / stabilize(z, eps)
            return [(node.inputs[0], x * s)]
        s = np.expand_dims(r / stabilize(z, eps), ax)
        return [(node.inputs[0], x * s)]

    if k == "mean":
        ax = node.attrs["axis"]
        x = vals[0]
        z = graph.value(nid)
        n = x.size if ax is None else x.shape[ax]
        s = r / stabilize(z, eps)
        if ax is not None:
            s = np.expand_dims(s, ax)
        return [(node.inputs[0], (x / n) * s)]

    if k == "concat":
        ax = node.attrs["axis"]
        out = []
        off = 0
        for inp, val in zip(node.inputs, vals):
            sl = [slice(None)] * r.ndim
            sl[ax] = slice(off, off + val.shape[ax])
            out.append((inp, r[tuple(sl)].copy()))
            off += val.shape[ax]
        return out

    if k == "slice":
        x = vals[0]
        rx = np.zeros_like(x)
        key = tuple(slice(None) if kk is None else slice(kk[0], kk[1])
                    for kk in node.attrs["key"])
        rx[key] = r
        return [(node.inputs[0], rx)]

    raise LrpError(f"no relevance rule registered for node kind {k!r}")


def _reduce_to(r, shape):
    """Sum relevance over broadcasted axes back down to ``shape``."""
    r = np.asarray(r, dtype=float)
    while r.ndim > len(shape):
        r = r.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and r.shape[ax] != 1:
            r = r.sum(axis=ax, keepdims=True)
    return r.reshape(shape)


# --------------------------------------------------------------------------
# model-level explanations
# --------------------------------------------------------------------------

def _seed_for_target(trace: ForwardTrace, target: ExplanationTarget):
    """(node, relevance vector) to seed: the target's own value."""
    logits = trace.logits
    if target.kind == "class_logit":
        seed = np.zeros_like(logits)
        seed[target.class_index] = logits[target.class_index]
        return trace.logits_node, seed
    if target.kind == "regression_diff":
        return trace.logits_node, logits.copy()
    return trace.logits_node, survival_logit_relevance(trace)


def survival_logit_relevance(trace: ForwardTrace) -> np.ndarray:
    """Gradient x input of the risk score at the hazard logits:
    R_k = l_k * d r / d l_k."""
    trace.graph.backward(np.asarray(1.0), at=trace.output_node)
    grad_logits = trace.graph.adjoint(trace.logits_node)
    return trace.logits * grad_logits


def lrp_explain(checkpoint: ModelCheckpoint, bag: Bag,
                target: ExplanationTarget, eps: float = DEFAULT_EPS,
                gamma: float = 0.0, seed_override=None,
                return_ledger: bool = False):
    """Relevance heatmap for one bag; instance score = sum over feature
    dims of the input relevance. ``seed_override`` replaces the seed vector
    at the head pre-activations (used by linearity checks)."""
    trace = forward_bag(checkpoint, bag.features)
    seed_node, seed = _seed_for_target(trace, target)
    if seed_override is not None:
        seed = np.asarray(seed_override, dtype=float)
    rel, ledger = propagate(trace.graph, seed_node, seed,
                            trace.feature_node, eps=eps, gamma=gamma)
    heatmap = Heatmap(bag.id, "lrp", rel.sum(axis=1), target, signed=True)
    if return_ledger:
        return heatmap, ledger
    return heatmap


def lrp_survival_composite(checkpoint: ModelCheckpoint, bag: Bag,
                           eps: float = DEFAULT_EPS, gamma: float = 0.0):
    """Composite survival explanation: seed l_k * dr/dl_k at the hazard
    logits, then propagate to the instances."""
    if checkpoint.spec.head.kind != "survival":
        raise LrpError("composite explanation needs a survival head")
    return lrp_explain(checkpoint, bag, ExplanationTarget("survival_risk"),
                       eps=eps, gamma=gamma)


def save_conservation_ledger(ledger, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "kind", "relevance_sum"])
        for nid, kind, total in ledger:
            writer.writerow([nid, kind, repr(float(total))])
