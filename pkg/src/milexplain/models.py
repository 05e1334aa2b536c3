"""The three bag aggregators (attention, transformer, state-space) plus task
heads, built as computation graphs so every forward pass is differentiable
and traversable by relevance propagation.

Architectures:

* ``attnmil``   -- linear+ReLU instance embedding, softmax attention pooling
  over ``w . tanh(V h_n)`` scores, head on the pooled embedding.
* ``transmil``  -- learned class token prepended to embedded instances,
  L pre-norm transformer blocks with exact multi-head softmax attention and
  no positional encoding, head on the class token.
* ``mambamil``  -- linear in-projection split into an SSM branch (SiLU then
  selective scan with input-dependent decay/input/output vectors) and a SiLU
  gate branch, multiplicative gating, out-projection, then attention pooling
  as in attnmil.

Heads: classification (C logits), regression (one scalar read as prediction
minus the reference value), survival (K sigmoid hazards h_k; survival curve
S_k = prod_{j<=k}(1 - h_j); risk r = -sum_k S_k).

Checkpoint file: 8-byte magic, u32 header length, JSON header (spec +
metadata + tensor name order), then per tensor u32 ndim, u32 dims, raw
little-endian f64 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import CompGraph, GraphError, as_tensor

CKPT_MAGIC = b"XMILCKP1"

ARCHITECTURES = ("attnmil", "transmil", "mambamil")


@dataclass
class TaskHeadSpec:
    kind: str  # "classification" | "regression" | "survival"
    n_classes: int = 2
    reference_value: float = 0.0
    n_intervals: int = 4

    def __post_init__(self):
        if self.kind == "classification" and self.n_classes < 2:
            raise ValueError("classification head needs n_classes >= 2")
        if self.kind == "survival" and self.n_intervals < 2:
            raise ValueError("survival head needs n_intervals >= 2")
        if not np.isfinite(self.reference_value):
            raise ValueError("reference value must be finite")

    @property
    def out_dim(self) -> int:
        if self.kind == "classification":
            return self.n_classes
        if self.kind == "regression":
            return 1
        return self.n_intervals

    def to_json(self) -> dict:
        return {"kind": self.kind, "n_classes": self.n_classes,
                "reference_value": self.reference_value,
                "n_intervals": self.n_intervals}

    @staticmethod
    def from_json(d: dict) -> "TaskHeadSpec":
        return TaskHeadSpec(**d)


@dataclass
class ModelSpec:
    arch: str
    d_in: int
    head: TaskHeadSpec
    hidden: int = 64
    attn_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    state_size: int = 16
    dropout: tuple = (0.0, 0.0, 0.0)  # (embedding, block, head)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        for name in ("d_in", "hidden", "attn_dim", "n_layers", "n_heads",
                     "ff_dim", "state_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.n_heads:
            raise ValueError("n_heads must divide hidden")

    def to_json(self) -> dict:
        return {"arch": self.arch, "d_in": self.d_in,
                "head": self.head.to_json(), "hidden": self.hidden,
                "attn_dim": self.attn_dim, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "ff_dim": self.ff_dim,
                "state_size": self.state_size,
                "dropout": list(self.dropout)}

    @staticmethod
    def from_json(d: dict) -> "ModelSpec":
        d = dict(d)
        d["head"] = TaskHeadSpec.from_json(d["head"])
        d["dropout"] = tuple(d.get("dropout", (0.0, 0.0, 0.0)))
        return ModelSpec(**d)


@dataclass
class ModelCheckpoint:
    spec: ModelSpec
    params: dict                       # name -> float64 ndarray
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.spec,
                               {k: v.copy() for k, v in self.params.items()},
                               dict(self.metadata))


@dataclass
class ForwardTrace:
    """One recorded forward pass with everything explainers need."""

    graph: CompGraph
    spec: ModelSpec
    n_instances: int
    feature_node: int
    output_node: int                    # logits / scalar / risk
    logits_node: int                    # head pre-activation node
    pooling_weights: Optional[np.ndarray] = None   # attnmil / mambamil
    attn_layers: Optional[list] = None             # transmil, head-averaged
    logits: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    value: Optional[float] = None
    hazards: Optional[np.ndarray] = None
    survivals: Optional[np.ndarray] = None
    risk: Optional[float] = None


# --------------------------------------------------------------------------
# parameter initialization
# --------------------------------------------------------------------------

def _init(rng, fan_in, shape):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def _init_bias(rng, fan_in, size):
    # nonzero biases keep zero-feature baselines away from the layernorm
    # epsilon regime (integrated-gradients paths stay smooth)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size)


def init_checkpoint(spec: ModelSpec, seed: int = 0,
                    bias_free: bool = False) -> ModelCheckpoint:
    """Fresh parameters. ``bias_free`` zeroes every additive parameter
    (biases and the transmil class token) so relevance conservation is
    exact; training normally starts from the random initialization."""
    rng = np.random.default_rng(seed)
    h, d = spec.hidden, spec.d_in
    p = {}
    p["embed.w"] = _init(rng, d, (d, h))
    p["embed.b"] = _init_bias(rng, d, h)
    if spec.arch == "attnmil":
        p["attn.v"] = _init(rng, h, (h, spec.attn_dim))
        p["attn.w"] = _init(rng, spec.attn_dim, (spec.attn_dim, 1))
    elif spec.arch == "transmil":
        p["cls"] = 0.02 * rng.standard_normal((1, h))
        for l in range(spec.n_layers):
            pre = f"block{l}."
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = _init(rng, h, (h, h))
            p[pre + "ff1.w"] = _init(rng, h, (h, spec.ff_dim))
            p[pre + "ff1.b"] = _init_bias(rng, h, spec.ff_dim)
            p[pre + "ff2.w"] = _init(rng, spec.ff_dim, (spec.ff_dim, h))
            p[pre + "ff2.b"] = _init_bias(rng, spec.ff_dim, h)
    else:  # mambamil
        s = spec.state_size
        p["in.w"] = _init(rng, d, (d, 2 * h))
        p["ssm.wa"] = _init(rng, h, (h, s))
        p["ssm.wb"] = _init(rng, h, (h, s))
        p["ssm.wc"] = _init(rng, h, (h, s))
        p["out.w"] = _init(rng, h, (h, h))
        p["pool.v"] = _init(rng, h, (h, spec.attn_dim))
        p["pool.w"] = _init(rng, spec.attn_dim, (spec.attn_dim, 1))
    p["head.w"] = _init(rng, h, (h, spec.head.out_dim))
    p["head.b"] = _init_bias(rng, h, spec.head.out_dim)
    if bias_free:
        for name in list(p):
            if name.endswith(".b") or name == "cls":
                p[name] = np.zeros_like(p[name])
    for name in p:
        p[name] = as_tensor(p[name])
    return ModelCheckpoint(spec, p, {"init_seed": seed,
                                     "bias_free": bias_free})


# --------------------------------------------------------------------------
# graph builders
# --------------------------------------------------------------------------

def _attention_pool(g, tokens, v_name, w_name):
    """softmax(w . tanh(tokens V)) pooling; returns (pooled, softmax node)."""
    scores = g.matmul(g.tanh(g.matmul(tokens, g.input(v_name))),
                      g.input(w_name))
    attn = g.softmax(scores, axis=0)                  # [N, 1]
    pooled = g.sum(g.mul(attn, tokens), axis=0)       # [hidden]
    return pooled, attn


def _head(g, emb, spec: ModelSpec):
    """Apply the task head to a pooled embedding node; returns node ids."""
    logits = g.add(g.matmul(emb, g.input("head.w")), g.input("head.b"))
    if spec.head.kind != "survival":
        return logits, logits, {}
    k = spec.head.n_intervals
    hazards = g.sigmoid(logits)
    one = g.const(np.ones(k))
    neg = g.const(-np.ones(k))
    one_minus = g.add(one, g.mul(hazards, neg))       # 1 - h_k
    surv_parts = []
    prev = None
    for i in range(k):
        piece = g.slice(one_minus, ((i, i + 1),))
        prev = piece if prev is None else g.mul(prev, piece)
        surv_parts.append(prev)
    survs = g.concat(surv_parts, axis=0)              # S_1..S_K
    risk = g.mul(g.sum(survs), g.const(-1.0))
    return risk, logits, {"hazards": hazards, "survivals": survs,
                          "risk": risk}


def _dropout_mask(g, node, rate, shape, rng):
    if rng is None or rate <= 0.0:
        return node
    mask = (rng.random(shape) >= rate) / (1.0 - rate)
    return g.mul(node, g.const(mask))


def build_graph(spec: ModelSpec, n: int, train_rng=None):
    """Construct the architecture graph for a bag of n instances.

    Returns (graph, info) where info holds the node ids needed by traces.
    When ``train_rng`` is given, dropout masks are sampled and baked in as
    constants (training mode); inference passes no rng.
    """
    g = CompGraph()
    x = g.input("x")                                   # [N, D]
    drop_e, drop_b, drop_h = spec.dropout
    info = {"feature_node": x, "attn_softmax": [], "pool_softmax": None}

    if spec.arch == "attnmil":
        emb = g.relu(g.add(g.matmul(x, g.input("embed.w")),
                           g.input("embed.b")))
        emb = _dropout_mask(g, emb, drop_e, (n, spec.hidden), train_rng)
        pooled, attn = _attention_pool(g, emb, "attn.v", "attn.w")
        info["pool_softmax"] = attn
        pooled = _dropout_mask(g, pooled, drop_h, (spec.hidden,), train_rng)
        out, logits, extra = _head(g, pooled, spec)

    elif spec.arch == "transmil":
        emb = g.relu(g.add(g.matmul(x, g.input("embed.w")),
                           g.input("embed.b")))
        emb = _dropout_mask(g, emb, drop_e, (n, spec.hidden), train_rng)
        z = g.concat([g.input("cls"), emb], axis=0)    # [N+1, hidden]
        t = n + 1
        dh = spec.hidden // spec.n_heads
        scale = 1.0 / np.sqrt(dh)
        for l in range(spec.n_layers):
            pre = f"block{l}."
            u = g.layernorm(z, axis=-1)
            q = g.matmul(u, g.input(pre + "wq"))
            key = g.matmul(u, g.input(pre + "wk"))
            val = g.matmul(u, g.input(pre + "wv"))
            head_outs, head_attns = [], []
            for hd in range(spec.n_heads):
                cols = ((hd * dh, (hd + 1) * dh),)
                qh = g.slice(q, (None, cols[0]))
                kh = g.slice(key, (None, cols[0]))
                vh = g.slice(val, (None, cols[0]))
                scores = g.matmul(qh, kh, transpose_b=True, alpha=scale)
                attn = g.softmax(scores, axis=-1)      # [T, T]
                head_attns.append(attn)
                head_outs.append(g.matmul(attn, vh))
            info["attn_softmax"].append(head_attns)
            attn_out = g.matmul(g.concat(head_outs, axis=1),
                                g.input(pre + "wo"))
            attn_out = _dropout_mask(g, attn_out, drop_b,
                                     (t, spec.hidden), train_rng)
            z = g.add(z, attn_out)
            u2 = g.layernorm(z, axis=-1)
            ff = g.relu(g.add(g.matmul(u2, g.input(pre + "ff1.w")),
                              g.input(pre + "ff1.b")))
            ff = g.add(g.matmul(ff, g.input(pre + "ff2.w")),
                       g.input(pre + "ff2.b"))
            ff = _dropout_mask(g, ff, drop_b, (t, spec.hidden), train_rng)
            z = g.add(z, ff)
        cls_row = g.sum(g.slice(z, ((0, 1), None)), axis=0)  # [hidden]
        cls_row = _dropout_mask(g, cls_row, drop_h, (spec.hidden,), train_rng)
        out, logits, extra = _head(g, cls_row, spec)

    else:  # mambamil
        h = spec.hidden
        proj = g.matmul(x, g.input("in.w"))            # [N, 2h]
        u = g.slice(proj, (None, (0, h)))
        gate = g.slice(proj, (None, (h, 2 * h)))
        v = g.silu(u)
        v = _dropout_mask(g, v, drop_e, (n, h), train_rng)
        a_seq = g.sigmoid(g.matmul(v, g.input("ssm.wa")))
        b_seq = g.matmul(v, g.input("ssm.wb"))
        c_seq = g.matmul(v, g.input("ssm.wc"))
        scanned = g.ssm(a_seq, b_seq, c_seq, v)        # [N, h]
        gated = g.mul(scanned, g.silu(gate))
        seq_out = g.matmul(gated, g.input("out.w"))
        seq_out = _dropout_mask(g, seq_out, drop_b, (n, h), train_rng)
        pooled, attn = _attention_pool(g, seq_out, "pool.v", "pool.w")
        info["pool_softmax"] = attn
        pooled = _dropout_mask(g, pooled, drop_h, (spec.hidden,), train_rng)
        out, logits, extra = _head(g, pooled, spec)

    g.set_output(out)
    info["output_node"] = out
    info["logits_node"] = logits
    info.update(extra)
    return g, info


def survival_curve(hazards) -> tuple:
    """(S_1..S_K, risk) from hazard probabilities: S_k = prod(1 - h_j),
    r = -sum(S_k). Risk lies in (-K, 0) for hazards in (0, 1)."""
    hazards = np.asarray(hazards, dtype=float)
    survs = np.cumprod(1.0 - hazards)
    return survs, float(-np.sum(survs))


def forward_bag(checkpoint: ModelCheckpoint, features,
                train_rng=None) -> ForwardTrace:
    """Run one bag through the model and record the trace."""
    features = as_tensor(features)
    if features.ndim != 2 or features.shape[1] != checkpoint.spec.d_in:
        raise GraphError(
            f"bag features must be [N, {checkpoint.spec.d_in}], "
            f"got {features.shape}")
    spec = checkpoint.spec
    n = features.shape[0]
    g, info = build_graph(spec, n, train_rng=train_rng)
    inputs = dict(checkpoint.params)
    inputs["x"] = features
    out = g.forward(inputs)
    trace = ForwardTrace(graph=g, spec=spec, n_instances=n,
                         feature_node=info["feature_node"],
                         output_node=info["output_node"],
                         logits_node=info["logits_node"])
    if info["pool_softmax"] is not None:
        trace.pooling_weights = g.value(info["pool_softmax"]).reshape(-1)
    if info["attn_softmax"]:
        trace.attn_layers = [
            np.mean([g.value(a) for a in heads], axis=0)
            for heads in info["attn_softmax"]]
    logits = g.value(info["logits_node"])
    trace.logits = logits
    if spec.head.kind == "classification":
        z = logits - logits.max()
        e = np.exp(z)
        trace.probs = e / e.sum()
    elif spec.head.kind == "regression":
        trace.value = float(out[0])
    else:
        trace.hazards = g.value(info["hazards"])
        trace.survivals = g.value(info["survivals"])
        trace.risk = float(out)
    return trace


# --------------------------------------------------------------------------
# checkpoint I/O
# --------------------------------------------------------------------------

def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    names = sorted(ckpt.params)
    header = json.dumps({"spec": ckpt.spec.to_json(),
                         "metadata": ckpt.metadata,
                         "tensors": names}, sort_keys=True).encode()
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", len(header))
    blob += header
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen].decode())
    spec = ModelSpec.from_json(header["spec"])
    off = 12 + hlen
    params = {}
    for name in header["tensors"]:
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        params[name] = arr.reshape(shape).copy()
        off += count * 8
    return ModelCheckpoint(spec, params, header["metadata"])
