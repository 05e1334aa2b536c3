"""Minimal dense float64 computation graph with reverse-mode gradients.

Tensors are plain C-contiguous ``numpy.ndarray`` objects with dtype float64;
``as_tensor`` is the single conversion point. A ``CompGraph`` is a flat,
topologically ordered list of primitive nodes (matmul, add, mul, tanh, relu,
sigmoid, silu, softmax, layernorm, ssm, sum, mean, concat, slice) plus leaf
nodes (named inputs and embedded constants). Building the graph records
structure only; ``forward`` binds the named inputs, caches every node
activation, and ``backward`` replays the tape in reverse.

The cached activations are load-bearing: relevance-propagation rules walk the
same node list and read them, so recording is mandatory, not an optimization.
A graph holds the activations of exactly one forward pass at a time and must
not be shared across threads while in use; independent graph instances are
safe to run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit


class GraphError(ValueError):
    """Raised on malformed graphs, shape mismatches, or non-finite values."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray (0-d stays 0-d)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


@dataclass
class Node:
    kind: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: Optional[str] = None          # input nodes only
    const: Optional[np.ndarray] = None  # const nodes only


class CompGraph:
    """Tape of primitive ops; build once, then forward/backward repeatedly."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.output: Optional[int] = None
        self._values: Optional[list] = None
        self._adjoints: Optional[list] = None
        self._extras: Optional[list] = None  # per-node scratch (ssm states)

    # ----- construction ---------------------------------------------------

    def _push(self, node: Node) -> int:
        for i in node.inputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"node input id {i} out of range")
        self.nodes.append(node)
        self._values = None
        return len(self.nodes) - 1

    def input(self, name: str) -> int:
        if any(n.kind == "input" and n.name == name for n in self.nodes):
            raise GraphError(f"duplicate input name {name!r}")
        return self._push(Node("input", name=name))

    def const(self, value) -> int:
        return self._push(Node("const", const=as_tensor(value)))

    def matmul(self, a: int, b: int, transpose_a=False, transpose_b=False,
               alpha: float = 1.0) -> int:
        return self._push(Node("matmul", (a, b),
                               {"ta": transpose_a, "tb": transpose_b,
                                "alpha": float(alpha)}))

    def add(self, a: int, b: int) -> int:
        return self._push(Node("add", (a, b)))

    def mul(self, a: int, b: int) -> int:
        return self._push(Node("mul", (a, b)))

    def tanh(self, a: int) -> int:
        return self._push(Node("tanh", (a,)))

    def relu(self, a: int) -> int:
        return self._push(Node("relu", (a,)))

    def sigmoid(self, a: int) -> int:
        return self._push(Node("sigmoid", (a,)))

    def silu(self, a: int) -> int:
        return self._push(Node("silu", (a,)))

    def softmax(self, a: int, axis: int = -1) -> int:
        return self._push(Node("softmax", (a,), {"axis": axis}))

    def layernorm(self, a: int, axis: int = -1, eps: float = 1e-5) -> int:
        return self._push(Node("layernorm", (a,), {"axis": axis, "eps": eps}))

    def ssm(self, a: int, b: int, c: int, x: int) -> int:
        """Selective scan. a, b, c: [T, S] per-step diagonal decay / input
        / output vectors; x: [T, E]. State H[t] = a[t] * H[t-1] + b[t] (x)
        x[t] (outer product), output y[t] = c[t] @ H[t-1], H[0] = 0."""
        return self._push(Node("ssm", (a, b, c, x)))

    def sum(self, a: int, axis: Optional[int] = None) -> int:
        return self._push(Node("sum", (a,), {"axis": axis}))

    def mean(self, a: int, axis: Optional[int] = None) -> int:
        return self._push(Node("mean", (a,), {"axis": axis}))

    def concat(self, parts: list, axis: int = 0) -> int:
        return self._push(Node("concat", tuple(parts), {"axis": axis}))

    def slice(self, a: int, key: tuple) -> int:
        """key: tuple of (start, stop) pairs or None per axis."""
        norm = tuple(None if k is None else (k[0], k[1]) for k in key)
        return self._push(Node("slice", (a,), {"key": norm}))

    def set_output(self, nid: int):
        if not (0 <= nid < len(self.nodes)):
            raise GraphError("output node id out of range")
        self.output = nid

    def input_names(self) -> list:
        return [n.name for n in self.nodes if n.kind == "input"]

    # ----- execution ------------------------------------------------------

    def forward(self, inputs: dict) -> np.ndarray:
        """Run the graph on named inputs, caching all activations."""
        if self.output is None:
            raise GraphError("graph has no output node")
        values: list = [None] * len(self.nodes)
        extras: list = [None] * len(self.nodes)
        self._adjoints = None
        for nid, node in enumerate(self.nodes):
            try:
                values[nid] = self._eval(node, values, extras, inputs, nid)
            except GraphError:
                raise
            except Exception as exc:  # numpy shape errors get node context
                raise GraphError(f"node {nid} ({node.kind}): {exc}") from exc
            if not np.all(np.isfinite(values[nid])):
                raise GraphError(f"non-finite activation at node {nid} "
                                 f"({node.kind})")
        self._values = values
        self._extras = extras
        return values[self.output]

    def _eval(self, node, values, extras, inputs, nid):
        k = node.kind
        if k == "input":
            if node.name not in inputs:
                raise GraphError(f"input {node.name!r} not bound")
            return as_tensor(inputs[node.name])
        if k == "const":
            return node.const
        vals = [values[i] for i in node.inputs]
        if k == "matmul":
            a, b = vals
            if node.attrs["ta"]:
                a = a.T
            if node.attrs["tb"]:
                b = b.T
            return node.attrs["alpha"] * (a @ b)
        if k == "add":
            return vals[0] + vals[1]
        if k == "mul":
            return vals[0] * vals[1]
        if k == "tanh":
            return np.tanh(vals[0])
        if k == "relu":
            return np.maximum(vals[0], 0.0)
        if k == "sigmoid":
            return expit(vals[0])
        if k == "silu":
            return vals[0] * expit(vals[0])
        if k == "softmax":
            ax = node.attrs["axis"]
            z = vals[0] - np.max(vals[0], axis=ax, keepdims=True)
            e = np.exp(z)
            return e / np.sum(e, axis=ax, keepdims=True)
        if k == "layernorm":
            ax, eps = node.attrs["axis"], node.attrs["eps"]
            c = vals[0] - np.mean(vals[0], axis=ax, keepdims=True)
            sd = np.sqrt(np.mean(c * c, axis=ax, keepdims=True))
            return c / (sd + eps)
        if k == "ssm":
            a, b, c, x = vals
            if a.shape != b.shape or a.shape != c.shape:
                raise GraphError("ssm: a, b, c must share shape [T, S]")
            if x.ndim != 2 or a.ndim != 2 or x.shape[0] != a.shape[0]:
                raise GraphError("ssm: x must be [T, E] with T matching a")
            t_len, s = a.shape
            e_dim = x.shape[1]
            states = np.zeros((t_len + 1, s, e_dim))
            y = np.zeros((t_len, e_dim))
            for t in range(t_len):
                y[t] = c[t] @ states[t]
                states[t + 1] = a[t][:, None] * states[t] + np.outer(b[t], x[t])
            extras[nid] = states
            return y
        if k == "sum":
            return np.sum(vals[0], axis=node.attrs["axis"])
        if k == "mean":
            return np.mean(vals[0], axis=node.attrs["axis"])
        if k == "concat":
            return np.concatenate(vals, axis=node.attrs["axis"])
        if k == "slice":
            return vals[0][_key_to_slices(node.attrs["key"])].copy()
        raise GraphError(f"unknown node kind {k!r}")

    def value(self, nid: int) -> np.ndarray:
        if self._values is None:
            raise GraphError("no cached forward pass")
        return self._values[nid]

    def states(self, nid: int) -> np.ndarray:
        """Cached scan states [T+1, S, E] of an ssm node."""
        if self._values is None or self._extras[nid] is None:
            raise GraphError("no cached scan states")
        return self._extras[nid]

    # ----- reverse mode ---------------------------------------------------

    def backward(self, seed, at: Optional[int] = None) -> dict:
        """Gradients of (seed . node[at]) w.r.t. every named input.

        ``at`` defaults to the output node. Per-node adjoints remain
        queryable through ``adjoint`` until the next forward.
        """
        if self._values is None:
            raise GraphError("no cached forward pass")
        at = self.output if at is None else at
        seed = as_tensor(seed)
        if seed.shape != self._values[at].shape:
            raise GraphError(f"seed shape {seed.shape} does not match node "
                             f"shape {self._values[at].shape}")
        adj: list = [None] * len(self.nodes)
        adj[at] = seed.copy()
        for nid in range(at, -1, -1):
            node = self.nodes[nid]
            g = adj[nid]
            if g is None or node.kind in ("input", "const"):
                continue
            for inp, gi in self._vjp(node, nid, g):
                adj[inp] = gi if adj[inp] is None else adj[inp] + gi
        self._adjoints = adj
        out = {}
        for nid, node in enumerate(self.nodes):
            if node.kind == "input":
                out[node.name] = (adj[nid] if adj[nid] is not None
                                  else np.zeros_like(self._values[nid]))
        return out

    def adjoint(self, nid: int) -> np.ndarray:
        if self._adjoints is None:
            raise GraphError("no backward pass recorded")
        a = self._adjoints[nid]
        return a if a is not None else np.zeros_like(self._values[nid])

    def _vjp(self, node, nid, g):
        k = node.kind
        v = self._values
        vals = [v[i] for i in node.inputs]
        if k == "matmul":
            a, b = vals
            ta, tb = node.attrs["ta"], node.attrs["tb"]
            alpha = node.attrs["alpha"]
            ae = a.T if ta else a
            be = b.T if tb else b
            if ae.ndim == 2 and be.ndim == 2:
                ga, gb = alpha * (g @ be.T), alpha * (ae.T @ g)
            elif ae.ndim == 2 and be.ndim == 1:
                ga, gb = alpha * np.outer(g, be), alpha * (ae.T @ g)
            elif ae.ndim == 1 and be.ndim == 2:
                ga, gb = alpha * (be @ g), alpha * np.outer(ae, g)
            else:
                ga, gb = alpha * g * be, alpha * g * ae
            if ta:
                ga = ga.T
            if tb:
                gb = gb.T
            return [(node.inputs[0], ga), (node.inputs[1], gb)]
        if k == "add":
            return [(node.inputs[0], _unbroadcast(g, vals[0].shape)),
                    (node.inputs[1], _unbroadcast(g, vals[1].shape))]
        if k == "mul":
            return [(node.inputs[0], _unbroadcast(g * vals[1], vals[0].shape)),
                    (node.inputs[1], _unbroadcast(g * vals[0], vals[1].shape))]
        if k == "tanh":
            y = v[nid]
            return [(node.inputs[0], g * (1.0 - y * y))]
        if k == "relu":
            return [(node.inputs[0], g * (vals[0] > 0))]
        if k == "sigmoid":
            y = v[nid]
            return [(node.inputs[0], g * y * (1.0 - y))]
        if k == "silu":
            s = expit(vals[0])
            return [(node.inputs[0], g * s * (1.0 + vals[0] * (1.0 - s)))]
        if k == "softmax":
            ax = node.attrs["axis"]
            y = v[nid]
            dot = np.sum(g * y, axis=ax, keepdims=True)
            return [(node.inputs[0], (g - dot) * y)]
        if k == "layernorm":
            ax, eps = node.attrs["axis"], node.attrs["eps"]
            x = vals[0]
            n = x.shape[ax]
            c = x - np.mean(x, axis=ax, keepdims=True)
            sd = np.sqrt(np.mean(c * c, axis=ax, keepdims=True))
            gc = (g - np.mean(g, axis=ax, keepdims=True)) / (sd + eps)
            num = np.sum(g * c, axis=ax, keepdims=True)
            den = n * sd * (sd + eps) ** 2
            term = np.divide(c * num, den, out=np.zeros_like(c),
                             where=den > 0)
            return [(node.inputs[0], gc - term)]
        if k == "ssm":
            return self._vjp_ssm(node, nid, g)
        if k == "sum":
            ax = node.attrs["axis"]
            x = vals[0]
            if ax is None:
                return [(node.inputs[0], np.full_like(x, g))]
            return [(node.inputs[0],
                     np.broadcast_to(np.expand_dims(g, ax), x.shape).copy())]
        if k == "mean":
            ax = node.attrs["axis"]
            x = vals[0]
            if ax is None:
                return [(node.inputs[0], np.full_like(x, g / x.size))]
            gx = np.broadcast_to(np.expand_dims(g, ax), x.shape) / x.shape[ax]
            return [(node.inputs[0], gx.copy())]
        if k == "concat":
            ax = node.attrs["axis"]
            out = []
            off = 0
            for inp, val in zip(node.inputs, vals):
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(off, off + val.shape[ax])
                out.append((inp, g[tuple(sl)].copy()))
                off += val.shape[ax]
            return out
        if k == "slice":
            gx = np.zeros_like(vals[0])
            gx[_key_to_slices(node.attrs["key"])] = g
            return [(node.inputs[0], gx)]
        raise GraphError(f"no gradient rule for node kind {k!r}")

    def _vjp_ssm(self, node, nid, g):
        a, b, c, x = [self._values[i] for i in node.inputs]
        states = self._extras[nid]
        t_len = a.shape[0]
        ga, gb, gc = np.zeros_like(a), np.zeros_like(b), np.zeros_like(c)
        gx = np.zeros_like(x)
        gh = np.zeros_like(states[0])
        for t in range(t_len - 1, -1, -1):
            ga[t] = (gh * states[t]).sum(axis=1)
            gb[t] = gh @ x[t]
            gx[t] = b[t] @ gh
            gh = a[t][:, None] * gh
            gc[t] = states[t] @ g[t]
            gh += np.outer(c[t], g[t])
        return [(node.inputs[0], ga), (node.inputs[1], gb),
                (node.inputs[2], gc), (node.inputs[3], gx)]


def _key_to_slices(key) -> tuple:
    return tuple(slice(None) if k is None else slice(k[0], k[1]) for k in key)


def ssm_scan(a_seq, b_seq, c_seq, x_seq) -> np.ndarray:
    """Standalone selective scan: y[t] = c[t] @ H[t-1] with
    H[t] = a[t] * H[t-1] + outer(b[t], x[t]) and H[0] = 0."""
    g = CompGraph()
    ins = [g.input(n) for n in ("a", "b", "c", "x")]
    g.set_output(g.ssm(*ins))
    return g.forward({"a": a_seq, "b": b_seq, "c": c_seq, "x": x_seq})


def silu(x) -> np.ndarray:
    """Elementwise x * sigmoid(x)."""
    x = as_tensor(x)
    return x * expit(x)
