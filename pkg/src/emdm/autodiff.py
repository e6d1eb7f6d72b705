"""Reverse-mode automatic differentiation over a small closed op set.

Differentiation rules emit graph nodes instead of numeric tape entries, so
the gradient of a graph is itself a graph and can be differentiated again;
second derivatives come out of two ordinary reverse passes. That property
is what lets a training loss contain an input-gradient of the network.

Graphs are append-only and never mutated after construction: gradient()
returns a new graph sharing the (immutable) prefix of nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import NonScalarOutput, ShapeMismatch, UnboundInput

OP_KINDS = frozenset({
    "input", "constant", "add", "sub", "mul-elementwise", "scalar-mul",
    "matmul", "conv2d-zero-pad", "silu", "sum-all", "square",
    "broadcast-add-bias", "reshape", "sin-cos-embed",
})


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple
    shape: tuple
    name: str | None = None
    const: np.ndarray | None = None
    attrs: tuple = ()

    def attr(self, key, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default


def _as_f64(x):
    v = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d
    if v.ndim and not v.flags["C_CONTIGUOUS"]:
        v = np.ascontiguousarray(v)
    return v


class Graph:
    """Append-only expression graph; nodes are referenced by integer id."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: list[int] = []
        self._names: dict[str, int] = {}

    @property
    def num_nodes(self):
        return len(self.nodes)

    def shape(self, nid):
        return self.nodes[nid].shape

    def find(self, name):
        """Node id of the input with the given name."""
        return self._names[name]

    def _append(self, kind, inputs, shape, name=None, const=None, attrs=()):
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise ShapeMismatch(f"input id {i} out of range")
        self.nodes.append(Node(kind, tuple(inputs), tuple(shape), name, const, tuple(attrs)))
        return len(self.nodes) - 1

    # --- builders -----------------------------------------------------------

    def input(self, shape, name=None):
        if name is not None:
            if name in self._names:
                raise ShapeMismatch(f"duplicate input name {name!r}")
            self._names[name] = len(self.nodes)
        return self._append("input", (), shape, name=name)

    def constant(self, value):
        value = _as_f64(value)
        return self._append("constant", (), value.shape, const=value)

    def _same_shape(self, a, b, op):
        if self.shape(a) != self.shape(b):
            raise ShapeMismatch(f"{op}: {self.shape(a)} vs {self.shape(b)}")

    def add(self, a, b):
        self._same_shape(a, b, "add")
        return self._append("add", (a, b), self.shape(a))

    def sub(self, a, b):
        self._same_shape(a, b, "sub")
        return self._append("sub", (a, b), self.shape(a))

    def mul(self, a, b):
        self._same_shape(a, b, "mul-elementwise")
        return self._append("mul-elementwise", (a, b), self.shape(a))

    def smul(self, x, scale):
        """x scaled by a compile-time float (see smul_node for a node scale)."""
        return self._append("scalar-mul", (x,), self.shape(x), attrs=(("scale", float(scale)),))

    def smul_node(self, x, s):
        """x scaled by the value of a scalar-shaped node s."""
        if self.shape(s) != ():
            raise ShapeMismatch("scalar-mul: scaling node must be scalar-shaped")
        return self._append("scalar-mul", (x, s), self.shape(x))

    def matmul(self, a, b, ta=False, tb=False):
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 2 or len(sb) != 2:
            raise ShapeMismatch("matmul expects 2-D operands")
        (m, ka) = (sa[1], sa[0]) if ta else sa
        (kb, n) = (sb[1], sb[0]) if tb else sb
        if ka != kb:
            raise ShapeMismatch(f"matmul inner dims {ka} vs {kb}")
        return self._append("matmul", (a, b), (m, n), attrs=(("ta", ta), ("tb", tb)))

    def conv2d(self, x, k, mode="fwd", ksize=None):
        """Stride-1 zero-padded 'same' convolution family (odd square kernels).

        mode 'fwd'  : x is (B,Ci,H,W), k is a (Co,Ci,kh,kw) kernel.
        mode 'igrad': x is a (B,Co,H,W) cotangent, k the kernel; adjoint in x.
        mode 'kgrad': x is (B,Ci,H,W), k a (B,Co,H,W) cotangent; adjoint in
                      the kernel, whose (kh,kw) must be passed as ksize.
        """
        sx, sk = self.shape(x), self.shape(k)
        if mode == "fwd":
            if len(sx) != 4 or len(sk) != 4 or sk[1] != sx[1]:
                raise ShapeMismatch(f"conv2d fwd: {sx} with kernel {sk}")
            kh, kw = sk[2], sk[3]
            out = (sx[0], sk[0], sx[2], sx[3])
        elif mode == "igrad":
            if len(sx) != 4 or len(sk) != 4 or sk[0] != sx[1]:
                raise ShapeMismatch(f"conv2d igrad: {sx} with kernel {sk}")
            kh, kw = sk[2], sk[3]
            out = (sx[0], sk[1], sx[2], sx[3])
        elif mode == "kgrad":
            if ksize is None:
                raise ShapeMismatch("conv2d kgrad requires ksize")
            if len(sx) != 4 or len(sk) != 4 or sx[0] != sk[0] or sx[2:] != sk[2:]:
                raise ShapeMismatch(f"conv2d kgrad: {sx} with cotangent {sk}")
            kh, kw = ksize
            out = (sk[1], sx[1], kh, kw)
        else:
            raise ShapeMismatch(f"unknown conv2d mode {mode!r}")
        if kh != kw or kh % 2 != 1:
            raise ShapeMismatch("conv2d supports odd square kernels only")
        return self._append("conv2d-zero-pad", (x, k), out, attrs=(("mode", mode), ("ksize", (kh, kw))))

    def silu(self, x, order=0):
        if not 0 <= order <= 3:
            raise ShapeMismatch("silu derivative order supported up to 3")
        return self._append("silu", (x,), self.shape(x), attrs=(("order", order),))

    def sum_all(self, x):
        return self._append("sum-all", (x,), ())

    def square(self, x):
        return self._append("square", (x,), self.shape(x))

    def add_bias(self, x, b):
        """Broadcast-add b along the channel axis (axis 1) of x.

        b has shape (C,) (shared bias) or (B, C) (per-item bias); both are
        broadcast over any trailing spatial axes of x.
        """
        sx, sb = self.shape(x), self.shape(b)
        if len(sx) < 2:
            raise ShapeMismatch("broadcast-add-bias expects x with >= 2 dims")
        if sb != (sx[1],) and sb != (sx[0], sx[1]):
            raise ShapeMismatch(f"bias {sb} does not align with {sx}")
        return self._append("broadcast-add-bias", (x, b), sx)

    def reshape(self, x, shape):
        shape = tuple(int(s) for s in shape)
        if math.prod(self.shape(x)) != math.prod(shape):
            raise ShapeMismatch(f"reshape {self.shape(x)} -> {shape}")
        return self._append("reshape", (x,), shape)

    def time_embed(self, t, dim, order=0):
        """Sinusoidal features of a per-item scalar t of shape (B, 1).

        Columns are [sin(w_i t), cos(w_i t)] over a geometric frequency
        ladder; order k gives the k-th derivative in t (frequency-scaled,
        phase-shifted), which keeps the rule set closed under gradients.
        """
        st = self.shape(t)
        if len(st) != 2 or st[1] != 1:
            raise ShapeMismatch("sin-cos-embed expects t of shape (B, 1)")
        if dim < 2 or dim % 2 != 0:
            raise ShapeMismatch("embedding dim must be even and >= 2")
        return self._append("sin-cos-embed", (t,), (st[0], dim),
                            attrs=(("dim", dim), ("order", order)))


# --- forward rules ----------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu_forward(x, order):
    s = _sigmoid(x)
    if order == 0:
        return x * s
    if order == 1:
        return s * (1.0 + x * (1.0 - s))
    u = s * (1.0 - s)
    if order == 2:
        return u * (2.0 + x * (1.0 - 2.0 * s))
    w = 1.0 - 2.0 * s
    return 3.0 * u * w + x * (u * w * w - 2.0 * u * u)


def embed_frequencies(dim):
    half = dim // 2
    if half == 1:
        return np.ones(1)
    return 100.0 ** (np.arange(half) / (half - 1))


def _embed_forward(t, dim, order):
    w = embed_frequencies(dim)
    ang = t * w[None, :] + order * (np.pi / 2.0)
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if order:
        feats = feats * np.tile(w**order, 2)[None, :]
    return feats


def _forward(node, vals):
    k = node.kind
    if k == "add":
        return vals[0] + vals[1]
    if k == "sub":
        return vals[0] - vals[1]
    if k == "mul-elementwise":
        return vals[0] * vals[1]
    if k == "scalar-mul":
        s = node.attr("scale") if len(node.inputs) == 1 else vals[1]
        return vals[0] * s
    if k == "matmul":
        a = vals[0].T if node.attr("ta") else vals[0]
        b = vals[1].T if node.attr("tb") else vals[1]
        return a @ b
    if k == "conv2d-zero-pad":
        mode = node.attr("mode")
        if mode == "fwd":
            return _kernels.conv2d_fwd(vals[0], vals[1])
        if mode == "igrad":
            return _kernels.conv2d_igrad(vals[0], vals[1])
        kh, kw = node.attr("ksize")
        return _kernels.conv2d_kgrad(vals[0], vals[1], kh, kw)
    if k == "silu":
        return _silu_forward(vals[0], node.attr("order"))
    if k == "sum-all":
        return np.asarray(np.sum(vals[0]))
    if k == "square":
        return vals[0] * vals[0]
    if k == "broadcast-add-bias":
        x, b = vals
        if b.ndim == 1:
            b = b.reshape((1, -1) + (1,) * (x.ndim - 2))
        else:
            b = b.reshape(b.shape + (1,) * (x.ndim - 2))
        return x + b
    if k == "reshape":
        return np.ascontiguousarray(vals[0].reshape(node.shape))
    if k == "sin-cos-embed":
        return _embed_forward(vals[0], node.attr("dim"), node.attr("order"))
    raise ShapeMismatch(f"no forward rule for {k!r}")


def evaluate(graph, bindings, outputs=None):
    """Forward evaluation; returns the values of the requested output nodes.

    bindings maps input names (or node ids) to arrays. Only nodes reachable
    from the outputs are computed.
    """
    out_ids = list(graph.outputs if outputs is None else outputs)
    resolved = {}
    for key, val in bindings.items():
        nid = graph.find(key) if isinstance(key, str) else key
        resolved[nid] = val
    need = set()
    stack = list(out_ids)
    while stack:
        nid = stack.pop()
        if nid in need:
            continue
        need.add(nid)
        stack.extend(graph.nodes[nid].inputs)
    vals = [None] * len(graph.nodes)
    for nid in sorted(need):
        node = graph.nodes[nid]
        if node.kind == "input":
            if nid not in resolved:
                raise UnboundInput(f"input {node.name or nid} not bound")
            v = _as_f64(resolved[nid])
            if v.shape != node.shape:
                raise ShapeMismatch(
                    f"binding for {node.name or nid}: {v.shape} != {node.shape}")
            vals[nid] = v
        elif node.kind == "constant":
            vals[nid] = node.const
        else:
            vals[nid] = _forward(node, [vals[i] for i in node.inputs])
    return [vals[o] for o in out_ids]


# --- vector-Jacobian rules (emit graph nodes) --------------------------------


def _vjp(g2, nid, grad):
    node = g2.nodes[nid]
    k = node.kind
    a = node.inputs[0] if node.inputs else None
    if k == "add":
        return [(node.inputs[0], grad), (node.inputs[1], grad)]
    if k == "sub":
        return [(node.inputs[0], grad), (node.inputs[1], g2.smul(grad, -1.0))]
    if k == "mul-elementwise":
        b = node.inputs[1]
        return [(a, g2.mul(grad, b)), (b, g2.mul(grad, a))]
    if k == "scalar-mul":
        if len(node.inputs) == 1:
            return [(a, g2.smul(grad, node.attr("scale")))]
        s = node.inputs[1]
        return [(a, g2.smul_node(grad, s)), (s, g2.sum_all(g2.mul(grad, a)))]
    if k == "matmul":
        b = node.inputs[1]
        ta, tb = node.attr("ta"), node.attr("tb")
        ga = g2.matmul(b, grad, tb, True) if ta else g2.matmul(grad, b, False, not tb)
        gb = g2.matmul(grad, a, True, ta) if tb else g2.matmul(a, grad, not ta, False)
        return [(a, ga), (b, gb)]
    if k == "conv2d-zero-pad":
        x, kk = node.inputs
        mode = node.attr("mode")
        ksize = node.attr("ksize")
        if mode == "fwd":
            return [(x, g2.conv2d(grad, kk, mode="igrad")),
                    (kk, g2.conv2d(x, grad, mode="kgrad", ksize=ksize))]
        if mode == "igrad":
            return [(x, g2.conv2d(grad, kk, mode="fwd")),
                    (kk, g2.conv2d(grad, x, mode="kgrad", ksize=ksize))]
        # kgrad: grad is kernel-shaped
        return [(x, g2.conv2d(kk, grad, mode="igrad")),
                (kk, g2.conv2d(x, grad, mode="fwd"))]
    if k == "silu":
        order = node.attr("order")
        return [(a, g2.mul(grad, g2.silu(a, order=order + 1)))]
    if k == "sum-all":
        ones = g2.constant(np.ones(g2.shape(a)))
        return [(a, g2.smul_node(ones, grad))]
    if k == "square":
        return [(a, g2.smul(g2.mul(grad, a), 2.0))]
    if k == "broadcast-add-bias":
        x, b = node.inputs
        sx, sb = g2.shape(x), g2.shape(b)
        if sb == g2.shape(grad):
            return [(x, grad), (b, grad)]
        bb, cc = sx[0], sx[1]
        spatial = math.prod(sx[2:]) if len(sx) > 2 else 1
        r1 = g2.reshape(grad, (bb * cc, spatial))
        s1 = g2.matmul(r1, g2.constant(np.ones((spatial, 1))))
        per_item = g2.reshape(s1, (bb, cc))
        if sb == (bb, cc):
            return [(x, grad), (b, per_item)]
        s2 = g2.matmul(g2.constant(np.ones((1, bb))), per_item)
        return [(x, grad), (b, g2.reshape(s2, (cc,)))]
    if k == "reshape":
        return [(a, g2.reshape(grad, g2.shape(a)))]
    if k == "sin-cos-embed":
        dim, order = node.attr("dim"), node.attr("order")
        deriv = g2.time_embed(a, dim, order=order + 1)
        return [(a, g2.matmul(g2.mul(grad, deriv), g2.constant(np.ones((dim, 1)))))]
    raise ShapeMismatch(f"no vjp rule for {k!r}")


def gradient(graph, output, wrt):
    """Reverse pass from a scalar output node.

    Returns (new_graph, grad_ids) where grad_ids[i] evaluates the gradient
    with respect to wrt[i]. The source graph is left untouched; the new
    graph shares its node prefix, so the result can be differentiated again.
    """
    if graph.nodes[output].shape != ():
        raise NonScalarOutput(f"output node has shape {graph.nodes[output].shape}")
    g2 = Graph()
    g2.nodes = list(graph.nodes)
    g2._names = dict(graph._names)
    adjoint = {output: g2.constant(np.asarray(1.0))}
    for nid in range(output, -1, -1):
        if nid not in adjoint:
            continue
        node = g2.nodes[nid]
        if node.kind in ("input", "constant"):
            continue
        for inp, contrib in _vjp(g2, nid, adjoint[nid]):
            if inp in adjoint:
                adjoint[inp] = g2.add(adjoint[inp], contrib)
            else:
                adjoint[inp] = contrib
    grad_ids = []
    for w in wrt:
        gid = adjoint.get(w)
        if gid is None:
            gid = g2.constant(np.zeros(g2.shape(w)))
        grad_ids.append(gid)
    g2.outputs = list(grad_ids)
    return g2, grad_ids


# --- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment buffers, keyed like the parameter set."""

    m: dict
    v: dict


def adam_init(params):
    return AdamState(m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, step=1):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    b1, b2 = betas
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        if name not in grads:
            raise ShapeMismatch(f"missing gradient for {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param {p.shape} for {name!r}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(m=new_m, v=new_v)
