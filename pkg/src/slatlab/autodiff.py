"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Forward values are computed eagerly onto a Tape. Named injection sites mark
latent representations; one backward sweep fills gradients for every node,
so site gradients come out of the same sweep that produces input and
parameter gradients. A second, graph-building backward mode supports
double differentiation for the smooth op subset (dense/softplus/add/scale/
cross-entropy), which the gradient-alignment trainer needs.
"""

from __future__ import annotations

import numpy as np

# Value carrier: float64 ndarray. product(shape) == data length and row-major
# layout are numpy guarantees.
Tensor = np.ndarray

# Ops accepted by Tape.record. Internal ops (adjoint-graph plumbing) are not
# part of this public set but share the same VJP machinery.
PUBLIC_OPS = (
    "dense", "conv2d", "relu", "softplus", "maxpool2x2",
    "flatten", "add", "scale", "loss_softmax_xent",
)

# Ops whose backward pass can itself be recorded as tape nodes.
DOUBLE_DIFF_OPS = ("dense", "softplus", "add", "scale", "loss_softmax_xent", "leaf")


class ShapeMismatch(Exception):
    def __init__(self, op, expected, got):
        super().__init__(f"{op}: expected {expected}, got {got}")
        self.op = op
        self.expected = expected
        self.got = got


class LabelOutOfRange(Exception):
    pass


class NonScalarLoss(Exception):
    pass


class UnknownSite(Exception):
    def __init__(self, site):
        super().__init__(f"no injection site registered with id {site}")
        self.site = site


class UnsupportedOps(Exception):
    pass


_pass_counts = {"forward": 0, "backward": 0}


def reset_pass_counts():
    _pass_counts["forward"] = 0
    _pass_counts["backward"] = 0


def pass_counts():
    return dict(_pass_counts)


def count_forward():
    """Called once per full forward construction (model pass or replay)."""
    _pass_counts["forward"] += 1


def _as_f64(value):
    return np.asarray(value, dtype=np.float64)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z):
    s = np.exp(z - z.max(axis=-1, keepdims=True))
    return s / s.sum(axis=-1, keepdims=True)


def per_example_xent(logits, labels):
    """Stable -log softmax(logits)[label] per row, without a tape."""
    z = np.atleast_2d(_as_f64(logits))
    y = np.atleast_1d(labels)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    return lse - z[np.arange(z.shape[0]), y]


class Node:
    __slots__ = ("idx", "op", "inputs", "value", "params", "meta")

    def __init__(self, idx, op, inputs, value, params=None, meta=None):
        self.idx = idx
        self.op = op
        self.inputs = inputs          # tuple of node indices
        self.value = value
        self.params = params or {}    # non-tensor op parameters (labels, scale c, ...)
        self.meta = meta              # cached intermediates for the backward pass

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Node {self.idx} {self.op} {self.value.shape}>"


class Tape:
    """One recorded forward pass: topologically ordered nodes + named sites."""

    def __init__(self):
        self.nodes = []
        self.sites = {}      # site id -> node idx
        self.grads = {}      # node idx -> ndarray, filled by backward()
        self.input = None    # set by model forward helpers
        self.params = {}     # param name -> Node, set by model forward helpers

    def leaf(self, value):
        node = Node(len(self.nodes), "leaf", (), _as_f64(value))
        self.nodes.append(node)
        return node

    def record(self, op, inputs, **params):
        """Append one op; the forward value is computed eagerly."""
        in_nodes = [x if isinstance(x, Node) else self.leaf(x) for x in inputs]
        fwd = _FORWARD.get(op)
        if fwd is None:
            raise ValueError(f"unknown op kind {op!r}")
        value, meta = fwd([n.value for n in in_nodes], params)
        node = Node(len(self.nodes), op, tuple(n.idx for n in in_nodes),
                    value, params, meta)
        self.nodes.append(node)
        return node

    def register_site(self, site_id, node):
        self.sites[int(site_id)] = node.idx

    def site_node(self, site_id):
        if site_id not in self.sites:
            raise UnknownSite(site_id)
        return self.nodes[self.sites[site_id]]

    def grad(self, node):
        return self.grads.get(node.idx)

    def site_grads(self):
        """Gradients at every registered site, keyed by site id."""
        return {k: self.grads[idx] for k, idx in self.sites.items()}


# ---------------------------------------------------------------------------
# forward implementations: values[i] aligns with node.inputs[i]

def _fwd_dense(values, params):
    x, w, b = values
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch("dense", f"x[..,{w.shape[0]}] @ {w.shape}", x.shape)
    if b.shape != (w.shape[1],):
        raise ShapeMismatch("dense", (w.shape[1],), b.shape)
    return x @ w + b, None


def _fwd_conv2d(values, params):
    x, k, b = values
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeMismatch("conv2d", "x[B,C,H,W], k[F,C,kh,kw]",
                            (x.shape, k.shape))
    f, c, kh, kw = k.shape
    if kh != kw or kh % 2 != 1:
        raise ShapeMismatch("conv2d", "odd square kernel", (kh, kw))
    if b.shape != (f,):
        raise ShapeMismatch("conv2d", (f,), b.shape)
    p = kh // 2
    bsz, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h * w, c * kh * kw)
    out = cols @ k.reshape(f, -1).T
    out = out.reshape(bsz, h, w, f).transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out), {"cols": cols}


def _fwd_relu(values, params):
    return np.maximum(values[0], 0.0), None


def _fwd_softplus(values, params):
    return np.logaddexp(0.0, values[0]), None


def _fwd_maxpool(values, params):
    x = values[0]
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatch("maxpool2x2", "x[B,C,2m,2n]", x.shape)
    bsz, c, h, w = x.shape
    win = x.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(bsz, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, {"idx": idx}


def _fwd_flatten(values, params):
    x = values[0]
    if x.ndim < 2:
        raise ShapeMismatch("flatten", "rank >= 2", x.shape)
    return x.reshape(x.shape[0], -1), None


def _fwd_add(values, params):
    a, b = values
    if a.shape != b.shape:
        raise ShapeMismatch("add", a.shape, b.shape)
    return a + b, None


def _fwd_scale(values, params):
    return values[0] * params["c"], None


def _fwd_loss_xent(values, params):
    z = values[0]
    labels = params["labels"]
    if z.ndim == 1:
        y = int(labels)
        if not 0 <= y < z.shape[0]:
            raise LabelOutOfRange(f"label {y} for {z.shape[0]} classes")
        m = z.max()
        loss = m + np.log(np.exp(z - m).sum()) - z[y]
        return np.asarray(loss), {"p": softmax(z)}
    if z.ndim == 2:
        y = np.asarray(labels)
        if y.shape != (z.shape[0],):
            raise ShapeMismatch("loss_softmax_xent", (z.shape[0],), y.shape)
        if y.min() < 0 or y.max() >= z.shape[1]:
            raise LabelOutOfRange(f"labels outside [0,{z.shape[1]})")
        losses = per_example_xent(z, y)
        red = params.get("reduction", "mean")
        loss = losses.mean() if red == "mean" else losses.sum()
        return np.asarray(loss), {"p": softmax(z)}
    raise ShapeMismatch("loss_softmax_xent", "[C] or [B,C]", z.shape)


# internal ops --------------------------------------------------------------

def _fwd_matmul(values, params):
    a, b = values
    return a @ b, None


def _fwd_transpose(values, params):
    return values[0].T, None


def _fwd_mul(values, params):
    a, b = values
    if a.shape != b.shape:
        raise ShapeMismatch("mul", a.shape, b.shape)
    return a * b, None


def _fwd_sub(values, params):
    a, b = values
    if a.shape != b.shape:
        raise ShapeMismatch("sub", a.shape, b.shape)
    return a - b, None


def _fwd_sigmoid(values, params):
    s = sigmoid(values[0])
    return s, {"s": s}


def _fwd_smul(values, params):
    t, s = values
    if s.shape != ():
        raise ShapeMismatch("smul", "scalar second input", s.shape)
    return t * s, None


def _fwd_sum_rows(values, params):
    return values[0].sum(axis=0), None


def _fwd_sum_all(values, params):
    return np.asarray(values[0].sum()), None


def _fwd_rows_dot(values, params):
    u, v = values
    if u.shape != v.shape or u.ndim != 2:
        raise ShapeMismatch("rows_dot", "matching [B,d]", (u.shape, v.shape))
    return (u * v).sum(axis=1), None


def _fwd_sqrt(values, params):
    out = np.sqrt(values[0])
    return out, {"out": out}


def _fwd_div(values, params):
    a, b = values
    if a.shape != b.shape:
        raise ShapeMismatch("div", a.shape, b.shape)
    return a / b, None


def _fwd_mean_all(values, params):
    return np.asarray(values[0].mean()), None


def _fwd_xent_bwd(values, params):
    # (softmax(z) - onehot(labels)) * factor; adjoint of the xent loss node
    z = values[0]
    labels = params["labels"]
    p = softmax(z)
    out = p.copy()
    if z.ndim == 1:
        out[int(labels)] -= 1.0
    else:
        out[np.arange(z.shape[0]), np.asarray(labels)] -= 1.0
    return out * params["factor"], {"p": p}


_FORWARD = {
    "dense": _fwd_dense,
    "conv2d": _fwd_conv2d,
    "relu": _fwd_relu,
    "softplus": _fwd_softplus,
    "maxpool2x2": _fwd_maxpool,
    "flatten": _fwd_flatten,
    "add": _fwd_add,
    "scale": _fwd_scale,
    "loss_softmax_xent": _fwd_loss_xent,
    "matmul": _fwd_matmul,
    "transpose": _fwd_transpose,
    "mul": _fwd_mul,
    "sub": _fwd_sub,
    "sigmoid": _fwd_sigmoid,
    "smul": _fwd_smul,
    "sum_rows": _fwd_sum_rows,
    "sum_all": _fwd_sum_all,
    "rows_dot": _fwd_rows_dot,
    "sqrt": _fwd_sqrt,
    "div": _fwd_div,
    "mean_all": _fwd_mean_all,
    "xent_bwd": _fwd_xent_bwd,
}


# ---------------------------------------------------------------------------
# numeric VJPs: given upstream gradient g (ndarray), return per-input grads

def _vjp_dense(tape, node, g):
    x, w, _ = (tape.nodes[i].value for i in node.inputs)
    if x.ndim == 1:
        return [g @ w.T, np.outer(x, g), g]
    return [g @ w.T, x.T @ g, g.sum(axis=0)]


def _vjp_conv2d(tape, node, g):
    x, k, _ = (tape.nodes[i].value for i in node.inputs)
    f, c, kh, kw = k.shape
    bsz, _, h, w = x.shape
    p = kh // 2
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * h * w, f)
    cols = node.meta["cols"]
    gk = (cols.T @ g2).T.reshape(f, c, kh, kw)
    # scatter in channels-last layout so every slice-add is contiguous
    dwin = (g2 @ k.reshape(f, -1)).reshape(bsz, h, w, c, kh, kw)
    gxp = np.zeros((bsz, h + 2 * p, w + 2 * p, c))
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + w, :] += dwin[:, :, :, :, i, j]
    gx = gxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
    return [np.ascontiguousarray(gx), gk, g.sum(axis=(0, 2, 3))]


def _vjp_relu(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    return [g * (x > 0)]


def _vjp_softplus(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    return [g * sigmoid(x)]


def _vjp_maxpool(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    bsz, c, h, w = x.shape
    idx = node.meta["idx"]
    gwin = np.zeros((bsz, c, h // 2, w // 2, 4))
    np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
    gwin = gwin.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return [gwin.reshape(bsz, c, h, w)]


def _vjp_flatten(tape, node, g):
    return [g.reshape(tape.nodes[node.inputs[0]].value.shape)]


def _vjp_add(tape, node, g):
    return [g, g]


def _vjp_scale(tape, node, g):
    return [g * node.params["c"]]


def _vjp_loss_xent(tape, node, g):
    z = tape.nodes[node.inputs[0]].value
    p = node.meta["p"]
    gz = p.copy()
    if z.ndim == 1:
        gz[int(node.params["labels"])] -= 1.0
    else:
        gz[np.arange(z.shape[0]), np.asarray(node.params["labels"])] -= 1.0
        if node.params.get("reduction", "mean") == "mean":
            gz /= z.shape[0]
    return [gz * g]


def _vjp_matmul(tape, node, g):
    a, b = (tape.nodes[i].value for i in node.inputs)
    return [g @ b.T, a.T @ g]


def _vjp_transpose(tape, node, g):
    return [g.T]


def _vjp_mul(tape, node, g):
    a, b = (tape.nodes[i].value for i in node.inputs)
    return [g * b, g * a]


def _vjp_sub(tape, node, g):
    return [g, -g]


def _vjp_sigmoid(tape, node, g):
    s = node.meta["s"]
    return [g * s * (1.0 - s)]


def _vjp_smul(tape, node, g):
    t, s = (tape.nodes[i].value for i in node.inputs)
    return [g * s, np.asarray((g * t).sum())]


def _vjp_sum_rows(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    return [np.broadcast_to(g, x.shape)]


def _vjp_sum_all(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    return [np.broadcast_to(g, x.shape)]


def _vjp_rows_dot(tape, node, g):
    u, v = (tape.nodes[i].value for i in node.inputs)
    return [g[:, None] * v, g[:, None] * u]


def _vjp_sqrt(tape, node, g):
    return [g * 0.5 / node.meta["out"]]


def _vjp_div(tape, node, g):
    a, b = (tape.nodes[i].value for i in node.inputs)
    return [g / b, -g * a / (b * b)]


def _vjp_mean_all(tape, node, g):
    x = tape.nodes[node.inputs[0]].value
    return [np.broadcast_to(g / x.size, x.shape)]


def _vjp_xent_bwd(tape, node, g):
    # d/dz of (softmax(z)-onehot)*factor contracted with upstream g:
    # per row, J_softmax^T g = p*g - p*(p.g)
    p = node.meta["p"]
    t = (p * g).sum(axis=-1, keepdims=True)
    return [node.params["factor"] * (p * g - p * t)]


_NUMERIC_VJPS = {
    "dense": _vjp_dense,
    "conv2d": _vjp_conv2d,
    "relu": _vjp_relu,
    "softplus": _vjp_softplus,
    "maxpool2x2": _vjp_maxpool,
    "flatten": _vjp_flatten,
    "add": _vjp_add,
    "scale": _vjp_scale,
    "loss_softmax_xent": _vjp_loss_xent,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "mul": _vjp_mul,
    "sub": _vjp_sub,
    "sigmoid": _vjp_sigmoid,
    "smul": _vjp_smul,
    "sum_rows": _vjp_sum_rows,
    "sum_all": _vjp_sum_all,
    "rows_dot": _vjp_rows_dot,
    "sqrt": _vjp_sqrt,
    "div": _vjp_div,
    "mean_all": _vjp_mean_all,
    "xent_bwd": _vjp_xent_bwd,
}


# graph-building VJPs for the double-differentiable subset ------------------

def _gvjp_dense(tape, node, g):
    xn, wn, _ = (tape.nodes[i] for i in node.inputs)
    if xn.value.ndim != 2:
        raise UnsupportedOps("double backward through rank-1 dense")
    gx = tape.record("matmul", [g, tape.record("transpose", [wn])])
    gw = tape.record("matmul", [tape.record("transpose", [xn]), g])
    gb = tape.record("sum_rows", [g])
    return [gx, gw, gb]


def _gvjp_softplus(tape, node, g):
    xn = tape.nodes[node.inputs[0]]
    return [tape.record("mul", [g, tape.record("sigmoid", [xn])])]


def _gvjp_add(tape, node, g):
    return [g, g]


def _gvjp_scale(tape, node, g):
    return [tape.record("scale", [g], c=node.params["c"])]


def _gvjp_loss_xent(tape, node, g):
    zn = tape.nodes[node.inputs[0]]
    factor = 1.0
    if zn.value.ndim == 2 and node.params.get("reduction", "mean") == "mean":
        factor = 1.0 / zn.value.shape[0]
    adjoint = tape.record("xent_bwd", [zn],
                          labels=node.params["labels"], factor=factor)
    return [tape.record("smul", [adjoint, g])]


_GRAPH_VJPS = {
    "dense": _gvjp_dense,
    "softplus": _gvjp_softplus,
    "add": _gvjp_add,
    "scale": _gvjp_scale,
    "loss_softmax_xent": _gvjp_loss_xent,
}


def backward(tape, loss, as_graph=False):
    """One reverse sweep from a scalar loss node.

    Numeric mode fills tape.grads (node idx -> ndarray) and returns it.
    Graph mode appends the adjoint computation to the tape and returns a
    dict node idx -> Node, enabling gradients of gradient expressions.
    """
    if loss.value.shape != ():
        raise NonScalarLoss(f"loss has shape {loss.value.shape}")
    _pass_counts["backward"] += 1

    if as_graph:
        seed = tape.leaf(1.0)
    else:
        seed = np.ones(())
    adj = {loss.idx: seed}

    for i in range(loss.idx, -1, -1):
        g = adj.get(i)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.op == "leaf":
            continue
        if as_graph:
            rule = _GRAPH_VJPS.get(node.op)
            if rule is None:
                raise UnsupportedOps(f"no double-backward rule for op {node.op!r}")
        else:
            rule = _NUMERIC_VJPS[node.op]
        for inp, gi in zip(node.inputs, rule(tape, node, g)):
            if gi is None:
                continue
            if inp in adj:
                if as_graph:
                    adj[inp] = tape.record("add", [adj[inp], gi])
                else:
                    adj[inp] = adj[inp] + gi
            else:
                adj[inp] = gi

    if not as_graph:
        tape.grads = adj
    return adj


def inject(template, deltas):
    """Replay a recorded forward pass with h_k <- h_k + delta_k at given sites.

    Returns a fresh Tape whose .of(node) maps template nodes to replayed
    ones; sites not named in `deltas` are propagated unperturbed.
    """
    site_to_delta = {}
    for k, d in deltas.items():
        if k not in template.sites:
            raise UnknownSite(k)
        d = _as_f64(d)
        want = template.nodes[template.sites[k]].value.shape
        if d.shape != want:
            raise ShapeMismatch("inject", want, d.shape)
        site_to_delta[template.sites[k]] = d

    new = Tape()
    mapping = {}
    for node in template.nodes:
        if node.op == "leaf":
            replayed = new.leaf(node.value)
        else:
            replayed = new.record(node.op, [mapping[i] for i in node.inputs],
                                  **node.params)
        if node.idx in site_to_delta:
            replayed = new.record("add", [replayed,
                                          new.leaf(site_to_delta[node.idx])])
        mapping[node.idx] = replayed
    for k, idx in template.sites.items():
        new.register_site(k, mapping[idx])
    new.input = mapping[template.input.idx] if template.input is not None else None
    new.params = {name: mapping[n.idx] for name, n in template.params.items()}
    new._mapping = mapping
    count_forward()
    return new


def replayed_node(injected_tape, template_node):
    return injected_tape._mapping[template_node.idx]


def grad_check(builder, point, h=1e-5):
    """Max relative error between tape gradients and central differences.

    `builder(tape, x_node) -> loss_node` must describe a graph that is smooth
    at `point` (or whose kinks are further than ~10h away).
    """
    point = _as_f64(point)
    tape = Tape()
    x = tape.leaf(point)
    loss = builder(tape, x)
    backward(tape, loss)
    analytic = tape.grads[x.idx]

    fd = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        for sgn in (+1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sgn * h
            t2 = Tape()
            loss2 = builder(t2, t2.leaf(bumped.reshape(point.shape)))
            fd.reshape(-1)[i] += sgn * loss2.value / (2.0 * h)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max())
