"""Model zoo with declared latent injection sites.

Site ids index latent representations: 0 is the network input, higher ids
sit at declared points between layer groups, always strictly before the
final classifier layer. Forward passes capture latent values and register
the sites on the tape so one backward sweep yields all site gradients.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import ShapeMismatch, Tape, UnknownSite, count_forward

CKPT_MAGIC = b"SLATCKPT"
CKPT_VERSION = 1

PARAMETRIC = ("dense", "conv2d")


class ShapeTooSmall(Exception):
    pass


class CheckpointError(Exception):
    pass


class Layer:
    """One op application; dense/conv layers own their parameter arrays."""

    def __init__(self, kind, **arrays):
        self.kind = kind
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}


class Model:
    def __init__(self, layers, sites, eta=None, activation="relu",
                 input_shape=(), n_classes=2, name="model"):
        self.layers = list(layers)
        self.site_positions = {int(k): int(p) for k, p in sites.items()}
        for k, p in self.site_positions.items():
            if not 0 <= p <= len(self.layers) - 1:
                raise ValueError(
                    f"site {k} at position {p}: injection must happen strictly "
                    f"before the final layer")
        self.K = sorted(self.site_positions)
        self.eta = {int(k): float(v) for k, v in (eta or {}).items()}
        self.activation = activation
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self.name = name

    def parameters(self):
        """Named parameter arrays, in deterministic order."""
        out = {}
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.arrays.items():
                out[f"layer{i}.{pname}"] = arr
        return out

    def set_uniform_eta(self, value):
        self.eta = {k: float(value) for k in self.K}

    def copy(self):
        layers = [Layer(l.kind, **{n: a.copy() for n, a in l.arrays.items()})
                  for l in self.layers]
        return Model(layers, self.site_positions, self.eta, self.activation,
                     self.input_shape, self.n_classes, self.name)


def _check_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ShapeMismatch("forward", ("B",) + model.input_shape, x.shape)
    return x


def _apply_layer(tape, layer, cur, layer_idx):
    kind = layer.kind
    if kind in PARAMETRIC:
        nodes = []
        for pname, arr in layer.arrays.items():
            pn = tape.leaf(arr)
            tape.params[f"layer{layer_idx}.{pname}"] = pn
            nodes.append(pn)
        return tape.record(kind, [cur] + nodes)
    return tape.record(kind, [cur])


def forward_with_latents(model, x, deltas=None):
    """Run the model, returning (logits node, latent record, tape).

    `deltas` maps site ids to perturbations added to the latent at that
    site before propagation continues; omitted sites pass through clean.
    """
    x = _check_batch(model, x)
    deltas = deltas or {}
    for k in deltas:
        if k not in model.site_positions:
            raise UnknownSite(k)

    pos_to_site = {p: k for k, p in model.site_positions.items()}
    tape = Tape()
    cur = tape.leaf(x)
    tape.input = cur
    latents = {}
    for p in range(len(model.layers) + 1):
        k = pos_to_site.get(p)
        if k is not None:
            if k in deltas:
                d = np.asarray(deltas[k], dtype=np.float64)
                if d.shape != cur.value.shape:
                    raise ShapeMismatch(f"delta at site {k}", cur.value.shape, d.shape)
                cur = tape.record("add", [cur, tape.leaf(d)])
            tape.register_site(k, cur)
            latents[k] = cur.value
        if p < len(model.layers):
            cur = _apply_layer(tape, model.layers[p], cur, p)
    count_forward()
    return cur, latents, tape


def forward_logits(model, x):
    logits, _, _ = forward_with_latents(model, x)
    return logits.value


def truncated_forward(model, site_id, h):
    """Forward from a site value treated as a leaf input of the tail network."""
    if site_id not in model.site_positions:
        raise UnknownSite(site_id)
    tape = Tape()
    cur = tape.leaf(h)
    tape.input = cur
    for p in range(model.site_positions[site_id], len(model.layers)):
        cur = _apply_layer(tape, model.layers[p], cur, p)
    count_forward()
    return cur, tape


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def build_linear(d_in, classes, seed=0):
    """Single dense layer; the oracle model for attack-optimality tests."""
    if d_in < 1 or classes < 2:
        raise ValueError("need d_in >= 1 and classes >= 2")
    rng = np.random.default_rng(seed)
    layer = Layer("dense", w=_glorot(rng, d_in, classes, (d_in, classes)),
                  b=np.zeros(classes))
    return Model([layer], sites={0: 0}, input_shape=(d_in,), n_classes=classes,
                 name="linear")


def build_toy_mlp(hidden=16, activation="relu", seed=0):
    """2-d input, one hidden layer, 2 classes; injection sites K={0,1}."""
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    rng = np.random.default_rng(seed)
    layers = [
        Layer("dense", w=_glorot(rng, 2, hidden, (2, hidden)), b=np.zeros(hidden)),
        Layer(activation),
        Layer("dense", w=_glorot(rng, hidden, 2, (hidden, 2)), b=np.zeros(2)),
    ]
    return Model(layers, sites={0: 0, 1: 2}, activation=activation,
                 input_shape=(2,), n_classes=2, name="toy_mlp")


def build_small_cnn(in_shape=(1, 28, 28), classes=10, activation="relu",
                    seed=0, sites=(0, 1, 2)):
    """conv16-pool / conv32-pool / dense; sites at input and after each block.

    `sites` selects a subset of {0: input, 1: after block 1, 2: after block 2},
    which is how the deeper-injection ablation variants are built.
    """
    c, h, w = in_shape
    if h < 8 or w < 8:
        raise ShapeTooSmall(f"need H,W >= 8, got {in_shape}")
    if h % 4 or w % 4:
        raise ShapeTooSmall(f"two 2x2 pools need H,W divisible by 4, got {in_shape}")
    rng = np.random.default_rng(seed)
    flat = 32 * (h // 4) * (w // 4)
    layers = [
        Layer("conv2d", w=_glorot(rng, c * 9, 16 * 9, (16, c, 3, 3)), b=np.zeros(16)),
        Layer(activation),
        Layer("maxpool2x2"),
        Layer("conv2d", w=_glorot(rng, 16 * 9, 32 * 9, (32, 16, 3, 3)), b=np.zeros(32)),
        Layer(activation),
        Layer("maxpool2x2"),
        Layer("flatten"),
        Layer("dense", w=_glorot(rng, flat, classes, (flat, classes)),
              b=np.zeros(classes)),
    ]
    positions = {0: 0, 1: 3, 2: 6}
    chosen = {k: positions[k] for k in sites}
    return Model(layers, sites=chosen, activation=activation,
                 input_shape=tuple(in_shape), n_classes=classes, name="small_cnn")


_ZOO = {"linear": build_linear, "toy_mlp": build_toy_mlp, "small_cnn": build_small_cnn}


def save_checkpoint(model, path):
    """Versioned binary dump of named parameters, little-endian throughout."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in model.parameters().items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into {name: ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r}")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    out = {}
    off = 12
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += 8 * count
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if off != len(blob):
        raise CheckpointError("trailing bytes after last parameter record")
    return out


def load_into(model, state):
    params = model.parameters()
    if set(state) != set(params):
        raise CheckpointError(
            f"parameter names do not match: {sorted(set(state) ^ set(params))}")
    for name, arr in state.items():
        if arr.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {params[name].shape}")
        np.copyto(params[name], arr)
    return model
