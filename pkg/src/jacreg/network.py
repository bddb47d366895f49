"""Sequential (optionally residual) networks and their Jacobian products.

A forward pass records a :class:`CaptureRecord` that fixes the active region
of the input space. Given the record, :func:`jvp` and :func:`vjp` apply the
region's linear map ``W_R`` and its transpose without ever forming it, by
chaining the per-layer forward and backward modes.
"""

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from jacreg.errors import CaptureError, ShapeError
from jacreg.layers import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    ReLU,
    SmoothActivation,
)
from jacreg.ndcore import resolve_dtype

CHECKPOINT_FORMAT = "jacreg-checkpoint"
CHECKPOINT_VERSION = 1


class Network:
    """Layer stack with optional identity skip connections.

    ``residual_spans`` is a list of ``(start, stop)`` index pairs: the input
    of layer ``start`` is added to the output of layer ``stop - 1``. Spans
    must not overlap and must join shape-equal endpoints.
    """

    def __init__(self, layers, in_shape, residual_spans=(), input_stats=None):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        self.in_shape = tuple(int(d) for d in in_shape)
        shape = self.in_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.build(shape)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"network output must be a vector, got per-sample shape {shape}")
        self.out_shape = shape
        self.residual_spans = sorted((int(a), int(b)) for a, b in residual_spans)
        last = 0
        for start, stop in self.residual_spans:
            if not 0 <= start < stop <= len(self.layers):
                raise ValueError(f"invalid residual span ({start}, {stop})")
            if start < last:
                raise ValueError("residual spans must not overlap")
            if self.shapes[start] != self.shapes[stop]:
                raise ShapeError(
                    f"residual span ({start}, {stop}) joins shapes "
                    f"{self.shapes[start]} and {self.shapes[stop]}"
                )
            last = stop
        self._starts = {a: b for a, b in self.residual_spans}
        self._stops = {b: a for a, b in self.residual_spans}
        # (mean, std) per input channel, used to map raw [0, 1] data to network inputs
        self.input_stats = input_stats

    @property
    def n_in(self):
        return int(np.prod(self.in_shape))

    @property
    def n_out(self):
        return self.out_shape[0]

    @property
    def dtype(self):
        for _, _, p in self.parameters():
            return p.dtype
        return np.dtype(np.float64)

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable array."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield i, name, p

    def zero_grads(self):
        return [{k: np.zeros_like(p) for k, p in layer.params.items()} for layer in self.layers]

    def weight_layers(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, (Linear, Conv2d))]

    def astype(self, precision):
        dtype = resolve_dtype(precision)
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self

    def __call__(self, x, bn_mode="eval"):
        logits, _ = forward_capture(self, x, bn_mode=bn_mode, keep_inputs=False)
        return logits

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network([{body}], in_shape={self.in_shape}, residual_spans={self.residual_spans})"


@dataclass
class CaptureRecord:
    """Region state for a batch of samples.

    ``captures[i]`` belongs to layer ``i``. ``inputs[i]`` is the input that
    layer ``i`` saw in the forward pass (kept for training backprop).
    Indexing with an integer yields the single-sample record, which keeps a
    batch axis of length one.
    """

    captures: list
    inputs: list
    in_shape: tuple
    out_shape: tuple
    batch_size: int

    def __len__(self):
        return self.batch_size

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            if not -self.batch_size <= idx < self.batch_size:
                raise IndexError(idx)
            idx = slice(idx % self.batch_size, idx % self.batch_size + 1)
        sel = np.arange(self.batch_size)[idx]
        return CaptureRecord(
            captures=[c.take(sel) for c in self.captures],
            inputs=None if self.inputs is None else [a[sel] for a in self.inputs],
            in_shape=self.in_shape,
            out_shape=self.out_shape,
            batch_size=len(sel),
        )

    def samples(self):
        return [self[i] for i in range(self.batch_size)]


def forward_capture(net, batch, bn_mode="pseudo", keep_inputs=True):
    """Forward pass returning ``(logits, record)``."""
    x = np.asarray(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if tuple(x.shape[1:]) != net.in_shape:
        raise ShapeError(f"batch has per-sample shape {tuple(x.shape[1:])}, network expects {net.in_shape}")
    x = x.astype(net.dtype, copy=False)
    captures, inputs = [], []
    saved = {}
    for i, layer in enumerate(net.layers):
        if i in net._starts:
            saved[net._starts[i]] = x
        if keep_inputs:
            inputs.append(x)
        x, cap = layer.forward(x, bn_mode=bn_mode)
        captures.append(cap)
        if i + 1 in saved:
            x = x + saved.pop(i + 1)
    rec = CaptureRecord(
        captures=captures,
        inputs=inputs if keep_inputs else None,
        in_shape=net.in_shape,
        out_shape=net.out_shape,
        batch_size=x.shape[0],
    )
    return x, rec


def _check_record(net, rec):
    if len(rec.captures) != len(net.layers) or rec.in_shape != net.in_shape:
        raise CaptureError("capture record does not belong to this network")


def _batched(v, shape):
    v = np.asarray(v)
    if tuple(v.shape) == tuple(shape):
        return v[None], True
    if tuple(v.shape[1:]) != tuple(shape):
        raise ShapeError(f"expected per-sample shape {tuple(shape)}, got array of shape {v.shape}")
    return v, False


def jvp(net, rec, v, keep=False):
    """``W_R v``: forward mode through the captured network.

    ``v`` is one vector shaped like a network input or a batch of them (one
    per sample in ``rec``, or any number for a single-sample record).
    With ``keep=True`` also returns the list of per-layer mode-pass inputs.
    """
    _check_record(net, rec)
    v, squeeze = _batched(v, net.in_shape)
    inputs = []
    saved = {}
    for i, layer in enumerate(net.layers):
        if i in net._starts:
            saved[net._starts[i]] = v
        if keep:
            inputs.append(v)
        v = layer.fmode(v, rec.captures[i])
        if i + 1 in saved:
            v = v + saved.pop(i + 1)
    if squeeze:
        v = v[0]
    return (v, inputs) if keep else v


def vjp(net, rec, u, keep=False):
    """``W_R^T u``: backward mode, layers in reverse order.

    With ``keep=True`` also returns ``sens`` where ``sens[i]`` is the
    cotangent arriving at the output of layer ``i``.
    """
    _check_record(net, rec)
    u, squeeze = _batched(u, net.out_shape)
    sens = [None] * len(net.layers)
    saved = {}
    for i in range(len(net.layers) - 1, -1, -1):
        if i + 1 in net._stops:
            saved[net._stops[i + 1]] = u
        if keep:
            sens[i] = u
        u = net.layers[i].bmode(u, rec.captures[i])
        if i in saved:
            u = u + saved.pop(i)
    if squeeze:
        u = u[0]
    return (u, sens) if keep else u


def assemble_jacobian(net, rec, sequential=False):
    """Dense ``n_out x n_in`` Jacobian of a single-sample record.

    Row ``i`` is ``vjp(e_i)``. By default the ``n_out`` basis vectors go
    through one vectorized backward pass; ``sequential=True`` runs one pass
    per basis vector instead. A multi-sample record yields a stack of shape
    ``(B, n_out, n_in)``.
    """
    if len(rec) != 1:
        return np.stack([assemble_jacobian(net, r, sequential) for r in rec.samples()])
    eye = np.eye(net.n_out, dtype=net.dtype)
    if sequential:
        rows = np.stack([vjp(net, rec, e[None])[0] for e in eye])
    else:
        rows = vjp(net, rec, eye)
    return rows.reshape(net.n_out, net.n_in)


def backprop(net, rec, output_grad, need_input_grad=True):
    """Gradient of a loss w.r.t. all parameters and the network input.

    ``output_grad`` is the loss gradient w.r.t. the logits. Returns
    ``(param_grads, input_grad)`` with ``param_grads[i]`` a dict keyed like
    ``net.layers[i].params``. ``need_input_grad=False`` skips the first
    layer's input cotangent when it is Linear/Conv (``input_grad`` is then ``None``).
    """
    _check_record(net, rec)
    if rec.inputs is None:
        raise CaptureError("backprop needs a record taken with keep_inputs=True")
    g = np.asarray(output_grad)
    if g.shape != (rec.batch_size,) + net.out_shape:
        raise ShapeError(f"output gradient shape {g.shape} does not match logits {(rec.batch_size,) + net.out_shape}")
    grads = [{} for _ in net.layers]
    saved = {}
    for i in range(len(net.layers) - 1, -1, -1):
        if i + 1 in net._stops:
            saved[net._stops[i + 1]] = g
        layer = net.layers[i]
        if i == 0 and not need_input_grad and isinstance(layer, (Linear, Conv2d)):
            return [layer.weight_grad(rec.inputs[0], g, bias=True)] + grads[1:], None
        grads[i], g = layer.backprop(g, rec.inputs[i], rec.captures[i])
        if i in saved:
            g = g + saved.pop(i)
    return grads, g


def lenet(rng, in_shape=(1, 28, 28), n_classes=10, dtype=np.float64):
    """The LeNet variant: conv-pool (5, 1->6, 1, 2, 2), conv-pool (5, 6->16, 1, 0, 2),
    then linear 400 -> 120 -> 84 -> n_classes with ReLU in between."""
    dtype = resolve_dtype(dtype)
    c = in_shape[0]
    layers = [
        Conv2d.init(c, 6, 5, rng, stride=1, padding=2, dtype=dtype),
        ReLU(),
        MaxPool2d(2),
        Conv2d.init(6, 16, 5, rng, stride=1, padding=0, dtype=dtype),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
    ]
    shape = tuple(in_shape)
    for layer in layers:
        shape = layer.build(shape)
    flat = shape[0]
    layers += [
        Linear.init(flat, 120, rng, dtype),
        ReLU(),
        Linear.init(120, 84, rng, dtype),
        ReLU(),
        Linear.init(84, n_classes, rng, dtype),
    ]
    return Network(layers, in_shape)


def mlp(rng, sizes, activation="relu", dtype=np.float64):
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``."""
    dtype = resolve_dtype(dtype)
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear.init(a, b, rng, dtype))
        if k < len(sizes) - 2:
            layers.append(ReLU() if activation == "relu" else SmoothActivation(activation))
    return Network(layers, (sizes[0],))


def _layer_from_meta(meta, arrays, i):
    kind, cfg = meta["kind"], meta["config"]
    p = lambda name: arrays[f"layer{i}.{name}"]  # noqa: E731
    if kind == "linear":
        return Linear(p("weight"), p("bias"))
    if kind == "conv2d":
        return Conv2d(p("weight"), p("bias"), stride=cfg["stride"], padding=cfg["padding"])
    if kind == "maxpool2d":
        return MaxPool2d(cfg["size"])
    if kind == "relu":
        return ReLU()
    if kind == "smooth":
        return SmoothActivation(cfg["fn"])
    if kind == "flatten":
        return Flatten()
    if kind == "batchnorm2d":
        layer = BatchNorm2d(cfg["channels"], eps=cfg["eps"], momentum=cfg["momentum"])
        layer.params = {"gamma": p("gamma"), "beta": p("beta")}
        layer.running_mean = p("running_mean")
        layer.running_var = p("running_var")
        return layer
    raise ValueError(f"unknown layer kind {kind!r} in checkpoint")


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(net, path, extra=None):
    """Write ``net`` as an ``.npz`` archive.

    Arrays are stored little-endian in row-major order; a JSON header names
    the format version, byte order, layer list and shapes.
    """
    import io

    arrays = {}
    layers_meta = []
    for i, layer in enumerate(net.layers):
        layers_meta.append({"kind": layer.kind, "config": layer.config()})
        for name, arr in layer.params.items():
            arrays[f"layer{i}.{name}"] = arr
        if isinstance(layer, BatchNorm2d):
            arrays[f"layer{i}.running_mean"] = layer.running_mean
            arrays[f"layer{i}.running_var"] = layer.running_var
    if net.input_stats is not None:
        arrays["input_stats.mean"] = np.asarray(net.input_stats[0])
        arrays["input_stats.std"] = np.asarray(net.input_stats[1])
    arrays = {k: np.ascontiguousarray(v).astype(v.dtype.newbyteorder("<"), copy=False) for k, v in arrays.items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "byteorder": "little",
        "dtype": str(net.dtype),
        "in_shape": list(net.in_shape),
        "residual_spans": [list(s) for s in net.residual_spans],
        "layers": layers_meta,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(net, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if meta["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported")
    if meta["byteorder"] != "little":
        raise ValueError(f"{path}: unsupported byte order {meta['byteorder']}")
    native = {k: v.astype(v.dtype.newbyteorder("="), copy=False) for k, v in arrays.items()}
    layers = [_layer_from_meta(m, native, i) for i, m in enumerate(meta["layers"])]
    stats = None
    if "input_stats.mean" in native:
        stats = (native["input_stats.mean"], native["input_stats.std"])
    net = Network(layers, meta["in_shape"], residual_spans=meta["residual_spans"], input_stats=stats)
    return net, meta.get("extra", {})
