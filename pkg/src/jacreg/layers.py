"""Layer operator triples.

Every layer exposes three views of itself:

* ``forward``  -- the ordinary pass ``y = f(G(x) + b)``, returning a capture
  that pins the local linear map (ReLU masks, max-pool argmax positions,
  frozen batch-norm statistics, smooth-activation derivatives);
* ``fmode``    -- the bias-free linearization applied to a tangent vector;
* ``bmode``    -- its adjoint, applied to a cotangent vector.

All arrays carry a leading batch axis. Layers are bound to a per-sample input
shape by :meth:`Layer.build`, which :class:`jacreg.network.Network` calls.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from jacreg.errors import CaptureError, ShapeError

BN_MODES = ("train", "pseudo", "eval")


@dataclass
class LayerCapture:
    """Per-layer state recorded during ``forward``.

    Batched fields (``relu_mask``, ``pool_index``, ``smooth_deriv``) have a
    leading batch axis; batch-norm statistics are shared by the whole batch.
    """

    relu_mask: np.ndarray = None
    pool_index: np.ndarray = None
    in_shape: tuple = None
    bn_mean: np.ndarray = None
    bn_var: np.ndarray = None
    bn_mode: str = None
    smooth_deriv: np.ndarray = None

    def take(self, idx):
        """Capture restricted to the samples selected by ``idx``."""
        def pick(a):
            return None if a is None else a[idx]

        return replace(
            self,
            relu_mask=pick(self.relu_mask),
            pool_index=pick(self.pool_index),
            smooth_deriv=pick(self.smooth_deriv),
        )


class Layer:
    """Base class. Parameterless layers only override the mode passes."""

    kind = "layer"
    needs_capture = False

    def __init__(self):
        self.params = {}
        self.in_shape = None
        self.out_shape = None

    def build(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(self.output_shape(self.in_shape))
        return self.out_shape

    def output_shape(self, in_shape):
        return in_shape

    def _check_input(self, x):
        if self.in_shape is not None and tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(
                f"{self!r}: expected per-sample input shape {self.in_shape}, "
                f"got {tuple(x.shape[1:])}"
            )

    def _check_output_side(self, u):
        if self.out_shape is not None and tuple(u.shape[1:]) != self.out_shape:
            raise ShapeError(
                f"{self!r}: expected per-sample output shape {self.out_shape}, "
                f"got {tuple(u.shape[1:])}"
            )

    def forward(self, x, bn_mode="pseudo"):
        raise NotImplementedError

    def fmode(self, v, cap=None):
        raise NotImplementedError

    def bmode(self, u, cap=None):
        raise NotImplementedError

    def weight_grad(self, input_side, output_side, cap=None, bias=False):
        """Gradient of ``<output_side, F(input_side)>`` w.r.t. the parameters.

        Summed over the batch axis. With ``bias=True`` the bias gradient
        (sum of ``output_side``) is included as well.
        """
        if bias:
            raise TypeError(f"{self!r} has no bias parameter")
        return {}

    def backprop(self, grad_out, x_in, cap):
        """Training backward step: ``(param_grads, grad_in)``."""
        grads = self.weight_grad(x_in, grad_out, cap, bias=bool(self.params)) if self.params else {}
        return grads, self.bmode(grad_out, cap)

    def config(self):
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Layer):
    kind = "linear"

    def __init__(self, weight, bias=None):
        super().__init__()
        weight = np.asarray(weight)
        if weight.ndim != 2:
            raise ShapeError(f"Linear weight must be rank 2, got shape {weight.shape}")
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=weight.dtype)
        bias = np.asarray(bias, dtype=weight.dtype)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"Linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
        self.params = {"weight": weight, "bias": bias}

    @classmethod
    def init(cls, n_in, n_out, rng, dtype=np.float64):
        return cls(
            _fan_in_uniform(rng, (n_out, n_in), n_in, dtype),
            _fan_in_uniform(rng, (n_out,), n_in, dtype),
        )

    @property
    def weight(self):
        return self.params["weight"]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ShapeError(f"{self!r}: expected input shape ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def config(self):
        return {"n_in": self.weight.shape[1], "n_out": self.weight.shape[0]}

    def forward(self, x, bn_mode="pseudo"):
        self._check_input(x)
        return x @ self.weight.T + self.params["bias"], LayerCapture()

    def fmode(self, v, cap=None):
        return v @ self.weight.T

    def bmode(self, u, cap=None):
        return u @ self.weight

    def weight_grad(self, input_side, output_side, cap=None, bias=False):
        grads = {"weight": output_side.T @ input_side}
        if bias:
            grads["bias"] = output_side.sum(axis=0)
        return grads


def conv_output_hw(h, w, k, stride, padding):
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    return ho, wo


class Conv2d(Layer):
    """2-d cross-correlation, NCHW layout, square kernels."""

    kind = "conv2d"

    def __init__(self, weight, bias=None, stride=1, padding=0):
        super().__init__()
        weight = np.asarray(weight)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"Conv2d kernel must be (C_out, C_in, K, K), got {weight.shape}")
        if bias is None:
            bias = np.zeros(weight.shape[0], dtype=weight.dtype)
        bias = np.asarray(bias, dtype=weight.dtype)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"Conv2d bias must have shape ({weight.shape[0]},), got {bias.shape}")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.params = {"weight": weight, "bias": bias}
        self.stride = int(stride)
        self.padding = int(padding)

    @classmethod
    def init(cls, c_in, c_out, k, rng, stride=1, padding=0, dtype=np.float64):
        fan_in = c_in * k * k
        return cls(
            _fan_in_uniform(rng, (c_out, c_in, k, k), fan_in, dtype),
            _fan_in_uniform(rng, (c_out,), fan_in, dtype),
            stride=stride,
            padding=padding,
        )

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def k(self):
        return self.weight.shape[2]

    def config(self):
        c_out, c_in, k, _ = self.weight.shape
        return {"c_in": c_in, "c_out": c_out, "k": k, "stride": self.stride, "padding": self.padding}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ShapeError(
                f"{self!r}: expected input shape ({self.weight.shape[1]}, H, W), got {tuple(in_shape)}"
            )
        ho, wo = conv_output_hw(in_shape[1], in_shape[2], self.k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self!r}: input {tuple(in_shape)} too small for the kernel")
        return (self.weight.shape[0], ho, wo)

    def _windows(self, x):
        p, s, k = self.padding, self.stride, self.k
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        ho, wo = conv_output_hw(x.shape[2] - 2 * p, x.shape[3] - 2 * p, k, s, p)
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        # (B, C_in, Ho, Wo, K, K)
        return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]

    def _columns(self, x):
        """im2col matrix of shape ``(C_in*K*K, B*Ho*Wo)``."""
        win = self._windows(x)
        b, c, ho, wo, k, _ = win.shape
        return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * ho * wo), (b, ho, wo)

    def _correlate(self, x):
        cols, (b, ho, wo) = self._columns(x)
        c_out = self.weight.shape[0]
        out = self.weight.reshape(c_out, -1) @ cols
        return out.reshape(c_out, b, ho, wo).transpose(1, 0, 2, 3)

    def _transpose(self, u, in_hw):
        p, s, k = self.padding, self.stride, self.k
        b, c_out, ho, wo = u.shape
        h, w = in_hw
        c_in = self.weight.shape[1]
        wm = self.weight.transpose(2, 3, 1, 0).reshape(k * k * c_in, c_out)
        um = u.transpose(1, 0, 2, 3).reshape(c_out, -1)
        cols = (wm @ um).reshape(k, k, c_in, b, ho, wo)
        out = np.zeros((c_in, b, h + 2 * p, w + 2 * p), dtype=cols.dtype)
        # col2im: scatter-add every kernel tap back onto the (padded) input grid
        for i in range(k):
            for j in range(k):
                out[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += cols[i, j]
        if p:
            out = out[:, :, p : p + h, p : p + w]
        return out.transpose(1, 0, 2, 3)

    def forward(self, x, bn_mode="pseudo"):
        self._check_input(x)
        y = self._correlate(x) + self.params["bias"][None, :, None, None]
        return y, LayerCapture(in_shape=tuple(x.shape[1:]))

    def fmode(self, v, cap=None):
        return self._correlate(v)

    def bmode(self, u, cap=None):
        in_shape = self.in_shape if cap is None or cap.in_shape is None else cap.in_shape
        if in_shape is None:
            raise CaptureError(f"{self!r}: input shape unknown, build the layer or pass a capture")
        return self._transpose(u, in_shape[1:])

    def weight_grad(self, input_side, output_side, cap=None, bias=False):
        cols, _ = self._columns(input_side)
        c_out = self.weight.shape[0]
        g = output_side.transpose(1, 0, 2, 3).reshape(c_out, -1)
        grads = {"weight": (g @ cols.T).reshape(self.weight.shape)}
        if bias:
            grads["bias"] = output_side.sum(axis=(0, 2, 3))
        return grads


class MaxPool2d(Layer):
    """Non-overlapping ``M x M`` max-pool (stride M, no padding).

    Trailing rows/columns that do not fill a window are dropped. Ties pick
    the first position in row-major order within the window.
    """

    kind = "maxpool2d"
    needs_capture = True

    def __init__(self, size):
        super().__init__()
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.size = int(size)

    def config(self):
        return {"size": self.size}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self!r}: expected (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError(f"{self!r}: input {tuple(in_shape)} smaller than the window")
        return (c, h // self.size, w // self.size)

    def forward(self, x, bn_mode="pseudo"):
        self._check_input(x)
        m = self.size
        b, c, h, w = x.shape
        ho, wo = h // m, w // m
        win = x[:, :, : ho * m, : wo * m].reshape(b, c, ho, m, wo, m)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, m * m)
        a = win.argmax(axis=-1)
        y = np.take_along_axis(win, a[..., None], axis=-1)[..., 0]
        rows = np.arange(ho)[:, None] * m + a // m
        cols = np.arange(wo)[None, :] * m + a % m
        index = rows * w + cols
        return y, LayerCapture(pool_index=index, in_shape=(c, h, w))

    def _cap(self, cap):
        if cap is None or cap.pool_index is None:
            raise CaptureError(f"{self!r}: mode pass needs the argmax indices from forward")
        return cap

    def fmode(self, v, cap=None):
        cap = self._cap(cap)
        b, c = v.shape[:2]
        flat = v.reshape(b, c, -1)
        idx = cap.pool_index.reshape(cap.pool_index.shape[0], c, -1)
        idx = np.broadcast_to(idx, (b,) + idx.shape[1:])
        return np.take_along_axis(flat, idx, axis=-1).reshape((b,) + cap.pool_index.shape[1:])

    def bmode(self, u, cap=None):
        cap = self._cap(cap)
        b, c = u.shape[:2]
        _, h, w = cap.in_shape
        out = np.zeros((b, c, h * w), dtype=u.dtype)
        idx = cap.pool_index.reshape(cap.pool_index.shape[0], c, -1)
        idx = np.broadcast_to(idx, (b,) + idx.shape[1:])
        np.put_along_axis(out, idx, u.reshape(b, c, -1), axis=-1)
        return out.reshape(b, c, h, w)


class ReLU(Layer):
    kind = "relu"
    needs_capture = True

    def forward(self, x, bn_mode="pseudo"):
        self._check_input(x)
        y = np.maximum(x, 0)
        return y, LayerCapture(relu_mask=(y > 0).astype(x.dtype))

    def fmode(self, v, cap=None):
        if cap is None or cap.relu_mask is None:
            raise CaptureError("ReLU mode pass needs the activation mask from forward")
        return v * cap.relu_mask

    bmode = fmode


_SMOOTH = {
    "sigmoid": (
        lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),  # overflow-free logistic
        lambda y: y * (1.0 - y),
    ),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
}


class SmoothActivation(Layer):
    """Elementwise differentiable activation; its Jacobian is diagonal."""

    kind = "smooth"
    needs_capture = True

    def __init__(self, fn):
        super().__init__()
        if fn not in _SMOOTH:
            raise ValueError(f"unsupported activation {fn!r}, expected one of {sorted(_SMOOTH)}")
        self.fn = fn

    def config(self):
        return {"fn": self.fn}

    def forward(self, x, bn_mode="pseudo"):
        self._check_input(x)
        f, df = _SMOOTH[self.fn]
        y = f(x)
        return y, LayerCapture(smooth_deriv=df(y))

    def fmode(self, v, cap=None):
        if cap is None or cap.smooth_deriv is None:
            raise CaptureError(f"{self!r}: mode pass needs the derivative from forward")
        return v * cap.smooth_deriv

    bmode = fmode


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, bn_mode="pseudo"):
        self._check_input(x)
        return x.reshape(x.shape[0], -1), LayerCapture(in_shape=tuple(x.shape[1:]))

    def fmode(self, v, cap=None):
        return v.reshape(v.shape[0], -1)

    def bmode(self, u, cap=None):
        in_shape = self.in_shape if cap is None or cap.in_shape is None else cap.in_shape
        return u.reshape((u.shape[0],) + tuple(in_shape))


class BatchNorm2d(Layer):
    """Per-channel batch normalization over axis 1.

    ``bn_mode`` selects the statistics: ``"train"`` normalizes with the batch
    statistics, updates the running averages and backpropagates through the
    statistics; ``"pseudo"`` uses the batch statistics as frozen constants;
    ``"eval"`` uses the running averages. The statistics actually used are
    stored in the capture, so mode passes always see a fixed per-channel scale.
    """

    kind = "batchnorm2d"
    needs_capture = True

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ValueError("batch-norm epsilon must be positive")
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params = {
            "gamma": np.ones(channels, dtype=dtype),
            "beta": np.zeros(channels, dtype=dtype),
        }
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    @property
    def channels(self):
        return self.params["gamma"].shape[0]

    def config(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"{self!r}: expected {self.channels} channels, got input {tuple(in_shape)}")
        return in_shape

    def _bcast(self, a, ndim):
        return a.reshape((1, -1) + (1,) * (ndim - 2))

    def _axes(self, ndim):
        return (0,) + tuple(range(2, ndim))

    def forward(self, x, bn_mode="pseudo"):
        self._check_input(x)
        if bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}, got {bn_mode!r}")
        if bn_mode == "eval":
            mean, var = self.running_mean, self.running_var
        else:
            axes = self._axes(x.ndim)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if bn_mode == "train":
                n = x.size // x.shape[1]
                unbiased = var * n / max(n - 1, 1)
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x.ndim)) * self._bcast(inv_std, x.ndim)
        y = xhat * self._bcast(self.params["gamma"], x.ndim) + self._bcast(self.params["beta"], x.ndim)
        return y, LayerCapture(bn_mean=mean.copy(), bn_var=var.copy(), bn_mode=bn_mode)

    def scale(self, cap):
        if cap is None or cap.bn_var is None:
            raise CaptureError(f"{self!r}: mode pass needs frozen statistics from forward")
        return self.params["gamma"] / np.sqrt(cap.bn_var + self.eps)

    def fmode(self, v, cap=None):
        return v * self._bcast(self.scale(cap), v.ndim)

    bmode = fmode

    def weight_grad(self, input_side, output_side, cap=None, bias=False):
        if cap is None or cap.bn_var is None:
            raise CaptureError(f"{self!r}: gamma gradient needs frozen statistics")
        inv_std = self._bcast(1.0 / np.sqrt(cap.bn_var + self.eps), input_side.ndim)
        axes = self._axes(input_side.ndim)
        grads = {"gamma": (input_side * output_side * inv_std).sum(axis=axes)}
        if bias:
            grads["beta"] = output_side.sum(axis=axes)
        return grads

    def backprop(self, grad_out, x_in, cap):
        nd = x_in.ndim
        axes = self._axes(nd)
        inv_std = 1.0 / np.sqrt(cap.bn_var + self.eps)
        xhat = (x_in - self._bcast(cap.bn_mean, nd)) * self._bcast(inv_std, nd)
        grads = {"gamma": (grad_out * xhat).sum(axis=axes), "beta": grad_out.sum(axis=axes)}
        dxhat = grad_out * self._bcast(self.params["gamma"], nd)
        if cap.bn_mode == "train":
            n = x_in.size // x_in.shape[1]
            s1 = self._bcast(dxhat.sum(axis=axes), nd)
            s2 = self._bcast((dxhat * xhat).sum(axis=axes), nd)
            grad_in = self._bcast(inv_std, nd) * (dxhat - s1 / n - xhat * s2 / n)
        else:
            grad_in = dxhat * self._bcast(inv_std, nd)
        return grads, grad_in


LAYER_TYPES = {
    cls.kind: cls
    for cls in (Linear, Conv2d, MaxPool2d, ReLU, SmoothActivation, Flatten, BatchNorm2d)
}
