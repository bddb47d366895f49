"""Jacobian and weight penalties with their parameter gradients.

* ``spectral``        -- exact ``||W_R||_2`` per sample, power iteration
                         through the network's forward/backward modes;
* ``spectral_bound``  -- sum of squared per-layer spectral norms;
* ``frobenius``       -- random-projection estimate of ``||W_R||_F^2``;
* ``weight_decay``    -- sum of squared weights.

Parameter gradients of the Jacobian penalties use the fact that
``p^T W_R q`` is linear in every layer's weights: its gradient for layer
``l`` pairs the forward-mode input of that layer (driven by ``q``) with the
backward-mode cotangent at its output (driven by ``p``). Masks, pooling
indices, frozen batch statistics and the power-iteration vectors are held
constant.
"""

from dataclasses import dataclass, field

import numpy as np

from jacreg.layers import BatchNorm2d, Conv2d, Linear
from jacreg.ndcore import sample_unit_rows
from jacreg.network import jvp, vjp

KINDS = ("none", "spectral", "spectral_bound", "frobenius", "weight_decay")


@dataclass
class RegularizerConfig:
    kind: str = "none"
    lam: float = 0.0
    power_iters: int = 1
    n_proj: int = 1
    exponent: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}, expected one of {KINDS}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.power_iters < 1 or self.n_proj < 1:
            raise ValueError("power_iters and n_proj must be >= 1")
        if self.exponent not in (1, 2):
            raise ValueError("penalty exponent must be 1 or 2")


def _row_norms(a):
    return np.sqrt((a.reshape(a.shape[0], -1) ** 2).sum(axis=1))


def _bcast_rows(w, a):
    return w.reshape((-1,) + (1,) * (a.ndim - 1))


def _normalize_rows(a):
    n = _row_norms(a)
    safe = np.where(n > 0, n, 1.0)
    return a / _bcast_rows(safe, a), n


def _jacobian_param_grads(net, rec, inputs, sens):
    """Sum over the batch of d<p, W_R q>/dtheta given the stored mode passes."""
    grads = net.zero_grads()
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (Linear, Conv2d, BatchNorm2d)):
            grads[i].update(layer.weight_grad(inputs[i], sens[i], rec.captures[i]))
    return grads


def spectral_penalty(net, rec, n_iters, rng, exponent=1, with_grads=True):
    """Power-iteration estimate of ``||W_R||_2`` for every sample in ``rec``.

    Returns ``(sigma, grads)``: ``sigma`` has one entry per sample and
    ``grads`` is the batch sum of the gradients of ``sigma**exponent``
    (``None`` if ``with_grads`` is false). Samples whose region map sends
    the start vector to zero get ``sigma = 0`` and contribute no gradient.
    """
    if n_iters < 1:
        raise ValueError("need at least one power iteration")
    b = len(rec)
    v = sample_unit_rows(rng, b, net.n_in, dtype=net.dtype).reshape((b,) + net.in_shape)
    sens = None
    for n in range(n_iters):
        u, _ = _normalize_rows(jvp(net, rec, v))
        last = n == n_iters - 1
        if last and with_grads:
            w, sens = vjp(net, rec, u, keep=True)
        else:
            w = vjp(net, rec, u)
        v, sigma = _normalize_rows(w)
    # sigma = ||W_R^T u|| equals the Rayleigh value u^T W_R v for the final unit v
    if not with_grads:
        return sigma, None
    _, inputs = jvp(net, rec, v, keep=True)
    if exponent == 2:
        scale = 2.0 * sigma
        sens = [s * _bcast_rows(scale, s) for s in sens]
    return sigma, _jacobian_param_grads(net, rec, inputs, sens)


class PowerIterState:
    """Persistent per-layer singular-vector estimates for ``spectral_bound``."""

    def __init__(self, vectors):
        # layer index -> (u, v), each without a batch axis
        self.vectors = vectors
        self.sigmas = {i: 0.0 for i in vectors}

    @classmethod
    def init(cls, net, rng):
        vectors = {}
        for i in net.weight_layers():
            layer = net.layers[i]
            n_in = int(np.prod(layer.in_shape))
            n_out = int(np.prod(layer.out_shape))
            v = sample_unit_rows(rng, 1, n_in, dtype=net.dtype).reshape(layer.in_shape)
            u = sample_unit_rows(rng, 1, n_out, dtype=net.dtype).reshape(layer.out_shape)
            vectors[i] = (u, v)
        return cls(vectors)

    def upper_bound(self):
        """Product of the per-layer estimates, an upper bound on ``||W_R||_2``
        for ReLU / max-pool networks once the estimates have converged."""
        return float(np.prod(list(self.sigmas.values())))


def spectral_bound_penalty(net, state, n_iters=1):
    """``sum_l sigma_l^2`` over Linear/Conv layers, one power step per call by default.

    The layers are treated as plain linear operators (no captures). Updates
    ``state`` in place and returns ``(penalty, grads)``.
    """
    grads = net.zero_grads()
    penalty = 0.0
    for i, (u, v) in state.vectors.items():
        layer = net.layers[i]
        sigma = 0.0
        for _ in range(n_iters):
            a = layer.fmode(v[None])[0]
            na = np.linalg.norm(a)
            if na == 0:
                sigma = 0.0
                break
            u = a / na
            b = layer.bmode(u[None])[0]
            sigma = float(np.linalg.norm(b))
            if sigma == 0:
                break
            v = b / sigma
        state.vectors[i] = (u, v)
        state.sigmas[i] = sigma
        penalty += sigma**2
        if sigma > 0:
            g = layer.weight_grad(v[None], u[None])
            grads[i]["weight"] = 2.0 * sigma * g["weight"]
    return penalty, grads


def frobenius_penalty(net, rec, n_proj, rng):
    """Estimate of ``||W_R||_F^2`` from ``n_proj`` random output projections.

    Returns ``(penalty, grads)`` with one penalty per sample and batch-summed
    gradients.
    """
    b = len(rec)
    penalty = np.zeros(b, dtype=net.dtype)
    grads = net.zero_grads()
    scale = net.n_out / n_proj
    for _ in range(n_proj):
        p = sample_unit_rows(rng, b, net.n_out, dtype=net.dtype)
        r, sens = vjp(net, rec, p, keep=True)
        penalty += _row_norms(r) ** 2
        _, inputs = jvp(net, rec, r, keep=True)
        g = _jacobian_param_grads(net, rec, inputs, sens)
        for acc, gi in zip(grads, g):
            for k, arr in gi.items():
                acc[k] += 2.0 * scale * arr
    return scale * penalty, grads


def weight_decay_penalty(net):
    """``sum ||W||_F^2`` over Linear weights and Conv kernels (no biases)."""
    grads = net.zero_grads()
    penalty = 0.0
    for i in net.weight_layers():
        w = net.layers[i].params["weight"]
        penalty += float((w * w).sum())
        grads[i]["weight"] = 2.0 * w
    return penalty, grads


@dataclass
class PenaltyResult:
    value: float
    grads: list
    per_sample: np.ndarray = field(default=None, repr=False)


def regularizer_step(net, rec, cfg, rng, state=None, with_grads=True):
    """Penalty term of the batch objective (before multiplying by lambda).

    Per-sample penalties (spectral, frobenius) are averaged over the batch;
    the weight-based ones are taken as is.
    """
    b = len(rec)
    if cfg.kind == "none":
        return PenaltyResult(0.0, net.zero_grads())
    if cfg.kind == "spectral":
        sigma, grads = spectral_penalty(net, rec, cfg.power_iters, rng, cfg.exponent, with_grads)
        per = sigma**cfg.exponent
        return PenaltyResult(float(per.mean()), _scale(grads, 1.0 / b), per)
    if cfg.kind == "frobenius":
        per, grads = frobenius_penalty(net, rec, cfg.n_proj, rng)
        return PenaltyResult(float(per.mean()), _scale(grads, 1.0 / b), per)
    if cfg.kind == "spectral_bound":
        if state is None:
            raise ValueError("spectral_bound needs a PowerIterState")
        value, grads = spectral_bound_penalty(net, state, cfg.power_iters)
        return PenaltyResult(value, grads)
    value, grads = weight_decay_penalty(net)
    return PenaltyResult(value, grads)


def _scale(grads, c):
    if grads is None:
        return None
    return [{k: c * g for k, g in d.items()} for d in grads]
