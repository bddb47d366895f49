"""Perturbation studies: white noise, PGD, TPGD and decision-boundary distance.

Attacks live in raw pixel space ([0, 1]); the network sees inputs after the
dataset's per-channel normalization, which is re-applied after every step.
"""

from dataclasses import dataclass

import numpy as np

from jacreg.data import apply_stats
from jacreg.ndcore import make_rng
from jacreg.network import backprop, forward_capture
from jacreg.trainer import log_softmax, one_hot, softmax, softmax_cross_entropy


@dataclass
class AttackConfig:
    delta: float = 32 / 255
    eta: float = 2 / 255
    iters: int = 10
    kind: str = "pgd"
    rand_start: bool = False
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pgd", "tpgd"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if not 0 < self.eta <= self.delta:
            raise ValueError("need 0 < eta <= delta")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")


@dataclass
class BoundarySearchConfig:
    samples_per_sphere: int = 256
    radius_lo: float = 0.0
    radius_hi: float = 10.0
    bisection_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if not self.radius_lo < self.radius_hi:
            raise ValueError("radius_lo must be below radius_hi")
        if self.samples_per_sphere < 1:
            raise ValueError("samples_per_sphere must be >= 1")


def _predict(net, x, batch_size=512):
    out = [net(x[s : s + batch_size]).argmax(axis=1) for s in range(0, len(x), batch_size)]
    return np.concatenate(out)


def accuracy(net, raw, labels, stats):
    return float((_predict(net, apply_stats(raw, stats)) == labels).mean())


def gaussian_perturb_eval(net, ds, sigma, rng):
    """Clean accuracy minus accuracy on ``clip(x + N(0, sigma^2))``."""
    base = accuracy(net, ds.images, ds.labels, ds.stats)
    if sigma == 0:
        return 0.0
    noisy = np.clip(ds.images + sigma * rng.standard_normal(ds.images.shape), 0.0, 1.0)
    return base - accuracy(net, noisy, ds.labels, ds.stats)


def _raw_input_grad(net, raw, stats, logits_grad_fn):
    x = apply_stats(raw, stats)
    logits, rec = forward_capture(net, x, bn_mode="eval")
    _, g = backprop(net, rec, logits_grad_fn(logits))
    if stats is not None:
        g = g / np.asarray(stats[1]).reshape((1, -1) + (1,) * (g.ndim - 2))
    return g


def _ball(x, delta):
    """Bounds of the infinity ball, nudged so ``|bound - x| <= delta`` holds in floating point."""
    lo = x - delta
    hi = x + delta
    while True:
        bad = (x - lo) > delta
        if not bad.any():
            break
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    while True:
        bad = (hi - x) > delta
        if not bad.any():
            break
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def _ascend(net, x, x_adv, cfg, stats, logits_grad_fn):
    lo, hi = _ball(x, cfg.delta)
    for _ in range(cfg.iters):
        g = _raw_input_grad(net, x_adv, stats, logits_grad_fn)
        x_adv = np.clip(x_adv + cfg.eta * np.sign(g), lo, hi)
    # x lies in [0, 1], so clipping only moves points towards x
    return np.clip(x_adv, 0.0, 1.0)


def pgd_attack(net, batch, labels, cfg, stats=None):
    """Sign-gradient ascent on the cross-entropy inside the delta infinity-ball.

    ``batch`` holds raw samples in [0, 1]; returns the perturbed raw batch.
    """
    x = np.asarray(batch, dtype=net.dtype)
    y = one_hot(np.asarray(labels), net.n_out, net.dtype)
    x_adv = x.copy()
    if cfg.rand_start:
        rng = make_rng(cfg.seed, 11)
        lo, hi = _ball(x, cfg.delta)
        x_adv = np.clip(x + rng.uniform(-cfg.delta, cfg.delta, x.shape), lo, hi)

    def grad_fn(logits):
        return softmax_cross_entropy(logits, y)[1]

    return _ascend(net, x, x_adv, cfg, stats, grad_fn)


def kl_divergence(p_logits, q_logits):
    """Per-sample ``KL(softmax(p) || softmax(q))``."""
    lp, lq = log_softmax(p_logits), log_softmax(q_logits)
    return (np.exp(lp) * (lp - lq)).sum(axis=1)


def tpgd_attack(net, batch, cfg, stats=None, noise_scale=None):
    """PGD on ``KL(softmax(f(x)) || softmax(f(x_adv)))`` with a random start.

    The start is uniform noise of half-width ``noise_scale`` (default
    ``delta / 2``), since the KL gradient vanishes at ``x_adv = x``.
    """
    x = np.asarray(batch, dtype=net.dtype)
    p = softmax(net(apply_stats(x, stats)))
    half = cfg.delta / 2 if noise_scale is None else noise_scale
    rng = make_rng(cfg.seed, 12)
    lo, hi = _ball(x, cfg.delta)
    x_adv = np.clip(x + rng.uniform(-half, half, x.shape), lo, hi) if half > 0 else x.copy()

    def grad_fn(logits):
        return (softmax(logits) - p) / len(logits)

    return _ascend(net, x, x_adv, cfg, stats, grad_fn)


def attack_accuracy_drop(net, ds, cfg, batch_size=256):
    """Clean accuracy minus accuracy on PGD/TPGD-perturbed samples of ``ds``."""
    adv = np.empty_like(ds.images, dtype=net.dtype)
    for s in range(0, len(ds), batch_size):
        xb = ds.images[s : s + batch_size]
        if cfg.kind == "pgd":
            adv[s : s + batch_size] = pgd_attack(net, xb, ds.labels[s : s + batch_size], cfg, ds.stats)
        else:
            adv[s : s + batch_size] = tpgd_attack(net, xb, cfg, ds.stats)
    base = accuracy(net, ds.images, ds.labels, ds.stats)
    return base - accuracy(net, adv, ds.labels, ds.stats), adv


def boundary_distance(net, x, cfg):
    """Smallest sphere radius around ``x`` containing a differently classified point.

    Bisection over the radius; at each step ``samples_per_sphere`` points are
    drawn uniformly on the sphere (normalized Gaussian directions). Step
    ``k`` draws from its own seeded stream, so a larger sample count sees a
    superset of the directions a smaller one sees.

    Returns ``(radius, saturated)``; ``saturated`` is true when not even the
    outer radius shows a class change, in which case ``radius_hi`` is
    returned.
    """
    x = np.asarray(x, dtype=net.dtype)
    cls = int(net(x[None]).argmax())
    n = cfg.samples_per_sphere
    shape = x.shape

    def changed(radius, step):
        d = make_rng(cfg.seed, 1000 + step).standard_normal((n, x.size))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = x[None] + radius * d.reshape((n,) + shape).astype(net.dtype)
        return bool(np.any(net(pts).argmax(axis=1) != cls))

    lo, hi = cfg.radius_lo, cfg.radius_hi
    if not changed(hi, 0):
        return hi, True
    for k in range(1, cfg.bisection_iters + 1):
        mid = 0.5 * (lo + hi)
        if changed(mid, k):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi), False
