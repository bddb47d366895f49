"""Accuracy and timing benchmarks for the spectral-norm estimators."""

import time

import numpy as np

from jacreg.errors import ConvergenceError
from jacreg.ndcore import make_rng, max_singular_value_dense
from jacreg.network import assemble_jacobian, backprop, forward_capture
from jacreg.regularizers import PowerIterState, spectral_bound_penalty, spectral_penalty
from jacreg.trainer import one_hot, softmax_cross_entropy

ERROR_COLUMNS = ("power_iters", "n", "median_rel_err", "mean_rel_err", "median_bound_ratio", "mean_bound_ratio")
SAMPLE_COLUMNS = ("sample_id", "power_iters", "sigma_hat", "sigma_oracle", "rel_err", "bound_ratio", "oracle_ok")
TIME_COLUMNS = ("method", "batch_size", "median_ms", "reps")
TIME_METHODS = ("plain", "spectral", "spectral_bound", "analytical")


def converged_bound_state(net, seed=0, iters=500):
    state = PowerIterState.init(net, make_rng(seed, 21))
    spectral_bound_penalty(net, state, n_iters=iters)
    return state


def oracle_sigmas(net, x, tol=1e-12):
    """Dense-oracle ``||W_R||_2`` per sample; ``nan`` where the oracle did not converge."""
    _, rec = forward_capture(net, x, bn_mode="eval", keep_inputs=False)
    out = np.empty(len(rec))
    for i, r in enumerate(rec.samples()):
        try:
            out[i] = max_singular_value_dense(assemble_jacobian(net, r), tol=tol)[0]
        except ConvergenceError:
            out[i] = np.nan
    return out


def bench_relative_error(net, x, n_values, seed=0, bound_state=None):
    """Relative error of the power-iteration estimate against the dense oracle.

    Every ``N`` in ``n_values`` restarts from the same random vectors, so the
    rows for one sample trace a single power-iteration run. Returns
    ``(summary_rows, sample_rows)`` following ``ERROR_COLUMNS`` and
    ``SAMPLE_COLUMNS``; samples where the oracle failed are flagged and left
    out of the summary.
    """
    if bound_state is None:
        bound_state = converged_bound_state(net, seed)
    bound = bound_state.upper_bound()
    _, rec = forward_capture(net, x, bn_mode="eval", keep_inputs=False)
    sigma_oracle = oracle_sigmas(net, x)
    ok = np.isfinite(sigma_oracle) & (sigma_oracle > 0)
    summary, samples = [], []
    for n in n_values:
        sigma_hat, _ = spectral_penalty(net, rec, n, make_rng(seed, 31), with_grads=False)
        rel = np.abs(sigma_hat - sigma_oracle) / np.where(ok, sigma_oracle, 1.0)
        ratio = bound / np.where(ok, sigma_oracle, 1.0)
        for i in range(len(x)):
            samples.append((i, n, float(sigma_hat[i]), float(sigma_oracle[i]), float(rel[i]), float(ratio[i]), bool(ok[i])))
        summary.append(
            (
                n,
                int(ok.sum()),
                float(np.median(rel[ok])),
                float(np.mean(rel[ok])),
                float(np.median(ratio[ok])),
                float(np.mean(ratio[ok])),
            )
        )
    return summary, samples


def _plain_step(net, x, y):
    logits, rec = forward_capture(net, x, bn_mode="pseudo")
    _, g = softmax_cross_entropy(logits, y)
    backprop(net, rec, g, need_input_grad=False)
    return rec


def _timed(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


def bench_time(net, batch_sizes, reps=20, warmup=2, power_iters=1, seed=0, methods=TIME_METHODS, reps_by_method=None):
    """Median wall-clock milliseconds to process one batch, per method.

    ``plain`` is forward + loss + backprop; the other methods add their
    penalty on top: ``spectral`` (power iteration through the network
    modes, with gradients), ``spectral_bound`` (one per-layer power step)
    and ``analytical`` (per-sample dense Jacobian from ``n_out`` backward
    passes, then the dense oracle).
    """
    rng = make_rng(seed, 41)
    rows = []
    reps_by_method = reps_by_method or {}
    for b in batch_sizes:
        x = rng.standard_normal((b,) + net.in_shape).astype(net.dtype)
        y = one_hot(rng.integers(0, net.n_out, b), net.n_out, net.dtype)
        state = PowerIterState.init(net, make_rng(seed, 42))
        reg_rng = make_rng(seed, 43)

        def analytical():
            rec = _plain_step(net, x, y)
            for r in rec.samples():
                max_singular_value_dense(assemble_jacobian(net, r, sequential=True), tol=1e-6)

        fns = {
            "plain": lambda: _plain_step(net, x, y),
            "spectral": lambda: spectral_penalty(net, _plain_step(net, x, y), power_iters, reg_rng),
            "spectral_bound": lambda: (_plain_step(net, x, y), spectral_bound_penalty(net, state)),
            "analytical": analytical,
        }
        for method in methods:
            r = reps_by_method.get(method, reps)
            rows.append((method, b, _timed(fns[method], r, warmup), r))
    return rows
