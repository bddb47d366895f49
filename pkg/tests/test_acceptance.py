"""Acceptance criteria, each run at its stated tolerance.

Every test records one ``criterion k: PASS/FAIL ...`` line that is printed
in the terminal summary, then asserts. The two LeNets trained for the
regularization-effect check are shared with the oracle and attack checks.
"""

import time

import numpy as np
import pytest

from jacreg.bench import bench_time, converged_bound_state, oracle_sigmas
from jacreg.cli import ExperimentConfig, load_data, main
from jacreg.data import normalize, synthetic_blobs, train_val_split
from jacreg.layers import Linear, ReLU
from jacreg.ndcore import make_rng
from jacreg.network import Network, assemble_jacobian, backprop, forward_capture, jvp, lenet, vjp
from jacreg.regularizers import (
    PowerIterState,
    RegularizerConfig,
    frobenius_penalty,
    spectral_bound_penalty,
    spectral_penalty,
    weight_decay_penalty,
)
from jacreg.robustness import AttackConfig, BoundarySearchConfig, attack_accuracy_drop, boundary_distance
from jacreg.trainer import TrainConfig, fit, one_hot, softmax_cross_entropy

from conftest import NET_BUILDERS, central_diff, conv_pool_net, rel_err

pytestmark = pytest.mark.acceptance

ULP_SLACK = 8 * np.finfo(np.float64).eps


def report(line_fn, k, ok, detail):
    line_fn(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


@pytest.fixture(scope="module")
def trained():
    """LeNets trained for 5 epochs on a 2,000-sample set, lambda = 0 and spectral lambda = 0.01."""
    train, val = load_data(ExperimentConfig("train"))
    assert len(train) == 2000
    nets = {}
    t0 = time.perf_counter()
    for name, reg in (("none", RegularizerConfig("none", 0.0)), ("spectral", RegularizerConfig("spectral", 0.01))):
        net = lenet(make_rng(0, 0))
        net.input_stats = train.stats
        cfg = TrainConfig(epochs=5, batch_size=32, learning_rate=0.01, momentum=0.8, regularizer=reg, seed=0)
        fit(net, train, val, cfg)
        nets[name] = net
    return nets, val, time.perf_counter() - t0


@pytest.fixture(scope="module")
def attacked(trained):
    nets, val, _ = trained
    out = {}
    for name, net in nets.items():
        for kind in ("pgd", "tpgd"):
            out[name, kind] = attack_accuracy_drop(net, val, AttackConfig(kind=kind))
    return out


@pytest.fixture(scope="module")
def oracle_run(trained):
    """Spectral-trained LeNet on 100 validation inputs: oracle, N = 1 and N = 50 estimates, layer bound."""
    nets, val, _ = trained
    net = nets["spectral"]
    x = val.x[:100]
    t0 = time.perf_counter()
    oracle = oracle_sigmas(net, x)
    _, rec = forward_capture(net, x, bn_mode="eval")
    est = {n: spectral_penalty(net, rec, n, make_rng(0, 31), with_grads=False)[0] for n in (1, 50)}
    bound = converged_bound_state(net).upper_bound()
    return oracle, est, bound, time.perf_counter() - t0


def test_criterion_01_adjointness(acceptance_line):
    t0 = time.perf_counter()
    worst, draws = 0.0, 0
    builders = dict(NET_BUILDERS, lenet=lambda rng: lenet(rng))
    modes = ("pseudo", "train", "eval")
    for name, build in sorted(builders.items()):
        for k in range(30 if name != "lenet" else 10):
            rng = make_rng(k, 500 + len(name))
            net = build(rng)
            _, rec = forward_capture(net, rng.standard_normal((2,) + net.in_shape), bn_mode=modes[k % 3])
            v = rng.standard_normal((2,) + net.in_shape)
            u = rng.standard_normal((2,) + net.out_shape)
            for b in range(2):
                lhs = np.dot(u[b].ravel(), jvp(net, rec, v)[b].ravel())
                rhs = np.dot(vjp(net, rec, u)[b].ravel(), v[b].ravel())
                scale = np.linalg.norm(u[b]) * np.linalg.norm(v[b])
                worst = max(worst, abs(lhs - rhs) / scale)
                draws += 1
    elapsed = time.perf_counter() - t0
    ok = report(acceptance_line, 1, worst <= 1e-8 and draws >= 200 and elapsed < 60,
                f"{draws} draws, worst |<u,Jv>-<J^T u,v>|/(|u||v|) = {worst:.2e} (<= 1e-8), {elapsed:.1f} s (< 60 s)")
    assert ok


def test_criterion_02_oracle_equivalence(oracle_run, acceptance_line):
    oracle, est, _, elapsed = oracle_run
    rel50 = np.abs(est[50] - oracle) / oracle
    rel1 = np.abs(est[1] - oracle) / oracle
    ok50 = bool(np.all(rel50 <= 1e-6))
    ok1 = float(np.median(rel1)) <= 0.10
    ok = report(acceptance_line, 2, ok50 and ok1 and elapsed < 300,
                f"N=50 max rel err {rel50.max():.2e} (<= 1e-6, {int((rel50 > 1e-6).sum())}/100 above) "
                f"[{'ok' if ok50 else 'fail'}]; N=1 median rel err {np.median(rel1):.3f} (<= 0.10) "
                f"[{'ok' if ok1 else 'fail'}]; {elapsed:.1f} s (< 300 s)")
    assert ok


def test_criterion_03_sandwich(oracle_run, acceptance_line):
    oracle, est, bound, _ = oracle_run
    parts, ok = [], True
    for n, sigma in sorted(est.items()):
        # both sides are converged floating-point values; allow a few ulp of roundoff
        below = bool(np.all(sigma <= oracle * (1 + ULP_SLACK)))
        raw_above = int(np.sum(sigma > oracle))
        above = bool(np.all(oracle <= bound + 1e-6))
        gap_hat = float(np.median(oracle - sigma))
        gap_bound = float(np.median(bound - oracle))
        ratio = gap_bound / gap_hat if gap_hat > 0 else np.inf
        ok &= below and above and ratio >= 10
        parts.append(f"N={n}: hat<=oracle {below} ({raw_above} exceed by <= 8 eps), oracle<=bound {above}, gap ratio {ratio:.3g} (>= 10)")
    report(acceptance_line, 3, ok, f"bound {bound:.3g}; " + "; ".join(parts))
    assert ok


def separated_net(rng, ratio=0.5):
    for _ in range(100):
        net = Network([Linear.init(6, 7, rng), ReLU(), Linear.init(7, 4, rng)], (6,))
        x = rng.normal(size=(3, 6))
        _, rec = forward_capture(net, x)
        s = np.linalg.svd(assemble_jacobian(net, rec), compute_uv=False)
        if np.all(s[:, 1] / s[:, 0] < ratio):
            return net, x
    raise AssertionError("no well-separated net found")


def test_criterion_04_gradient_checks(acceptance_line):
    rng = np.random.default_rng(4)
    net, x = separated_net(rng)
    _, rec = forward_capture(net, x)
    errs = {}

    def worst(grads, f, weights_only=False):
        e = 0.0
        for i, name, p in net.parameters():
            if weights_only and name != "weight":
                continue
            e = max(e, rel_err(grads[i][name], central_diff(f, p)))
        return e

    # spectral: masks frozen in rec, reference is the dense oracle
    _, g = spectral_penalty(net, rec, 300, make_rng(0))
    errs["spectral"] = worst(g, lambda: sum(np.linalg.svd(j, compute_uv=False)[0] for j in assemble_jacobian(net, rec)), True)
    _, g = frobenius_penalty(net, rec, 3, make_rng(7))
    errs["frobenius"] = worst(g, lambda: frobenius_penalty(net, rec, 3, make_rng(7))[0].sum(), True)
    state = PowerIterState.init(net, make_rng(1))
    spectral_bound_penalty(net, state, n_iters=1000)
    _, g = spectral_bound_penalty(net, state)
    errs["spectral_bound"] = worst(
        g, lambda: sum(np.linalg.norm(net.layers[i].weight, 2) ** 2 for i in net.weight_layers()), True
    )
    _, g = weight_decay_penalty(net)
    errs["weight_decay"] = worst(g, lambda: weight_decay_penalty(net)[0], True)

    bare = 0.0
    for build in (lambda r: net, conv_pool_net):
        n2 = build(rng)
        xb = rng.normal(size=(4,) + n2.in_shape)
        y = one_hot(rng.integers(0, n2.n_out, 4), n2.n_out)
        logits, r2 = forward_capture(n2, xb)
        grads, _ = backprop(n2, r2, softmax_cross_entropy(logits, y)[1])
        for i, name, p in n2.parameters():
            fd = central_diff(lambda: softmax_cross_entropy(n2(xb, "pseudo"), y)[0], p)
            bare = max(bare, rel_err(grads[i][name], fd))
    ok = all(e <= 1e-4 for e in errs.values()) and bare <= 1e-6
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(acceptance_line, 4, ok, f"{detail} (<= 1e-4); bare loss backprop {bare:.1e} (<= 1e-6)")
    assert ok


def test_criterion_05_frobenius_consistency(acceptance_line):
    rng = make_rng(5)
    net = conv_pool_net(rng)
    _, rec = forward_capture(net, rng.standard_normal((1,) + net.in_shape))
    exact = float(np.sum(assemble_jacobian(net, rec) ** 2))
    est = float(frobenius_penalty(net, rec, 10_000, make_rng(6))[0][0])
    err = abs(est - exact) / exact
    ok = report(acceptance_line, 5, err <= 0.02, f"estimate {est:.4f} vs exact {exact:.4f}, rel diff {err:.4f} (<= 0.02)")
    assert ok


def test_criterion_06_regularization_effect(trained, attacked, acceptance_line):
    nets, val, elapsed = trained
    sig = {k: float(np.mean(oracle_sigmas(n, val.x[:100]))) for k, n in nets.items()}
    drop = {k: attacked[k, "pgd"][0] for k in nets}
    ok = sig["spectral"] < sig["none"] and drop["spectral"] < drop["none"] and elapsed < 1200
    report(acceptance_line, 6, ok,
           f"mean sigma none {sig['none']:.3f} vs spectral {sig['spectral']:.3f}; "
           f"PGD drop none {drop['none']:.4f} vs spectral {drop['spectral']:.4f}; training {elapsed:.0f} s (< 1200 s)")
    assert ok


def test_criterion_07_attack_containment(trained, attacked, acceptance_line):
    _, val, _ = trained
    delta = AttackConfig().delta
    bad, checked = 0, 0
    for (_, _), (_, adv) in sorted(attacked.items()):
        bad += int(np.sum(np.abs(adv - val.images) > delta) + np.sum(adv < 0) + np.sum(adv > 1))
        checked += adv.size
    ok = report(acceptance_line, 7, bad == 0, f"{bad} violations over {checked} attacked pixels (PGD and TPGD, both nets)")
    assert ok


def test_criterion_08_boundary_oracle(acceptance_line):
    full = synthetic_blobs(make_rng(8), 300, 2, 2, 3.0)
    train, test = train_val_split(full, 200, make_rng(9))
    train = normalize(train)
    test = normalize(test, train.stats)
    net = Network([Linear.init(2, 2, make_rng(10))], (2,))
    fit(net, train, None, TrainConfig(epochs=10, batch_size=16, learning_rate=0.05))
    w = net.layers[0].weight[1] - net.layers[0].weight[0]
    b = net.layers[0].params["bias"][1] - net.layers[0].params["bias"][0]
    cfg = BoundarySearchConfig(samples_per_sphere=256, bisection_iters=25, radius_hi=50.0)
    good = 0
    for x in test.x:
        exact = abs(w @ x + b) / np.linalg.norm(w)
        r, saturated = boundary_distance(net, x, cfg)
        good += (not saturated) and exact * (1 - 1e-9) <= r <= 1.05 * exact
    frac = good / len(test)
    ok = report(acceptance_line, 8, frac >= 0.95, f"{good}/{len(test)} points within [d, 1.05 d] ({frac:.1%}, need >= 95%)")
    assert ok


def test_criterion_09_performance(acceptance_line):
    net = lenet(make_rng(9))
    rows = bench_time(net, (128,), reps=20, warmup=2, power_iters=1)
    t = {m: ms for m, _, ms, _ in rows}
    speedup = t["analytical"] / t["spectral"]
    overhead = t["spectral"] / t["plain"]
    ok = speedup >= 20 and overhead <= 5
    report(acceptance_line, 9, ok,
           f"batch 128, n_out 10: plain {t['plain']:.0f} ms, spectral {t['spectral']:.0f} ms, "
           f"analytical {t['analytical']:.0f} ms; speedup {speedup:.1f}x (>= 20) "
           f"[{'ok' if speedup >= 20 else 'fail'}]; overhead {overhead:.2f}x (<= 5) [{'ok' if overhead <= 5 else 'fail'}]")
    assert ok


def test_criterion_10_determinism(tmp_path, acceptance_line):
    small = ["--synthetic-per-class", "8", "--n-val", "20", "--epochs", "2", "--arch", "conv:3:2:1:1,relu,pool:2",
             "--batch-size", "8", "--n-points", "4"]
    ckpt_dir = tmp_path / "ckpt"
    main(["train", *small, "--reg", "spectral", "--lambda", "0.01", "--out", str(ckpt_dir)])
    ckpt = ["--checkpoint", str(ckpt_dir / "checkpoint.npz")]
    commands = {
        "train": ["train", *small, "--reg", "frobenius", "--lambda", "0.01", "--repeats", "2"],
        "train-bound": ["train", *small, "--reg", "spectral-bound", "--lambda", "0.01"],
        "grid": ["grid", *small, "--reg", "l2", "--epochs", "1"],
        "evaluate": ["evaluate", *small, *ckpt],
        "attack": ["attack", *small, *ckpt, "--attack", "tpgd", "--attack-iters", "1,5"],
        "noise": ["noise", *small, *ckpt, "--noise-sigma", "0.1,0.3"],
        "boundary": ["boundary", *small, *ckpt, "--samples-per-sphere", "16", "--bisection-iters", "8"],
        "bench-error": ["bench-error", *small, *ckpt, "--power-iters-list", "1,5"],
        "synth": ["synth", "--synthetic-per-class", "4", "--n-val", "8"],
    }
    mismatched, compared = [], 0
    for name, argv in commands.items():
        first, second = tmp_path / name / "a", tmp_path / name / "b"
        main([*argv, "--out", str(first)])
        main(["replay", str(first / "manifest.json"), "--out", str(second)])
        for f in sorted(first.rglob("*")):
            if f.suffix in (".csv", ".gz"):
                compared += 1
                if f.read_bytes() != (second / f.relative_to(first)).read_bytes():
                    mismatched.append(str(f.relative_to(tmp_path)))
    ok = report(acceptance_line, 10, not mismatched and compared > 0,
                f"{compared} CSV/IDX outputs from {len(commands)} replays, bitwise mismatches: {mismatched or 'none'}")
    assert ok
