import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jacreg.data import Dataset, channel_stats, normalize
from jacreg.layers import Linear
from jacreg.ndcore import make_rng
from jacreg.network import Network
from jacreg.robustness import (
    AttackConfig,
    BoundarySearchConfig,
    attack_accuracy_drop,
    boundary_distance,
    gaussian_perturb_eval,
    kl_divergence,
    pgd_attack,
    tpgd_attack,
)
from jacreg.trainer import one_hot, softmax_cross_entropy

from conftest import conv_pool_net, relu_mlp


def linear_net(weight, bias=None):
    weight = np.asarray(weight, dtype=float)
    return Network([Linear(weight, bias)], (weight.shape[1],))


def constant_net(n_in, n_out=3):
    return linear_net(np.zeros((n_out, n_in)), np.arange(n_out, dtype=float))


def violations(x, x_adv, delta):
    return int(np.sum(np.abs(x_adv - x) > delta) + np.sum(x_adv < 0) + np.sum(x_adv > 1))


class TestConfigs:
    @pytest.mark.parametrize("kwargs", [{"kind": "fgsm"}, {"eta": 0.0}, {"eta": 0.5, "delta": 0.1}, {"iters": 0}])
    def test_invalid_attack(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)

    @pytest.mark.parametrize("kwargs", [{"radius_lo": 2.0, "radius_hi": 1.0}, {"samples_per_sphere": 0}])
    def test_invalid_boundary(self, kwargs):
        with pytest.raises(ValueError):
            BoundarySearchConfig(**kwargs)


class TestNoise:
    def test_zero_sigma(self, rng):
        net = relu_mlp(rng, (4, 6, 3))
        ds = Dataset(rng.random((20, 4)), rng.integers(0, 3, 20), 3)
        assert gaussian_perturb_eval(net, ds, 0.0, make_rng(0)) == 0.0

    def test_constant_net_is_unaffected(self, rng):
        ds = Dataset(rng.random((30, 4)), rng.integers(0, 3, 30), 3)
        assert gaussian_perturb_eval(constant_net(4), ds, 5.0, make_rng(0)) == 0.0

    def test_deterministic(self, rng):
        net = relu_mlp(rng, (4, 6, 3))
        ds = Dataset(rng.random((50, 4)), rng.integers(0, 3, 50), 3)
        a = gaussian_perturb_eval(net, ds, 0.5, make_rng(3))
        assert a == gaussian_perturb_eval(net, ds, 0.5, make_rng(3))

    def test_threshold_classifier_degrades(self):
        # class = sign of the first feature, samples sit at 0.45 and 0.55
        x = np.full((200, 1), 0.45)
        x[100:] = 0.55
        ds = Dataset(x, np.repeat([0, 1], 100), 2)
        net = linear_net([[-1.0], [1.0]], [0.5, -0.5])
        assert gaussian_perturb_eval(net, ds, 1e-6, make_rng(0)) == 0.0
        assert gaussian_perturb_eval(net, ds, 0.5, make_rng(0)) > 0.2


class TestPgd:
    def test_constant_logits_leave_input(self, rng):
        x = rng.random((5, 4))
        cfg = AttackConfig(delta=0.1, eta=0.05, iters=3)
        assert np.array_equal(pgd_attack(constant_net(4), x, rng.integers(0, 3, 5), cfg), x)

    def test_one_step_closed_form(self, rng):
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        x = rng.uniform(0.2, 0.8, size=(6, 4))
        labels = rng.integers(0, 3, 6)
        z = x @ w.T + b
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        expected = x + 0.1 * np.sign((p - np.eye(3)[labels]) @ w)
        out = pgd_attack(linear_net(w, b), x, labels, AttackConfig(delta=0.1, eta=0.1, iters=1))
        assert np.allclose(out, expected, atol=1e-15)

    def test_normalization_does_not_change_sign(self, rng):
        # positive per-channel scaling of the input keeps every gradient sign
        net = conv_pool_net(rng)
        x = rng.random((3, 2, 6, 6))
        labels = rng.integers(0, 4, 3)
        stats = (np.zeros(2), np.array([1.0, 1.0]))
        cfg = AttackConfig(delta=0.05, eta=0.01, iters=2)
        assert np.array_equal(pgd_attack(net, x, labels, cfg), pgd_attack(net, x, labels, cfg, stats))

    def test_loss_increases_on_linear_model(self, rng):
        w = rng.normal(size=(3, 5))
        x = rng.uniform(0.4, 0.6, size=(8, 5))
        labels = rng.integers(0, 3, 8)
        net = linear_net(w)
        y = one_hot(labels, 3)
        losses = []
        for iters in range(1, 6):
            adv = pgd_attack(net, x, labels, AttackConfig(delta=0.2, eta=0.01, iters=iters))
            losses.append(softmax_cross_entropy(net(adv), y)[0])
        assert softmax_cross_entropy(net(x), y)[0] < losses[0]
        assert all(a < b for a, b in zip(losses, losses[1:]))

    @given(
        seed=st.integers(0, 10_000),
        delta=st.floats(1e-4, 0.5),
        eta_frac=st.floats(0.01, 1.0),
        iters=st.integers(1, 6),
        rand_start=st.booleans(),
        kind=st.sampled_from(["pgd", "tpgd"]),
    )
    @settings(max_examples=60, deadline=None)
    def test_containment(self, seed, delta, eta_frac, iters, rand_start, kind):
        rng = np.random.default_rng(seed)
        net = conv_pool_net(rng)
        x = rng.random((6, 2, 6, 6))
        x[0] = 0.0
        x[1] = 1.0
        x[2] = rng.integers(0, 2, x[2].shape)
        ds = normalize(Dataset(x, rng.integers(0, 4, 6), 4), channel_stats(x + rng.random(x.shape)))
        cfg = AttackConfig(delta=delta, eta=max(delta * eta_frac, 1e-6), iters=iters, kind=kind, rand_start=rand_start, seed=seed)
        _, adv = attack_accuracy_drop(net, ds, cfg, batch_size=4)
        assert violations(x, adv, delta) == 0

    def test_containment_float32(self, rng):
        net = relu_mlp(rng, (10, 8, 3)).astype("f32")
        x = rng.random((50, 10)).astype(np.float32)
        for delta in (1 / 255, 32 / 255, 0.3):
            adv = pgd_attack(net, x, rng.integers(0, 3, 50), AttackConfig(delta=delta, eta=delta / 3, iters=8))
            assert violations(x, adv, delta) == 0


class TestTpgd:
    def test_zero_noise_is_fixed_point(self, rng):
        # the KL gradient vanishes at the clean input
        net = relu_mlp(rng, (4, 6, 3))
        x = rng.random((5, 4))
        out = tpgd_attack(net, x, AttackConfig(delta=0.1, eta=0.05, iters=3, kind="tpgd"), noise_scale=0.0)
        assert np.array_equal(out, x)

    def test_raises_divergence(self, rng):
        net = relu_mlp(rng, (4, 16, 3))
        x = rng.uniform(0.3, 0.7, size=(20, 4))
        cfg = AttackConfig(delta=0.1, eta=0.02, iters=10, kind="tpgd")
        start = tpgd_attack(net, x, AttackConfig(delta=0.1, eta=0.02, iters=1, kind="tpgd"))
        adv = tpgd_attack(net, x, cfg)
        assert kl_divergence(net(x), net(adv)).mean() > kl_divergence(net(x), net(start)).mean()

    @given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 50.0))
    @settings(max_examples=50, deadline=None)
    def test_kl_nonnegative(self, seed, scale):
        rng = np.random.default_rng(seed)
        p, q = scale * rng.normal(size=(2, 4, 5))
        assert np.all(kl_divergence(p, q) >= -1e-12)
        assert np.allclose(kl_divergence(p, p), 0.0, atol=1e-12)


def halfplane_net():
    # class 1 iff the first coordinate is positive
    return linear_net([[0.0, 0.0], [1.0, 0.0]])


class TestBoundaryDistance:
    def test_halfplane(self):
        cfg = BoundarySearchConfig(samples_per_sphere=512, bisection_iters=30)
        r, saturated = boundary_distance(halfplane_net(), np.array([2.0, 0.0]), cfg)
        assert not saturated
        assert 2.0 <= r <= 2.0 * 1.05

    def test_point_on_boundary(self):
        cfg = BoundarySearchConfig(samples_per_sphere=64, bisection_iters=30)
        r, _ = boundary_distance(halfplane_net(), np.array([1e-12, 0.3]), cfg)
        assert r < 1e-6

    def test_saturated(self):
        cfg = BoundarySearchConfig(radius_hi=1.0)
        assert boundary_distance(halfplane_net(), np.array([5.0, 0.0]), cfg) == (1.0, True)

    def test_logit_scale_invariant(self, rng):
        w, b = rng.normal(size=(3, 6)), rng.normal(size=3)
        x = rng.normal(size=6)
        cfg = BoundarySearchConfig(samples_per_sphere=64)
        assert boundary_distance(linear_net(w, b), x, cfg) == boundary_distance(linear_net(4 * w, 4 * b), x, cfg)

    @given(seed=st.integers(0, 10_000), n=st.integers(1, 64), extra=st.integers(1, 64))
    @settings(max_examples=40, deadline=None)
    def test_more_samples_never_increase_radius(self, seed, n, extra):
        rng = np.random.default_rng(seed)
        net = relu_mlp(rng, (3, 6, 3))
        x = rng.normal(size=3)
        small = boundary_distance(net, x, BoundarySearchConfig(samples_per_sphere=n, seed=seed))
        large = boundary_distance(net, x, BoundarySearchConfig(samples_per_sphere=n + extra, seed=seed))
        assert large[0] <= small[0]

    def test_lipschitz_lower_bound(self, rng):
        # a class change within radius r needs a margin change of at most sqrt(2) sigma r
        for _ in range(10):
            w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
            x = rng.normal(size=4)
            net = linear_net(w, b)
            z = np.sort(net(x[None])[0])
            sigma = np.linalg.norm(w, 2)
            r, _ = boundary_distance(net, x, BoundarySearchConfig(samples_per_sphere=128, radius_hi=50.0))
            assert r >= (z[-1] - z[-2]) / (np.sqrt(2) * sigma) * (1 - 1e-6)

    def test_image_input(self, rng):
        net = conv_pool_net(rng)
        r, saturated = boundary_distance(net, rng.random((2, 6, 6)), BoundarySearchConfig(samples_per_sphere=16, radius_hi=100.0))
        assert 0 < r < 100 and not saturated
