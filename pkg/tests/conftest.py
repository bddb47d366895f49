import numpy as np
import pytest

from jacreg.layers import BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU, SmoothActivation
from jacreg.network import Network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_diff(f, arr, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        g.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return g


def relu_mlp(rng, sizes=(6, 8, 5, 4)):
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear.init(a, b, rng))
        if k < len(sizes) - 2:
            layers.append(ReLU())
    return Network(layers, (sizes[0],))


def conv_pool_net(rng):
    return Network(
        [
            Conv2d.init(2, 3, 3, rng, padding=1),
            ReLU(),
            MaxPool2d(2),
            Flatten(),
            Linear.init(27, 4, rng),
        ],
        (2, 6, 6),
    )


def strided_conv_net(rng):
    return Network([Conv2d.init(1, 2, 3, rng, stride=2, padding=1), ReLU(), Flatten(), Linear.init(18, 3, rng)], (1, 5, 5))


def bn_net(rng):
    bn = BatchNorm2d(2)
    bn.params["gamma"] = rng.uniform(0.5, 2.0, 2)
    bn.params["beta"] = rng.normal(size=2)
    return Network(
        [Conv2d.init(1, 2, 3, rng, padding=1), bn, ReLU(), MaxPool2d(2), Flatten(), Linear.init(18, 3, rng)],
        (1, 6, 6),
    )


def smooth_net(rng):
    return Network(
        [
            Linear.init(5, 6, rng),
            SmoothActivation("tanh"),
            Linear.init(6, 4, rng),
            SmoothActivation("sigmoid"),
            Linear.init(4, 3, rng),
        ],
        (5,),
    )


def residual_net(rng):
    return Network(
        [Linear.init(4, 5, rng), ReLU(), Linear.init(5, 5, rng), ReLU(), Linear.init(5, 3, rng)],
        (4,),
        residual_spans=[(2, 4)],
    )


def conv_residual_net(rng):
    return Network(
        [
            Conv2d.init(2, 2, 3, rng, padding=1),
            ReLU(),
            Conv2d.init(2, 2, 3, rng, padding=1),
            ReLU(),
            MaxPool2d(2),
            Flatten(),
            Linear.init(18, 3, rng),
        ],
        (2, 6, 6),
        residual_spans=[(1, 3)],
    )


NET_BUILDERS = {
    "mlp": relu_mlp,
    "conv_pool": conv_pool_net,
    "strided_conv": strided_conv_net,
    "batchnorm": bn_net,
    "smooth": smooth_net,
    "residual": residual_net,
    "conv_residual": conv_residual_net,
}


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record one result line for the acceptance summary printed at the end of the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
