"""Cross-entropy loss, SGD with momentum, the regularized training loop and evaluation."""

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from jacreg.errors import TrainingDiverged
from jacreg.ndcore import make_rng, resolve_dtype
from jacreg.network import backprop, forward_capture
from jacreg.regularizers import PowerIterState, RegularizerConfig, regularizer_step

METRICS_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "mean_penalty", "ms_per_batch")


def one_hot(labels, n_classes, dtype=np.float64):
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    ``labels`` must be one-hot rows matching ``logits``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape != labels.shape or logits.ndim != 2:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} must both be (B, n_out)")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("every label row must be one-hot")
    b = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float((labels * logp).sum()) / b
    grad = (np.exp(logp) - labels) / b
    return loss, grad


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """In-place update: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    ``params``, ``grads`` and ``velocity`` are parallel lists of dicts of arrays.
    """
    for p, g, vel in zip(params, grads, velocity):
        for k in p:
            vel[k] *= momentum
            vel[k] += g[k]
            p[k] -= lr * vel[k]
    return params, velocity


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.8
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if isinstance(self.regularizer, dict):
            self.regularizer = RegularizerConfig(**self.regularizer)
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        resolve_dtype(self.precision)


@dataclass
class RunMetrics:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    mean_penalty: list = field(default_factory=list)
    # wall-clock numbers never take part in equality
    ms_per_batch: list = field(default_factory=list, compare=False)
    seed: int = 0

    def rows(self, timing=True):
        for i in range(len(self.epoch)):
            yield (
                self.epoch[i],
                repr(self.train_loss[i]),
                repr(self.val_loss[i]),
                repr(self.val_acc[i]),
                repr(self.mean_penalty[i]),
                f"{self.ms_per_batch[i]:.3f}" if timing else "",
            )

    def to_csv(self, timing=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        w.writerows(self.rows(timing))
        return buf.getvalue()

    def as_dict(self):
        return asdict(self)


def _net_params(net):
    return [layer.params for layer in net.layers]


def fit(net, train, val, cfg, log=None):
    """Minimize mean cross-entropy plus ``lambda`` times the configured penalty.

    ``train`` and ``val`` are :class:`jacreg.data.Dataset` objects whose
    ``x`` property gives network-ready inputs. Returns :class:`RunMetrics`.
    """
    dtype = resolve_dtype(cfg.precision)
    net.astype(dtype)
    reg = cfg.regularizer
    rng = make_rng(cfg.seed, 1)
    reg_rng = make_rng(cfg.seed, 2)
    state = PowerIterState.init(net, make_rng(cfg.seed, 3)) if reg.kind == "spectral_bound" else None
    x_all = train.x.astype(dtype)
    y_all = one_hot(train.labels, net.n_out, dtype)
    velocity = net.zero_grads()
    metrics = RunMetrics(seed=cfg.seed)
    n = len(x_all)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses, penalties, times = [], [], []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            t0 = time.perf_counter()
            idx = order[start : start + cfg.batch_size]
            logits, rec = forward_capture(net, x_all[idx], bn_mode="train")
            loss, g_logits = softmax_cross_entropy(logits, y_all[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, bi, loss)
            grads, _ = backprop(net, rec, g_logits, need_input_grad=False)
            if reg.kind != "none":
                pen = regularizer_step(net, rec, reg, reg_rng, state)
                penalties.append(pen.value)
                if reg.lam > 0:
                    for g, pg in zip(grads, pen.grads):
                        for k, arr in pg.items():
                            g[k] = g[k] + reg.lam * arr
            sgd_momentum_step(_net_params(net), grads, velocity, cfg.learning_rate, cfg.momentum)
            losses.append(loss)
            times.append(time.perf_counter() - t0)
        if any(not np.all(np.isfinite(p)) for _, _, p in net.parameters()):
            raise TrainingDiverged(epoch, bi, float("nan"))
        val_acc, val_loss = evaluate(net, val) if val is not None and len(val) else (float("nan"), float("nan"))
        metrics.epoch.append(epoch)
        metrics.train_loss.append(float(np.mean(losses)))
        metrics.val_loss.append(val_loss)
        metrics.val_acc.append(val_acc)
        metrics.mean_penalty.append(float(np.mean(penalties)) if penalties else 0.0)
        metrics.ms_per_batch.append(1000.0 * float(np.median(times)))
        if log is not None:
            log(
                f"epoch {epoch}: train_loss={metrics.train_loss[-1]:.4f} "
                f"val_loss={val_loss:.4f} val_acc={val_acc:.4f} penalty={metrics.mean_penalty[-1]:.4g}"
            )
    return metrics


def evaluate(net, dataset, batch_size=256):
    """``(accuracy, mean_loss)`` with batch-norm in inference mode."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x = dataset.x
    correct = 0
    total_loss = 0.0
    for start in range(0, len(x), batch_size):
        xb = x[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        logits = net(xb, bn_mode="eval")
        loss, _ = softmax_cross_entropy(logits, one_hot(yb, net.n_out, logits.dtype))
        total_loss += loss * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / len(x), total_loss / len(x)
