"""Command-line entry point: training, evaluation, attacks, boundary studies and benchmarks.

Every command writes its artifacts plus a ``manifest.json`` into ``--out``.
The manifest holds the full configuration, its hash, the seed and the
package version; ``jacreg replay manifest.json`` re-runs the command.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from jacreg import __version__
from jacreg.bench import ERROR_COLUMNS, SAMPLE_COLUMNS, TIME_COLUMNS, bench_relative_error, bench_time
from jacreg.data import load_idx, normalize, synthetic_images, train_val_split, write_idx
from jacreg.layers import BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU, SmoothActivation
from jacreg.ndcore import make_rng, resolve_dtype
from jacreg.network import Network, atomic_write_bytes, lenet, load_checkpoint, save_checkpoint
from jacreg.regularizers import RegularizerConfig
from jacreg.robustness import AttackConfig, BoundarySearchConfig, attack_accuracy_drop, boundary_distance, gaussian_perturb_eval
from jacreg.trainer import TrainConfig, evaluate, fit

log = logging.getLogger("jacreg")

COMMANDS = ("train", "grid", "evaluate", "attack", "noise", "boundary", "bench-error", "bench-time", "synth")
REG_NAMES = {
    "none": "none",
    "l2": "weight_decay",
    "frobenius": "frobenius",
    "spectral-bound": "spectral_bound",
    "spectral": "spectral",
}
GRID_LR = (0.01, 0.001)
GRID_BATCH = (16, 32)
GRID_LAMBDA = (0.0001, 0.001, 0.01, 0.1)

ROBUSTNESS_COLUMNS = ("method", "attack", "level", "accuracy_drop")
BOUNDARY_COLUMNS = ("sample_id", "radius", "saturated")
EVAL_COLUMNS = ("metric", "value")
GRID_COLUMNS = ("config_id", "learning_rate", "batch_size", "lambda", "repeat", "seed", "val_loss", "val_acc")
GRID_SUMMARY_COLUMNS = ("config_id", "learning_rate", "batch_size", "lambda", "mean_val_loss", "std_val_loss", "mean_val_acc", "selected")


class UsageError(Exception):
    pass


@dataclass
class DataConfig:
    train_images: str = None
    train_labels: str = None
    val_images: str = None
    val_labels: str = None
    n_train: int = 2000
    n_val: int = 400
    # synthetic fallback, used when no IDX paths are given
    synthetic_per_class: int = 240
    synthetic_noise: float = 0.3

    def paths(self):
        return [p for p in (self.train_images, self.train_labels, self.val_images, self.val_labels) if p]


@dataclass
class ExperimentConfig:
    command: str
    arch: str = "lenet"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    boundary: BoundarySearchConfig = field(default_factory=BoundarySearchConfig)
    out: str = "out"
    repeats: int = 1
    checkpoint: str = None
    attack_iters: tuple = (10,)
    noise_sigmas: tuple = (0.1,)
    power_iters_list: tuple = (1, 2, 5, 10, 20, 50)
    batch_sizes: tuple = (16, 32, 64, 128)
    bench_reps: int = 20
    n_points: int = 100
    record_timing: bool = False
    dry_run: bool = False

    def __post_init__(self):
        for name, cls in (("data", DataConfig), ("train", TrainConfig), ("attack", AttackConfig), ("boundary", BoundarySearchConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls(**getattr(self, name)))
        for name in ("attack_iters", "noise_sigmas", "power_iters_list", "batch_sizes"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.repeats < 1:
            raise UsageError("--repeats must be >= 1")
        if self.n_points < 1:
            raise UsageError("--n-points must be >= 1")
        missing = [p for p in self.data.paths() + ([self.checkpoint] if self.checkpoint else []) if not os.path.exists(p)]
        if missing:
            raise UsageError(f"missing input file(s): {', '.join(missing)}")
        if len(self.data.paths()) not in (0, 4):
            raise UsageError("give all four of --train-images/--train-labels/--val-images/--val-labels or none")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self):
        # the output directory does not influence any artifact
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def _csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def write_csv(path, header, rows):
    atomic_write_bytes(path, _csv_bytes(header, rows))


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, default=list) + "\n").encode())


def parse_arch(spec, in_shape, n_classes, rng, dtype):
    """Build a network from ``lenet``, ``mlp[:H1:H2...]`` or a custom layer list.

    A custom list is comma separated: ``conv:K:C[:S[:P]]``, ``pool:M``,
    ``bn``, ``relu``, ``tanh``, ``sigmoid``, ``flatten``, ``linear:N``. A
    trailing ``linear:n_classes`` is appended when the list does not end in
    a linear layer of that width.
    """
    if spec == "lenet":
        return lenet(rng, in_shape, n_classes, dtype)
    if spec.startswith("mlp"):
        hidden = [int(h) for h in spec.split(":")[1:]] or [256, 128]
        tokens = (["flatten"] if len(in_shape) > 1 else []) + [t for h in hidden for t in (f"linear:{h}", "relu")]
    else:
        tokens = [t.strip() for t in spec.split(",") if t.strip()]
    layers = []
    shape = tuple(in_shape)

    def add(layer):
        nonlocal shape
        shape = layer.build(shape)
        layers.append(layer)

    for tok in tokens:
        name, *args = tok.split(":")
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise UsageError(f"bad layer token {tok!r}") from None
        if name == "conv" and len(nums) in (2, 3, 4):
            k, c_out, stride, pad = (nums + [1, 0])[:4] if len(nums) == 2 else (nums + [0])[:4]
            add(Conv2d.init(shape[0], c_out, k, rng, stride=stride, padding=pad, dtype=dtype))
        elif name == "pool" and len(nums) == 1:
            add(MaxPool2d(nums[0]))
        elif name == "bn" and not nums:
            add(BatchNorm2d(shape[0], dtype=dtype))
        elif name == "relu" and not nums:
            add(ReLU())
        elif name in ("tanh", "sigmoid") and not nums:
            add(SmoothActivation(name))
        elif name == "flatten" and not nums:
            add(Flatten())
        elif name == "linear" and len(nums) == 1:
            if len(shape) != 1:
                add(Flatten())
            add(Linear.init(shape[0], nums[0], rng, dtype))
        else:
            raise UsageError(f"bad layer token {tok!r}")
    if not (layers and isinstance(layers[-1], Linear) and shape == (n_classes,)):
        if len(shape) != 1:
            add(Flatten())
        add(Linear.init(shape[0], n_classes, rng, dtype))
    return Network(layers, in_shape)


def load_data(cfg):
    """``(train, val)`` datasets, normalized with the training statistics."""
    d, seed = cfg.data, cfg.train.seed
    if d.paths():
        train = load_idx(d.train_images, d.train_labels)
        val = load_idx(d.val_images, d.val_labels)
        if d.n_train and len(train) > d.n_train:
            train = train.subset(make_rng(seed, 52).permutation(len(train))[: d.n_train])
        if d.n_val and len(val) > d.n_val:
            val = val.subset(make_rng(seed, 53).permutation(len(val))[: d.n_val])
    else:
        full = synthetic_images(make_rng(seed, 50), d.synthetic_per_class, noise=d.synthetic_noise)
        train, val = train_val_split(full, min(d.n_val, len(full) - 1), make_rng(seed, 51))
    train = normalize(train)
    return train, normalize(val, train.stats)


def _reg_config(cfg, lam=None):
    r = cfg.train.regularizer
    return RegularizerConfig(r.kind, r.lam if lam is None else lam, r.power_iters, r.n_proj, r.exponent)


def _train_one(cfg, train, val, seed, lr=None, batch_size=None, lam=None):
    tc = TrainConfig(
        epochs=cfg.train.epochs,
        batch_size=batch_size or cfg.train.batch_size,
        learning_rate=lr or cfg.train.learning_rate,
        momentum=cfg.train.momentum,
        regularizer=_reg_config(cfg, lam),
        seed=seed,
        precision=cfg.train.precision,
    )
    net = parse_arch(cfg.arch, train.images.shape[1:], train.n_classes, make_rng(seed, 0), resolve_dtype(tc.precision))
    net.input_stats = train.stats
    metrics = fit(net, train, val, tc, log=log.info)
    return net, metrics, tc


def _ckpt_extra(cfg, tc):
    return {
        "method": tc.regularizer.kind,
        "lambda": tc.regularizer.lam,
        "seed": tc.seed,
        "config_hash": cfg.config_hash(),
        "version": __version__,
    }


def cmd_train(cfg, out):
    train, val = load_data(cfg)
    written = []
    for r in range(cfg.repeats):
        seed = cfg.train.seed + r
        d = out if cfg.repeats == 1 else os.path.join(out, f"repeat{r}")
        os.makedirs(d, exist_ok=True)
        net, metrics, tc = _train_one(cfg, train, val, seed)
        atomic_write_bytes(os.path.join(d, "metrics.csv"), metrics.to_csv(timing=cfg.record_timing).encode())
        save_checkpoint(net, os.path.join(d, "checkpoint.npz"), _ckpt_extra(cfg, tc))
        if not cfg.record_timing:
            log.info("median ms/batch per epoch: %s", ", ".join(f"{t:.1f}" for t in metrics.ms_per_batch))
        written += [os.path.join(d, "metrics.csv"), os.path.join(d, "checkpoint.npz")]
    return written


def grid_configs(kind):
    """The hyperparameter grid; ``none`` has no weight factor to search."""
    lams = (0.0,) if kind == "none" else GRID_LAMBDA
    return [(lr, bs, lam) for lr in GRID_LR for bs in GRID_BATCH for lam in lams]


def cmd_grid(cfg, out):
    configs = grid_configs(cfg.train.regularizer.kind)
    if cfg.dry_run:
        rows = [(i, lr, bs, lam) for i, (lr, bs, lam) in enumerate(configs)]
        write_csv(os.path.join(out, "grid_configs.csv"), ("config_id", "learning_rate", "batch_size", "lambda"), rows)
        return [os.path.join(out, "grid_configs.csv")]
    train, val = load_data(cfg)
    runs, summary = [], []
    best = (np.inf, None, None)
    for i, (lr, bs, lam) in enumerate(configs):
        losses, accs, nets = [], [], []
        for r in range(cfg.repeats):
            seed = cfg.train.seed + r
            net, _, tc = _train_one(cfg, train, val, seed, lr, bs, lam)
            acc, loss = evaluate(net, val)
            runs.append((i, lr, bs, lam, r, seed, repr(loss), repr(acc)))
            losses.append(loss)
            accs.append(acc)
            nets.append((net, tc))
        summary.append([i, lr, bs, lam, repr(float(np.mean(losses))), repr(float(np.std(losses))), repr(float(np.mean(accs))), 0])
        if np.mean(losses) < best[0]:
            best = (np.mean(losses), i, nets[0])
    summary[best[1]][-1] = 1
    write_csv(os.path.join(out, "grid.csv"), GRID_COLUMNS, runs)
    write_csv(os.path.join(out, "grid_summary.csv"), GRID_SUMMARY_COLUMNS, summary)
    net, tc = best[2]
    save_checkpoint(net, os.path.join(out, "checkpoint.npz"), _ckpt_extra(cfg, tc))
    return [os.path.join(out, n) for n in ("grid.csv", "grid_summary.csv", "checkpoint.npz")]


def _model(cfg, train=None):
    """The checkpointed network, or a freshly initialized one when none is given."""
    if cfg.checkpoint:
        net, extra = load_checkpoint(cfg.checkpoint)
        return net.astype(cfg.train.precision), extra.get("method", "unknown")
    if train is None:
        train, _ = load_data(cfg)
    dtype = resolve_dtype(cfg.train.precision)
    net = parse_arch(cfg.arch, train.images.shape[1:], train.n_classes, make_rng(cfg.train.seed, 0), dtype)
    net.input_stats = train.stats
    return net, "untrained"


def _val_with_net_stats(cfg, net):
    _, val = load_data(cfg)
    if net.input_stats is not None:
        val = normalize(val, net.input_stats)
    return val


def cmd_evaluate(cfg, out):
    net, _ = _model(cfg)
    acc, loss = evaluate(net, _val_with_net_stats(cfg, net))
    write_csv(os.path.join(out, "eval.csv"), EVAL_COLUMNS, [("accuracy", repr(acc)), ("loss", repr(loss))])
    return [os.path.join(out, "eval.csv")]


def cmd_attack(cfg, out):
    net, method = _model(cfg)
    val = _val_with_net_stats(cfg, net)
    rows = []
    for iters in cfg.attack_iters:
        a = cfg.attack
        acfg = AttackConfig(a.delta, a.eta, iters, a.kind, a.rand_start, a.noise_sigma, a.seed)
        drop, _ = attack_accuracy_drop(net, val, acfg)
        rows.append((method, a.kind, iters, repr(float(drop))))
        log.info("%s %s iters=%d drop=%.4f", method, a.kind, iters, drop)
    write_csv(os.path.join(out, "robustness.csv"), ROBUSTNESS_COLUMNS, rows)
    return [os.path.join(out, "robustness.csv")]


def cmd_noise(cfg, out):
    net, method = _model(cfg)
    val = _val_with_net_stats(cfg, net)
    rows = []
    for k, sigma in enumerate(cfg.noise_sigmas):
        drop = gaussian_perturb_eval(net, val, sigma, make_rng(cfg.train.seed, 60 + k))
        rows.append((method, "noise", sigma, repr(float(drop))))
    write_csv(os.path.join(out, "robustness.csv"), ROBUSTNESS_COLUMNS, rows)
    return [os.path.join(out, "robustness.csv")]


def cmd_boundary(cfg, out):
    net, _ = _model(cfg)
    x = _val_with_net_stats(cfg, net).x[: cfg.n_points]
    rows = []
    for i, xi in enumerate(x):
        radius, saturated = boundary_distance(net, xi, cfg.boundary)
        rows.append((i, repr(float(radius)), int(saturated)))
    write_csv(os.path.join(out, "boundary.csv"), BOUNDARY_COLUMNS, rows)
    return [os.path.join(out, "boundary.csv")]


def cmd_bench_error(cfg, out):
    net, _ = _model(cfg)
    x = _val_with_net_stats(cfg, net).x[: cfg.n_points]
    summary, samples = bench_relative_error(net, x, cfg.power_iters_list, seed=cfg.train.seed)
    write_csv(os.path.join(out, "bench_error.csv"), ERROR_COLUMNS, summary)
    write_csv(os.path.join(out, "bench_error_samples.csv"), SAMPLE_COLUMNS, samples)
    return [os.path.join(out, "bench_error.csv"), os.path.join(out, "bench_error_samples.csv")]


def cmd_bench_time(cfg, out):
    net, _ = _model(cfg)
    rows = bench_time(net, cfg.batch_sizes, reps=cfg.bench_reps, power_iters=cfg.train.regularizer.power_iters, seed=cfg.train.seed)
    write_csv(os.path.join(out, "bench_time.csv"), TIME_COLUMNS, [(m, b, f"{t:.3f}", r) for m, b, t, r in rows])
    return [os.path.join(out, "bench_time.csv")]


def cmd_synth(cfg, out):
    d = cfg.data
    full = synthetic_images(make_rng(cfg.train.seed, 50), d.synthetic_per_class, noise=d.synthetic_noise)
    train, val = train_val_split(full, min(d.n_val, len(full) - 1), make_rng(cfg.train.seed, 51))
    names = []
    for split, ds in (("train", train), ("val", val)):
        ip = os.path.join(out, f"{split}-images-idx3-ubyte.gz")
        lp = os.path.join(out, f"{split}-labels-idx1-ubyte.gz")
        write_idx(ds, ip, lp)
        names += [ip, lp]
    return names


HANDLERS = {
    "train": cmd_train,
    "grid": cmd_grid,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "noise": cmd_noise,
    "boundary": cmd_boundary,
    "bench-error": cmd_bench_error,
    "bench-time": cmd_bench_time,
    "synth": cmd_synth,
}


def run(cfg):
    """Execute one command; returns the list of files written (manifest last)."""
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    written = HANDLERS[cfg.command](cfg, out)
    manifest = {
        "command": cfg.command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.train.seed,
        "precision": cfg.train.precision,
        "version": __version__,
        "outputs": sorted(os.path.relpath(p, out) for p in written),
    }
    path = os.path.join(out, "manifest.json")
    write_json(path, manifest)
    return written + [path]


def _int_list(s):
    try:
        return tuple(int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _float_list(s):
    try:
        return tuple(float(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="jacreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"jacreg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("model and data")
    g.add_argument("--arch", default="lenet", help="lenet, mlp[:H1:H2...] or a custom layer list")
    g.add_argument("--checkpoint", help="load this network instead of building one")
    g.add_argument("--train-images")
    g.add_argument("--train-labels")
    g.add_argument("--val-images")
    g.add_argument("--val-labels")
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=400)
    g.add_argument("--synthetic-per-class", type=int, default=240)
    g.add_argument("--synthetic-noise", type=float, default=0.3)
    g = common.add_argument_group("training")
    g.add_argument("--reg", choices=sorted(REG_NAMES), default="none")
    g.add_argument("--lambda", dest="lam", type=float, default=0.0)
    g.add_argument("--power-iters", type=int, default=1)
    g.add_argument("--n-proj", type=int, default=1)
    g.add_argument("--epochs", type=int, default=5)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=0.01)
    g.add_argument("--momentum", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--precision", choices=("f32", "f64"), default="f64")
    g.add_argument("--repeats", type=int, default=1)
    g.add_argument("--record-timing", action="store_true", help="fill the ms_per_batch column of metrics.csv")
    g = common.add_argument_group("perturbations")
    g.add_argument("--attack", choices=("pgd", "tpgd"), default="pgd")
    g.add_argument("--delta", type=float, default=32 / 255)
    g.add_argument("--eta", type=float, default=2 / 255)
    g.add_argument("--attack-iters", type=_int_list, default=(10,))
    g.add_argument("--rand-start", action="store_true")
    g.add_argument("--noise-sigma", type=_float_list, default=(0.1,))
    g.add_argument("--samples-per-sphere", type=int, default=256)
    g.add_argument("--bisection-iters", type=int, default=25)
    g.add_argument("--radius-hi", type=float, default=10.0)
    g = common.add_argument_group("benchmarks")
    g.add_argument("--power-iters-list", type=_int_list, default=(1, 2, 5, 10, 20, 50))
    g.add_argument("--batch-sizes", type=_int_list, default=(16, 32, 64, 128))
    g.add_argument("--reps", type=int, default=20)
    g.add_argument("--n-points", type=int, default=100)
    g.add_argument("--dry-run", action="store_true", help="grid: only list the configurations")
    common.add_argument("--out", default="out")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="output directory (default: the manifest's)")
    rp.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args):
    return ExperimentConfig(
        command=args.command,
        arch=args.arch,
        data=DataConfig(
            args.train_images, args.train_labels, args.val_images, args.val_labels,
            args.n_train, args.n_val, args.synthetic_per_class, args.synthetic_noise,
        ),
        train=TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            momentum=args.momentum,
            regularizer=RegularizerConfig(REG_NAMES[args.reg], args.lam, args.power_iters, args.n_proj),
            seed=args.seed,
            precision=args.precision,
        ),
        attack=AttackConfig(args.delta, args.eta, max(args.attack_iters), args.attack, args.rand_start, 0.0, args.seed),
        boundary=BoundarySearchConfig(args.samples_per_sphere, 0.0, args.radius_hi, args.bisection_iters, args.seed),
        out=args.out,
        repeats=args.repeats,
        checkpoint=args.checkpoint,
        attack_iters=args.attack_iters,
        noise_sigmas=args.noise_sigma,
        power_iters_list=args.power_iters_list,
        batch_sizes=args.batch_sizes,
        bench_reps=args.reps,
        n_points=args.n_points,
        record_timing=args.record_timing,
        dry_run=args.dry_run,
    )


def load_manifest(path, out=None):
    with open(path) as fh:
        manifest = json.load(fh)
    cfg = ExperimentConfig.from_dict(manifest["config"])
    if out is not None:
        cfg.out = out
    if cfg.config_hash() != manifest.get("config_hash"):
        raise UsageError(f"{path}: config hash mismatch, manifest was edited or is from another version")
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "replay":
            cfg = load_manifest(args.manifest, args.out)
        else:
            cfg = config_from_args(args)
        for path in run(cfg):
            print(path)
    except (UsageError, ValueError, OSError) as exc:
        parser.error(str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
