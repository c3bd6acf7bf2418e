"""svmax-lab command line: bounds, SVD self-check and the three experiments."""
import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Dataset, hypersphere_classes, load_mnist
from .embedder import DEFAULT_LAMBDA, DEFAULT_LOSS_PARAM, SNAPSHOT_EPOCHS, SVMaxEmbedder, circle_data, circle_embed
from .errors import ConfigError, FormatError, InvalidInput, MissingData, SvmaxError
from .gan import GanConfig, density_pgm, train_gan
from .linalg import grad_mean_singular_value, l2_normalize_rows, mean_singular_value, sv_bounds, svd
from .metrics import EvalReport
from .net import save_checkpoint
from .rng import Rng
from .trace import read_config

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG = 0, 1, 2


@dataclass
class ExperimentConfig:
    """Resolved train-metric settings; `to_dict` is the config echo of the trace."""

    loss: str = "contrastive"
    lam: float = None
    loss_param: float = None
    regularizer: str = "bounded"
    b: int = 64
    d: int = 32
    p: int = 16
    l: int = 4
    hidden: int = 64
    arch: str = "mlp"
    lr: float = 0.01
    iters: int = 2000
    momentum: float = 0.9
    eval_every: int = 100
    seed: int = 0
    dataset: str = "synthetic"
    classes: int = 64
    dim: int = 32
    spread: float = 0.15
    per_class: int = 40
    train_classes: int = 32

    def resolve(self):
        if self.loss not in DEFAULT_LAMBDA:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.loss]
        if self.loss_param is None:
            self.loss_param = DEFAULT_LOSS_PARAM[self.loss]
        if self.b != self.p * self.l:
            raise ConfigError(f"b must equal p * l, got b={self.b}, p={self.p}, l={self.l}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.dataset == "synthetic" and not 0 < self.train_classes < self.classes:
            raise ConfigError("train_classes must leave at least one held-out class")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def load_metric_data(cfg):
    """(train, held-out) splits; synthetic data holds out whole classes."""
    if cfg.dataset == "synthetic":
        ds = hypersphere_classes(cfg.classes, cfg.dim, cfg.spread, cfg.per_class, Rng(cfg.seed))
        return ds.split_classes(cfg.train_classes)
    if cfg.dataset == "mnist":
        return load_mnist("train"), load_mnist("t10k")
    path = Path(cfg.dataset)
    if not path.exists():
        raise ConfigError(f"dataset must be 'synthetic', 'mnist' or an existing CSV, got {cfg.dataset!r}")
    # CSV data: classes below train_classes train, the rest are held out
    return Dataset.from_csv(path).split_classes(cfg.train_classes)


def run_train_metric(cfg, out_dir):
    cfg.resolve()
    est = SVMaxEmbedder(loss=cfg.loss, loss_param=cfg.loss_param, lam=cfg.lam, regularizer=cfg.regularizer,
                        embed_dim=cfg.d, hidden=cfg.hidden, arch=cfg.arch, p=cfg.p, l=cfg.l, lr=cfg.lr,
                        n_iter=cfg.iters, momentum=cfg.momentum, eval_every=cfg.eval_every,
                        random_state=cfg.seed)
    est._check_config()
    train, held = load_metric_data(cfg)
    est.fit(train.samples, train.labels, held.samples, held.labels)
    est.trace_.config = cfg.to_dict()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    est.trace_.to_csv(out / "trace.csv")
    save_checkpoint(est.net_, out / "checkpoint")
    final = est.evaluate(held.samples, held.labels, len(est.trace_), est.trace_.rows[-1].loss)
    (out / "report.csv").write_text(EvalReport.CSV_HEADER + "\n" + final.csv_row() + "\n")
    return est, final


def _check(name, ok, counts):
    passed, total = counts.get(name, (0, 0))
    counts[name] = (passed + bool(ok), total + 1)


def svd_check(seed=0, trials=100, inject_fault=False):
    """Run the SVD / s_mu invariant suite on random matrices; returns {property: (passed, total)}."""
    rng = Rng(seed)
    counts = {}
    for t in range(trials):
        rows, cols = rng.integers(24) + 1, rng.integers(24) + 1
        a = rng.normal(size=(rows, cols))
        res = svd(a)
        s = res.s.copy()
        if inject_fault:
            s[0] *= 1.0 + 1e-6
        r = s.size
        _check("descending", np.all(np.diff(s) <= 0) and np.all(s >= 0), counts)
        _check("orthonormal", np.linalg.norm(res.u.T @ res.u - np.eye(r)) <= 1e-9
               and np.linalg.norm(res.v.T @ res.v - np.eye(r)) <= 1e-9, counts)
        recon = np.linalg.norm(res.u @ np.diag(s) @ res.v.T - a)
        _check("reconstruction", recon <= 1e-9 * max(1.0, np.linalg.norm(a)), counts)
        gram = a.T @ a if rows >= cols else a @ a.T
        oracle = np.sqrt(np.clip(np.linalg.eigvalsh(gram)[::-1][:r], 0.0, None))
        _check("eigen_oracle", np.all(np.abs(s - oracle) <= 1e-8 * max(oracle[0], 1e-300)), counts)
        e = l2_normalize_rows(a)
        lo, hi = sv_bounds(rows, cols)
        s_mu = mean_singular_value(e) * (1.0 + 1e-6 if inject_fault else 1.0)
        _check("bound_containment", lo - 1e-9 <= s_mu <= hi + 1e-9, counts)
        if t < 20:
            x = rng.normal(size=(rng.integers(6) + 2, rng.integers(6) + 2))
            g = grad_mean_singular_value(x)
            fd = np.empty_like(x)
            h = 1e-5
            for idx in np.ndindex(*x.shape):
                xp, xm = x.copy(), x.copy()
                xp[idx] += h
                xm[idx] -= h
                fd[idx] = (mean_singular_value(xp) - mean_singular_value(xm)) / (2 * h)
            _check("gradient_fd", np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd)), counts)
    return counts


def _parser():
    ap = argparse.ArgumentParser(prog="svmax-lab", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="lower/upper bounds of the mean singular value")
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--d", type=int, required=True)

    p = sub.add_parser("svd-check", help="run the SVD invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", action="store_true", help="perturb results to exercise failure reporting")

    p = sub.add_parser("train-metric", help="train a metric-learning embedder")
    p.add_argument("--config-from", help="rerun from the config echoed in a trace.csv")
    for f in fields(ExperimentConfig):
        kind = {"float": float, "int": int, "str": str}.get(
            f.type if isinstance(f.type, str) else f.type.__name__, str)
        p.add_argument("--" + f.name.replace("_", "-"), type=kind, default=None)
    p.add_argument("--out", default="runs/train-metric")

    p = sub.add_parser("mnist-embed", help="embed MNIST (or a synthetic stand-in) onto the unit circle")
    p.add_argument("--synthetic", action="store_true", help="use hypersphere classes instead of MNIST")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=64)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--l", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--arch", choices=("mlp", "cnn"), default="mlp")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--subset", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/mnist-embed")

    p = sub.add_parser("train-gan", help="ring-of-Gaussians GAN with optional SVMax")
    defaults = GanConfig()
    p.add_argument("--lam", type=float, default=defaults.lam)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--momentum", type=float, default=defaults.momentum)
    p.add_argument("--steps", type=int, default=defaults.steps)
    p.add_argument("--batch", type=int, default=defaults.batch)
    p.add_argument("--latent-dim", type=int, default=defaults.latent_dim)
    p.add_argument("--gen-layers", default=",".join(map(str, defaults.gen_layers)))
    p.add_argument("--disc-layers", default=",".join(map(str, defaults.disc_layers)))
    p.add_argument("--sigma", type=float, default=defaults.sigma)
    p.add_argument("--snapshot-steps", default=",".join(map(str, defaults.snapshot_steps)))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pgm", action="store_true", help="also write 128x128 density images")
    p.add_argument("--out", default="runs/train-gan")
    return ap


def _int_list(text, name):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--{name} must be comma-separated integers, got {text!r}") from None


def cmd_bounds(args):
    lo, hi = sv_bounds(args.b, args.d)
    print(f"L={lo:.6f} U={hi:.6f}")
    return EXIT_OK


def cmd_svd_check(args):
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    counts = svd_check(args.seed, args.trials, args.inject_fault)
    failed = []
    for name, (passed, total) in counts.items():
        print(f"{name}: {passed}/{total}")
        if passed != total:
            failed.append(name)
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_PROPERTY
    print("all properties pass")
    return EXIT_OK


def cmd_train_metric(args):
    if args.config_from:
        cfg = ExperimentConfig.from_dict(read_config(args.config_from))
    else:
        cfg = ExperimentConfig()
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name)
        if value is not None:
            setattr(cfg, f.name, value)
    _, final = run_train_metric(cfg, args.out)
    print(f"recall@1={final.recall_at[1]:.4f} nmi={final.nmi:.4f} s_mu={final.s_mu:.6f} -> {args.out}")
    return EXIT_OK


def cmd_mnist_embed(args):
    config = {k: v for k, v in vars(args).items() if k not in ("command", "out", "data_dir")}
    train, test, source = circle_data(args.data_dir, args.synthetic, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config["source"] = source

    def write(epoch, ds):
        ds.to_csv(out / f"epoch_{epoch:03d}.csv")

    trace = circle_embed(train, test, args.lam, args.epochs, args.p, args.l, args.lr, args.margin, args.seed,
                         args.arch, args.hidden, args.subset, SNAPSHOT_EPOCHS, write, config)
    trace.to_csv(out / "trace.csv")
    last = trace.rows[-1]
    print(f"{source}: epoch {last.iteration} s_mu={last.s_mu:.6f} (L={last.lower:.6f}, U={last.upper:.6f})")
    return EXIT_OK


def cmd_train_gan(args):
    cfg = GanConfig(latent_dim=args.latent_dim, gen_layers=_int_list(args.gen_layers, "gen-layers"),
                    disc_layers=_int_list(args.disc_layers, "disc-layers"), lr=args.lr, momentum=args.momentum,
                    steps=args.steps, batch=args.batch, lam=args.lam, seed=args.seed,
                    snapshot_steps=_int_list(args.snapshot_steps, "snapshot-steps"), sigma=args.sigma).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def write_pgm(snap):
        if args.pgm:
            (out / f"snapshot_{snap.step:05d}.pgm").write_bytes(density_pgm(snap.points))

    res = train_gan(cfg, on_snapshot=write_pgm)
    (out / "trace.csv").write_text(res.trace_csv())
    (out / "coverage.csv").write_text(res.coverage_csv())
    (out / "snapshots.csv").write_text(res.snapshots_csv())
    if res.diverged_at is not None:
        print(f"diverged at step {res.diverged_at}")
    for s in res.snapshots:
        print(f"step {s.step}: covered={s.covered}/{cfg.modes} hq={s.hq_fraction:.3f}")
    return EXIT_OK


COMMANDS = {
    "bounds": cmd_bounds,
    "svd-check": cmd_svd_check,
    "train-metric": cmd_train_metric,
    "mnist-embed": cmd_mnist_embed,
    "train-gan": cmd_train_gan,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MissingData as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, InvalidInput, FormatError, SvmaxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
