"""Toy GAN on a ring of 2D Gaussians, with SVMax on the raw fake batch."""
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, gaussian_ring, ring_centers
from .errors import ConfigError, InvalidInput
from .linalg import svd
from .metrics import mode_coverage
from .net import mlp, SgdState, sgd_step
from .rng import Rng
from .trace import CONFIG_PREFIX

SNAPSHOT_STEPS = (1, 5000, 10000, 15000, 20000, 25000)
PGM_SIZE = 128
PGM_EXTENT = 3.0


@dataclass
class GanConfig:
    latent_dim: int = 16
    gen_layers: tuple = (64,)
    disc_layers: tuple = (64,)
    gen_activation: str = "tanh"
    disc_activation: str = "tanh"
    lr: float = 0.025
    momentum: float = 0.0
    steps: int = 25000
    batch: int = 256
    lam: float = 0.01
    seed: int = 0
    snapshot_steps: tuple = SNAPSHOT_STEPS
    snapshot_size: int = 5000
    modes: int = 8
    radius: float = 2.0
    sigma: float = 0.05
    min_hits: int = 20

    def __post_init__(self):
        self.gen_layers = tuple(int(w) for w in self.gen_layers)
        self.disc_layers = tuple(int(w) for w in self.disc_layers)
        self.snapshot_steps = tuple(int(s) for s in self.snapshot_steps)

    def validate(self):
        if self.batch < 2:
            raise ConfigError("batch must be >= 2 so the fake batch can have rank 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.steps < 1 or self.latent_dim < 1 or self.snapshot_size < 1:
            raise ConfigError("steps, latent_dim and snapshot_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.gen_activation not in ("tanh", "relu") or self.disc_activation not in ("tanh", "relu"):
            raise ConfigError("activations must be 'tanh' or 'relu'")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class Snapshot:
    step: int
    points: np.ndarray
    covered: int
    hq_fraction: float


@dataclass
class GanResult:
    config: GanConfig
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)
    s_mu: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    diverged_at: int = None
    generator: object = None

    def final_coverage(self):
        return self.snapshots[-1].covered if self.snapshots else 0

    def trace_csv(self):
        lines = [CONFIG_PREFIX + json.dumps(self.config.to_dict(), sort_keys=True)]
        if self.diverged_at is not None:
            lines.append(f"# diverged_at {self.diverged_at}")
        lines.append("step,d_loss,g_loss,s_mu")
        for k, (d, g, s) in enumerate(zip(self.d_loss, self.g_loss, self.s_mu)):
            lines.append(f"{k + 1},{d!r},{g!r},{s!r}")
        return "\n".join(lines) + "\n"

    def coverage_csv(self):
        lines = ["step,covered,hq_fraction"]
        lines += [f"{s.step},{s.covered},{s.hq_fraction!r}" for s in self.snapshots]
        return "\n".join(lines) + "\n"

    def snapshots_csv(self):
        lines = ["step,x,y"]
        for s in self.snapshots:
            lines += [f"{s.step},{x!r},{y!r}" for x, y in s.points.tolist()]
        return "\n".join(lines) + "\n"


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def density_pgm(points, size=PGM_SIZE, extent=PGM_EXTENT):
    """Binary (P5) PGM of a linear-binned 2D histogram over [-extent, extent]^2.

    Row 0 is the top (largest y); the densest bin maps to 255.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidInput("points must have shape (n, 2)")
    hist, _, _ = np.histogram2d(pts[:, 1], pts[:, 0], bins=size, range=[[-extent, extent], [-extent, extent]])
    hist = hist[::-1]
    peak = hist.max()
    img = np.zeros_like(hist) if peak == 0 else np.round(255.0 * hist / peak)
    return f"P5\n{size} {size}\n255\n".encode() + img.astype(np.uint8).tobytes()


def read_pgm(buf):
    """Inverse of `density_pgm` for its own output: returns the uint8 image."""
    parts = buf.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise InvalidInput("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def train_gan(cfg, data=None, on_snapshot=None):
    """Alternate one discriminator and one generator SGD step per iteration.

    Discriminator: sigmoid BCE on real vs fake. Generator: ``-log D(G(z))``
    minus ``lam`` times the mean singular value of the raw fake batch.
    Snapshots of a fixed latent sample are taken at `cfg.snapshot_steps`.
    """
    # overflow is caught below as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_gan(cfg, data, on_snapshot)


def _train_gan(cfg, data, on_snapshot):
    cfg.validate()
    rng = Rng(cfg.seed)
    gen = mlp((cfg.latent_dim, *cfg.gen_layers, 2), cfg.gen_activation, rng=rng.spawn())
    disc = mlp((2, *cfg.disc_layers, 1), cfg.disc_activation, rng=rng.spawn())
    if data is None:
        data = gaussian_ring(cfg.modes, cfg.radius, cfg.sigma, 50000, rng.spawn())
    elif not isinstance(data, Dataset) or data.samples.shape[1] != 2:
        raise InvalidInput("GAN data must be a 2D Dataset")
    stream = rng.spawn()
    fixed_z = rng.spawn().normal(size=(cfg.snapshot_size, cfg.latent_dim))
    centers = ring_centers(cfg.modes, cfg.radius)
    g_state = SgdState(cfg.lr, cfg.steps, cfg.momentum, decay=False)
    d_state = SgdState(cfg.lr, cfg.steps, cfg.momentum, decay=False)
    n = cfg.batch
    result = GanResult(cfg)

    for it in range(cfg.steps):
        tic = time.perf_counter()
        real = data.samples[stream.integers(len(data), size=n)]
        fake = gen.forward(stream.normal(size=(n, cfg.latent_dim)))
        out_real = disc.forward(real)
        d_real = disc.backward((_sigmoid(out_real) - 1.0) / n)
        out_fake = disc.forward(fake)
        d_fake = disc.backward(_sigmoid(out_fake) / n)
        d_loss = float(np.mean(_softplus(-out_real)) + np.mean(_softplus(out_fake)))
        sgd_step(d_state, disc, [a + b for a, b in zip(d_real, d_fake)], it)

        fake = gen.forward(stream.normal(size=(n, cfg.latent_dim)))
        out_fake = disc.forward(fake)
        disc.backward((_sigmoid(out_fake) - 1.0) / n)
        grad_fake = disc.input_grad
        g_loss = float(np.mean(_softplus(-out_fake)))
        s_mu = float("nan")
        if np.all(np.isfinite(fake)):
            res = svd(fake)
            s_mu = float(res.s.mean())
            if cfg.lam > 0:
                grad_fake = grad_fake - cfg.lam * (res.u @ res.v.T) / res.s.size
                g_loss -= cfg.lam * s_mu
        result.d_loss.append(d_loss)
        result.g_loss.append(g_loss)
        result.s_mu.append(s_mu)
        if not (np.isfinite(d_loss) and np.isfinite(g_loss) and np.isfinite(s_mu)):
            result.diverged_at = it + 1
            break
        sgd_step(g_state, gen, gen.backward(grad_fake), it)
        result.seconds.append(time.perf_counter() - tic)

        if it + 1 in cfg.snapshot_steps:
            pts = gen.forward(fixed_z)
            covered, hq = mode_coverage(pts, centers, cfg.sigma, cfg.min_hits)
            snap = Snapshot(it + 1, pts, covered, hq)
            result.snapshots.append(snap)
            if on_snapshot is not None:
                on_snapshot(snap)
    result.generator = gen
    return result


class SVMaxGAN:
    """Estimator-style wrapper: ``fit(data)`` trains, ``sample(n)`` draws points."""

    def __init__(self, **params):
        self.config = GanConfig(**params)

    def get_params(self, deep=True):
        return self.config.to_dict()

    def set_params(self, **params):
        self.config = GanConfig(**{**self.config.to_dict(), **params})
        return self

    def fit(self, data=None):
        self.result_ = train_gan(self.config, data)
        self.generator_ = self.result_.generator
        return self

    def sample(self, n, seed=0):
        z = Rng(seed).normal(size=(n, self.config.latent_dim))
        return self.generator_.forward(z)
