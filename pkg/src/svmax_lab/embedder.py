"""Metric-learning embedders trained with a ranking loss and optional SVMax."""
import time

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, hypersphere_classes, load_mnist, sample_batch_indices
from .errors import ConfigError, InvalidInput
from .linalg import mean_singular_value, sv_bounds
from .losses import (LabeledBatch, LossValue, RANKING_LOSSES, svmax_bounded,
                     svmax_unbounded)
from .metrics import EvalReport, evaluate_embedding, recall_at_k
from .net import Conv2D, Flatten, L2NormalizeRows, Linear, Network, ReLU, SgdState, sgd_step
from .rng import Rng
from .trace import RunTrace

DEFAULT_LOSS_PARAM = {"contrastive": 1.0, "triplet": 0.2, "npair": None, "angular": 45.0}
# regularizer weights that work per loss on unit-norm embeddings
DEFAULT_LAMBDA = {"contrastive": 1.0, "triplet": 0.1, "npair": 1.0, "angular": 2.0}
REGULARIZERS = ("bounded", "unbounded", "none")


def build_network(in_dim, embed_dim, hidden=64, arch="mlp", rng=None, image_hw=(28, 28),
                  channels=8, kernel=5):
    """Two-layer embedder ending in row normalization; `arch="cnn"` puts a conv layer first."""
    rng = rng if rng is not None else Rng(0)
    if arch == "mlp":
        layers = [Linear(in_dim, hidden, rng), ReLU(), Linear(hidden, embed_dim, rng)]
    elif arch == "cnn":
        h, w = image_hw
        if h * w != in_dim:
            raise ConfigError(f"cnn input must be a {h}x{w} image, got {in_dim} features")
        conv = Conv2D(1, channels, kernel, 1, image_hw, rng)
        flat = int(np.prod(conv.output_shape(conv.in_shape)))
        layers = [conv, ReLU(), Flatten(), Linear(flat, hidden, rng), ReLU(), Linear(hidden, embed_dim, rng)]
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    return Network(layers + [L2NormalizeRows()])


def check_loss_config(loss, p, l, regularizer="bounded", embed_dim=None):
    if loss not in RANKING_LOSSES:
        raise ConfigError(f"unknown loss {loss!r}; choose from {sorted(RANKING_LOSSES)}")
    if regularizer not in REGULARIZERS:
        raise ConfigError(f"unknown regularizer {regularizer!r}; choose from {REGULARIZERS}")
    if p < 2:
        raise ConfigError("a batch needs p >= 2 classes")
    if loss in ("npair", "angular") and l != 2:
        raise ConfigError(f"{loss} loss needs exactly l = 2 samples per class, got l = {l}")
    if l < 2:
        raise ConfigError(f"{loss} loss needs l >= 2 samples per class")
    if regularizer == "bounded" and embed_dim is not None:
        lo, hi = sv_bounds(p * l, embed_dim)
        if hi - lo <= 1e-12 * hi:
            raise ConfigError(f"bounds collapse for b={p * l}, d={embed_dim}; use the unbounded form")


class Trainer:
    """One SGD iteration at a time over a (p, l) batch stream."""

    def __init__(self, net, data, loss="contrastive", loss_param=None, lam=0.0, regularizer="bounded",
                 p=16, l=4, lr=0.01, iters=1000, momentum=0.9, rng=None):
        self.net = net
        self.data = data
        self.loss = loss
        self.loss_param = DEFAULT_LOSS_PARAM[loss] if loss_param is None else loss_param
        self.lam = lam
        self.regularizer = regularizer
        self.p, self.l = p, l
        self.state = SgdState(lr, iters, momentum)
        self.rng = rng if rng is not None else Rng(0)

    def step(self, it):
        idx = sample_batch_indices(self.data, self.p, self.l, self.rng)
        e = self.net.forward(self.data.samples[idx])
        batch = LabeledBatch(e, self.data.labels[idx], self.p, self.l)
        base = RANKING_LOSSES[self.loss](batch, self.loss_param)
        if self.regularizer == "bounded":
            out = svmax_bounded(base, e, self.lam)
        elif self.regularizer == "unbounded":
            out = svmax_unbounded(base, e, self.lam)
        else:
            out = LossValue(base.value, base.embedding_grad, base.bounds, mean_singular_value(e))
        if not np.isfinite(out.value):
            return out
        grads = self.net.backward(out.embedding_grad)
        sgd_step(self.state, self.net, grads, it)
        return out


def embed(net, x, chunk=4096):
    return np.concatenate([net.forward(x[i:i + chunk]) for i in range(0, x.shape[0], chunk)])


class SVMaxEmbedder(TransformerMixin, BaseEstimator):
    """Learns a unit-norm embedding with a ranking loss plus the SVMax regularizer.

    ``regularizer="none"`` or ``lam=0`` gives the vanilla ranking loss.
    `fit` accepts an optional held-out set evaluated every `eval_every`
    iterations; the per-iteration record ends up in ``trace_``.
    """

    def __init__(self, loss="contrastive", loss_param=None, lam=1.0, regularizer="bounded",
                 embed_dim=32, hidden=64, arch="mlp", p=16, l=4, lr=0.01, n_iter=2000,
                 momentum=0.9, eval_every=100, kmeans_restarts=10, random_state=0):
        self.loss = loss
        self.loss_param = loss_param
        self.lam = lam
        self.regularizer = regularizer
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.arch = arch
        self.p = p
        self.l = l
        self.lr = lr
        self.n_iter = n_iter
        self.momentum = momentum
        self.eval_every = eval_every
        self.kmeans_restarts = kmeans_restarts
        self.random_state = random_state

    def _check_config(self):
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.n_iter < 1 or self.eval_every < 1:
            raise ConfigError("n_iter and eval_every must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        check_loss_config(self.loss, self.p, self.l, self.regularizer, self.embed_dim)

    def fit(self, X, y, X_eval=None, y_eval=None):
        self._check_config()
        X, y = check_X_y(X, y, dtype=np.float64)
        classes, y_idx = np.unique(y, return_inverse=True)
        data = Dataset(X, y_idx, classes.size)
        rng = Rng(self.random_state)
        self.net_ = build_network(X.shape[1], self.embed_dim, self.hidden, self.arch, rng.spawn())
        trainer = Trainer(self.net_, data, self.loss, self.loss_param, self.lam, self.regularizer,
                          self.p, self.l, self.lr, self.n_iter, self.momentum, rng.spawn())
        self.n_features_in_ = X.shape[1]
        self.classes_ = classes
        self.trace_ = RunTrace(config=self.get_params())
        lo, hi = sv_bounds(self.p * self.l, self.embed_dim)
        has_eval = X_eval is not None
        if has_eval:
            X_eval, y_eval = check_X_y(X_eval, y_eval, dtype=np.float64)
        for it in range(self.n_iter):
            tic = time.perf_counter()
            out = trainer.step(it)
            if not np.isfinite(out.value):
                self.trace_.diverged_at = it + 1
                break
            report = EvalReport(it + 1, out.value, out.s_mu, lo, hi, {1: np.nan, 4: np.nan, 8: np.nan}, np.nan)
            last = it + 1 == self.n_iter
            if has_eval and ((it + 1) % self.eval_every == 0 or last):
                ev = self.evaluate(X_eval, y_eval, it + 1, out.value)
                report.recall_at, report.nmi = ev.recall_at, ev.nmi
            self.trace_.append(report, time.perf_counter() - tic)
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInput(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return embed(self.net_, X)

    def evaluate(self, X, y, iteration=0, loss=float("nan")):
        """Held-out `EvalReport`; s_mu and its bounds refer to the full held-out embedding."""
        return evaluate_embedding(self.transform(X), y, iteration, loss, rng=Rng(self.random_state),
                                  kmeans_restarts=self.kmeans_restarts)

    def score(self, X, y):
        """Recall@1 on (X, y)."""
        return recall_at_k(self.transform(X), y, ks=(1,))[1]


def _block_mean_singular_value(e, b):
    blocks = [e[i:i + b] for i in range(0, e.shape[0] - b + 1, b)]
    return float(np.mean([mean_singular_value(blk) for blk in blocks]))


def circle_data(data_dir=None, synthetic=False, seed=0, dim=32, spread=0.15, n_train=600, n_test=200):
    """(train, test, source) for the unit-circle experiment.

    Uses MNIST when its files are present; with `synthetic` it substitutes
    ten hypersphere classes sharing centers between the splits.
    """
    if not synthetic:
        return load_mnist("train", data_dir), load_mnist("t10k", data_dir), "mnist"
    rng = Rng(seed).spawn()
    centers = rng.normal(size=(10, dim))
    train = hypersphere_classes(10, dim, spread, n_train, rng, centers)
    test = hypersphere_classes(10, dim, spread, n_test, rng, centers)
    return train, test, "synthetic"


SNAPSHOT_EPOCHS = (1, 2, 4, 8, 16, 32, 64)


def circle_embed(train, test, lam=1.0, epochs=64, p=8, l=16, lr=0.01, margin=1.0, seed=0, arch="mlp",
                 hidden=64, subset=2000, snapshot_epochs=SNAPSHOT_EPOCHS, on_snapshot=None, config=None):
    """Contrastive embedding onto the unit circle, tracked once per epoch.

    The test s_mu of each epoch is the mean over consecutive b-row blocks of
    a fixed test subset, so it shares the (b, 2) bounds of the training
    batches. `on_snapshot(epoch, Dataset)` receives the 2D test subset at
    the snapshot epochs.
    """
    check_loss_config("contrastive", p, l, "bounded", 2)
    b = p * l
    if subset < b:
        raise ConfigError(f"the test subset ({subset}) must hold at least one batch of {b}")
    if subset > len(test):
        raise ConfigError(f"test split has only {len(test)} samples, asked for {subset}")
    rng = Rng(seed)
    net = build_network(train.samples.shape[1], 2, hidden, arch, rng.spawn())
    per_epoch = max(1, len(train) // b)
    trainer = Trainer(net, train, "contrastive", margin, lam, "bounded", p, l, lr, epochs * per_epoch,
                      0.9, rng.spawn())
    pick = np.sort(rng.spawn().sample(len(test), subset))
    # shuffle once so every block mixes classes
    pick = pick[rng.spawn().permutation(subset)]
    held = test.subset(pick)
    lo, hi = sv_bounds(b, 2)
    trace = RunTrace(config=dict(config or {}))
    it = 0
    for epoch in range(1, epochs + 1):
        tic = time.perf_counter()
        losses = []
        for _ in range(per_epoch):
            out = trainer.step(it)
            if not np.isfinite(out.value):
                trace.diverged_at = it + 1
                return trace
            losses.append(out.value)
            it += 1
        emb = embed(net, held.samples)
        ev = evaluate_embedding(emb, held.labels, epoch, float(np.mean(losses)), rng=Rng(seed), kmeans_restarts=3)
        trace.append(EvalReport(epoch, ev.loss, _block_mean_singular_value(emb, b), lo, hi, ev.recall_at, ev.nmi),
                     time.perf_counter() - tic)
        if on_snapshot is not None and epoch in snapshot_epochs:
            on_snapshot(epoch, Dataset(emb, held.labels, held.class_count))
    return trace
