"""Ranking losses, SVMax regularizers and their gradients w.r.t. the embeddings.

Every loss reports the batch mean, so regularizer weights transfer across
batch sizes, and returns a `LossValue` carrying the gradient of that mean.
"""
import math
from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, check_unit_rows, has_unit_rows
from .errors import (BatchComposition, DegenerateBounds, InsufficientPositives,
                     InvalidInput, ShapeError)
from .linalg import grad_mean_singular_value, svd, sv_bounds

UNBOUNDED = (-math.inf, math.inf)


@dataclass(frozen=True)
class LabeledBatch:
    """A (p classes) x (l samples per class) mini-batch of embeddings."""

    embeddings: np.ndarray
    labels: np.ndarray
    p: int
    l: int

    @classmethod
    def from_arrays(cls, embeddings, labels):
        e = as_matrix(embeddings, "embeddings")
        y = np.asarray(labels).reshape(-1)
        if y.shape[0] != e.shape[0]:
            raise ShapeError(f"{e.shape[0]} embeddings but {y.shape[0]} labels")
        classes, counts = np.unique(y, return_counts=True)
        if not np.all(counts == counts[0]):
            raise BatchComposition(f"every class needs the same sample count, got {sorted(set(counts.tolist()))}")
        return cls(e, y, int(classes.size), int(counts[0]))

    @property
    def b(self):
        return self.embeddings.shape[0]

    def with_embeddings(self, e):
        return LabeledBatch(as_matrix(e, "embeddings"), self.labels, self.p, self.l)


@dataclass(frozen=True)
class LossValue:
    value: float
    embedding_grad: np.ndarray
    bounds: tuple = UNBOUNDED
    s_mu: float = None


def _pairwise_distances(x):
    sq_norms = np.einsum("ij,ij->i", x, x)
    sq = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (x @ x.T)
    # the Gram form cancels badly for close points; redo those exactly
    close = np.argwhere(sq < 1e-6 * (sq_norms.max() + 1e-300))
    i, j = close[:, 0], close[:, 1]
    diff = x[i] - x[j]
    sq[i, j] = np.einsum("ij,ij->i", diff, diff)
    return np.sqrt(np.maximum(sq, 0.0))


def _distance_weight_grad(x, weights, dist):
    """Gradient of sum_ij weights[i, j] * dist[i, j] w.r.t. x (zero-distance terms dropped)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(dist > 0, weights / dist, 0.0)
    c = c + c.T
    return c.sum(axis=1)[:, None] * x - c @ x


def _partners(labels):
    """Index of the other sample of each sample's class (classes of exactly two)."""
    partner = np.empty(labels.shape[0], dtype=np.intp)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size != 2:
            raise BatchComposition(f"class {cls} has {idx.size} samples; this loss needs exactly 2 per class")
        partner[idx[0]], partner[idx[1]] = idx[1], idx[0]
    return partner


def _require_classes(batch, min_per_class):
    classes, counts = np.unique(batch.labels, return_counts=True)
    if np.any(counts < min_per_class):
        raise InsufficientPositives(f"every class needs at least {min_per_class} samples")
    if classes.size < 2:
        raise BatchComposition("the batch needs at least two classes")
    return classes


def contrastive_pairs(batch):
    """Equal numbers of positive and negative pairs from the (p, l) layout.

    Classes are taken in ascending label order and each class's rows in
    lexicographic order of their embeddings, so the pairing does not depend
    on row order. Positives pair consecutive rows of a class; the q-th
    negative of class c pairs its row 2q with row 2q+1 of the next class.
    """
    _require_classes(batch, 2)
    e = batch.embeddings
    # one sort: label first, then the embedding coordinates in order
    order = np.lexsort(np.vstack([e.T[::-1], batch.labels[None, :]]))
    counts = np.unique(batch.labels, return_counts=True)[1]
    groups = np.split(order, np.cumsum(counts)[:-1])
    npairs = min(g.size for g in groups) // 2
    pos, neg = [], []
    for c, g in enumerate(groups):
        nxt = groups[(c + 1) % len(groups)]
        for q in range(g.size // 2):
            pos.append((g[2 * q], g[2 * q + 1]))
        for q in range(npairs):
            neg.append((g[2 * q], nxt[2 * q + 1]))
    return np.array(pos, dtype=np.intp), np.array(neg, dtype=np.intp)


def contrastive_loss(batch, m=1.0, unit_norm=True):
    """Mean over pairs of ``D`` (same class) or ``[m - D]_+`` (different class)."""
    e = batch.embeddings
    if unit_norm:
        check_unit_rows(e)
    if not 0 < m <= 2:
        raise InvalidInput("contrastive margin must lie in (0, 2]")
    pos, neg = contrastive_pairs(batch)
    dpos = np.linalg.norm(e[pos[:, 0]] - e[pos[:, 1]], axis=1)
    dneg = np.linalg.norm(e[neg[:, 0]] - e[neg[:, 1]], axis=1)
    hinge = m - dneg
    total = pos.shape[0] + neg.shape[0]
    value = (dpos.sum() + np.maximum(hinge, 0.0).sum()) / total

    w = np.zeros((e.shape[0], e.shape[0]))
    np.add.at(w, (pos[:, 0], pos[:, 1]), 1.0 / total)
    active = hinge > 0
    np.add.at(w, (neg[active, 0], neg[active, 1]), -1.0 / total)
    dist = np.zeros_like(w)
    dist[pos[:, 0], pos[:, 1]] = dpos
    dist[neg[:, 0], neg[:, 1]] = dneg
    grad = _distance_weight_grad(e, w, dist)
    return LossValue(float(value), grad, loss_bounds("contrastive", m))


def triplet_loss(batch, m=0.2, mining="hard", unit_norm=True):
    """``[D(a,p) - D(a,n) + m]_+`` averaged over anchors (hard) or all triplets (all)."""
    e = batch.embeddings
    if unit_norm:
        check_unit_rows(e)
    if not 0 < m < 2:
        raise InvalidInput("triplet margin must lie in (0, 2)")
    _require_classes(batch, 2)
    b = e.shape[0]
    dist = _pairwise_distances(e)
    same = batch.labels[:, None] == batch.labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same
    w = np.zeros((b, b))
    rows = np.arange(b)

    if mining == "hard":
        hardest_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
        hardest_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
        margin = dist[rows, hardest_pos] - dist[rows, hardest_neg] + m
        active = margin > 0
        value = np.maximum(margin, 0.0).mean()
        np.add.at(w, (rows[active], hardest_pos[active]), 1.0 / b)
        np.add.at(w, (rows[active], hardest_neg[active]), -1.0 / b)
    elif mining == "all":
        valid = pos_mask[:, :, None] & neg_mask[:, None, :]
        margin = dist[:, :, None] - dist[:, None, :] + m
        active = valid & (margin > 0)
        count = valid.sum()
        value = np.where(active, margin, 0.0).sum() / count
        w += active.sum(axis=2) / count
        w -= active.sum(axis=1) / count
    else:
        raise InvalidInput(f"unknown mining strategy {mining!r}")
    grad = _distance_weight_grad(e, w, dist)
    return LossValue(float(value), grad, loss_bounds("triplet", m))


def _logsumexp_rows(z, mask):
    zmax = np.max(np.where(mask, z, -np.inf), axis=1, keepdims=True)
    ez = np.where(mask, np.exp(z - zmax), 0.0)
    lse = zmax[:, 0] + np.log(ez.sum(axis=1))
    return lse


def npair_loss(batch, normalized=True):
    """Softmax over ``a.p`` against every other sample ``a.n``; each sample is an anchor once."""
    e = batch.embeddings
    if normalized:
        check_unit_rows(e)
    partner = _partners(batch.labels)
    b = e.shape[0]
    rows = np.arange(b)
    sim = e @ e.T
    others = ~np.eye(b, dtype=bool)
    lse = _logsumexp_rows(sim, others)
    value = np.mean(lse - sim[rows, partner])
    prob = np.where(others, np.exp(sim - lse[:, None]), 0.0)
    coef = prob
    coef[rows, partner] -= 1.0
    grad = (coef + coef.T) @ e / b
    bounds = loss_bounds("npair", None, b) if normalized else UNBOUNDED
    return LossValue(float(value), grad, bounds)


def angular_f(a, p, n, alpha_deg=45.0):
    t2 = math.tan(math.radians(alpha_deg)) ** 2
    return 4.0 * t2 * float(np.dot(a + p, n)) - 2.0 * (1.0 + t2) * float(np.dot(a, p))


def angular_loss(batch, alpha_deg=45.0):
    """``log(1 + sum_n exp f(a, p, n))`` per anchor, averaged; each sample is an anchor once."""
    e = batch.embeddings
    check_unit_rows(e)
    if not 0 < alpha_deg < 90:
        raise InvalidInput("alpha must lie in (0, 90) degrees")
    partner = _partners(batch.labels)
    b = e.shape[0]
    rows = np.arange(b)
    t2 = math.tan(math.radians(alpha_deg)) ** 2
    xp = e[partner]
    f = 4.0 * t2 * (e + xp) @ e.T - 2.0 * (1.0 + t2) * np.sum(e * xp, axis=1)[:, None]
    neg = ~np.eye(b, dtype=bool)
    neg[rows, partner] = False
    fz = np.where(neg, f, -np.inf)
    fmax = np.maximum(np.max(fz, axis=1), 0.0)
    per_anchor = fmax + np.log(np.exp(-fmax) + np.sum(np.exp(fz - fmax[:, None]), axis=1))
    value = per_anchor.mean()

    w = np.where(neg, np.exp(fz - per_anchor[:, None]), 0.0)
    wsum = w.sum(axis=1)[:, None]
    wx = w @ e
    g_anchor = 4.0 * t2 * wx - 2.0 * (1.0 + t2) * wsum * xp
    g_positive = 4.0 * t2 * wx - 2.0 * (1.0 + t2) * wsum * e
    grad = g_anchor + g_positive[partner] + 4.0 * t2 * w.T @ (e + xp)
    return LossValue(float(value), grad / b, loss_bounds("angular", alpha_deg, b))


def loss_bounds(kind, param=None, b=None):
    """Closed-form [lo, hi] of a loss on unit-norm embeddings.

    `param` is the margin for triplet/contrastive and the angle in degrees
    for angular. N-pair and angular depend on the ``b - 2`` negatives.
    """
    if kind == "triplet":
        return (0.0, 2.0 + param)
    if kind == "contrastive":
        return (0.0, 2.0)
    if kind in ("npair", "angular") and (b is None or b < 2):
        raise InvalidInput(f"{kind} bounds need the batch size b >= 2")
    n = b - 2 if b is not None else None
    if kind == "npair":
        return (math.log(math.e ** 2 + n) - 2.0, math.log(math.e ** 2 * n + 1.0))
    if kind == "angular":
        f_lo, f_hi = angular_f_bounds(param)
        return (math.log(n * math.exp(f_lo) + 1.0), math.log(n * math.exp(f_hi) + 1.0))
    raise InvalidInput(f"unknown loss kind {kind!r}")


def angular_f_bounds(alpha_deg):
    """[-10 tan^2(a) - 2, 6 tan^2(a) - 2], attained with a = p.

    This is not the supremum over all unit triples: with ``a.p = -1/2`` and
    ``n`` along ``a + p`` the value at 45 degrees reaches 6.
    """
    t2 = math.tan(math.radians(alpha_deg)) ** 2
    return (-10.0 * t2 - 2.0, 6.0 * t2 - 2.0)


def angular_f_supremum(alpha_deg):
    """Largest f over all unit triples: ``4 t^4 / (1 + t^2) + 2 (1 + t^2)``, with t = tan(alpha)."""
    t2 = math.tan(math.radians(alpha_deg)) ** 2
    return 4.0 * t2 * t2 / (1.0 + t2) + 2.0 * (1.0 + t2)


RANKING_LOSSES = {
    "contrastive": lambda batch, param: contrastive_loss(batch, m=param),
    "triplet": lambda batch, param: triplet_loss(batch, m=param),
    "npair": lambda batch, param: npair_loss(batch, normalized=True),
    "angular": lambda batch, param: angular_loss(batch, alpha_deg=param),
}


def svmax_unbounded(base, e, lam):
    """``L_r - lam * s_mu``, valid for any embedding scale."""
    if lam < 0:
        raise InvalidInput("lambda must be non-negative")
    e = as_matrix(e, "e")
    if e.shape != base.embedding_grad.shape:
        raise ShapeError("embedding matrix does not match the base loss gradient")
    res = svd(e)
    s_mu = float(res.s.sum() / res.s.size)
    if lam == 0:
        return LossValue(base.value, base.embedding_grad, base.bounds, s_mu)
    value = base.value - lam * s_mu
    grad = base.embedding_grad - lam * grad_mean_singular_value(e, res)
    if has_unit_rows(e):
        lo, hi = sv_bounds(*e.shape)
        bounds = (base.bounds[0] - lam * hi, base.bounds[1] - lam * lo)
    else:
        bounds = UNBOUNDED
    return LossValue(float(value), grad, bounds, s_mu)


def svmax_bounded(base, e, lam):
    """``L_r + lam * exp((U - s_mu) / (U - L))`` for unit-norm rows; the term lies in [lam, lam*e]."""
    if lam < 0:
        raise InvalidInput("lambda must be non-negative")
    e = as_matrix(e, "e")
    if e.shape != base.embedding_grad.shape:
        raise ShapeError("embedding matrix does not match the base loss gradient")
    check_unit_rows(e)
    lo, hi = sv_bounds(*e.shape)
    span = hi - lo
    if span <= 1e-12 * hi:
        raise DegenerateBounds(f"mean singular value bounds collapse for shape {e.shape}")
    res = svd(e)
    s_mu = float(res.s.sum() / res.s.size)
    if lam == 0:
        return LossValue(base.value, base.embedding_grad, base.bounds, s_mu)
    reg = lam * math.exp((hi - s_mu) / span)
    grad = base.embedding_grad - (reg / span) * grad_mean_singular_value(e, res)
    bounds = (base.bounds[0] + lam, base.bounds[1] + lam * math.e)
    return LossValue(float(base.value + reg), grad, bounds, s_mu)


def repcnt_loss(emb_image, emb_tiles, emb_contrast, m=10.0):
    """Counting-equivariance loss with a contrastive hinge on a random other image."""
    img = np.asarray(emb_image, dtype=np.float64).reshape(-1)
    contrast = np.asarray(emb_contrast, dtype=np.float64).reshape(-1)
    tiles = np.atleast_2d(np.asarray(emb_tiles, dtype=np.float64))
    if tiles.shape[1] != img.size or contrast.size != img.size:
        raise ShapeError("image, tile and contrast embeddings must share one dimension")
    total = tiles.sum(axis=0)
    return float(np.linalg.norm(img - total) + max(0.0, m - np.linalg.norm(contrast - total)))


def repcnt_svmax(emb_image_batch, emb_tiles_batch, lam):
    """Mean equivariance distance minus ``lam * s_mu`` of the image embeddings.

    `emb_tiles_batch` holds, per row, the sum of that image's tile embeddings.
    """
    img = as_matrix(emb_image_batch, "emb_image_batch")
    tiles = as_matrix(emb_tiles_batch, "emb_tiles_batch")
    if img.shape != tiles.shape:
        raise ShapeError(f"batch shapes differ: {img.shape} vs {tiles.shape}")
    dist = np.linalg.norm(img - tiles, axis=1).mean()
    s = svd(img).s
    return float(dist - lam * s.sum() / s.size)
