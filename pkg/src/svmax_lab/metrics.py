"""Retrieval and clustering scores, plus GAN mode coverage."""
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import as_matrix
from .errors import InvalidInput, InvalidK
from .linalg import mean_singular_value, sv_bounds
from .rng import Rng

DEFAULT_KS = (1, 4, 8)


def _sq_distances(queries, points):
    return np.einsum("qnd,qnd->qn", queries[:, None, :] - points[None, :, :],
                     queries[:, None, :] - points[None, :, :])


def recall_at_k(embeddings, labels, ks=DEFAULT_KS, chunk=128):
    """Fraction of queries with a same-label item among their K nearest others.

    Neighbors are ranked by Euclidean distance with ties going to the lower
    index; each query is excluded from its own neighbor list.
    """
    x = as_matrix(embeddings, "embeddings")
    y = np.asarray(labels).reshape(-1)
    n = x.shape[0]
    ks = [int(k) for k in ks]
    if any(k < 1 or k >= n for k in ks):
        raise InvalidK(f"every K must satisfy 1 <= K < n = {n}, got {ks}")
    kmax = max(ks)
    first_hit = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d = _sq_distances(x[start:stop], x)
        d[np.arange(stop - start), np.arange(start, stop)] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :kmax]
        hits = y[order] == y[start:stop, None]
        first_hit[start:stop] = np.where(hits.any(axis=1), hits.argmax(axis=1), kmax)
    return {k: float(np.mean(first_hit < k)) for k in ks}


def _gram_sq_distances(x, centroids):
    d2 = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centroids.T + np.sum(centroids * centroids, axis=1)
    return np.maximum(d2, 0.0)


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    restart_inertias: list = field(default_factory=list)
    histories: list = field(default_factory=list)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(x, centroids, max_iters, tol):
    history = []
    for _ in range(max_iters):
        d2 = _gram_sq_distances(x, centroids)
        assign = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(x.shape[0]), assign]
        inertia = float(point_d2.sum())
        history.append(inertia)
        new = centroids.copy()
        counts = np.bincount(assign, minlength=centroids.shape[0])
        for c in range(centroids.shape[0]):
            if counts[c]:
                new[c] = x[assign == c].mean(axis=0)
            else:
                # empty cluster: re-seed at the point farthest from its centroid
                far = int(np.argmax(point_d2))
                new[c] = x[far]
                point_d2[far] = 0.0
        centroids = new
        if len(history) > 1 and history[-2] - inertia <= tol * max(history[-2], 1e-300):
            break
    d2 = _gram_sq_distances(x, centroids)
    assign = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(x.shape[0]), assign].sum())
    if inertia <= history[-1]:
        history.append(inertia)
    return assign, centroids, inertia, history


def kmeans(embeddings, k, restarts=10, max_iters=300, tol=1e-6, rng=None):
    """Lloyd's algorithm from k-means++ seeds; keeps the lowest-inertia restart."""
    x = as_matrix(embeddings, "embeddings")
    if not 1 <= k <= x.shape[0]:
        raise InvalidInput(f"need 1 <= k <= n, got k={k}, n={x.shape[0]}")
    rng = rng if rng is not None else Rng(0)
    streams = [rng.spawn() for _ in range(restarts)]
    best = None
    result = KMeansResult(None, None, np.inf)
    for stream in streams:
        assign, centroids, inertia, history = _lloyd(x, _kmeans_pp(x, k, stream), max_iters, tol)
        result.restart_inertias.append(inertia)
        result.histories.append(history)
        if best is None or inertia < best[2]:
            best = (assign, centroids, inertia)
    result.assignment, result.centroids, result.inertia = best
    return result


class KMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around `kmeans`."""

    def __init__(self, n_clusters=8, n_init=10, max_iter=300, tol=1e-6, random_state=0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        res = kmeans(X, self.n_clusters, self.n_init, self.max_iter, self.tol, Rng(self.random_state))
        self.labels_ = res.assignment
        self.cluster_centers_ = res.centroids
        self.inertia_ = res.inertia
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return np.argmin(_gram_sq_distances(X, self.cluster_centers_), axis=1)


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(assignment_a, assignment_b):
    """I(A, B) / sqrt(H(A) H(B)).

    When either side has zero entropy the score is 1 if both sides are a
    single cluster and 0 otherwise.
    """
    a = np.asarray(assignment_a).reshape(-1)
    b = np.asarray(assignment_b).reshape(-1)
    if a.size != b.size or a.size == 0:
        raise InvalidInput("assignments must be non-empty and of equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if ha == hb == 0.0 else 0.0
    joint = table / a.size
    outer = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def mode_coverage(samples, centers, sigma, min_hits=20):
    """(modes with >= min_hits samples within 3 sigma, fraction of samples within 3 sigma of any mode)."""
    x = as_matrix(samples, "samples")
    c = as_matrix(centers, "centers")
    near = _sq_distances(x, c) <= (3.0 * sigma) ** 2
    covered = int(np.sum(near.sum(axis=0) >= min_hits))
    return covered, float(near.any(axis=1).mean())


@dataclass
class EvalReport:
    iteration: int
    loss: float
    s_mu: float
    lower: float
    upper: float
    recall_at: dict
    nmi: float

    CSV_HEADER = "iter,loss,s_mu,L,U,recall@1,recall@4,recall@8,nmi"

    def csv_row(self):
        vals = [self.loss, self.s_mu, self.lower, self.upper,
                self.recall_at.get(1, np.nan), self.recall_at.get(4, np.nan),
                self.recall_at.get(8, np.nan), self.nmi]
        return str(int(self.iteration)) + "," + ",".join(repr(float(v)) for v in vals)

    @classmethod
    def from_csv_row(cls, row):
        parts = row.strip().split(",")
        it, rest = int(parts[0]), [float(v) for v in parts[1:]]
        return cls(it, rest[0], rest[1], rest[2], rest[3],
                   {1: rest[4], 4: rest[5], 8: rest[6]}, rest[7])


def evaluate_embedding(embeddings, labels, iteration=0, loss=float("nan"), ks=DEFAULT_KS, rng=None,
                       kmeans_restarts=10):
    """Recall@K, k-means NMI (k = number of classes) and the mean singular value."""
    x = as_matrix(embeddings, "embeddings")
    y = np.asarray(labels).reshape(-1)
    rates = recall_at_k(x, y, ks)
    k = np.unique(y).size
    clusters = kmeans(x, k, restarts=kmeans_restarts, rng=rng if rng is not None else Rng(0)).assignment
    lo, hi = sv_bounds(*x.shape)
    return EvalReport(int(iteration), float(loss), mean_singular_value(x), lo, hi, rates, nmi(y, clusters))
