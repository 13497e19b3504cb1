"""Per-slide Gaussian-mixture prototypes.

A single k-means run over patches pooled from the training slides fixes a
shared set of centroids; each slide then refines a diagonal-covariance
mixture from those centroids with a few EM steps. Component means act as
morphological prototypes and mixture weights as their cardinality, so the
same component index means the same pattern across slides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .numerics import Rng
from .serialize import dump_json, load_json, write_csv

VARIANCE_FLOOR = 1e-4
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PrototypeModel:
    means: np.ndarray       # (k, d)
    variances: np.ndarray   # (k, d), diagonal, floored
    weights: np.ndarray     # (k,), sums to 1

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise NumericalError("mixture weights must be a probability vector")
        if np.any(self.variances < VARIANCE_FLOOR * (1 - 1e-12)):
            raise NumericalError("variances below the variance floor")

    @property
    def n_components(self):
        return self.means.shape[0]


def kmeans(points, k, seed, max_iters=50):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid, so k centroids always come back. Deterministic given seed.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise DataError("k must be at least 1")
    if n < k:
        raise DataError(f"kmeans needs at least k={k} points, got {n}")

    rng = Rng(seed).child("kmeans")
    centroids = _kmeanspp_init(points, k, rng)

    for _ in range(max_iters):
        d2 = _sqdist(points, centroids)
        assign = d2.argmin(axis=1)
        new_centroids = np.empty_like(centroids)
        moved = False
        for j in range(k):
            members = points[assign == j]
            if members.shape[0] == 0:
                far = d2[np.arange(n), assign].argmax()
                new_centroids[j] = points[far]
                moved = True
            else:
                new_centroids[j] = members.mean(axis=0)
        if not moved and np.allclose(new_centroids, centroids, rtol=0.0, atol=1e-12):
            centroids = new_centroids
            break
        centroids = new_centroids
    return centroids


def _kmeanspp_init(points, k, rng):
    n = points.shape[0]
    first = int(rng.integers(0, n))
    centroids = [points[first]]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            u = rng.uniform(0.0, total)
            idx = int(np.searchsorted(np.cumsum(d2), u))
            idx = min(idx, n - 1)
        centroids.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - centroids[-1]) ** 2, axis=1))
    return np.array(centroids)


def _sqdist(points, centroids):
    p2 = np.sum(points ** 2, axis=1)[:, None]
    c2 = np.sum(centroids ** 2, axis=1)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centroids.T, 0.0)


def initial_model(centroids):
    """Mixture started from shared centroids: unit variances, equal weights."""
    k, d = centroids.shape
    return PrototypeModel(
        means=centroids.copy(),
        variances=np.ones((k, d)),
        weights=np.full(k, 1.0 / k))


def _log_densities(model, points):
    """(n, k) log of weight_k * N(point | mean_k, diag var_k)."""
    diff = points[:, None, :] - model.means[None, :, :]     # (n, k, d)
    inv = 1.0 / model.variances
    quad = np.einsum("nkd,kd->nk", diff ** 2, inv)
    logdet = np.log(model.variances).sum(axis=1)
    d = points.shape[1]
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    return logw[None, :] - 0.5 * (quad + logdet[None, :] + d * LOG_2PI)


def log_likelihood(model, points):
    lp = _log_densities(model, points)
    m = lp.max(axis=1, keepdims=True)
    return float(np.sum(m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))))


def responsibilities(model, points):
    """Posterior over components per patch, computed in log space.

    Rows sum to 1 exactly up to float rounding even for near-degenerate
    variances (the floor keeps densities finite).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[1] != model.means.shape[1]:
        raise DataError("point dimension does not match the mixture")
    lp = _log_densities(model, points)
    m = lp.max(axis=1, keepdims=True)
    p = np.exp(lp - m)
    return p / p.sum(axis=1, keepdims=True)


def fit_gmm_em(points, init, iters=30, tol=1e-6):
    """Diagonal-covariance EM from a given starting model.

    The log-likelihood is non-decreasing per iteration (up to 1e-8 slack
    from the variance floor); final weights equal the mean responsibility
    per component. `iters=0` returns the init unchanged.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 1:
        raise DataError("EM needs at least one point")
    model = init
    prev_ll = None
    for _ in range(iters):
        resp = responsibilities(model, points)          # E step
        mass = resp.sum(axis=0)                          # (k,)
        safe = np.maximum(mass, 1e-300)
        means = (resp.T @ points) / safe[:, None]        # M step
        diff2 = (points[:, None, :] - means[None, :, :]) ** 2
        variances = np.einsum("nk,nkd->kd", resp, diff2) / safe[:, None]
        variances = np.maximum(variances, VARIANCE_FLOOR)
        weights = mass / n
        model = PrototypeModel(means=means, variances=variances,
                               weights=weights / weights.sum())
        ll = log_likelihood(model, points)
        if not np.isfinite(ll):
            raise NumericalError("EM log-likelihood became non-finite")
        if prev_ll is not None and abs(ll - prev_ll) <= tol * max(1.0, abs(prev_ll)):
            break
        prev_ll = ll
    return model


def prototype_summary(model):
    """(mean, cardinality) pairs in component order; cardinalities sum to 1."""
    return [(model.means[k].copy(), float(model.weights[k]))
            for k in range(model.n_components)]


def top_assignments(model, points, m):
    """Per component, indices of the m patches with greatest responsibility,
    descending, ties broken by lower patch index."""
    points = np.asarray(points, dtype=np.float64)
    if m < 1:
        raise DataError("m must be at least 1")
    if m > points.shape[0]:
        raise DataError(f"m={m} exceeds patch count {points.shape[0]}")
    resp = responsibilities(model, points)
    result = []
    for k in range(model.n_components):
        order = np.lexsort((np.arange(points.shape[0]), -resp[:, k]))
        result.append([int(i) for i in order[:m]])
    return result


# -- cohort-level pipeline ---------------------------------------------------

@dataclass(frozen=True)
class PrototypeSet:
    """Shared centroids plus the fitted per-slide mixtures, in slide order."""

    centroids: np.ndarray
    slide_ids: tuple
    models: tuple

    def model_for(self, sample_id):
        try:
            return self.models[self.slide_ids.index(sample_id)]
        except ValueError:
            raise DataError(f"no prototype model for sample {sample_id!r}")


def pool_training_patches(samples, max_patches, seed):
    """Concatenate patches across slides, downsampling to `max_patches`."""
    stacks = [s.patch_features for s in samples]
    pooled = np.concatenate(stacks, axis=0)
    if pooled.shape[0] > max_patches:
        idx = np.sort(Rng(seed).child("pool").choice(
            pooled.shape[0], size=max_patches, replace=False))
        pooled = pooled[idx]
    return pooled


def fit_prototypes(train_samples, all_samples, n_components, seed,
                   max_kmeans_patches=160000, kmeans_iters=50,
                   em_iters=30, em_tol=1e-6):
    """Global k-means on training patches, then per-slide EM for every slide.

    Slides outside the training set still get mixtures (started from the
    training centroids), so held-out evaluation uses the same prototype
    vocabulary without leaking its fit.
    """
    pooled = pool_training_patches(train_samples, max_kmeans_patches, seed)
    centroids = kmeans(pooled, n_components, seed=Rng(seed).child("centroids").seed,
                       max_iters=kmeans_iters)
    init = initial_model(centroids)
    slide_ids = []
    models = []
    for s in all_samples:
        slide_ids.append(s.sample_id)
        models.append(fit_gmm_em(s.patch_features, init, iters=em_iters, tol=em_tol))
    return PrototypeSet(centroids=centroids, slide_ids=tuple(slide_ids),
                        models=tuple(models))


def save_prototypes(pset, path):
    dump_json({
        "format_version": 1,
        "centroids": pset.centroids,
        "slides": [{
            "sample_id": sid,
            "means": model.means,
            "variances": model.variances,
            "weights": model.weights,
        } for sid, model in zip(pset.slide_ids, pset.models)],
    }, path)


def load_prototypes(path):
    raw = load_json(path)
    slide_ids = []
    models = []
    for rec in raw["slides"]:
        slide_ids.append(rec["sample_id"])
        models.append(PrototypeModel(
            means=np.asarray(rec["means"], dtype=np.float64),
            variances=np.asarray(rec["variances"], dtype=np.float64),
            weights=np.asarray(rec["weights"], dtype=np.float64)))
    return PrototypeSet(centroids=np.asarray(raw["centroids"], dtype=np.float64),
                        slide_ids=tuple(slide_ids), models=tuple(models))


def export_top_assignments(model, points, m, path, sample_id=""):
    """CSV rows (prototype, rank, patch_index, responsibility)."""
    resp = responsibilities(model, points)
    rows = []
    for proto, indices in enumerate(top_assignments(model, points, m)):
        for rank, idx in enumerate(indices, start=1):
            rows.append([proto, rank, idx, float(resp[idx, proto])])
    header = ["prototype", "rank", "patch_index", "responsibility"]
    if sample_id:
        header = ["sample_id"] + header
        rows = [[sample_id] + r for r in rows]
    write_csv(path, header, rows)
