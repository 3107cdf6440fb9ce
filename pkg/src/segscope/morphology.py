"""Morphological calibration: a 2D neighbor embedding of lesion masks, the
transform of model predictions into the same space, [0,1] alignment, and
paired distance comparisons between models.

The embedding follows the standard fuzzy-neighborhood construction: an
exact kNN graph, per-point bandwidth calibration by binary search, fuzzy
union, then a stochastic-gradient 2D layout with negative sampling against
the curve phi(x) = 1 / (1 + a x^(2b)). The SGD is single threaded and all
randomness is derived from the declared seed, so fitting and transforming
are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import sparse
from scipy.optimize import curve_fit

from .stats import TestResult, ZeroVarianceError, paired_t
from .volume import BinaryMask

__all__ = [
    "EmbeddingParams",
    "EmbeddingModel",
    "AlignmentTransform",
    "ModelComparison",
    "mask_to_vector",
    "find_curve_params",
    "fit_embedding",
    "embed_new",
    "compute_alignment",
    "apply_alignment",
    "invert_alignment",
    "embedding_distances",
    "compare_models",
    "save_model",
    "load_model",
]

SMOOTH_TOLERANCE = 1e-5
MAX_SIGMA_ITER = 64


@dataclass(frozen=True)
class EmbeddingParams:
    n_neighbors: int = 15
    min_dist: float = 0.1
    n_epochs: int = 200
    negative_sample_rate: int = 5
    learning_rate: float = 1.0
    repulsion_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be >= 2")
        if self.min_dist <= 0:
            raise ValueError("min_dist must be > 0")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")


@dataclass
class EmbeddingModel:
    """Fitted 2D embedding: training vectors, coordinates, and curve params."""

    training: np.ndarray  # (n, d)
    params: EmbeddingParams
    coords: np.ndarray  # (n, 2)
    a: float
    b: float
    degenerate: bool = False


def mask_to_vector(mask: BinaryMask, downsample: int = 2) -> np.ndarray:
    """Flatten a binary mask, optionally block-downsampled by an integer
    factor (mean-pooling then rebinarizing at 0.5)."""
    if downsample < 1:
        raise ValueError("downsample factor must be >= 1")
    data = mask.data
    if downsample > 1:
        if any(d % downsample for d in data.shape):
            raise ValueError(f"dims {data.shape} not divisible by factor {downsample}")
        f = downsample
        nx, ny, nz = (d // f for d in data.shape)
        pooled = data.reshape(nx, f, ny, f, nz, f).mean(axis=(1, 3, 5))
        data = (pooled >= 0.5).astype(np.float64)
    return data.ravel(order="F").astype(np.float64)


def find_curve_params(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """Least-squares (a, b) so that 1/(1 + a x^(2b)) matches the piecewise
    target: 1 up to min_dist, exponential decay beyond."""

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2.0 * b))

    xs = np.linspace(0.0, spread * 3.0, 300)
    ys = np.where(xs < min_dist, 1.0, np.exp(-(xs - min_dist) / spread))
    (a, b), _ = curve_fit(curve, xs, ys)
    return float(a), float(b)


def _exact_knn(queries: np.ndarray, refs: np.ndarray, k: int, exclude_self: bool) -> tuple[np.ndarray, np.ndarray]:
    """Exact Euclidean kNN with stable tie-breaking by reference index."""
    q2 = (queries ** 2).sum(axis=1)[:, None]
    r2 = (refs ** 2).sum(axis=1)[None, :]
    d2 = np.maximum(q2 + r2 - 2.0 * queries @ refs.T, 0.0)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return order, dists


def _smooth_knn(dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-point rho (nearest distance) and sigma from binary search so that
    sum_j exp(-max(0, d_ij - rho_i)/sigma_i) = log2(k)."""
    n = dists.shape[0]
    target = np.log2(k)
    rho = dists[:, 0].copy()
    sigma = np.ones(n)
    for i in range(n):
        d = dists[i] - rho[i]
        lo, hi, mid = 0.0, np.inf, 1.0
        for _ in range(MAX_SIGMA_ITER):
            total = float(np.exp(-np.maximum(d, 0.0) / mid).sum())
            if abs(total - target) < SMOOTH_TOLERANCE:
                break
            if total > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2.0 if hi == np.inf else (lo + hi) / 2.0
        sigma[i] = mid
    return rho, sigma


def _membership_graph(idx: np.ndarray, dists: np.ndarray, rho: np.ndarray,
                      sigma: np.ndarray, n_cols: int) -> sparse.csr_matrix:
    n, k = idx.shape
    rows = np.repeat(np.arange(n), k)
    cols = idx.ravel()
    d = dists.ravel() - np.repeat(rho, k)
    vals = np.exp(-np.maximum(d, 0.0) / np.repeat(sigma, k))
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n_cols)).tocsr()


def _fuzzy_union(w: sparse.csr_matrix) -> sparse.csr_matrix:
    wt = w.T.tocsr()
    return (w + wt - w.multiply(wt)).tocsr()


@njit(cache=True)
def _rand_int(state, bound):
    x = state[0]
    x ^= x << np.uint64(13)
    x ^= x >> np.uint64(7)
    x ^= x << np.uint64(17)
    state[0] = x
    return int(x % bound)


@njit(cache=True)
def _clip_grad(v):
    if v > 4.0:
        return 4.0
    if v < -4.0:
        return -4.0
    return v


@njit(cache=True)
def _sgd_layout(head_emb, tail_emb, head, tail, epochs_per_sample,
                a, b, gamma, neg_rate, n_epochs, alpha0, move_other, rng_state):
    """Single-threaded SGD over the fuzzy cross-entropy with negative
    sampling. Edge i fires whenever its accumulated epoch counter comes due,
    proportionally to its membership weight."""
    dim = head_emb.shape[1]
    n_vertices = np.uint64(tail_emb.shape[0])
    epochs_per_negative = epochs_per_sample / neg_rate
    next_sample = epochs_per_sample.copy()
    next_negative = epochs_per_negative.copy()
    for epoch in range(n_epochs):
        alpha = alpha0 * (1.0 - epoch / n_epochs)
        for i in range(epochs_per_sample.shape[0]):
            if next_sample[i] > epoch:
                continue
            j = head[i]
            k = tail[i]
            dist2 = 0.0
            for d in range(dim):
                diff = head_emb[j, d] - tail_emb[k, d]
                dist2 += diff * diff
            if dist2 > 0.0:
                coeff = (-2.0 * a * b * dist2 ** (b - 1.0)) / (a * dist2 ** b + 1.0)
            else:
                coeff = 0.0
            for d in range(dim):
                grad = _clip_grad(coeff * (head_emb[j, d] - tail_emb[k, d]))
                head_emb[j, d] += grad * alpha
                if move_other:
                    tail_emb[k, d] -= grad * alpha
            next_sample[i] += epochs_per_sample[i]
            n_neg = int((epoch - next_negative[i]) / epochs_per_negative[i])
            for _ in range(n_neg):
                kneg = _rand_int(rng_state, n_vertices)
                dist2 = 0.0
                for d in range(dim):
                    diff = head_emb[j, d] - tail_emb[kneg, d]
                    dist2 += diff * diff
                if dist2 > 0.0:
                    coeff = (2.0 * gamma * b) / ((0.001 + dist2) * (a * dist2 ** b + 1.0))
                elif move_other and j == kneg:
                    continue
                else:
                    coeff = 0.0
                for d in range(dim):
                    if coeff > 0.0:
                        grad = _clip_grad(coeff * (head_emb[j, d] - tail_emb[kneg, d]))
                    else:
                        grad = 4.0
                    head_emb[j, d] += grad * alpha
            next_negative[i] += n_neg * epochs_per_negative[i]


def _spectral_init(graph: sparse.csr_matrix, seed: int) -> np.ndarray:
    """Two nontrivial eigenvectors of the normalized graph Laplacian, scaled
    to a max coordinate of 10; random fallback on numerical failure."""
    n = graph.shape[0]
    rng = np.random.default_rng([seed, 0x5EC])
    try:
        deg = np.asarray(graph.sum(axis=1)).ravel()
        with np.errstate(divide="ignore"):
            inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-12)), 0.0)
        lap = sparse.eye(n) - sparse.diags(inv_sqrt) @ graph @ sparse.diags(inv_sqrt)
        if n <= 1200:
            vals, vecs = np.linalg.eigh(lap.toarray())
            coords = vecs[:, 1:3]
        else:
            from scipy.sparse.linalg import eigsh
            vals, vecs = eigsh(lap.tocsc(), k=3, which="SM", v0=np.full(n, 1.0 / np.sqrt(n)))
            coords = vecs[:, 1:3]
        scale = np.abs(coords).max()
        if not np.isfinite(scale) or scale == 0:
            raise np.linalg.LinAlgError("flat spectral solution")
        coords = coords * (10.0 / scale)
        return coords + rng.normal(0.0, 1e-4, size=coords.shape)
    except Exception:
        return rng.uniform(-10.0, 10.0, size=(n, 2))


def _run_layout(init: np.ndarray, tail_emb: np.ndarray, graph: sparse.coo_matrix,
                a: float, b: float, params: EmbeddingParams, n_epochs: int,
                move_other: bool, seed: int) -> np.ndarray:
    coo = graph.tocoo()
    order = np.lexsort((coo.col, coo.row))
    head = coo.row[order].astype(np.int64)
    tail = coo.col[order].astype(np.int64)
    w = coo.data[order]
    epochs_per_sample = (w.max() / w).astype(np.float64)
    emb = np.ascontiguousarray(init, dtype=np.float64)
    tail_arr = emb if move_other else np.ascontiguousarray(tail_emb, dtype=np.float64)
    state = np.array([(seed * 2685821657736338717 + 1) % 2**64 | 1], dtype=np.uint64)
    _sgd_layout(emb, tail_arr, head, tail, epochs_per_sample,
                a, b, params.repulsion_strength, float(params.negative_sample_rate),
                n_epochs, params.learning_rate, move_other, state)
    return emb


def fit_embedding(vectors: np.ndarray, params: EmbeddingParams = EmbeddingParams()) -> EmbeddingModel:
    """Fit the 2D embedding on training vectors (rows).

    All-identical inputs are a degenerate case: every point embeds at the
    origin and the model is flagged.
    """
    x = np.ascontiguousarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be a 2D array")
    n, _ = x.shape
    k = params.n_neighbors
    if n < k + 1:
        raise ValueError(f"need at least n_neighbors+1 = {k + 1} vectors, got {n}")
    a, b = find_curve_params(params.min_dist)
    if np.all(x == x[0]):
        return EmbeddingModel(training=x, params=params, coords=np.zeros((n, 2)),
                              a=a, b=b, degenerate=True)
    idx, dists = _exact_knn(x, x, k, exclude_self=True)
    rho, sigma = _smooth_knn(dists, k)
    graph = _fuzzy_union(_membership_graph(idx, dists, rho, sigma, n))
    init = _spectral_init(graph, params.seed)
    coords = _run_layout(init, init, graph, a, b, params, params.n_epochs,
                         move_other=True, seed=params.seed)
    return EmbeddingModel(training=x, params=params, coords=coords, a=a, b=b)


def embed_new(model: EmbeddingModel, vectors: np.ndarray) -> np.ndarray:
    """Embed new vectors into a fitted space.

    Each point starts at the inverse-distance-weighted mean of its k nearest
    training points' coordinates (an exact duplicate therefore starts on its
    twin), then is refined by n_epochs/3 SGD epochs with the training
    coordinates frozen.
    """
    x = np.ascontiguousarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.training.shape[1]:
        raise ValueError(f"expected dimension {model.training.shape[1]}, got {x.shape}")
    if model.degenerate:
        return np.zeros((x.shape[0], 2))
    params = model.params
    k = min(params.n_neighbors, model.training.shape[0])
    idx, dists = _exact_knn(x, model.training, k, exclude_self=False)
    inv = 1.0 / (dists + 1e-8)
    weights = inv / inv.sum(axis=1, keepdims=True)
    init = np.einsum("nk,nkd->nd", weights, model.coords[idx])
    rho, sigma = _smooth_knn(dists, k)
    graph = _membership_graph(idx, dists, rho, sigma, model.training.shape[0])
    n_epochs = max(1, params.n_epochs // 3)
    return _run_layout(init, model.coords, graph, model.a, model.b, params,
                       n_epochs, move_other=False, seed=derive_transform_seed(params.seed))


def derive_transform_seed(seed: int) -> int:
    return (seed * 0x9E3779B97F4A7C15 + 1) % 2**64


@dataclass(frozen=True)
class AlignmentTransform:
    """Per-axis affine map taking ground-truth embedding coordinates to
    [0, 1]; the same map applied to predictions may leave that interval."""

    mins: tuple[float, float]
    ranges: tuple[float, float]

    def __post_init__(self):
        if any(r <= 0 for r in self.ranges):
            raise ValueError("alignment needs positive range on every axis")


def compute_alignment(gt_coords: np.ndarray) -> AlignmentTransform:
    c = np.asarray(gt_coords, dtype=np.float64)
    if c.size == 0:
        raise ValueError("empty coordinates")
    mins = c.min(axis=0)
    ranges = c.max(axis=0) - mins
    if np.any(ranges <= 0):
        raise ValueError("zero coordinate range on an axis")
    return AlignmentTransform(mins=tuple(mins.tolist()), ranges=tuple(ranges.tolist()))


def apply_alignment(t: AlignmentTransform, coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    return (c - np.asarray(t.mins)) / np.asarray(t.ranges)


def invert_alignment(t: AlignmentTransform, coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    return c * np.asarray(t.ranges) + np.asarray(t.mins)


def embedding_distances(
    gt_coords: dict[str, np.ndarray], pred_coords: dict[str, np.ndarray],
) -> dict[str, float]:
    """Per-study Euclidean distance between aligned GT and prediction points."""
    if set(gt_coords) != set(pred_coords):
        missing = set(gt_coords) ^ set(pred_coords)
        raise ValueError(f"study ids do not match: {sorted(missing)[:5]}")
    return {
        sid: float(np.linalg.norm(np.asarray(gt_coords[sid]) - np.asarray(pred_coords[sid])))
        for sid in sorted(gt_coords)
    }


@dataclass(frozen=True)
class ModelComparison:
    result: Optional[TestResult]
    indistinguishable: bool = False


def compare_models(dist_a: dict[str, float], dist_b: dict[str, float]) -> ModelComparison:
    """Paired t-test on matched distance vectors; identical vectors surface
    as indistinguishable rather than an error."""
    if set(dist_a) != set(dist_b):
        raise ValueError("study ids do not match")
    keys = sorted(dist_a)
    a = [dist_a[k] for k in keys]
    b = [dist_b[k] for k in keys]
    try:
        return ModelComparison(result=paired_t(a, b))
    except ZeroVarianceError:
        return ModelComparison(result=None, indistinguishable=True)


def save_model(model: EmbeddingModel, path) -> None:
    np.savez(
        path,
        training=model.training,
        coords=model.coords,
        ab=np.array([model.a, model.b]),
        degenerate=np.array([model.degenerate]),
        params=np.frombuffer(json.dumps(asdict(model.params), sort_keys=True).encode(), dtype=np.uint8),
    )


def load_model(path) -> EmbeddingModel:
    with np.load(path) as data:
        params = EmbeddingParams(**json.loads(bytes(data["params"]).decode()))
        return EmbeddingModel(
            training=data["training"], params=params, coords=data["coords"],
            a=float(data["ab"][0]), b=float(data["ab"][1]),
            degenerate=bool(data["degenerate"][0]),
        )
