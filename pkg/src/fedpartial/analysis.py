"""Representation-similarity (SVCCA) and model-capacity arithmetic.

The similarity score between two activation matrices is computed as:
center each neuron, keep the top-k singular directions of each matrix,
run CCA between the two projected k x n signals, and average the k
correlation coefficients.  All operations here are pure functions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import tensor
from .nn import Network

log = logging.getLogger(__name__)

#: ridge added to the projection covariances before whitening
CCA_RIDGE = 1e-10
DEFAULT_K = 4


@dataclass(frozen=True)
class ActivationMatrix:
    """One layer's responses: rows are neurons, columns are samples."""

    layer: str
    matrix: np.ndarray


def _as_matrix(x) -> np.ndarray:
    m = x.matrix if isinstance(x, ActivationMatrix) else np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"activations must be 2-D (neurons x samples), got {m.shape}")
    tensor.check_finite(m, "activations")
    return m


def _top_projection(m: np.ndarray, k: int) -> np.ndarray:
    """Center rows and project onto the top-k singular directions.

    Returns diag(s_k) @ vt_k, a (k_eff x n) signal; k_eff < k when the
    centered matrix has lower rank.
    """
    centered = m - m.mean(axis=1, keepdims=True)
    r = tensor.svd(centered)
    cutoff = r.s[0] * max(centered.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(r.s > cutoff))
    k_eff = min(k, rank)
    return r.s[:k_eff, None] * r.vt[:k_eff]


def _inv_sqrt_psd(a: np.ndarray) -> np.ndarray:
    r = tensor.svd(a)
    return r.u @ np.diag(1.0 / np.sqrt(r.s)) @ r.vt


def _cca_mean(px: np.ndarray, py: np.ndarray, n: int) -> float:
    k_eff = min(px.shape[0], py.shape[0])
    if k_eff == 0:
        raise ValueError("activations have zero rank after centering")
    px, py = px[:k_eff], py[:k_eff]
    cov_xx = px @ px.T / (n - 1) + CCA_RIDGE * np.eye(k_eff)
    cov_yy = py @ py.T / (n - 1) + CCA_RIDGE * np.eye(k_eff)
    cov_xy = px @ py.T / (n - 1)
    t = _inv_sqrt_psd(cov_xx) @ cov_xy @ _inv_sqrt_psd(cov_yy)
    corr = np.clip(tensor.svd(t).s, 0.0, 1.0)
    return float(corr.mean())


def _checked_projection(x, k: int) -> np.ndarray:
    m = _as_matrix(x)
    if m.shape[1] < 2:
        raise ValueError("need at least 2 samples for correlation analysis")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    p = _top_projection(m, k)
    if p.shape[0] < k:
        log.debug("svcca: rank below k, reduced %d -> %d", k, p.shape[0])
    return p


def svcca(x, y, k: int = DEFAULT_K) -> float:
    """Mean CCA coefficient between the top-k singular subspaces of x and y.

    x and y are (neurons x samples) with a shared sample axis.  If either
    matrix has rank below k after centering, k is reduced to the available
    rank (logged).  The result lies in [0, 1].
    """
    mx = _as_matrix(x)
    my = _as_matrix(y)
    if mx.shape[1] != my.shape[1]:
        raise ValueError(f"sample counts differ: {mx.shape[1]} vs {my.shape[1]}")
    return _cca_mean(_checked_projection(mx, k), _checked_projection(my, k), mx.shape[1])


def batched_svcca(x_batches, y_batches, k: int = DEFAULT_K) -> float:
    """Arithmetic mean of per-batch svcca values (matched batch lists)."""
    if len(x_batches) == 0 or len(x_batches) != len(y_batches):
        raise ValueError(
            f"need matching non-empty batch lists, got {len(x_batches)} and {len(y_batches)}"
        )
    vals = [svcca(bx, by, k) for bx, by in zip(x_batches, y_batches)]
    return float(np.mean(vals))


def pairwise_max_svcca(mats, k: int = DEFAULT_K) -> float:
    """Maximum svcca over all unordered pairs of client activation matrices.

    Each matrix's singular projection is computed once and shared across
    the pairs it appears in."""
    if len(mats) < 2:
        raise ValueError(f"need >= 2 activation matrices, got {len(mats)}")
    ns = [_as_matrix(m).shape[1] for m in mats]
    if len(set(ns)) != 1:
        raise ValueError(f"sample counts differ across clients: {sorted(set(ns))}")
    projs = [_checked_projection(m, k) for m in mats]
    return max(_cca_mean(a, b, ns[0]) for a, b in combinations(projs, 2))


def pairwise_max_batched_svcca(batch_lists, k: int = DEFAULT_K) -> float:
    """`pairwise_max_svcca` where each client holds a list of batches."""
    if len(batch_lists) < 2:
        raise ValueError(f"need >= 2 clients, got {len(batch_lists)}")
    n_batches = {len(b) for b in batch_lists}
    if len(n_batches) != 1 or 0 in n_batches:
        raise ValueError("clients must hold matching non-empty batch lists")
    projs = [[(_checked_projection(m, k), _as_matrix(m).shape[1]) for m in batches] for batches in batch_lists]
    best = -np.inf
    for a, b in combinations(projs, 2):
        vals = [_cca_mean(pa, pb, na) for (pa, na), (pb, _) in zip(a, b)]
        best = max(best, float(np.mean(vals)))
    return best


# ---------------------------------------------------------------------------
# Activation collection
# ---------------------------------------------------------------------------


def collect_activation_matrices(net: Network, x: np.ndarray, chunk: int = 512, only=None):
    """Eval-mode forward collecting (neurons x samples) matrices at every
    convolution and dense layer (or the layer indices in `only`).

    Convolution outputs (N,C,H,W) become (C, N*H*W): channels are the
    neurons and every spatial position of every sample is one column.
    """
    feature_idx = net.feature_layers()
    if only is not None:
        feature_idx = tuple(i for i in feature_idx if i in set(only))
    blocks: dict[int, list[np.ndarray]] = {i: [] for i in feature_idx}
    stop = max(feature_idx) + 1 if feature_idx else 0
    for lo in range(0, len(x), chunk):
        out = np.asarray(x[lo : lo + chunk], dtype=np.float64)
        for i, layer in enumerate(net.layers[:stop]):
            out, _ = layer.forward(out, train=False)
            if i in blocks:
                if out.ndim == 4:
                    mat = out.transpose(1, 0, 2, 3).reshape(out.shape[1], -1)
                else:
                    mat = out.T
                blocks[i].append(mat)
    return [
        ActivationMatrix(f"{i:03d}_{net.layers[i].kind}", np.hstack(blocks[i]))
        for i in feature_idx
    ]


# ---------------------------------------------------------------------------
# Capacity arithmetic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CapacityCounts:
    """Parameter and activation scalar counts of (a region of) a model."""

    p: int
    a: int

    def __post_init__(self):
        if self.p < 0 or self.a < 0:
            raise ValueError("counts must be non-negative")


def capacity(sub: CapacityCounts, full: CapacityCounts) -> float:
    """Memory-footprint ratio (2p_sub + 2a_sub) / (2p + 2a), unrounded."""
    if full.p + full.a <= 0:
        raise ValueError("full model must have p + a > 0")
    return (2.0 * sub.p + 2.0 * sub.a) / (2.0 * full.p + 2.0 * full.a)


def avg_capacity(tiers) -> float:
    """Count-weighted mean of (capacity, count) tiers."""
    total = 0
    acc = 0.0
    for cap, count in tiers:
        if count <= 0:
            raise ValueError(f"tier counts must be positive, got {count}")
        acc += cap * count
        total += count
    return acc / total


DEFAULT_CAPACITY_BATCH = 32


def _activation_count(net: Network, from_layer: int = 0, batch: int = DEFAULT_CAPACITY_BATCH) -> int:
    # output scalars of every layer in the region for one mini-batch, plus
    # the region's input (the cached split-point activation for a suffix)
    count = 0
    if from_layer > 0:
        count += int(np.prod(net.in_shapes[from_layer]))
    for i in range(from_layer, len(net.layers) - 1):  # loss layer excluded
        count += int(np.prod(net.out_shapes[i]))
    return count * batch


def capacity_counts(net: Network, strategy=None, batch: int = DEFAULT_CAPACITY_BATCH) -> CapacityCounts:
    """Counts (p, a) for the region of `net` a client actually trains.

    Activations are counted for one training mini-batch (default 32); only
    the trained region (the suffix beyond the split, or the width-reduced
    copy) occupies client memory.
    """
    if strategy is None or strategy.kind == "full":
        return CapacityCounts(net.param_count(), _activation_count(net, 0, batch))
    if strategy.kind == "suffix":
        k = strategy.split_index
        p = net.param_count([i for i in net.parametric_layers() if i >= k])
        return CapacityCounts(p, _activation_count(net, k, batch))
    if strategy.kind == "width":
        from .fedsim import width_reduce

        sub, _ = width_reduce(net, strategy.keep_fraction)
        return CapacityCounts(sub.param_count(), _activation_count(sub, 0, batch))
    raise ValueError(f"unknown strategy kind {strategy.kind!r}")
