"""Translation-quality metrics: kernel MMD and a structure-preservation
score. Both are plain numpy; nothing here touches the tape."""

from __future__ import annotations

import numpy as np

__all__ = ["mmd_metric", "structure_score", "rbf_bandwidth"]


def _flatten_set(images):
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError("expected a set of images, got a single vector")
    return arr.reshape(arr.shape[0], -1)


def _pairwise_distances(a, b):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(np.maximum(d2, 0.0))


def rbf_bandwidth(a, b):
    """Median pairwise Euclidean distance over the pooled sample set.

    Falls back to 1.0 when the median is zero (all points coincide), so the
    kernel stays well defined. Accepts image sets or pre-flattened rows.
    """
    pooled = np.concatenate([_flatten_set(a), _flatten_set(b)], axis=0)
    n = pooled.shape[0]
    dists = _pairwise_distances(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(dists[iu])) if iu[0].size else 0.0
    return med if med > 0.0 else 1.0


def mmd_metric(generated, target, bandwidth=None):
    """Unbiased squared maximum mean discrepancy, RBF kernel, clipped at 0.

    Kernel: k(a, b) = exp(-||a - b||^2 / (2 h^2)) with h the pooled median
    pairwise distance (see rbf_bandwidth) unless given. For equal-size sets
    the estimator pairs the samples and drops the matched terms:

        1/(n(n-1)) * sum_{i != j} [k(x_i,x_j) + k(y_i,y_j)
                                   - k(x_i,y_j) - k(x_j,y_i)]

    so identical multisets cancel exactly, term by term. Unequal sizes use
    the standard three-sum unbiased form. Returns max(estimate, 0).
    """
    a = _flatten_set(generated)
    b = _flatten_set(target)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("mmd_metric: both sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("mmd_metric: sets must share image extents")
    h = rbf_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("mmd_metric: bandwidth must be > 0")
    gamma = 1.0 / (2.0 * h * h)
    kxx = np.exp(-gamma * _pairwise_distances(a, a) ** 2)
    kyy = np.exp(-gamma * _pairwise_distances(b, b) ** 2)
    kxy = np.exp(-gamma * _pairwise_distances(a, b) ** 2)
    m, n = a.shape[0], b.shape[0]
    if m == n:
        if n < 2:
            raise ValueError("mmd_metric: paired form needs at least 2 samples")
        hmat = kxx + kyy - kxy - kxy.T
        np.fill_diagonal(hmat, 0.0)
        est = hmat.sum() / (n * (n - 1))
    else:
        if m < 2 or n < 2:
            raise ValueError("mmd_metric: unbiased form needs >= 2 samples per set")
        sx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        sy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        est = sx + sy - 2.0 * kxy.mean()
    return max(float(est), 0.0)


_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _highpass(img):
    """Per-channel 3x3 Laplacian, zero padding, extents preserved."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("expected an image of shape (C, H, W) or (H, W)")
    c, h, w = arr.shape
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = arr
    out = np.zeros_like(arr)
    for dy in range(3):
        for dx in range(3):
            wgt = _LAPLACIAN[dy, dx]
            if wgt != 0.0:
                out += wgt * padded[:, dy : dy + h, dx : dx + w]
    return out


def structure_score(x, y_hat):
    """Pearson correlation of Laplacian-filtered input and translation.

    High-pass filtering removes texture offsets so the score reflects shared
    edge layout, not brightness. Range [-1, 1]; identical images score 1,
    inverted ones -1. Zero variance after filtering raises.
    """
    fx = _highpass(x).reshape(-1)
    fy = _highpass(y_hat).reshape(-1)
    if fx.shape != fy.shape:
        raise ValueError("structure_score: images must share extents")
    fx = fx - fx.mean()
    fy = fy - fy.mean()
    vx = float((fx * fx).sum())
    vy = float((fy * fy).sum())
    if vx == 0.0 or vy == 0.0:
        raise ValueError("structure_score: zero-variance filtered input")
    r = float((fx * fy).sum()) / (np.sqrt(vx) * np.sqrt(vy))
    return float(min(1.0, max(-1.0, r)))
