"""Sample-quality diagnostics: MMD, effective sample size, trace error.

MMD² uses the unbiased three-term estimator with a Gaussian RBF kernel and
a median-heuristic bandwidth. Kernel sums are tiled with a fixed traversal
order, so the result is bit-stable regardless of how the caller threads the
surrounding code.
"""

from __future__ import annotations

import numpy as np

from .core import StructuralError

__all__ = [
    "acceptance_rate",
    "ess",
    "median_heuristic",
    "mmd_bootstrap_se",
    "mmd_unbiased",
    "trace_error",
]

_TILE = 1024


def _as_points(X, name):
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1:
        raise StructuralError(f"{name} must be an (M, D) array, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise StructuralError(f"{name} contains non-finite entries")
    return X


def _tile_kernel_sum(A, B, sigma, skip_diagonal):
    """Sum of k(a, b) over all pairs, optionally excluding matched indices."""
    inv = 1.0 / (2.0 * sigma * sigma)
    total = 0.0
    for i0 in range(0, A.shape[0], _TILE):
        ai = A[i0 : i0 + _TILE]
        for j0 in range(0, B.shape[0], _TILE):
            bj = B[j0 : j0 + _TILE]
            d2 = (
                np.sum(ai * ai, axis=1)[:, None]
                - 2.0 * ai @ bj.T
                + np.sum(bj * bj, axis=1)[None, :]
            )
            k = np.exp(-np.maximum(d2, 0.0) * inv)
            if skip_diagonal and i0 == j0:
                np.fill_diagonal(k, 0.0)
            total += float(k.sum())
    return total


def mmd_unbiased(X, Y, sigma: float) -> float:
    """Unbiased MMD² between two sample sets, k(x, y) = exp(-|x-y|²/2σ²).

    Within-set sums leave out the i = j terms, which is what makes the
    estimator unbiased (and occasionally negative near zero).
    """
    X = _as_points(X, "X")
    Y = _as_points(Y, "Y")
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise StructuralError("mmd_unbiased needs at least 2 points per set")
    if not sigma > 0:
        raise StructuralError(f"bandwidth must be positive, got {sigma}")
    if X.shape[1] != Y.shape[1]:
        raise StructuralError(
            f"dimension mismatch: X is {X.shape[1]}-d, Y is {Y.shape[1]}-d"
        )
    xx = _tile_kernel_sum(X, X, sigma, skip_diagonal=True) / (n * (n - 1))
    yy = _tile_kernel_sum(Y, Y, sigma, skip_diagonal=True) / (m * (m - 1))
    xy = _tile_kernel_sum(X, Y, sigma, skip_diagonal=False) / (n * m)
    return xx + yy - 2.0 * xy


def median_heuristic(Y, subsample: int = 1000, reps: int = 5, seed: int = 0) -> float:
    """Bandwidth = mean over ``reps`` of the median pairwise distance.

    Each repetition draws ``min(M, subsample)`` points without replacement.
    """
    Y = _as_points(Y, "Y")
    if Y.shape[0] < 2:
        raise StructuralError("median_heuristic needs at least 2 points")
    rng = np.random.default_rng(seed)
    meds = []
    for _ in range(max(1, reps)):
        take = min(Y.shape[0], max(2, subsample))
        idx = rng.choice(Y.shape[0], size=take, replace=False)
        P = Y[idx]
        d2 = (
            np.sum(P * P, axis=1)[:, None]
            - 2.0 * P @ P.T
            + np.sum(P * P, axis=1)[None, :]
        )
        iu = np.triu_indices(take, k=1)
        meds.append(float(np.median(np.sqrt(np.maximum(d2[iu], 0.0)))))
    sigma = float(np.mean(meds))
    if sigma <= 0:
        raise StructuralError("degenerate sample set: all points identical")
    return sigma


def mmd_bootstrap_se(
    X, Y, sigma: float, n_boot: int = 100, seed: int = 0, max_points: int = 2048
) -> float:
    """Bootstrap standard error of the unbiased MMD² estimate.

    Resamples both sets with replacement and recomputes the estimator from a
    precomputed kernel matrix, so the cost is n_boot index shuffles rather
    than n_boot kernel evaluations. Sets larger than ``max_points`` are
    subsampled once up front.
    """
    X = _as_points(X, "X")
    Y = _as_points(Y, "Y")
    if not sigma > 0:
        raise StructuralError(f"bandwidth must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    if X.shape[0] > max_points:
        X = X[rng.choice(X.shape[0], size=max_points, replace=False)]
    if Y.shape[0] > max_points:
        Y = Y[rng.choice(Y.shape[0], size=max_points, replace=False)]
    n, m = X.shape[0], Y.shape[0]
    Z = np.vstack([X, Y])
    d2 = (
        np.sum(Z * Z, axis=1)[:, None]
        - 2.0 * Z @ Z.T
        + np.sum(Z * Z, axis=1)[None, :]
    )
    K = np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma * sigma))
    reps = np.empty(n_boot)
    for b in range(n_boot):
        ix = rng.integers(0, n, size=n)
        iy = n + rng.integers(0, m, size=m)
        kxx = K[np.ix_(ix, ix)]
        kyy = K[np.ix_(iy, iy)]
        kxy = K[np.ix_(ix, iy)]
        xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        reps[b] = xx + yy - 2.0 * kxy.mean()
    return float(reps.std(ddof=1))


def ess(chain) -> tuple[np.ndarray, float, float]:
    """Effective sample size per dimension, plus the min and mean across dims.

    Uses Geyer's initial monotone sequence: autocovariances are summed in
    lag pairs (0,1), (2,3), ... until a pair sum turns nonpositive, with the
    running pair sums additionally forced nonincreasing. The integrated
    autocorrelation time can legitimately come out below 1 for antithetic
    chains, in which case ESS exceeds T (reported as is, no cap).
    """
    chain = np.asarray(chain, float)
    if chain.ndim == 1:
        chain = chain[:, None]
    if chain.ndim != 2 or chain.shape[0] < 8:
        raise StructuralError(f"need a (T, D) chain with T >= 8, got {chain.shape}")
    T, D = chain.shape
    out = np.empty(D)
    centered = chain - chain.mean(axis=0)
    var = (centered * centered).mean(axis=0)
    for k in range(D):
        if var[k] == 0.0:
            raise StructuralError(f"dimension {k} has zero variance; ESS undefined")
        x = centered[:, k]
        iact = -1.0
        cap = None
        for lag in range(0, T - 2, 2):
            g0 = float(x[: T - lag] @ x[lag:]) / T
            g1 = float(x[: T - lag - 1] @ x[lag + 1 :]) / T
            pair = (g0 + g1) / var[k]
            if pair <= 0.0:
                break
            if cap is not None:
                pair = min(pair, cap)
            cap = pair
            iact += 2.0 * pair
        out[k] = T / iact if iact > 0 else np.inf
    return out, float(out.min()), float(out.mean())


def trace_error(a, b) -> tuple[float, np.ndarray]:
    """Max abs difference between two traces, globally and per step."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch: {a.shape} vs {b.shape}")
    per_step = np.max(np.abs(a - b), axis=tuple(range(1, a.ndim))) if a.ndim > 1 else np.abs(a - b)
    return float(per_step.max()), per_step


def acceptance_rate(gates) -> float:
    """Fraction of accepted steps in a boolean gate sequence."""
    gates = np.asarray(gates)
    if gates.size == 0:
        raise StructuralError("empty gate sequence")
    return float(np.mean(gates.astype(bool)))
