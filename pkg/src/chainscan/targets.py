"""Target log-densities with analytic gradients and Hessian-vector products.

Five model families are supported: standard normal, correlated Gaussian
(precision given by its Cholesky factor), a banana-shaped Rosenbrock density,
an isotropic mixture of Gaussians, and Bayesian logistic regression with a
spherical normal prior. Each compiles to a TargetModel whose logp/grad/hvp
callables accept arbitrary leading batch axes.

Also here: CSV ingestion for regression designs, a synthetic logistic dataset
generator, a cyclic-Jacobi eigendecomposition for orthogonal changes of
basis, and the conjugation wrapper that rewrites a transition system in the
rotated coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Any

import math

import numpy as np
from scipy.special import expit

from .core import StructuralError, TargetModel, TransitionSystem
from .noise import ConfigurationError, NoiseTable, SlotSpec

__all__ = [
    "ModelSpec",
    "DatasetError",
    "std_normal",
    "gaussian",
    "rosenbrock",
    "mog",
    "blr",
    "model_logp_grad_hvp",
    "load_design_matrix",
    "save_design_matrix",
    "synthetic_credit_like",
    "OrthogonalBasis",
    "orthogonal_basis",
    "transform_system",
]

MODEL_KINDS = ("std-normal", "gaussian", "rosenbrock", "mog", "blr")

# rows per tile when streaming logistic-regression evaluations over a large
# batch of parameter vectors; keeps the (tile, N) logits buffer around 32 MB
_BLR_TILE_ELEMENTS = 4_000_000


class DatasetError(ValueError):
    """Raised for malformed dataset files, naming the offending line."""


@dataclass(frozen=True)
class ModelSpec:
    """A validated description of one target density."""

    kind: str
    dim: int
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(
                f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}"
            )
        if self.dim < 1:
            raise ConfigurationError(f"model dim must be >= 1, got {self.dim}")


def std_normal(dim: int) -> ModelSpec:
    return ModelSpec("std-normal", int(dim))


def gaussian(mu, chol_precision) -> ModelSpec:
    """Gaussian with mean mu and precision L @ L.T given via its factor L."""
    mu = np.asarray(mu, float)
    L = np.asarray(chol_precision, float)
    if mu.ndim != 1:
        raise ConfigurationError(f"mu must be a vector, got shape {mu.shape}")
    d = mu.shape[0]
    if L.shape != (d, d):
        raise ConfigurationError(f"chol_precision must be {d}x{d}, got {L.shape}")
    if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0):
        raise ConfigurationError("chol_precision needs a positive diagonal")
    return ModelSpec("gaussian", d, {"mu": mu, "chol_precision": L})


def rosenbrock(a=0.0, b=1.0, scale1=1.0, scale2=0.1) -> ModelSpec:
    """Banana density on R^2.

    log p = -(x1 - a)^2 / (2*scale1) - (x2 - b*x1^2)^2 / (2*scale2),
    so the mass concentrates along the parabola x2 = b*x1^2.
    """
    if scale1 <= 0 or scale2 <= 0:
        raise ConfigurationError("rosenbrock scales must be positive")
    return ModelSpec(
        "rosenbrock",
        2,
        {"a": float(a), "b": float(b), "scale1": float(scale1), "scale2": float(scale2)},
    )


def mog(weights=None, means=None, variances=None) -> ModelSpec:
    """Mixture of isotropic Gaussians.

    Defaults to four equally weighted unit-variance components at the
    corners (+-3, +-3) in 2D.
    """
    if means is None:
        means = [(-3.0, -3.0), (-3.0, 3.0), (3.0, -3.0), (3.0, 3.0)]
    means = np.asarray(means, float)
    if means.ndim != 2:
        raise ConfigurationError(f"means must be (K, D), got shape {means.shape}")
    K, d = means.shape
    weights = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, float)
    variances = np.ones(K) if variances is None else np.asarray(variances, float)
    if weights.shape != (K,) or variances.shape != (K,):
        raise ConfigurationError("weights/variances must have one entry per component")
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigurationError("weights must be positive and sum to 1")
    if np.any(variances <= 0):
        raise ConfigurationError("variances must be positive")
    return ModelSpec("mog", d, {"weights": weights, "means": means, "variances": variances})


def blr(X, y, prior_precision=1.0) -> ModelSpec:
    """Bayesian logistic regression with an N(0, I/prior_precision) prior."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if X.ndim != 2:
        raise ConfigurationError(f"X must be (N, D), got shape {X.shape}")
    if y.shape != (X.shape[0],):
        raise ConfigurationError(
            f"labels must match rows: X has {X.shape[0]}, y has shape {y.shape}"
        )
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ConfigurationError("labels must be 0/1")
    if prior_precision <= 0:
        raise ConfigurationError("prior precision must be positive")
    return ModelSpec(
        "blr", X.shape[1], {"X": X, "y": y, "prior_precision": float(prior_precision)}
    )


# ---------------------------------------------------------------------------
# model compilation


def _flatten(x, dim):
    x = np.asarray(x, float)
    if x.shape[-1] != dim:
        raise StructuralError(f"expected trailing dimension {dim}, got shape {x.shape}")
    return x.reshape(-1, dim), x.shape[:-1]


def _std_normal_model(dim):
    return TargetModel(
        dim=dim,
        logp=lambda x: -0.5 * np.sum(np.asarray(x, float) ** 2, axis=-1),
        grad=lambda x: -np.asarray(x, float),
        hvp=lambda x, v: -np.asarray(v, float),
    )


def _gaussian_model(mu, L):
    P = L @ L.T

    def logp(x):
        r = np.asarray(x, float) - mu
        half = r @ L
        return -0.5 * np.sum(half * half, axis=-1)

    return TargetModel(
        dim=mu.shape[0],
        logp=logp,
        grad=lambda x: -((np.asarray(x, float) - mu) @ P),
        hvp=lambda x, v: -(np.asarray(v, float) @ P),
    )


def _rosenbrock_model(a, b, s1, s2):
    def logp(x):
        x = np.asarray(x, float)
        x1, x2 = x[..., 0], x[..., 1]
        r = x2 - b * x1 * x1
        return -((x1 - a) ** 2) / (2 * s1) - r * r / (2 * s2)

    def grad(x):
        x = np.asarray(x, float)
        x1, x2 = x[..., 0], x[..., 1]
        r = x2 - b * x1 * x1
        return np.stack(
            [-(x1 - a) / s1 + 2 * b * x1 * r / s2, -r / s2], axis=-1
        )

    def hvp(x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        x1, x2 = x[..., 0], x[..., 1]
        r = x2 - b * x1 * x1
        h11 = -1.0 / s1 + (2 * b * r - 4 * b * b * x1 * x1) / s2
        h12 = 2 * b * x1 / s2
        return np.stack(
            [h11 * v[..., 0] + h12 * v[..., 1], h12 * v[..., 0] - v[..., 1] / s2],
            axis=-1,
        )

    return TargetModel(dim=2, logp=logp, grad=grad, hvp=hvp)


def _mog_model(w, means, var):
    d = means.shape[1]
    logw = np.log(w)
    lognorm = -0.5 * d * np.log(2 * np.pi * var)

    def _log_components(x):
        diff = x[..., None, :] - means
        sq = np.sum(diff * diff, axis=-1)
        return logw + lognorm - sq / (2 * var), diff

    def logp(x):
        lc, _ = _log_components(np.asarray(x, float))
        m = lc.max(axis=-1)
        return m + np.log(np.sum(np.exp(lc - m[..., None]), axis=-1))

    def _resp(x):
        lc, diff = _log_components(x)
        m = lc.max(axis=-1, keepdims=True)
        e = np.exp(lc - m)
        return e / e.sum(axis=-1, keepdims=True), diff

    def grad(x):
        r, diff = _resp(np.asarray(x, float))
        return -np.sum(r[..., None] * diff / var[:, None], axis=-2)

    def hvp(x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        r, diff = _resp(x)
        g_k = -diff / var[:, None]
        gbar = np.sum(r[..., None] * g_k, axis=-2)
        gv = np.sum(g_k * v[..., None, :], axis=-1)
        term = np.sum((r * gv)[..., None] * g_k, axis=-2)
        curv = np.sum(r / var, axis=-1)
        return term - curv[..., None] * v - gbar * np.sum(gbar * v, axis=-1)[..., None]

    return TargetModel(dim=d, logp=logp, grad=grad, hvp=hvp)


def _blr_model(X, y, prec):
    n, d = X.shape
    tile = max(1, _BLR_TILE_ELEMENTS // max(n, 1))

    def logp(beta):
        flat, lead = _flatten(beta, d)
        out = np.empty(flat.shape[0])
        for lo in range(0, flat.shape[0], tile):
            eta = flat[lo : lo + tile] @ X.T
            out[lo : lo + tile] = eta @ y - np.logaddexp(0.0, eta).sum(axis=-1)
        out -= 0.5 * prec * np.sum(flat * flat, axis=-1)
        return out.reshape(lead)

    def grad(beta):
        flat, lead = _flatten(beta, d)
        out = np.empty_like(flat)
        for lo in range(0, flat.shape[0], tile):
            resid = y - expit(flat[lo : lo + tile] @ X.T)
            out[lo : lo + tile] = resid @ X
        out -= prec * flat
        return out.reshape(lead + (d,))

    def hvp(beta, v):
        flat, lead = _flatten(beta, d)
        vflat, _ = _flatten(np.broadcast_to(v, np.asarray(beta).shape), d)
        out = np.empty_like(flat)
        for lo in range(0, flat.shape[0], tile):
            p = expit(flat[lo : lo + tile] @ X.T)
            xv = vflat[lo : lo + tile] @ X.T
            out[lo : lo + tile] = -((p * (1.0 - p) * xv) @ X)
        out -= prec * vflat
        return out.reshape(lead + (d,))

    return TargetModel(dim=d, logp=logp, grad=grad, hvp=hvp)


def model_logp_grad_hvp(spec: ModelSpec) -> TargetModel:
    """Compile a ModelSpec into its logp/grad/hvp triple.

    All three callables are batched: inputs of shape (..., D) produce
    (...,) log-densities and (..., D) vectors. Hessian products are exact
    analytic expressions, never finite differences.
    """
    p = spec.params
    if spec.kind == "std-normal":
        return _std_normal_model(spec.dim)
    if spec.kind == "gaussian":
        return _gaussian_model(p["mu"], p["chol_precision"])
    if spec.kind == "rosenbrock":
        return _rosenbrock_model(p["a"], p["b"], p["scale1"], p["scale2"])
    if spec.kind == "mog":
        return _mog_model(p["weights"], p["means"], p["variances"])
    if spec.kind == "blr":
        return _blr_model(p["X"], p["y"], p["prior_precision"])
    raise ConfigurationError(f"unknown model kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# datasets


def load_design_matrix(path, standardize: bool = False):
    """Read a CSV whose last column is a 0/1 label.

    Returns (X, y). With standardize=True each feature column is centered
    and scaled to unit (population) variance; constant columns are left
    centered but unscaled. Malformed input raises DatasetError naming the
    line: ragged rows, non-numeric cells, labels outside {0, 1}.
    """
    feats: list[list[float]] = []
    labels: list[float] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DatasetError(
                        f"line {lineno}: need at least one feature column plus a label"
                    )
            elif len(row) != width:
                raise DatasetError(
                    f"line {lineno}: expected {width} columns, got {len(row)}"
                )
            vals = []
            for j, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DatasetError(
                        f"line {lineno}: non-numeric value {cell!r} in column {j + 1}"
                    ) from None
            if vals[-1] not in (0.0, 1.0):
                raise DatasetError(
                    f"line {lineno}: label must be 0 or 1, got {row[-1]!r}"
                )
            feats.append(vals[:-1])
            labels.append(vals[-1])
    if not feats:
        raise DatasetError(f"{path}: no data rows")
    X = np.array(feats)
    y = np.array(labels)
    if standardize:
        X = X - X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        X = X / sd
    return X, y


def save_design_matrix(path, X, y):
    """Write (X, y) back out in the load_design_matrix CSV layout."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row, label in zip(X, y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def synthetic_credit_like(seed: int = 20250819, n: int = 1000, dim: int = 25):
    """Deterministic logistic-regression dataset with a known coefficient vector.

    Standard-normal features, beta* drawn once from a unit normal, labels
    Bernoulli(sigmoid(X @ beta*)). Returns (X, y, beta_star).
    """
    table = NoiseTable(
        seed,
        {
            "x": SlotSpec(dim, "standard-normal"),
            "u": SlotSpec(1, "uniform-0-1"),
            "beta": SlotSpec(dim, "standard-normal"),
        },
        T=n,
    )
    beta_star = table.block("beta", np.array([0]))[0]
    ts = np.arange(1, n + 1)
    X = table.block("x", ts)
    u = table.block("u", ts)[:, 0]
    y = (u < expit(X @ beta_star)).astype(float)
    return X, y, beta_star


# ---------------------------------------------------------------------------
# orthogonal change of basis


@dataclass(frozen=True)
class OrthogonalBasis:
    """Columns of Q are orthonormal; eigenvalues are sorted descending."""

    Q: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        d = self.Q.shape[0]
        err = np.max(np.abs(self.Q.T @ self.Q - np.eye(d)))
        if err > 1e-10:
            raise StructuralError(f"basis is not orthogonal: max |Q'Q - I| = {err:.2e}")


def orthogonal_basis(C) -> OrthogonalBasis:
    """Eigendecompose a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate away each off-diagonal pair in turn until the off-diagonal
    Frobenius mass drops below 1e-12 relative to the input scale. Columns
    come back ordered by descending eigenvalue, sign-fixed so the largest
    entry of each column is positive.
    """
    C = np.asarray(C, float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise StructuralError(f"expected a square matrix, got shape {C.shape}")
    scale = max(1.0, float(np.max(np.abs(C)))) if C.size else 1.0
    if np.max(np.abs(C - C.T)) > 1e-10 * scale:
        raise StructuralError("matrix is not symmetric")
    d = C.shape[0]
    A = 0.5 * (C + C.T)
    Q = np.eye(d)
    tol = 1e-12 * max(1.0, np.linalg.norm(C, "fro"))
    for _ in range(60):
        off = math.sqrt(2.0 * np.sum(np.tril(A, -1) ** 2))
        if off < tol:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) < tol / max(d, 1):
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                for M in (A,):
                    col_p = M[:, p].copy()
                    col_q = M[:, q].copy()
                    M[:, p] = c * col_p - s * col_q
                    M[:, q] = s * col_p + c * col_q
                    row_p = M[p, :].copy()
                    row_q = M[q, :].copy()
                    M[p, :] = c * row_p - s * row_q
                    M[q, :] = s * row_p + c * row_q
                col_p = Q[:, p].copy()
                col_q = Q[:, q].copy()
                Q[:, p] = c * col_p - s * col_q
                Q[:, q] = s * col_p + c * col_q
    else:
        raise StructuralError("jacobi sweep limit reached without converging")
    eigs = np.diag(A).copy()
    order = np.argsort(-eigs)
    eigs = eigs[order]
    Q = Q[:, order]
    for k in range(d):
        if Q[np.argmax(np.abs(Q[:, k])), k] < 0:
            Q[:, k] = -Q[:, k]
    return OrthogonalBasis(Q=Q, eigenvalues=eigs)


class _TransformedSystem(TransitionSystem):
    """The base system conjugated into z = Q' s coordinates."""

    def __init__(self, base: TransitionSystem, Q: np.ndarray):
        super().__init__(base.dim, base.noise)
        self.base = base
        self.Q = Q

    def transform_state(self, s):
        return np.asarray(s, float) @ self.Q

    def untransform_state(self, z):
        return np.asarray(z, float) @ self.Q.T

    def _step_batch(self, ts, Z):
        return self.base.step_batch(ts, Z @ self.Q.T) @ self.Q

    def _jvp_batch(self, ts, Z, V):
        return self.base.jvp_batch(ts, Z @ self.Q.T, V @ self.Q.T) @ self.Q

    def relaxed_step_batch(self, ts, Z):
        return self.base.relaxed_step_batch(ts, Z @ self.Q.T) @ self.Q

    def relaxed_jvp_batch(self, ts, Z, V):
        return self.base.relaxed_jvp_batch(ts, Z @ self.Q.T, V @ self.Q.T) @ self.Q

    def dense_jacobian_batch(self, ts, Z):
        J = self.base.dense_jacobian_batch(ts, Z @ self.Q.T)
        return self.Q.T @ J @ self.Q


def transform_system(system: TransitionSystem, Q) -> TransitionSystem:
    """Rewrite a system in the orthogonal coordinates z = Q' s.

    The returned system steps z -> Q' f(Q z), so solving it from z0 = Q' s0
    and mapping each state back through Q reproduces the original trace
    exactly (orthogonal conjugation, no information lost).
    """
    Q = np.asarray(Q, float)
    d = system.dim
    if Q.shape != (d, d):
        raise StructuralError(f"Q must be {d}x{d} to match the system, got {Q.shape}")
    if np.max(np.abs(Q.T @ Q - np.eye(d))) > 1e-10:
        raise StructuralError("Q is not orthogonal")
    return _TransformedSystem(system, Q)
