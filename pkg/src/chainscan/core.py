"""Domain types, the transition-system abstraction, and the sequential oracle.

A chain is s_t = f_t(s_{t-1}) for t = 1..T with state dimension D. State
sequences are plain float64 arrays of shape (T, D), time-major, so per-step
vectors are contiguous for the scan. ``sequential_evaluate`` is the ground
truth every parallel solver is tested against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .noise import ConfigurationError, NoiseTable

__all__ = [
    "ChainDivergedError",
    "ConfigurationError",
    "StructuralError",
    "TargetModel",
    "TransitionSystem",
    "sequential_evaluate",
]

JACOBIAN_MODES = ("dense", "diag-stochastic", "block2x2-stochastic")


class StructuralError(ValueError):
    """Shape or variant mismatch between values that must agree."""


class ChainDivergedError(RuntimeError):
    """A solver or sampler produced a non-finite state.

    Carries the chain step (``step``) and, for iterative solvers, the
    iteration index (``iteration``) where divergence was detected.
    """

    def __init__(self, message, step=None, iteration=None):
        super().__init__(message)
        self.step = step
        self.iteration = iteration


@dataclass(frozen=True)
class TargetModel:
    """A log-density with analytic gradient and Hessian-vector product.

    All three callables are vectorized over a leading batch axis: logp maps
    (..., D) -> (...,); grad and hvp map (..., D) -> (..., D).
    """

    dim: int
    logp: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hvp: Callable[[np.ndarray, np.ndarray], np.ndarray]


class TransitionSystem:
    """The nonlinear map f_t plus the Jacobian access a parallel solver needs.

    Subclasses implement the batched methods (`_step_batch` and friends),
    which evaluate many timesteps at once; the scalar ``step``/``jvp`` wrappers
    are singleton batches and therefore follow the identical code path. The
    public wrappers also count per-timestep evaluations, which the test suite
    uses to verify work bounds (e.g. one jvp per timestep per Hutchinson
    sample).

    Batch convention: ``ts`` is an int array of chain step indices (1-based),
    row i of ``S`` is the input state s_{ts[i]-1}, and row i of the result is
    f_{ts[i]} applied to it.
    """

    dim: int
    jacobian_mode: str = "dense"
    noise: NoiseTable | None = None

    def __init__(self, dim: int, noise: NoiseTable | None = None):
        self.dim = int(dim)
        self.noise = noise
        self.n_step_evals = 0
        self.n_jvp_evals = 0
        self.n_hvp_evals = 0

    @property
    def T(self) -> int:
        if self.noise is None:
            raise ConfigurationError("system has no noise table, pass T explicitly")
        return self.noise.T

    def reset_counters(self):
        self.n_step_evals = 0
        self.n_jvp_evals = 0
        self.n_hvp_evals = 0

    # -- forward map ----------------------------------------------------

    def step(self, t: int, s: np.ndarray) -> np.ndarray:
        """s_t = f_t(s_{t-1})."""
        return self.step_batch(np.array([t]), np.asarray(s, float)[None, :])[0]

    def step_batch(self, ts, S) -> np.ndarray:
        ts = np.asarray(ts)
        self.n_step_evals += len(ts)
        return self._step_batch(ts, np.asarray(S, float))

    # -- Jacobian access -------------------------------------------------

    def jvp(self, t: int, s: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Directional derivative J_t v at s_{t-1} (solver form)."""
        return self.jvp_batch(
            np.array([t]), np.asarray(s, float)[None, :], np.asarray(v, float)[None, :]
        )[0]

    def jvp_batch(self, ts, S, V) -> np.ndarray:
        ts = np.asarray(ts)
        self.n_jvp_evals += len(ts)
        return self._jvp_batch(ts, np.asarray(S, float), np.asarray(V, float))

    def dense_jacobian(self, t: int, s: np.ndarray) -> np.ndarray:
        return self.dense_jacobian_batch(np.array([t]), np.asarray(s, float)[None, :])[0]

    def dense_jacobian_batch(self, ts, S) -> np.ndarray:
        """(n, D, D) Jacobians, assembled column-by-column from jvp calls."""
        ts = np.asarray(ts)
        S = np.asarray(S, float)
        n, D = S.shape
        J = np.empty((n, D, D))
        eye = np.eye(D)
        for d in range(D):
            J[:, :, d] = self.jvp_batch(ts, S, np.broadcast_to(eye[d], (n, D)))
        return J

    def block_jacobian_batch(self, ts, S, n_samples: int, iteration: int):
        raise ConfigurationError(
            f"{type(self).__name__} does not provide a block2x2 Jacobian estimate"
        )

    # -- differentiable relaxation (for finite-difference testing) -------

    def relaxed_step_batch(self, ts, S) -> np.ndarray:
        """Forward map with any accept gates relaxed to sigmoids.

        Smooth systems are their own relaxation; gated kernels override.
        """
        return self._step_batch(np.asarray(ts), np.asarray(S, float))

    def relaxed_jvp_batch(self, ts, S, V) -> np.ndarray:
        """Exact derivative of relaxed_step_batch (defaults to the solver jvp)."""
        return self._jvp_batch(np.asarray(ts), np.asarray(S, float), np.asarray(V, float))

    # -- subclass API ------------------------------------------------------

    def _step_batch(self, ts, S) -> np.ndarray:
        raise NotImplementedError

    def _jvp_batch(self, ts, S, V) -> np.ndarray:
        raise NotImplementedError


def sequential_evaluate(system: TransitionSystem, s0, T: int | None = None) -> np.ndarray:
    """Evaluate the chain in order: the ground-truth oracle.

    Returns the (T, D) state sequence s_1..s_T. Raises ChainDivergedError
    naming the offending step if any state goes non-finite.
    """
    s0 = np.asarray(s0, float)
    if s0.ndim != 1 or s0.shape[0] != system.dim:
        raise StructuralError(f"s0 must be length {system.dim}, got shape {s0.shape}")
    if T is None:
        T = system.T
    out = np.empty((T, system.dim))
    s = s0
    for t in range(1, T + 1):
        s = system.step(t, s)
        if not np.all(np.isfinite(s)):
            bad = int(np.flatnonzero(~np.isfinite(s))[0])
            raise ChainDivergedError(
                f"non-finite state at step {t} (component {bad})", step=t
            )
        out[t - 1] = s
    return out
