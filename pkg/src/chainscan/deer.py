"""Newton fixed-point drivers for evaluating chains in parallel.

The chain s_t = f_t(s_{t-1}) is treated as a fixed-point problem: linearize
every step around the current guess, solve the resulting linear time-varying
recursion with a parallel scan, repeat until the iterates stop moving. Three
Jacobian carriers are supported (full matrices, stochastic diagonal
estimates, stochastic 2x2 block diagonals), with optional damping, entrywise
clipping, a diagonal preconditioner, and a sliding window that freezes
converged prefixes.

Damping and clipping modify the Jacobian only; the offset u_t is always
formed from the modified Jacobian as f_t(s) - J_hat s, so any fixed point of
the damped iteration is a fixed point of the original chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    JACOBIAN_MODES,
    ChainDivergedError,
    StructuralError,
    TransitionSystem,
)
from .noise import ConfigurationError, rademacher_probe
from .pscan import (
    Block2x2Elements,
    DenseElements,
    DiagElements,
    parallel_affine_solve,
)

__all__ = [
    "DeerConfig",
    "DeerResult",
    "default_max_iters",
    "converged",
    "hutchinson_diag",
    "deer_iterate",
    "run_deer",
]

# abort when delta_max exceeds its starting value by this factor
_DIVERGENCE_FACTOR = 1e6


def default_max_iters(T: int) -> int:
    return math.ceil(50 + 5 * T * 1e-4)


@dataclass
class DeerConfig:
    """Solver knobs; defaults favor exactness over speed."""

    mode: str = "dense"
    atol: float = 1e-4
    rtol: float = 1e-3
    max_iters: int | None = None
    hutchinson_samples: int = 1
    damping: float = 1.0
    clip: float = math.inf
    window_len: int | None = None
    full_trace: bool = False
    preconditioner: np.ndarray | None = None
    workers: int | None = None
    chunk: int | None = None

    def __post_init__(self):
        if self.mode not in JACOBIAN_MODES:
            raise ConfigurationError(
                f"unknown mode {self.mode!r}; expected one of {JACOBIAN_MODES}"
            )
        if self.atol <= 0 or self.rtol < 0:
            raise ConfigurationError("need atol > 0 and rtol >= 0")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")
        if self.hutchinson_samples < 1:
            raise ConfigurationError("hutchinson_samples must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigurationError("damping must lie in (0, 1]")
        if self.clip <= 0:
            raise ConfigurationError("clip must be positive")
        if self.window_len is not None and self.window_len < 1:
            raise ConfigurationError("window_len must be >= 1")
        if self.preconditioner is not None:
            p = np.asarray(self.preconditioner, float)
            if p.ndim != 1 or np.any(p <= 0):
                raise ConfigurationError("preconditioner must be a positive vector")
            self.preconditioner = p


@dataclass
class DeerResult:
    trace: np.ndarray
    iterations: int
    delta_history: np.ndarray
    converged: bool
    per_step_converged_at: np.ndarray
    full_trace: list[np.ndarray] | None = None
    stats: dict = field(default_factory=dict)


def converged(prev, next_, atol: float, rtol: float):
    """Elementwise |next - prev| <= atol + rtol * |next|; also returns delta_max."""
    prev = np.asarray(prev, float)
    next_ = np.asarray(next_, float)
    if prev.shape != next_.shape:
        raise StructuralError(f"shape mismatch: {prev.shape} vs {next_.shape}")
    diff = np.abs(next_ - prev)
    ok = diff <= atol + rtol * np.abs(next_)
    return bool(np.all(ok)), float(diff.max(initial=0.0))


def hutchinson_diag(jvp_batch, ts, S, n_samples: int, probe_seed: int, iteration: int):
    """Stochastic diagonal estimate: mean over probes of z * (J z).

    Each sample costs exactly one jvp evaluation per timestep. Probes are
    Rademacher vectors drawn deterministically from (seed, iteration, t,
    sample), so re-running an iteration reproduces the same estimate.
    """
    ts = np.asarray(ts)
    S = np.asarray(S, float)
    est = np.zeros_like(S)
    for k in range(n_samples):
        z = rademacher_probe(probe_seed, iteration, ts, k, S.shape[-1])
        est += z * jvp_batch(ts, S, z)
    est /= n_samples
    return est


def _check_finite(arr, what, ts, iteration):
    flat = np.asarray(arr).reshape(len(ts), -1)
    bad = ~np.all(np.isfinite(flat), axis=1)
    if np.any(bad):
        t = int(np.asarray(ts)[np.flatnonzero(bad)[0]])
        raise ChainDivergedError(
            f"non-finite {what} at step {t} (iteration {iteration + 1})",
            step=t,
            iteration=iteration + 1,
        )


def _iterate_range(system, ts, guess, s0_local, cfg, iteration, f=None):
    """One Newton update on the steps `ts`, seeded from s0_local.

    `f` may carry precomputed step values f_t(prev) to avoid a second
    forward pass when the driver already evaluated them.
    """
    prev = np.concatenate([s0_local[None], guess[:-1]], axis=0)
    if f is None:
        f = system.step_batch(ts, prev)
        _check_finite(f, "step value", ts, iteration)
    lam = cfg.damping
    clip = cfg.clip
    pre = cfg.preconditioner

    if cfg.mode == "dense":
        J = np.array(system.dense_jacobian_batch(ts, prev), float)
        _check_finite(J, "jacobian", ts, iteration)
        if pre is not None:
            J *= pre[None, None, :] / pre[None, :, None]
        J *= lam
        if np.isfinite(clip):
            np.clip(J, -clip, clip, out=J)
        u = f - np.einsum("tij,tj->ti", J, prev)
        elements = DenseElements(J, u)
    elif cfg.mode == "diag-stochastic":
        d = hutchinson_diag(
            system.jvp_batch, ts, prev, cfg.hutchinson_samples,
            system.noise.seed, iteration,
        )
        _check_finite(d, "jacobian diagonal", ts, iteration)
        if pre is not None:
            d = d * pre
        d *= lam
        if np.isfinite(clip):
            np.clip(d, -clip, clip, out=d)
        u = f - d * prev
        elements = DiagElements(d, u)
    else:
        a, b, c, dd = system.block_jacobian_batch(
            ts, prev, cfg.hutchinson_samples, iteration
        )
        a = np.array(a, float)
        b = np.array(b, float)
        c = np.array(c, float)
        dd = np.array(dd, float)
        _check_finite(np.concatenate([a, b, c, dd], axis=-1), "block jacobian", ts, iteration)
        half = a.shape[-1]
        if pre is not None:
            px, pv = pre[:half], pre[half:]
            b = b * (pv / px)
            c = c * (px / pv)
        a, b, c, dd = lam * a, lam * b, lam * c, lam * dd
        if np.isfinite(clip):
            for arr in (a, b, c, dd):
                np.clip(arr, -clip, clip, out=arr)
        xp, vp = prev[:, :half], prev[:, half:]
        u = f - np.concatenate([a * xp + b * vp, c * xp + dd * vp], axis=-1)
        elements = Block2x2Elements(a, b, c, dd, u)

    return parallel_affine_solve(
        elements, s0_local, workers=cfg.workers, chunk=cfg.chunk
    )


def deer_iterate(system: TransitionSystem, guess, s0, cfg: DeerConfig,
                 iteration: int = 0) -> np.ndarray:
    """One full-sequence Newton update from `guess`; the run_deer inner step."""
    guess = np.asarray(guess, float)
    s0 = np.asarray(s0, float)
    T = guess.shape[0]
    ts = np.arange(1, T + 1)
    return _iterate_range(system, ts, guess, s0, cfg, iteration)


def _guard(dmax, d0, iteration):
    if d0 > 0 and dmax > _DIVERGENCE_FACTOR * d0:
        raise ChainDivergedError(
            f"fixed-point iteration diverging: delta_max {dmax:.3e} exceeds "
            f"{_DIVERGENCE_FACTOR:.0e} x initial {d0:.3e}",
            iteration=iteration,
        )


def run_deer(system: TransitionSystem, s0, cfg: DeerConfig) -> DeerResult:
    """Drive Newton iterations to convergence (or max_iters).

    The initial guess sets every state to s0. Convergence is the elementwise
    atol/rtol test between successive iterates. Each pass first evaluates the
    step values f_t(guess_{t-1}) it needs anyway and tests the guess against
    them (a Picard iterate, the zero-Jacobian member of the update family):
    if the guess is already a fixed point to tolerance, the run stops without
    spending a counted Newton iteration, so `iterations` is exactly the
    number of Jacobian-bearing updates applied. per_step_converged_at[t]
    records 1 + the last counted iteration at which step t still failed the
    test. With window_len set, updates run on a sliding window that advances
    past converged steps, freezing everything before the window.
    """
    s0 = np.ascontiguousarray(s0, float)
    if s0.shape != (system.dim,):
        raise StructuralError(f"s0 must have shape ({system.dim},), got {s0.shape}")
    T = system.T
    max_iters = cfg.max_iters if cfg.max_iters is not None else default_max_iters(T)
    atol, rtol = cfg.atol, cfg.rtol

    guess = np.tile(s0, (T, 1))
    history: list[float] = []
    full: list[np.ndarray] | None = [] if cfg.full_trace else None
    last_fail = np.zeros(T, dtype=int)
    d0 = None
    done = False
    iterations = 0

    if cfg.window_len is None or cfg.window_len >= T:
        ts = np.arange(1, T + 1)
        while True:
            prev = np.concatenate([s0[None], guess[:-1]], axis=0)
            f = system.step_batch(ts, prev)
            _check_finite(f, "step value", ts, iterations)
            ok, _ = converged(guess, f, atol, rtol)
            if ok:
                done = True
                break
            if iterations >= max_iters:
                break
            nxt = _iterate_range(system, ts, guess, s0, cfg, iterations, f=f)
            iterations += 1
            diff = np.abs(nxt - guess)
            fail = np.any(diff > atol + rtol * np.abs(nxt), axis=1)
            dmax = float(diff.max(initial=0.0))
            history.append(dmax)
            last_fail[fail] = iterations
            if full is not None:
                full.append(nxt)
            guess = nxt
            if d0 is None:
                d0 = dmax
            _guard(dmax, d0, iterations)
            if not np.any(fail):
                done = True
                break
    else:
        win = cfg.window_len
        w = 0
        while w < T:
            lo, hi = w, min(w + win, T)
            ts = np.arange(lo + 1, hi + 1)
            seed_state = s0 if lo == 0 else guess[lo - 1]
            prev = np.concatenate([seed_state[None], guess[lo : hi - 1]], axis=0)
            f = system.step_batch(ts, prev)
            _check_finite(f, "step value", ts, iterations)
            ok, _ = converged(guess[lo:hi], f, atol, rtol)
            if ok:
                w = hi
                continue
            if iterations >= max_iters:
                break
            nxt = _iterate_range(
                system, ts, guess[lo:hi], seed_state, cfg, iterations, f=f
            )
            iterations += 1
            diff = np.abs(nxt - guess[lo:hi])
            fail = np.any(diff > atol + rtol * np.abs(nxt), axis=1)
            dmax = float(diff.max(initial=0.0))
            history.append(dmax)
            last_fail[lo:hi][fail] = iterations
            guess[lo:hi] = nxt
            if full is not None:
                full.append(guess.copy())
            if d0 is None:
                d0 = dmax
            _guard(dmax, d0, iterations)
            w = lo + int(np.argmax(fail)) if np.any(fail) else hi
        done = w >= T

    return DeerResult(
        trace=guess,
        iterations=iterations,
        delta_history=np.array(history),
        converged=done,
        per_step_converged_at=last_fail + 1,
        full_trace=full,
    )
