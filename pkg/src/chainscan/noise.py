"""Deterministic counter-based randomness.

Every random value consumed by a sampler is a pure function of
``(seed, t, slot, k)``: the same coordinates always produce the bit-identical
value, no matter which thread asks or in what order. This is what lets a
parallel solver and the plain sequential sampler consume *the same* noise, so
the sequential trace is a genuine fixed point of the parallel iteration.

The mixing core is a splitmix64-style avalanche chain applied to the counter
words. Normals come from two counter uniforms via Box-Muller; chi-squared
draws (fixed degrees of freedom per slot) invert the Gamma(df/2, 2) CDF with
``scipy.special.gammaincinv``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincinv

__all__ = [
    "SlotSpec",
    "NoiseTable",
    "ConfigurationError",
    "rademacher_probe",
]


class ConfigurationError(ValueError):
    """A slot/layout request that the table was not declared with."""


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
# Counter namespace for Hutchinson probes (see rademacher_probe).
_PROBE_SALT = np.uint64(0xA5B35705)


def _fnv1a(name: str) -> np.uint64:
    """Stable 64-bit id for a slot name (Python's hash() is salted per run)."""
    h = np.uint64(0xCBF29CE484222325)
    with np.errstate(over="ignore"):
        for byte in name.encode("utf-8"):
            h = (h ^ np.uint64(byte)) * np.uint64(0x100000001B3)
    return h


def _mix(h):
    # splitmix64 finalizer; full-avalanche on uint64 arrays
    h = h ^ (h >> np.uint64(30))
    h = h * _M1
    h = h ^ (h >> np.uint64(27))
    h = h * _M2
    h = h ^ (h >> np.uint64(31))
    return h


def _counter_hash(seed, word_a, word_b, word_c):
    """Hash (seed, a, b, c) -> uint64, arrays broadcast over the words."""
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed) + _GOLDEN)
        h = _mix(h ^ (np.asarray(word_a, dtype=np.uint64) + _GOLDEN))
        h = _mix(h ^ (np.asarray(word_b, dtype=np.uint64) + _GOLDEN))
        h = _mix(h ^ (np.asarray(word_c, dtype=np.uint64) + _GOLDEN))
    return h


def _to_unit(bits):
    # strictly inside (0,1): ((x >> 11) + 0.5) * 2^-53
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def _uniforms(seed, slot_id, ts, counters):
    """Uniforms in (0,1) for every (t, counter) pair; shape ts x counters."""
    t_word = np.asarray(ts, dtype=np.uint64)[:, None]
    c_word = np.asarray(counters, dtype=np.uint64)[None, :]
    bits = _counter_hash(seed, slot_id, t_word, c_word)
    return _to_unit(bits)


@dataclass(frozen=True)
class SlotSpec:
    """Declaration of one noise slot: how many values per step, and their law.

    kind is one of "standard-normal", "uniform-0-1", "chi-squared"; chi-squared
    slots carry their (fixed, possibly fractional) degrees of freedom in df.
    """

    count: int
    kind: str
    df: float | None = None

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError(f"slot count must be >= 1, got {self.count}")
        if self.kind not in ("standard-normal", "uniform-0-1", "chi-squared"):
            raise ConfigurationError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "chi-squared":
            if self.df is None or self.df <= 0:
                raise ConfigurationError("chi-squared slot needs df > 0")
        elif self.df is not None:
            raise ConfigurationError("df only applies to chi-squared slots")


class NoiseTable:
    """Seed-addressable input randomness shared by sequential and parallel runs.

    The table covers step indices t in [0, T]; by convention chain step t
    (1-based) reads its noise at index t, and index 0 is reserved for
    initialization draws. All access is pure and thread-safe.
    """

    def __init__(self, seed: int, layout: dict[str, SlotSpec], T: int):
        if T < 1:
            raise ConfigurationError(f"T must be >= 1, got {T}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.layout = dict(layout)
        self.T = int(T)
        self._slot_ids = {name: _fnv1a(name) for name in self.layout}

    def _spec(self, slot: str) -> SlotSpec:
        try:
            return self.layout[slot]
        except KeyError:
            raise ConfigurationError(
                f"slot {slot!r} not declared; have {sorted(self.layout)}"
            ) from None

    def noise_at(self, t: int, slot: str, k: int) -> float:
        """Single value of the slot's distribution at (t, k). Pure."""
        spec = self._spec(slot)
        if not 0 <= k < spec.count:
            raise IndexError(f"k={k} out of range for slot {slot!r} (count {spec.count})")
        if not 0 <= t <= self.T:
            raise IndexError(f"t={t} outside [0, {self.T}]")
        return float(self.block(slot, np.array([t]))[0, k])

    def block(self, slot: str, ts) -> np.ndarray:
        """Values for a range of steps, shape (len(ts), count). Vectorized."""
        spec = self._spec(slot)
        ts = np.asarray(ts)
        slot_id = self._slot_ids[slot]
        if spec.kind == "uniform-0-1":
            counters = np.arange(spec.count) * 2
            return _uniforms(self.seed, slot_id, ts, counters)
        if spec.kind == "standard-normal":
            # Box-Muller from two counter uniforms per value
            u1 = _uniforms(self.seed, slot_id, ts, np.arange(spec.count) * 2)
            u2 = _uniforms(self.seed, slot_id, ts, np.arange(spec.count) * 2 + 1)
            return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        # chi-squared(df) = 2 * Gamma(df/2, scale 1) via the regularized
        # incomplete-gamma inverse (numerical inverse CDF)
        u = _uniforms(self.seed, slot_id, ts, np.arange(spec.count) * 2)
        return 2.0 * gammaincinv(spec.df / 2.0, u)


def rademacher_probe(seed: int, iteration: int, ts, sample: int, dim: int) -> np.ndarray:
    """Deterministic +-1 probe vectors for stochastic diagonal estimation.

    Lives in its own counter namespace keyed by (seed, iteration, t, sample, d)
    so probes are redrawn fresh each solver iteration without colliding with
    any declared slot. Returns shape (len(ts), dim).
    """
    ts = np.asarray(ts, dtype=np.uint64)[:, None]
    with np.errstate(over="ignore"):
        word_a = _PROBE_SALT + np.uint64(iteration)
        word_c = (np.uint64(sample) << np.uint64(32)) + np.arange(dim, dtype=np.uint64)[None, :]
        bits = _counter_hash(seed, word_a, ts, word_c)
    return np.where((bits >> np.uint64(63)).astype(bool), 1.0, -1.0)
