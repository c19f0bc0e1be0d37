"""chainscan: parallel-in-time evaluation of MCMC chains.

Treats a Markov chain s_t = f_t(s_{t-1}) as a fixed-point problem and solves
all T steps at once with Newton / quasi-Newton iterations, each of which is a
time-varying affine recursion solved by a parallel prefix scan. The converged
trace matches the ordinary sequential sampler step for step, to tolerance,
because both consume the same counter-based input randomness.
"""

import os

# default the numba threading layer to the dependency-free backend; users can
# still override with their own NUMBA_THREADING_LAYER
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from . import (  # noqa: E402,F401
    cli,
    core,
    deer,
    metrics,
    noise,
    pscan,
    report,
    samplers,
    targets,
    tracefile,
)

__version__ = "0.1.0"
