"""Counter-based random streams.

Every random draw in a run is keyed by a tuple of integers (run seed, domain
tag, learner id, round, ...). Streams never share state, so results do not
depend on the order in which learners or rollouts are scheduled.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep training, evaluation and initialization draws disjoint.
TRAIN_ENVS = 1
EVAL_ENVS = 2
LEARNER_ROUND = 3
THETA_INIT = 4
SYNTHETIC = 5
VERIFY = 6
TRAIN_STARTS = 7
SWEEP = 8


def stream(*key: int) -> np.random.Generator:
    """Return an independent generator for the integer key ``key``."""
    if not key:
        raise ValueError("stream key must contain at least one integer")
    for part in key:
        if int(part) < 0:
            raise ValueError(f"stream key parts must be non-negative, got {key!r}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(p) for p in key])))
