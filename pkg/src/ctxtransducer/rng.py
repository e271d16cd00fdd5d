"""Named random substreams.

Every random draw in the package comes from ``substream(seed, name, ...)``
so one integer seed fixes a run.  Data seeds and training seeds are separate
config fields, so the two tables may reuse tags.
"""

from __future__ import annotations

import numpy as np

# data: synthetic geometry and per-session draws (SynthConfig.seed)
# training: parameter init and batch shuffling (TrainConfig.seed)
STREAMS = {
    "acoustics": 0,
    "sessions": 1,
    "init": 1,
    "shuffle": 2,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    try:
        tag = STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown random substream {name!r}; known: {sorted(STREAMS)}") from None
    return np.random.default_rng([int(seed), tag, *(int(e) for e in extra)])
