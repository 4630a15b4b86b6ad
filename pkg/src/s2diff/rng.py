"""Counter-based RNG substreams.

Every stochastic component draws from a Philox generator keyed by the master
seed plus integer tags identifying the consumer (phase, epoch, step, worker).
Substreams are independent of scheduling, so threaded and serial execution
produce bit-identical results.
"""

import numpy as np

# Stream tags: keep values distinct so (seed, tag, ...) tuples never collide.
CERT_INIT = 11
SAMPLE_INIT = 21
SAMPLE_STEP = 22
COLLECT = 31
INIT_STATES = 32
UPDATE = 33
EVAL_ROLLOUT = 41
VIOLATION = 42


def substream(*keys: int) -> np.random.Generator:
    """Return a generator keyed by the integer tuple `keys`."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(keys)))
