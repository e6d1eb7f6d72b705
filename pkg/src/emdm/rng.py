"""Named, splittable random streams.

Every source of randomness in the package is a PCG64 generator derived from
a root seed plus a tuple of integer tags, so any intermediate artifact
(pilot matrix, noise draw, sampler trajectory, dataset sample) can be
re-created in isolation from the seeds recorded next to it.
"""

import numpy as np

# stream tags; values are part of the reproducibility contract
PILOT = 1
NOISE = 2
SAMPLER = 3
SAMPLE = 4          # per-channel-sample generation stream
SHUFFLE = 5
LOSS = 6
PARAM_INIT = 7
ROW = 8
CHAIN = 9
SAMPLER_INIT = 10
SAMPLER_Z = 11
SAMPLER_U = 12

_U63 = (1 << 63) - 1


def seed_sequence(root_seed, *tags):
    """SeedSequence for (root_seed, *tags); tags must be non-negative ints."""
    entropy = (int(root_seed) & _U63,) + tuple(int(t) & _U63 for t in tags)
    return np.random.SeedSequence(entropy)


def derive_rng(root_seed, *tags):
    """Independent Generator for the named stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, *tags)))


def derive_seed(root_seed, *tags):
    """Deterministic 63-bit integer seed for the named stream."""
    state = seed_sequence(root_seed, *tags).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & _U63
