"""Master-seed splitting.

One integer seed is expanded with ``numpy.random.SeedSequence(seed).spawn(4)``
into independent streams, in this order: parameter initialization,
zeroth-order perturbations, mini-batch shuffling, collocation sampling.
"""

import numpy as np

STREAMS = ("init", "perturb", "batch", "collocation")


def seed_streams(seed):
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}
