"""Counter-based seed derivation.

Every stochastic subsystem (data sampling, weight init, reparameterization
noise, splits) draws its generator from the single root seed plus a label
path, so adding or reordering unrelated config keys never shifts the
randomness of another subsystem.
"""

import zlib

import numpy as np


def child_seed(root_seed, *labels):
    """Stable 63-bit seed for ``labels`` under ``root_seed``.

    Labels may be strings or ints; they are hashed independently so
    ("train", 3) and ("train3",) do not collide by construction of the
    spawn key.
    """
    key = tuple(zlib.crc32(str(lbl).encode("utf-8")) for lbl in labels)
    ss = np.random.SeedSequence(int(root_seed), spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def numpy_rng(root_seed, *labels):
    return np.random.default_rng(child_seed(root_seed, *labels))


def torch_generator(root_seed, *labels):
    import torch

    gen = torch.Generator()
    gen.manual_seed(child_seed(root_seed, *labels))
    return gen
