"""Named, independent random streams derived from a master seed."""

import zlib

import numpy as np


def stream(seed, tag, *extra):
    """Return a Generator keyed on (seed, tag, *extra).

    Streams for different tags are statistically independent, so changing how
    many draws one stage makes never perturbs another stage.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(str(tag).encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
