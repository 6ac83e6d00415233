"""Named random sub-streams derived from a single run seed."""

import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for ``name`` (e.g. "init", "shuffle", "synth")."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
