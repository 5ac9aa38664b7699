"""Keyed random streams.

Every stream is derived from the experiment seed plus a tuple of integer
keys, so any (client, round) stream can be rebuilt independently of the order
in which other streams were used.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Purpose tags keep streams for different jobs disjoint.
LAYER = 1
CLIENT = 2
SELECT = 3
EVAL = 4
INIT = 5
DATA = 6
PARTITION = 7


def stream(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & _MASK64] + [int(k) & _MASK64 for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def layer_stream(seed: int, layer_index: int) -> np.random.Generator:
    return stream(seed, LAYER, layer_index)


def client_stream(seed: int, client_id: int, round_index: int) -> np.random.Generator:
    return stream(seed, CLIENT, client_id, round_index)
