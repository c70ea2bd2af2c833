"""Deterministic random-stream derivation.

One master seed fans out into named, independent substreams so that
toggling or reordering one consumer (say, CA conflict lotteries) cannot
shift the draws seen by another (say, population spawning).  Streams are
derived with ``numpy.random.SeedSequence(entropy=seed, spawn_key=(k,))``,
which is stable across platforms and numpy versions.
"""
from __future__ import annotations

import numpy as np

# Stream name -> spawn key.  Append only; renumbering breaks reproducibility.
STREAM_KEYS = {
    "spawn_attrs": 0,   # agent attribute sampling
    "spawn_pos": 1,     # agent placement
    "reaction": 2,      # pre-movement delay draws
    "decisions": 3,     # replan lotteries and message delivery
    "ca_conflicts": 4,  # CA proposal noise and conflict lotteries
    "bodies": 5,        # social-force body radii
}


def substream(seed: int, name: str) -> np.random.Generator:
    key = STREAM_KEYS[name]
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(seq))


class RngStreams:
    """Lazy bundle of the named substreams for one master seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = substream(self.seed, name)
        return self._streams[name]

    @property
    def spawn_attrs(self) -> np.random.Generator:
        return self.get("spawn_attrs")

    @property
    def spawn_pos(self) -> np.random.Generator:
        return self.get("spawn_pos")

    @property
    def reaction(self) -> np.random.Generator:
        return self.get("reaction")

    @property
    def decisions(self) -> np.random.Generator:
        return self.get("decisions")

    @property
    def ca_conflicts(self) -> np.random.Generator:
        return self.get("ca_conflicts")

    @property
    def bodies(self) -> np.random.Generator:
        return self.get("bodies")
