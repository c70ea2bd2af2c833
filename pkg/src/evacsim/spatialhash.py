"""Uniform spatial hash for neighbour queries on point sets.

Positions are binned into square buckets of a fixed size; pair queries
scan each occupied bucket against its forward half-neighbourhood so
every unordered pair is produced exactly once.  All outputs are sorted,
which keeps downstream float accumulation order deterministic.
"""
from __future__ import annotations

import numpy as np

# forward half of the 3x3 bucket neighbourhood (self handled separately)
_FORWARD = ((1, 0), (-1, 1), (0, 1), (1, 1))


def _ragged_ranges(owners: np.ndarray, starts: np.ndarray, counts: np.ndarray):
    """Expand per-owner slices into flat (owner, member) index pairs.

    For each k, emits (owners[k], starts[k] + 0..counts[k]-1).
    """
    counts = np.maximum(counts, 0)
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    reps = np.repeat(np.arange(len(counts)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return owners[reps], starts[reps] + offsets


class SpatialHash:
    def __init__(self, positions: np.ndarray, cell: float, ids: np.ndarray | None = None):
        """``positions``: (N, 2) metres.  ``ids``: labels returned by queries
        (defaults to row indices)."""
        self.positions = np.asarray(positions, dtype=np.float64)
        self.cell = float(cell)
        n = len(self.positions)
        self.ids = np.arange(n) if ids is None else np.asarray(ids)
        if n:
            keys = np.floor(self.positions / self.cell).astype(np.int64)
            self._min = keys.min(axis=0)
            span = keys.max(axis=0) - self._min + 1
            self._nx = int(span[0])
            flat = (keys[:, 0] - self._min[0]) + self._nx * (keys[:, 1] - self._min[1])
            self._order = np.argsort(flat, kind="stable")
            self._sorted_keys = flat[self._order]
            self._uniq, self._starts = np.unique(self._sorted_keys, return_index=True)
            self._ends = np.append(self._starts[1:], n)
        else:
            self._uniq = np.zeros(0, dtype=np.int64)

    def _bucket_rows(self, flat_key: int) -> np.ndarray:
        idx = np.searchsorted(self._uniq, flat_key)
        if idx >= len(self._uniq) or self._uniq[idx] != flat_key:
            return np.zeros(0, dtype=np.int64)
        return self._order[self._starts[idx]:self._ends[idx]]

    def query_pairs(self, radius: float) -> tuple[np.ndarray, np.ndarray]:
        """All unordered index pairs (i < j by row) within ``radius``."""
        n = len(self.positions)
        if n < 2:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        if radius > self.cell:
            # bucket size must cover the radius; rebuild if not
            return SpatialHash(self.positions, radius, self.ids)._raw_pairs(radius)
        return self._raw_pairs(radius)

    def _raw_pairs(self, radius: float) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.positions)
        order = self._order
        keys = self._sorted_keys
        pos_in_bucket = np.arange(n)
        bucket_idx = np.searchsorted(self._uniq, keys)
        bucket_end = self._ends[bucket_idx]
        kx = keys % self._nx

        lhs: list[np.ndarray] = []
        rhs: list[np.ndarray] = []

        # within-bucket: each point pairs with the later points of its bucket
        counts = bucket_end - pos_in_bucket - 1
        pair_l, pair_r = _ragged_ranges(pos_in_bucket, pos_in_bucket + 1, counts)
        lhs.append(pair_l)
        rhs.append(pair_r)

        # forward half-neighbourhood: each point against whole buckets
        for dx, dy in _FORWARD:
            nkx = kx + dx
            valid = (nkx >= 0) & (nkx < self._nx)
            nkey = keys + dx + self._nx * dy
            hit = np.searchsorted(self._uniq, nkey)
            hit_ok = valid & (hit < len(self._uniq))
            hit_safe = np.minimum(hit, len(self._uniq) - 1)
            hit_ok &= self._uniq[hit_safe] == nkey
            starts = np.where(hit_ok, self._starts[hit_safe], 0)
            counts = np.where(hit_ok, self._ends[hit_safe] - starts, 0)
            pair_l, pair_r = _ragged_ranges(pos_in_bucket, starts, counts)
            lhs.append(pair_l)
            rhs.append(pair_r)

        i = order[np.concatenate(lhs)]
        j = order[np.concatenate(rhs)]
        if len(i) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        d = self.positions[i] - self.positions[j]
        keep = (d[:, 0] ** 2 + d[:, 1] ** 2) <= radius * radius
        i, j = i[keep], j[keep]
        swap = i > j
        i2 = np.where(swap, j, i)
        j2 = np.where(swap, i, j)
        order2 = np.lexsort((j2, i2))
        return i2[order2], j2[order2]

    def query_radius(self, point: np.ndarray, radius: float) -> np.ndarray:
        """Row indices within ``radius`` of ``point``, ascending."""
        if len(self.positions) == 0:
            return np.zeros(0, dtype=np.int64)
        if radius > self.cell:
            return SpatialHash(self.positions, radius, self.ids).query_radius(point, radius)
        point = np.asarray(point, dtype=np.float64)
        k = np.floor(point / self.cell).astype(np.int64) - self._min
        found: list[np.ndarray] = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                kx, ky = int(k[0]) + dx, int(k[1]) + dy
                if kx < 0 or kx >= self._nx:
                    continue
                rows = self._bucket_rows(kx + self._nx * ky)
                if len(rows):
                    found.append(rows)
        if not found:
            return np.zeros(0, dtype=np.int64)
        rows = np.concatenate(found)
        d = self.positions[rows] - point
        rows = rows[(d[:, 0] ** 2 + d[:, 1] ** 2) <= radius * radius]
        return np.sort(rows)
