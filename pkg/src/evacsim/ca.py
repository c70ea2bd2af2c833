"""Grid-stepping backend: synchronous movement on the occupancy lattice.

Each mover examines its own cell plus the eight neighbours, scores
every admissible candidate by the chosen exit's distance field plus a
small uniform noise, and proposes the minimum.  Conflicting proposals
for one cell are settled by a single uniform lottery draw; losers stay
put.  All moves apply at a barrier, so the update is synchronous and
order-free.

Different walking speeds live on the fixed lattice by step skipping: a
slow agent simply sits out a fraction of the ticks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import Geometry

# Candidate order for one move: stay first, then the 8-neighbourhood in
# reading order.  Ties on equal score resolve to the earliest candidate,
# so this order is part of the movement rule, not an implementation
# accident.
CANDIDATE_STEPS = (
    (0, 0),
    (-1, -1), (0, -1), (1, -1),
    (-1, 0), (1, 0),
    (-1, 1), (0, 1), (1, 1),
)

EMPTY_CELL = -1


@dataclass
class CaState:
    """Occupancy lattice plus per-agent cell coordinates."""

    occupancy: np.ndarray                    # (H, W) int32, agent id or EMPTY_CELL
    x: np.ndarray                            # (N,) int32 cell coords per agent id
    y: np.ndarray
    present: np.ndarray                      # (N,) bool, agent physically on the grid
    tick: int = 0
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def from_cells(cls, geometry: Geometry, cells: list[tuple[int, int]]) -> "CaState":
        occupancy = np.full((geometry.height, geometry.width), EMPTY_CELL, dtype=np.int32)
        n = len(cells)
        xs = np.zeros(n, dtype=np.int32)
        ys = np.zeros(n, dtype=np.int32)
        for agent_id, (cx, cy) in enumerate(cells):
            if occupancy[cy, cx] != EMPTY_CELL:
                raise AssertionError(f"two agents spawned into cell {(cx, cy)}")
            occupancy[cy, cx] = agent_id
            xs[agent_id] = cx
            ys[agent_id] = cy
        return cls(occupancy=occupancy, x=xs, y=ys, present=np.ones(n, dtype=bool))

    def vacate(self, agent_id: int) -> None:
        """Remove one agent from the lattice (exit or death frees the cell)."""
        if self.present[agent_id]:
            self.occupancy[self.y[agent_id], self.x[agent_id]] = EMPTY_CELL
            self.present[agent_id] = False

    def check_bijection(self) -> None:
        ys, xs = np.nonzero(self.occupancy != EMPTY_CELL)
        ids = self.occupancy[ys, xs]
        if len(ids) != int(self.present.sum()):
            raise AssertionError("occupancy cell count != present agent count")
        if len(np.unique(ids)) != len(ids):
            raise AssertionError("one agent occupies two cells")
        idx = np.nonzero(self.present)[0]
        if not (self.occupancy[self.y[idx], self.x[idx]] == idx).all():
            raise AssertionError("agent coordinate map disagrees with the lattice")


def speed_ticks(v_eff: float, v_grid: float) -> int:
    """Number of lattice ticks per single-cell move for a walking speed.

    The lattice moves one cell per tick at most (v_grid = cell/dt), so a
    speed of v_grid/2 becomes one move every 2 ticks.  Speeds above the
    lattice rate saturate at one move per tick.
    """
    if v_eff <= 0:
        return 0
    k = int(np.floor(v_grid / v_eff + 0.5))
    return max(1, k)


def ca_step(
    state: CaState,
    geometry: Geometry,
    fields: np.ndarray,
    field_index: np.ndarray,
    move_ids: np.ndarray,
    rng: np.random.Generator,
    noise: float,
) -> np.ndarray:
    """Advance the lattice one synchronous step.

    ``fields`` is a stack of distance fields (cells); ``field_index[i]``
    picks the stack layer agent i descends.  ``move_ids`` lists, in
    ascending order, the ids attempting a move this tick (already
    filtered for status, mobility and step skipping).  Returns the ids
    that actually changed cell.
    """
    n = len(move_ids)
    if n == 0:
        state.tick += 1
        state.check_bijection()
        return move_ids

    h, w = state.occupancy.shape
    ax = state.x[move_ids].astype(np.int64)
    ay = state.y[move_ids].astype(np.int64)

    steps = np.array(CANDIDATE_STEPS, dtype=np.int64)
    cx = ax[:, None] + steps[None, :, 0]     # (n, 9)
    cy = ay[:, None] + steps[None, :, 1]

    in_bounds = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    cxc = np.clip(cx, 0, w - 1)
    cyc = np.clip(cy, 0, h - 1)

    open_mask = geometry.open_mask
    admissible = in_bounds & open_mask[cyc, cxc]
    free = state.occupancy[cyc, cxc] == EMPTY_CELL
    admissible[:, 1:] &= free[:, 1:]         # staying on one's own cell is always allowed

    # diagonal moves may not cut past a blocked corner
    for col, (dx, dy) in enumerate(CANDIDATE_STEPS):
        if dx and dy:
            ox = np.clip(ax + dx, 0, w - 1)
            oy = np.clip(ay + dy, 0, h - 1)
            admissible[:, col] &= open_mask[ay, ox] & open_mask[oy, ax]

    layer = field_index[move_ids]
    cost = fields[layer[:, None], cyc, cxc]
    cost = cost + noise * rng.random((n, 9))
    cost = np.where(admissible, cost, np.inf)
    cost[:, 0] = np.where(np.isfinite(cost[:, 0]), cost[:, 0], 1e30)  # stay beats nothing at all

    pick = np.argmin(cost, axis=1)
    moves = pick != 0
    movers = np.nonzero(moves)[0]
    if len(movers) == 0:
        state.tick += 1
        state.check_bijection()
        return move_ids[:0]

    tx = cx[movers, pick[movers]]
    ty = cy[movers, pick[movers]]
    flat = ty * w + tx

    # conflict lottery: one uniform draw per contested cell, contenders
    # ordered by ascending agent id (move_ids is ascending already)
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    boundaries = np.nonzero(np.diff(flat_sorted))[0] + 1
    groups = np.split(order, boundaries)
    winners = []
    for group in groups:
        if len(group) == 1:
            winners.append(group[0])
        else:
            u = rng.random()
            winners.append(group[min(int(u * len(group)), len(group) - 1)])
    winners = np.array(winners, dtype=np.int64)

    win_rows = movers[winners]
    ids = move_ids[win_rows]
    old_x = state.x[ids].copy()
    old_y = state.y[ids].copy()
    new_x = cx[win_rows, pick[win_rows]].astype(np.int32)
    new_y = cy[win_rows, pick[win_rows]].astype(np.int32)

    state.occupancy[old_y, old_x] = EMPTY_CELL
    state.occupancy[new_y, new_x] = ids
    state.x[ids] = new_x
    state.y[ids] = new_y

    state.tick += 1
    state.check_bijection()
    return ids
