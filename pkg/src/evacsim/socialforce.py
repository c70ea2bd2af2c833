"""Continuous backend: bodies driven by goal attraction, interpersonal
repulsion and physical contact.

Force terms per body: a driving term relaxing velocity toward the
desired speed along the waypoint direction, an exponential
psychological repulsion from nearby bodies, and -- once bodies touch --
normal compression plus tangential sliding friction.  Walls act through
the same three terms, computed against the nearest point of each
exposed wall cell.  This combination is what produces arch formation
and the faster-is-slower effect at doorways.

Integration is semi-implicit Euler with a speed clamp and a positional
backstop that keeps body centres out of wall cells even when contact
forces spike.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PARAM_DEFAULTS
from .errors import SimulationError
from .scenario import Geometry
from .spatialhash import SpatialHash

MAX_DT = 0.05  # s; contact stiffness makes larger steps unstable

# Jacobi sweeps for the sliding-friction impulse pass.  Each sweep damps
# every touching contact's relative tangential velocity by the implicit
# viscous factor split across that body's contacts; a handful of sweeps
# recovers near-full friction even for bodies wedged against 6+ others.
FRICTION_SWEEPS = 8

# extra search margin (m) on the neighbour list; the list stays valid
# until some body has moved half this far, so slow, packed crowds reuse
# one enumeration for many steps without missing a single pair
NEIGHBOR_SKIN = 0.4

# chunk size bound for the dense agent x wall-cell distance pass
_WALL_CHUNK = 4_000_000


def _scatter_add(out: np.ndarray, idx: np.ndarray, vec: np.ndarray) -> None:
    """out[idx] += vec with repeated indices accumulated (bincount form)."""
    n = len(out)
    out[:, 0] += np.bincount(idx, weights=vec[:, 0], minlength=n)
    out[:, 1] += np.bincount(idx, weights=vec[:, 1], minlength=n)


@dataclass
class SfState:
    """Positions, velocities and body parameters, indexed by agent id."""

    pos: np.ndarray                        # (N, 2) m
    vel: np.ndarray                        # (N, 2) m/s
    radius: np.ndarray                     # (N,)
    mass: np.ndarray                       # (N,)
    active: np.ndarray                     # (N,) bool: body physically present
    tick: int = 0
    warnings: list[str] = field(default_factory=list)

    # cached neighbour list: pairs found within cutoff + NEIGHBOR_SKIN of
    # the reference positions stay a superset of the true within-cutoff
    # pairs until some body drifts NEIGHBOR_SKIN/2 from its reference
    _nbr_rows: np.ndarray | None = field(default=None, repr=False)
    _nbr_ref: np.ndarray | None = field(default=None, repr=False)
    _nbr_pairs: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_agents(cls, agents, params: dict | None = None) -> "SfState":
        p = params or PARAM_DEFAULTS
        n = len(agents)
        pos = np.zeros((n, 2))
        radius = np.zeros(n)
        for i, agent in enumerate(agents):
            pos[i] = agent.position
            radius[i] = agent.radius if agent.radius > 0 else float(p["sf_radius_lo"])
        return cls(
            pos=pos,
            vel=np.zeros((n, 2)),
            radius=radius,
            mass=np.full(n, float(p["sf_mass"])),
            active=np.ones(n, dtype=bool),
        )


def exposed_wall_cells(geometry: Geometry) -> np.ndarray:
    """Blocked cells with at least one open 8-neighbour, as (M, 2) coords.

    Interior wall cells buried behind the surface never face an agent,
    so only the exposed shell enters the force computation.
    """
    blocked = geometry.blocked_mask
    open_m = geometry.open_mask
    near_open = np.zeros_like(open_m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            src = open_m[
                max(0, dy): open_m.shape[0] + min(0, dy),
                max(0, dx): open_m.shape[1] + min(0, dx),
            ]
            near_open[
                max(0, -dy): open_m.shape[0] + min(0, -dy),
                max(0, -dx): open_m.shape[1] + min(0, -dx),
            ] |= src
    ys, xs = np.nonzero(blocked & near_open)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def _unit(vec: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(vec, axis=axis, keepdims=True)
    return vec / np.maximum(norm, 1e-12)


def driving_force(
    pos: np.ndarray,
    vel: np.ndarray,
    mass: np.ndarray,
    desired_speed: np.ndarray,
    waypoint: np.ndarray,
    params: dict,
) -> np.ndarray:
    """m (v_des e - v) / tau toward each body's waypoint.

    Rows with a NaN waypoint (nothing to head for) relax to rest.
    """
    tau = float(params["sf_tau"])
    heading = waypoint - pos
    has_goal = np.isfinite(heading).all(axis=1)
    e = np.where(has_goal[:, None], _unit(np.nan_to_num(heading)), 0.0)
    v_target = desired_speed[:, None] * e
    return mass[:, None] * (v_target - vel) / tau


def pair_forces(
    pos: np.ndarray,
    radius: np.ndarray,
    params: dict,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, tuple]:
    """Body-body psychological repulsion plus normal compression.

    Returns the per-body force array and the touching-contact list
    ``(i, j, tangent, overlap)`` consumed by the sliding-friction pass.
    Accumulation order is fixed (pairs ascending), keeping float sums
    bit-stable for any worker count.
    """
    a = float(params["sf_a"])
    b = float(params["sf_b"])
    k = float(params["sf_k"])
    cutoff = float(params["sf_cutoff"])

    n = len(pos)
    force = np.zeros((n, 2))
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0))
    if n < 2:
        return force, empty
    if pairs is None:
        grid = SpatialHash(pos, cutoff)
        i, j = grid.query_pairs(cutoff)
    else:
        i, j = pairs
    if len(i) == 0:
        return force, empty

    diff = pos[i] - pos[j]
    d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2
    # caller-supplied candidates (e.g. a reusable margin list) may
    # include pairs beyond the cutoff; drop them here
    if pairs is not None:
        near = d2 <= cutoff * cutoff
        if not near.all():
            i, j, diff, d2 = i[near], j[near], diff[near], d2[near]
        if len(i) == 0:
            return force, empty

    dist = np.sqrt(d2)
    degenerate = dist < 1e-9
    dist = np.maximum(dist, 1e-9)
    normal = diff / dist[:, None]
    normal[degenerate] = (1.0, 0.0)
    r_sum = radius[i] + radius[j]

    social = a * np.exp((r_sum - dist) / b)
    overlap = np.maximum(r_sum - dist, 0.0)

    f_on_i = (social + k * overlap)[:, None] * normal
    _scatter_add(force, i, f_on_i)
    _scatter_add(force, j, -f_on_i)

    touch = overlap > 0.0
    tangent = np.stack([-normal[touch, 1], normal[touch, 0]], axis=1)
    return force, (i[touch], j[touch], tangent, overlap[touch])


def wall_forces(
    pos: np.ndarray,
    radius: np.ndarray,
    wall_cells: np.ndarray,
    cell_size: float,
    params: dict,
) -> tuple[np.ndarray, tuple]:
    """Repulsion and normal compression against the closest wall point.

    The wall surface is a continuum, so each body interacts with its
    single nearest boundary point; summing a separate force from every
    wall cell would triple-count flat runs of wall and stall slow
    walkers half a metre short of a doorway.

    Returns the per-body force array and the touching-contact list
    ``(rows, tangent, overlap)`` consumed by the sliding-friction pass.
    """
    n = len(pos)
    force = np.zeros((n, 2))
    touch_rows: list[np.ndarray] = []
    touch_tan: list[np.ndarray] = []
    touch_gap: list[np.ndarray] = []
    no_contacts = (np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0))
    if n == 0 or len(wall_cells) == 0:
        return force, no_contacts
    a = float(params["sf_a"])
    b = float(params["sf_b"])
    k = float(params["sf_k"])
    cutoff = float(params["sf_cutoff"])

    lo = wall_cells.astype(np.float64) * cell_size            # (M, 2)
    hi = lo + cell_size

    # wall cells beyond the crowd's reach contribute nothing this step
    bb_lo = pos.min(axis=0) - cutoff
    bb_hi = pos.max(axis=0) + cutoff
    near_crowd = ((hi >= bb_lo) & (lo <= bb_hi)).all(axis=1)
    if not near_crowd.all():
        lo = lo[near_crowd]
        hi = hi[near_crowd]
    m = len(lo)
    if m == 0:
        return force, no_contacts

    rows_per_chunk = max(1, _WALL_CHUNK // max(m, 1))
    for start in range(0, n, rows_per_chunk):
        stop = min(n, start + rows_per_chunk)
        p = pos[start:stop]                                   # (c, 2)
        nearest = np.clip(p[:, None, :], lo[None, :, :], hi[None, :, :])
        diff = p[:, None, :] - nearest                        # (c, M, 2)
        d2 = diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2
        col = np.argmin(d2, axis=1)                           # nearest cell per body
        c = stop - start
        sel = np.arange(c)
        best_d2 = d2[sel, col]
        rel = np.nonzero(best_d2 < cutoff * cutoff)[0]
        if len(rel) == 0:
            continue
        dist = np.maximum(np.sqrt(best_d2[rel]), 1e-9)
        normal = diff[rel, col[rel]] / dist[:, None]
        r = radius[start:stop][rel]
        overlap = np.maximum(r - dist, 0.0)
        magnitude = a * np.exp((r - dist) / b) + k * overlap
        force[start + rel] = magnitude[:, None] * normal

        touch = overlap > 0.0
        if touch.any():
            touch_rows.append(rel[touch] + start)
            touch_tan.append(
                np.stack([-normal[touch, 1], normal[touch, 0]], axis=1)
            )
            touch_gap.append(overlap[touch])

    if touch_rows:
        contacts = (
            np.concatenate(touch_rows),
            np.concatenate(touch_tan),
            np.concatenate(touch_gap),
        )
    else:
        contacts = (np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0))
    return force, contacts


def sf_forces(
    pos: np.ndarray,
    vel: np.ndarray,
    radius: np.ndarray,
    mass: np.ndarray,
    desired_speed: np.ndarray,
    waypoint: np.ndarray,
    wall_cells: np.ndarray,
    cell_size: float,
    params: dict | None = None,
) -> tuple[np.ndarray, tuple, tuple]:
    """Driving + repulsion + compression force on every body.

    Sliding friction is not part of the force sum; it is applied after
    integration as velocity impulses (see ``apply_contact_friction``).
    Returns (force, pair contacts, wall contacts).
    """
    p = params or PARAM_DEFAULTS
    total = driving_force(pos, vel, mass, desired_speed, waypoint, p)
    pair, pair_contacts = pair_forces(pos, radius, p)
    wall, wall_contacts = wall_forces(pos, radius, wall_cells, cell_size, p)
    total += pair
    total += wall
    return total, pair_contacts, wall_contacts


def apply_contact_friction(
    vel: np.ndarray,
    mass: np.ndarray,
    pair_contacts: tuple,
    wall_contacts: tuple,
    dt: float,
    params: dict,
) -> np.ndarray:
    """Damp tangential sliding at touching contacts, in place.

    Viscous sliding friction (rate = kappa x overlap) is far stiffer
    than the step size whenever bodies are pressed together, so adding
    it to the force sum overshoots and pumps energy instead of
    dissipating it.  Instead each contact damps its relative tangential
    velocity by the implicit factor for its rate, split 1/n over the
    bodies' touching contacts, and the pass is swept a fixed number of
    times so heavily-wedged bodies still reach near-full damping.
    Impulses are equal and opposite, so momentum is conserved.
    """
    kappa = float(params["sf_kappa"])
    i, j, tan_p, gap_p = pair_contacts
    rows, tan_w, gap_w = wall_contacts
    if len(i) == 0 and len(rows) == 0:
        return vel

    n = len(vel)
    counts = (
        np.bincount(i, minlength=n)
        + np.bincount(j, minlength=n)
        + np.bincount(rows, minlength=n)
    )

    if len(i):
        m_red = 1.0 / (1.0 / mass[i] + 1.0 / mass[j])
        damp = 1.0 - 1.0 / (1.0 + kappa * gap_p * dt / m_red)
        share = np.maximum(np.maximum(counts[i], counts[j]), 1)
        gain_p = m_red * damp / share
    if len(rows):
        m_w = mass[rows]
        damp_w = 1.0 - 1.0 / (1.0 + kappa * gap_w * dt / m_w)
        gain_w = m_w * damp_w / np.maximum(counts[rows], 1)

    for _ in range(FRICTION_SWEEPS):
        delta = np.zeros_like(vel)
        if len(i):
            dv_t = ((vel[j] - vel[i]) * tan_p).sum(axis=1)
            impulse = gain_p * dv_t
            _scatter_add(delta, i, (impulse / mass[i])[:, None] * tan_p)
            _scatter_add(delta, j, -(impulse / mass[j])[:, None] * tan_p)
        if len(rows):
            v_t = (vel[rows] * tan_w).sum(axis=1)
            _scatter_add(delta, rows, -(gain_w * v_t / m_w)[:, None] * tan_w)
        vel += delta
    return vel


def _neighbor_list(state: SfState, idx: np.ndarray, pos: np.ndarray, cutoff: float) -> tuple:
    """Candidate pair list over the active rows, reused across steps.

    Enumerated at cutoff + NEIGHBOR_SKIN and kept until a body drifts
    half the skin from its reference position (or the active set
    changes), which guarantees the list still contains every pair
    truly within the cutoff.
    """
    fresh = (
        state._nbr_rows is not None
        and len(state._nbr_rows) == len(idx)
        and np.array_equal(state._nbr_rows, idx)
    )
    if fresh:
        drift = pos - state._nbr_ref
        fresh = (drift[:, 0] ** 2 + drift[:, 1] ** 2).max() < (NEIGHBOR_SKIN / 2) ** 2
    if not fresh:
        reach = cutoff + NEIGHBOR_SKIN
        state._nbr_pairs = SpatialHash(pos, reach).query_pairs(reach)
        state._nbr_rows = idx.copy()
        state._nbr_ref = pos.copy()
    return state._nbr_pairs


def sf_step(
    state: SfState,
    geometry: Geometry,
    wall_cells: np.ndarray,
    desired_speed: np.ndarray,
    waypoint: np.ndarray,
    dt: float,
    params: dict | None = None,
) -> None:
    """One semi-implicit Euler step over the active bodies.

    Velocity updates first and is clamped to slack x the global speed
    cap (contact impulses may briefly exceed walking speeds); the
    position update follows.  Bodies whose centre would land in a wall
    cell (or off the grid) are projected back into the cell they came
    from, with the into-wall velocity component removed.
    """
    p = params or PARAM_DEFAULTS
    if not 0 < dt <= MAX_DT:
        raise SimulationError(f"integration step {dt} outside (0, {MAX_DT}]")

    idx = np.nonzero(state.active)[0]
    if len(idx) == 0:
        state.tick += 1
        return

    pos = state.pos[idx]
    vel = state.vel[idx]
    mass = state.mass[idx]
    pairs = _neighbor_list(state, idx, pos, float(p["sf_cutoff"]))

    total = driving_force(pos, vel, mass, desired_speed[idx], waypoint[idx], p)
    pair, pair_contacts = pair_forces(pos, state.radius[idx], p, pairs=pairs)
    wall, wall_contacts = wall_forces(pos, state.radius[idx], wall_cells, geometry.cell_size, p)
    force = total + pair + wall

    vel = vel + force / mass[:, None] * dt
    vel = apply_contact_friction(vel, mass, pair_contacts, wall_contacts, dt, p)
    v_cap = float(p["sf_speed_slack"]) * float(p["speed_cap"])
    speed = np.linalg.norm(vel, axis=1)
    too_fast = speed > v_cap
    if too_fast.any():
        vel[too_fast] *= (v_cap / speed[too_fast])[:, None]

    new_pos = pos + vel * dt
    new_pos, vel, n_projected = _resolve_wall_penetration(geometry, pos, new_pos, vel)
    if n_projected:
        state.warnings.append(f"tick {state.tick}: projected {n_projected} bodies out of walls")

    state.pos[idx] = new_pos
    state.vel[idx] = vel
    state.tick += 1

    cells_x = np.clip((new_pos[:, 0] / geometry.cell_size).astype(np.int64), 0, geometry.width - 1)
    cells_y = np.clip((new_pos[:, 1] / geometry.cell_size).astype(np.int64), 0, geometry.height - 1)
    if geometry.blocked_mask[cells_y, cells_x].any():
        raise AssertionError("body centre ended the step inside a wall")


def _resolve_wall_penetration(geometry: Geometry, old_pos, new_pos, vel):
    """Project bodies that stepped into blocked cells (or tunnelled
    through one) back into their previous cell."""
    cs = geometry.cell_size
    h, w = geometry.blocked_mask.shape

    def blocked_at(points):
        cx = (points[:, 0] / cs).astype(np.int64)
        cy = (points[:, 1] / cs).astype(np.int64)
        inside = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        result = ~inside
        cxc = np.clip(cx, 0, w - 1)
        cyc = np.clip(cy, 0, h - 1)
        result |= geometry.blocked_mask[cyc, cxc]
        return result

    bad = blocked_at(new_pos)
    # catch tunnelling through a thin wall, possible only when some body
    # covers at least a cell's width in a single step
    step = new_pos - old_pos
    if (step[:, 0] ** 2 + step[:, 1] ** 2).max(initial=0.0) >= (cs / 2) ** 2:
        midpoint = 0.5 * (old_pos + new_pos)
        bad |= blocked_at(midpoint)

    n_bad = int(bad.sum())
    if n_bad == 0:
        return new_pos, vel, 0

    rows = np.nonzero(bad)[0]
    eps = 1e-6
    old_cx = np.floor(old_pos[rows, 0] / cs)
    old_cy = np.floor(old_pos[rows, 1] / cs)
    # a body that started the step inside a wall (bad spawn) anchors to
    # the nearest open cell instead of its own
    anchor_bad = blocked_at(old_pos[rows])
    for row_pos in np.nonzero(anchor_bad)[0]:
        cx, cy = _nearest_open_cell(
            geometry, int(np.clip(old_cx[row_pos], 0, w - 1)), int(np.clip(old_cy[row_pos], 0, h - 1))
        )
        old_cx[row_pos] = cx
        old_cy[row_pos] = cy
    lo_x = old_cx * cs + eps
    hi_x = (old_cx + 1) * cs - eps
    lo_y = old_cy * cs + eps
    hi_y = (old_cy + 1) * cs - eps
    proj = new_pos[rows].copy()
    proj[:, 0] = np.clip(proj[:, 0], lo_x, hi_x)
    proj[:, 1] = np.clip(proj[:, 1], lo_y, hi_y)

    push = proj - new_pos[rows]
    push_len = np.linalg.norm(push, axis=1)
    nonzero = push_len > 1e-12
    normal = np.zeros_like(push)
    normal[nonzero] = push[nonzero] / push_len[nonzero][:, None]
    v = vel[rows]
    into_wall = (v * -normal).sum(axis=1)
    v += normal * np.maximum(into_wall, 0.0)[:, None]

    new_pos = new_pos.copy()
    vel = vel.copy()
    new_pos[rows] = proj
    vel[rows] = v
    return new_pos, vel, n_bad


def _nearest_open_cell(geometry: Geometry, cx: int, cy: int) -> tuple[int, int]:
    """Closest open cell by expanding Chebyshev rings (scan order fixed)."""
    if geometry.open_mask[cy, cx]:
        return cx, cy
    for ring in range(1, max(geometry.width, geometry.height)):
        for dy in range(-ring, ring + 1):
            for dx in range(-ring, ring + 1):
                if max(abs(dx), abs(dy)) != ring:
                    continue
                nx, ny = cx + dx, cy + dy
                if geometry.is_open(nx, ny):
                    return nx, ny
    raise SimulationError("geometry has no open cell to project into")


# ---------------------------------------------------------------------------
# arch / clog detection
# ---------------------------------------------------------------------------


def arch_band_count(
    positions: np.ndarray,
    door_center: tuple[float, float],
    upstream_normal: tuple[float, float],
    params: dict,
) -> int:
    """Bodies inside the semicircular band upstream of a door."""
    inner = float(params["clog_band_inner"])
    outer = float(params["clog_band_outer"])
    if len(positions) == 0:
        return 0
    diff = positions - np.asarray(door_center)
    dist = np.linalg.norm(diff, axis=1)
    side = diff @ np.asarray(upstream_normal)
    return int(((dist >= inner) & (dist <= outer) & (side > 0)).sum())


def detect_arch(
    positions: np.ndarray,
    door_center: tuple[float, float],
    upstream_normal: tuple[float, float],
    flow_rate: float,
    params: dict | None = None,
) -> tuple[bool, int]:
    """Clog test for one door: stalled flow plus a packed upstream band.

    ``flow_rate`` is the door's measured crossings per second over the
    trailing window; returns (clogged?, band occupancy).
    """
    p = params or PARAM_DEFAULTS
    count = arch_band_count(positions, door_center, upstream_normal, p)
    clogged = flow_rate < float(p["clog_flow"]) and count >= int(p["clog_min_bodies"])
    return clogged, count
