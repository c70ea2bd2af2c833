"""Agent state, perception and decision making.

Agents carry a physical state (position, health, mobility) and a
behavioural profile (speed preference, collaboration, insistence,
knowledge, experience, nervousness, role).  Each decision round an
agent perceives its surroundings (limited by sight range and walls),
scores candidate exits, and emits an :class:`Intention`: target exit,
next waypoint, desired speed, and any messages to announce.

Nothing in a percept reaches beyond the agent's sight range plus its
own belief store, so decisions stay local by construction.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .config import PARAM_DEFAULTS
from .errors import SchemaViolation, SemanticViolation, SimulationError
from .hazard import HazardSample, visibility_range_bulk
from .scenario import CellKind, DistSpec, Geometry, PopulationSpec, los_pairs
from .spatialhash import SpatialHash


class AgentStatus(IntEnum):
    PREMOVEMENT = 0
    MOVING = 1
    EXITED = 2
    DEAD = 3


STATUS_TOKENS = {
    AgentStatus.PREMOVEMENT: "premovement",
    AgentStatus.MOVING: "moving",
    AgentStatus.EXITED: "exited",
    AgentStatus.DEAD: "dead",
}

NO_TARGET = -1


@dataclass
class Agent:
    id: int
    position: tuple[float, float]   # m
    health: float                   # [0, 1]; 0 means dead
    mobility: int                   # 0 immobile, 1 walking, 2 panic run
    speed_pref: float               # m/s at mobility 1
    vision_range: float             # m, refreshed from local smoke each tick
    reaction_time: float            # s of pre-movement delay after the alarm
    collaboration: float            # [0, 1]
    insistence: float               # [0, 1], probability of keeping the current plan
    knowledge: float                # [0, 1], building familiarity
    experience: float               # [0, 1]
    nervousness: float              # [0, 1]
    gender: str                     # "F" | "M"
    age: int
    role: int                       # 0 none, 1 top leader, 2 second level, ...
    status: AgentStatus = AgentStatus.PREMOVEMENT
    radius: float = 0.0             # m, body radius (social-force backend only)
    target_exit: int = NO_TARGET    # current goal exit zone id


def agent_rank(role: int) -> float:
    """Hierarchy rank for leader comparisons; unranked agents sit at the
    bottom so any positive role counts as a leader to them."""
    return float(role) if role > 0 else math.inf


# ---------------------------------------------------------------------------
# attribute sampling
# ---------------------------------------------------------------------------

FLOAT01 = ("health", "collaboration", "insistence", "knowledge", "experience", "nervousness")

DEFAULT_ATTRIBUTES: dict[str, DistSpec] = {
    "health": DistSpec(kind="constant", value=1.0),
    "mobility": DistSpec(kind="constant", value=1),
    "speed_pref": DistSpec(kind="constant", value=1.34),
    "collaboration": DistSpec(kind="constant", value=0.5),
    "insistence": DistSpec(kind="constant", value=0.8),
    "knowledge": DistSpec(kind="constant", value=1.0),
    "experience": DistSpec(kind="constant", value=0.0),
    "nervousness": DistSpec(kind="constant", value=0.0),
    "gender": DistSpec(kind="categorical", values=["F", "M"], weights=[0.5, 0.5]),
    "age": DistSpec(kind="constant", value=35),
    "role": DistSpec(kind="constant", value=0),
}

INT_ATTRS = ("mobility", "age", "role")


def _check_support(attr: str, spec: DistSpec, params: dict) -> None:
    where = f"population.attributes.{attr}"
    support = spec.support()
    if attr in FLOAT01:
        if any(not isinstance(v, (int, float)) or v < 0 or v > 1 for v in support):
            raise SemanticViolation(where, "values must lie in [0, 1]")
    elif attr == "mobility":
        if any(v not in (0, 1, 2) for v in support):
            raise SemanticViolation(where, "mobility must be 0, 1 or 2")
    elif attr == "speed_pref":
        cap = float(params["speed_cap"])
        if any(not isinstance(v, (int, float)) or not 0 < v <= cap for v in support):
            raise SemanticViolation(where, f"speed_pref must lie in (0, {cap}]")
    elif attr == "gender":
        if any(v not in ("F", "M") for v in support):
            raise SemanticViolation(where, "gender must be 'F' or 'M'")
    elif attr in ("age", "role"):
        if any(not isinstance(v, int) or isinstance(v, bool) or v < 0 for v in support):
            raise SemanticViolation(where, "must be a non-negative integer")
    elif attr == "reaction_time":
        rt_max = float(params["rt_max"])
        if any(not isinstance(v, (int, float)) or v < 0 or v > rt_max for v in support):
            raise SemanticViolation(where, f"reaction_time must lie in [0, {rt_max}]")
    else:
        raise SchemaViolation(where, "unknown agent attribute")


def _sample_attr(attr: str, spec: DistSpec, count: int, rng: np.random.Generator):
    if spec.kind == "constant":
        if attr == "gender":
            return [spec.value] * count
        if attr in INT_ATTRS:
            return np.full(count, int(spec.value), dtype=np.int64)
        return np.full(count, float(spec.value))
    if spec.kind == "uniform":
        if attr in INT_ATTRS:
            return rng.integers(int(spec.lo), int(spec.hi) + 1, size=count)
        return rng.uniform(float(spec.lo), float(spec.hi), size=count)
    weights = spec.weights
    if weights is None:
        p = None
    else:
        total = float(sum(weights))
        p = np.asarray(weights, dtype=np.float64) / total
    idx = rng.choice(len(spec.values), size=count, p=p)
    values = [spec.values[i] for i in idx]
    if attr == "gender":
        return values
    if attr in INT_ATTRS:
        return np.array([int(v) for v in values], dtype=np.int64)
    return np.array([float(v) for v in values])


def effective_speed(agent, params: dict | None = None) -> float:
    """Walking speed after health and mobility: health times the mobility
    base (0, speed_pref, or the panic speed), clamped to the global cap."""
    p = params or PARAM_DEFAULTS
    if agent.mobility == 0:
        base = 0.0
    elif agent.mobility == 1:
        base = agent.speed_pref
    else:
        base = float(p["v_panic"])
    return min(max(agent.health * base, 0.0), float(p["speed_cap"]))


def effective_speed_bulk(health: np.ndarray, mobility: np.ndarray, speed_pref: np.ndarray, params: dict) -> np.ndarray:
    base = np.where(mobility == 1, speed_pref, np.where(mobility == 2, float(params["v_panic"]), 0.0))
    return np.clip(health * base, 0.0, float(params["speed_cap"]))


def compute_reaction_time(agent, rng: np.random.Generator, params: dict | None = None) -> float:
    """Pre-movement delay: lognormal around the configured median, shortened
    by experience and halved for top-level leaders, clamped to [min, max]."""
    p = params or PARAM_DEFAULTS
    draw = rng.lognormal(mean=math.log(float(p["rt_median"])), sigma=float(p["rt_sigma"]))
    factor = float(p["rt_leader_factor"]) if agent.role == 1 else 1.0
    rt = draw * (1.0 - 0.5 * agent.experience) * factor
    return float(min(max(rt, float(p["rt_min"])), float(p["rt_max"])))


def spawn_population(
    spec: PopulationSpec,
    geometry: Geometry,
    streams,
    params: dict | None = None,
    backend: str = "ca",
    room_labels: np.ndarray | None = None,
) -> list[Agent]:
    """Create the initial population: attributes from the per-attribute
    distributions, positions packed without overlap inside the spawn
    region.  Fully reproducible from the seed streams.
    """
    p = params or PARAM_DEFAULTS
    count = spec.count

    merged = dict(DEFAULT_ATTRIBUTES)
    merged.update(spec.attributes)
    for attr, dist in merged.items():
        dist.validate(attr)
        _check_support(attr, dist, p)

    rng_attrs = streams.spawn_attrs
    sampled: dict[str, object] = {}
    for attr in sorted(merged):
        if attr == "reaction_time":
            continue  # handled after experience/role are known
        sampled[attr] = _sample_attr(attr, merged[attr], count, rng_attrs)

    speed_pref = np.asarray(sampled["speed_pref"], dtype=np.float64).copy()
    ages = np.asarray(sampled["age"])
    speed_pref[ages >= int(p["age_slow_at"])] *= float(p["age_slow_factor"])

    rng_rt = streams.reaction
    if "reaction_time" in spec.attributes:
        reaction = np.asarray(_sample_attr("reaction_time", merged["reaction_time"], count, rng_rt), dtype=np.float64)
    else:
        draws = rng_rt.lognormal(mean=math.log(float(p["rt_median"])), sigma=float(p["rt_sigma"]), size=count)
        factor = np.where(np.asarray(sampled["role"]) == 1, float(p["rt_leader_factor"]), 1.0)
        rt = draws * (1.0 - 0.5 * np.asarray(sampled["experience"])) * factor
        reaction = np.clip(rt, float(p["rt_min"]), float(p["rt_max"]))

    cells = _spawn_cells(spec, geometry, room_labels)
    if backend == "sf":
        radii = streams.bodies.uniform(float(p["sf_radius_lo"]), float(p["sf_radius_hi"]), size=count)
        positions = _continuous_positions(cells, radii, geometry, streams.spawn_pos)
    else:
        radii = np.zeros(count)
        if count > len(cells):
            raise SimulationError(
                f"spawn region has {len(cells)} free cells for {count} agents"
            )
        picks = streams.spawn_pos.choice(len(cells), size=count, replace=False) if count else []
        positions = [geometry.cell_center(*cells[int(k)]) for k in picks]

    od0 = np.zeros(count)
    vision0 = visibility_range_bulk(od0, np.asarray(sampled["health"], dtype=np.float64), p)

    agents = []
    for i in range(count):
        agents.append(
            Agent(
                id=i,
                position=(float(positions[i][0]), float(positions[i][1])),
                health=float(sampled["health"][i]),
                mobility=int(sampled["mobility"][i]),
                speed_pref=float(speed_pref[i]),
                vision_range=float(vision0[i]),
                reaction_time=float(reaction[i]),
                collaboration=float(sampled["collaboration"][i]),
                insistence=float(sampled["insistence"][i]),
                knowledge=float(sampled["knowledge"][i]),
                experience=float(sampled["experience"][i]),
                nervousness=float(sampled["nervousness"][i]),
                gender=str(sampled["gender"][i]),
                age=int(sampled["age"][i]),
                role=int(sampled["role"][i]),
                status=AgentStatus.PREMOVEMENT,
                radius=float(radii[i]),
            )
        )
    return agents


def _spawn_cells(spec: PopulationSpec, geometry: Geometry, room_labels: np.ndarray | None) -> list[tuple[int, int]]:
    empty = geometry.kinds == CellKind.EMPTY
    if spec.spawn_rect is not None:
        x0, y0, x1, y1 = spec.spawn_rect
        cells = [
            (x, y)
            for y in range(y0, y1 + 1)
            for x in range(x0, x1 + 1)
            if empty[y, x]
        ]
    elif spec.spawn_node is not None:
        if room_labels is None:
            raise SimulationError("spawn-by-node requires a derived network")
        ys, xs = np.nonzero(room_labels == spec.spawn_node)
        cells = sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))
        if not cells:
            raise SemanticViolation("population.spawn.node", f"node {spec.spawn_node} has no cells")
    else:
        ys, xs = np.nonzero(empty)
        cells = sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))
    if not cells and spec.count > 0:
        raise SimulationError("spawn region contains no free cells")
    return cells


def _continuous_positions(
    cells: list[tuple[int, int]],
    radii: np.ndarray,
    geometry: Geometry,
    rng: np.random.Generator,
) -> list[tuple[float, float]]:
    """Rejection-sample non-overlapping body centres inside the spawn cells."""
    count = len(radii)
    if count == 0:
        return []
    cs = geometry.cell_size
    cell_set = set(cells)
    xs = [c[0] for c in cells]
    ys = [c[1] for c in cells]
    x_lo, x_hi = min(xs) * cs, (max(xs) + 1) * cs
    y_lo, y_hi = min(ys) * cs, (max(ys) + 1) * cs
    blocked = geometry.blocked_mask
    placed: list[tuple[float, float]] = []
    placed_r: list[float] = []
    max_attempts = 2000 * count + 2000
    attempts = 0
    for i in range(count):
        r = float(radii[i])
        while True:
            attempts += 1
            if attempts > max_attempts:
                raise SimulationError(
                    f"could not place {count} bodies in the spawn region ({i} placed)"
                )
            px = rng.uniform(x_lo, x_hi)
            py = rng.uniform(y_lo, y_hi)
            cell = (int(px / cs), int(py / cs))
            if cell not in cell_set:
                continue
            if _touches_blocked(px, py, r, blocked, cs):
                continue
            ok = True
            for (qx, qy), qr in zip(placed, placed_r):
                if (px - qx) ** 2 + (py - qy) ** 2 < (r + qr) ** 2:
                    ok = False
                    break
            if ok:
                placed.append((px, py))
                placed_r.append(r)
                break
    return placed


def _touches_blocked(px: float, py: float, r: float, blocked: np.ndarray, cs: float) -> bool:
    h, w = blocked.shape
    x0 = max(0, int((px - r) / cs))
    x1 = min(w - 1, int((px + r) / cs))
    y0 = max(0, int((py - r) / cs))
    y1 = min(h - 1, int((py + r) / cs))
    for cy in range(y0, y1 + 1):
        for cx in range(x0, x1 + 1):
            if not blocked[cy, cx]:
                continue
            nx = min(max(px, cx * cs), (cx + 1) * cs)
            ny = min(max(py, cy * cs), (cy + 1) * cs)
            if (px - nx) ** 2 + (py - ny) ** 2 < r * r:
                return True
    return False


# ---------------------------------------------------------------------------
# beliefs
# ---------------------------------------------------------------------------


@dataclass
class BeliefStore:
    """What one agent holds to be true about the building."""

    known: dict[int, bool] = field(default_factory=dict)      # exit id -> familiar at spawn
    blocked: dict[int, float] = field(default_factory=dict)   # exit id -> time observed/heard
    progress: deque = field(default_factory=deque)            # (t, x, y) samples
    next_progress_check: float | None = None
    lost: bool = False

    def learn_exit(self, exit_id: int) -> None:
        self.known.setdefault(exit_id, False)

    def block_exit(self, exit_id: int, t: float) -> None:
        self.blocked.setdefault(exit_id, t)
        self.learn_exit(exit_id)

    def apply_message(self, message: tuple) -> None:
        kind = message[0]
        if kind == "exit_blocked":
            self.block_exit(int(message[1]), float(message[2]))

    def record_position(self, t: float, pos: tuple[float, float], window: float) -> None:
        self.progress.append((t, pos[0], pos[1]))
        horizon = t - window
        while self.progress and self.progress[0][0] < horizon - 1e-9:
            self.progress.popleft()


def init_beliefs(agents: list[Agent], n_exits: int, rng: np.random.Generator) -> list[BeliefStore]:
    """Seed each agent's known exits: every exit is familiar independently
    with probability equal to the agent's building knowledge."""
    stores = []
    for agent in agents:
        store = BeliefStore()
        if n_exits:
            draws = rng.random(n_exits)
            for z in range(n_exits):
                if draws[z] < agent.knowledge:
                    store.known[z] = True
        stores.append(store)
    return stores


# ---------------------------------------------------------------------------
# perception
# ---------------------------------------------------------------------------


@dataclass
class ExitSight:
    exit_id: int
    distance: float       # m, walking distance to the exit
    congestion: float     # persons seen heading there
    hazard: float         # smoke/heat score along the sight line
    od_at_exit: float = 0.0


@dataclass
class AgentSighting:
    id: int
    position: tuple[float, float]
    heading: tuple[float, float]
    role: int


@dataclass
class WorldView:
    """Frozen per-round snapshot the perception/decision layer reads from."""

    geometry: Geometry
    params: dict
    t: float
    alarm_active: bool
    positions: np.ndarray          # (N, 2) m
    headings: np.ndarray           # (N, 2) unit-ish movement direction
    statuses: np.ndarray           # (N,) AgentStatus codes
    targets: np.ndarray            # (N,) exit zone id or NO_TARGET
    roles: np.ndarray              # (N,)
    vision: np.ndarray             # (N,) m
    local_temp: np.ndarray         # (N,)
    local_od: np.ndarray
    local_tox: np.ndarray
    od_frame: np.ndarray           # (H, W) current optical density
    temp_frame: np.ndarray
    tox_frame: np.ndarray
    exit_fields: list[np.ndarray]  # per exit zone, distances in cells
    field_global: np.ndarray
    zone_centers: np.ndarray       # (E, 2) m
    zone_cells: list[np.ndarray]   # per zone, (K, 2) cell coords
    has_interior_blockers: bool = False
    ambient_air: bool = False      # hazard frames are all-clear this round
    hash: SpatialHash | None = None
    hash_wide: SpatialHash | None = None
    waypoint_fn: object = None     # (agent_index, zone_id) -> (x, y) m or None
    lost_waypoint_fn: object = None

    def present(self) -> np.ndarray:
        """Indices of agents physically in the building (not exited/dead)."""
        return np.nonzero(
            (self.statuses == AgentStatus.PREMOVEMENT) | (self.statuses == AgentStatus.MOVING)
        )[0]

    def ensure_hash(self) -> SpatialHash:
        if self.hash is None:
            present = self.present()
            self.hash = SpatialHash(self.positions[present], max(float(self.params["sf_cutoff"]), 3.0), ids=present)
        return self.hash

    def ensure_wide_hash(self, radius: float) -> SpatialHash:
        """Hash whose buckets cover ``radius``, so queries at that radius
        never trigger a rebuild.  Cached for the round like ensure_hash."""
        if self.hash_wide is None or self.hash_wide.cell < radius:
            present = self.present()
            self.hash_wide = SpatialHash(self.positions[present], radius, ids=present)
        return self.hash_wide

    def cell_of(self, i: int) -> tuple[int, int]:
        return self.geometry.cell_of((self.positions[i][0], self.positions[i][1]))

    def exit_distance_m(self, i: int, zone_id: int) -> float:
        x, y = self.cell_of(i)
        return float(self.exit_fields[zone_id][y, x]) * self.geometry.cell_size

    def query_visible(self, i: int) -> np.ndarray:
        """Agent indices within sight of agent i (range + line of sight)."""
        h = self.ensure_hash()
        rows = h.query_radius(self.positions[i], float(self.vision[i]))
        ids = h.ids[rows]
        ids = ids[ids != i]
        if len(ids) and self.has_interior_blockers:
            me = np.array(self.cell_of(i), dtype=np.float64)
            cs = self.geometry.cell_size
            theirs = np.floor(self.positions[ids] / cs)
            clear = los_pairs(self.geometry.blocked_mask, np.tile(me, (len(ids), 1)), theirs)
            ids = ids[clear]
        return ids


def _hazard_score_along(world: WorldView, from_cell, to_cell, max_cells: float) -> float:
    """Mean hazard over samples along the sight line, clipped at the
    perceiver's sight range."""
    p = world.params
    fx, fy = from_cell
    tx, ty = to_cell
    dx, dy = tx - fx, ty - fy
    length = math.hypot(dx, dy)
    if length > max_cells > 0:
        scale = max_cells / length
        tx, ty = fx + dx * scale, fy + dy * scale
    n = 8
    xs = np.clip(np.linspace(fx, tx, n).astype(np.int64), 0, world.geometry.width - 1)
    ys = np.clip(np.linspace(fy, ty, n).astype(np.int64), 0, world.geometry.height - 1)
    od = world.od_frame[ys, xs]
    temp = world.temp_frame[ys, xs]
    tox = world.tox_frame[ys, xs]
    heat = np.maximum(0.0, temp - float(p["temp_crit"])) / float(p["temp_scale"])
    return float(np.mean(od + heat + tox))


@dataclass
class Percept:
    """Everything one agent senses this round."""

    t: float
    alarm_active: bool
    local_hazard: HazardSample
    vision: float
    visible_exits: list[ExitSight]
    herd_votes: dict[int, float]     # exit id -> leader-weighted count of neighbours heading there
    herd_total: float                # weighted count of all visible neighbours
    congestion_by_exit: dict[int, int]
    follow_distance: dict[int, float]  # exit id -> distance to nearest neighbour heading there
    _world: WorldView | None = None
    _index: int = -1

    @property
    def visible_agents(self) -> list[AgentSighting]:
        if self._world is None:
            return []
        w = self._world
        out = []
        for j in w.query_visible(self._index):
            out.append(
                AgentSighting(
                    id=int(j),
                    position=(float(w.positions[j][0]), float(w.positions[j][1])),
                    heading=(float(w.headings[j][0]), float(w.headings[j][1])),
                    role=int(w.roles[j]),
                )
            )
        return out


def _neighbour_stats(world: WorldView, indices: np.ndarray, collab: np.ndarray):
    """Per-agent herd votes, totals, congestion counts and follow distances,
    estimated over neighbours within sight (capped at the congestion
    radius).  Returns dense (len(indices), n_zones) arrays."""
    p = world.params
    n_zones = len(world.zone_centers)
    n = len(indices)
    votes = np.zeros((n, n_zones))
    totals = np.zeros(n)
    congestion = np.zeros((n, n_zones), dtype=np.int64)
    follow = np.full((n, n_zones), np.inf)
    if n == 0:
        return votes, totals, congestion, follow

    r_cap = float(p["congestion_radius"])
    h = world.ensure_wide_hash(r_cap)
    if len(h.positions) < 2:
        return votes, totals, congestion, follow
    if len(indices) * 8 < len(h.positions):
        # few observers (e.g. agents that just started moving): query
        # each one's disc instead of enumerating every pair in the crowd
        obs_parts: list[np.ndarray] = []
        seen_parts: list[np.ndarray] = []
        for i in indices:
            rows = h.query_radius(world.positions[int(i)], r_cap)
            ids = h.ids[rows]
            ids = ids[ids != int(i)]
            if len(ids):
                obs_parts.append(np.full(len(ids), int(i), dtype=np.int64))
                seen_parts.append(ids)
        if not obs_parts:
            return votes, totals, congestion, follow
        obs = np.concatenate(obs_parts)
        seen = np.concatenate(seen_parts)
    else:
        pi, pj = h.query_pairs(r_cap)
        if len(pi) == 0:
            return votes, totals, congestion, follow
        gi = h.ids[pi]
        gj = h.ids[pj]
        # both directions: observer -> observed
        obs = np.concatenate([gi, gj])
        seen = np.concatenate([gj, gi])
    d = np.linalg.norm(world.positions[obs] - world.positions[seen], axis=1)
    keep = d <= np.minimum(world.vision[obs], r_cap)
    obs, seen, d = obs[keep], seen[keep], d[keep]

    # restrict observers to the requested indices
    pos_in = np.full(len(world.positions), -1, dtype=np.int64)
    pos_in[indices] = np.arange(n)
    keep = pos_in[obs] >= 0
    obs, seen, d = obs[keep], seen[keep], d[keep]

    if len(obs) and world.has_interior_blockers:
        cs = world.geometry.cell_size
        a = np.floor(world.positions[obs] / cs)
        b = np.floor(world.positions[seen] / cs)
        clear = los_pairs(world.geometry.blocked_mask, a, b)
        obs, seen, d = obs[clear], seen[clear], d[clear]
    if len(obs) == 0:
        return votes, totals, congestion, follow

    rows = pos_in[obs]
    roles_seen = world.roles[seen]
    rank_obs = np.where(world.roles[obs] > 0, world.roles[obs], np.iinfo(np.int64).max)
    leader = (roles_seen > 0) & (roles_seen < rank_obs)
    weight = np.where(leader, 1.0 + collab[rows], 1.0)

    np.add.at(totals, rows, weight)
    tgt = world.targets[seen]
    moving = world.statuses[seen] == AgentStatus.MOVING
    has_target = (tgt >= 0) & moving
    np.add.at(votes, (rows[has_target], tgt[has_target]), weight[has_target])
    np.add.at(congestion, (rows[has_target], tgt[has_target]), 1)
    np.minimum.at(follow, (rows[has_target], tgt[has_target]), d[has_target])
    return votes, totals, congestion, follow


def build_percepts(world: WorldView, indices: np.ndarray, collab_all: np.ndarray) -> list[Percept]:
    """Percepts for the given agent indices, sharing one round of
    vectorised visibility and neighbour statistics."""
    p = world.params
    geometry = world.geometry
    cs = geometry.cell_size
    n = len(indices)
    votes, totals, congestion, follow = _neighbour_stats(world, indices, collab_all[indices])

    pos = world.positions[indices]
    cells = np.floor(pos / cs).astype(np.int64)
    cells[:, 0] = np.clip(cells[:, 0], 0, geometry.width - 1)
    cells[:, 1] = np.clip(cells[:, 1], 0, geometry.height - 1)

    # visibility of each exit zone: distance to its nearest cell + sight line
    n_zones = len(world.zone_centers)
    sights: list[list[tuple]] = [[] for _ in range(n)]
    for z in range(n_zones):
        zc = world.zone_cells[z]
        centers = (zc + 0.5) * cs
        d2 = ((pos[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)
        dmin = np.sqrt(d2[np.arange(n), nearest])
        vis = dmin <= world.vision[indices]
        if vis.any() and world.has_interior_blockers:
            rows = np.nonzero(vis)[0]
            clear = los_pairs(geometry.blocked_mask, cells[rows], zc[nearest[rows]])
            vis[rows] = clear
        for row in np.nonzero(vis)[0]:
            sights[row].append((z, int(nearest[row])))

    percepts = []
    for row in range(n):
        i = int(indices[row])
        visible_exits = []
        for (z, ncell) in sights[row]:
            field_d = world.exit_fields[z][cells[row][1], cells[row][0]]
            if not np.isfinite(field_d):
                continue  # visible through an opening but not walkable from here
            if world.ambient_air:
                hz = 0.0
                od_exit = 0.0
            else:
                zc = world.zone_cells[z][ncell]
                max_cells = world.vision[i] / cs
                hz = _hazard_score_along(world, (cells[row][0], cells[row][1]), (zc[0], zc[1]), max_cells)
                center_cell = world.zone_cells[z][len(world.zone_cells[z]) // 2]
                od_exit = float(world.od_frame[center_cell[1], center_cell[0]])
            visible_exits.append(
                ExitSight(
                    exit_id=z,
                    distance=float(field_d) * cs,
                    congestion=float(congestion[row, z]),
                    hazard=hz,
                    od_at_exit=od_exit,
                )
            )
        percepts.append(
            Percept(
                t=world.t,
                alarm_active=world.alarm_active,
                local_hazard=HazardSample(
                    float(world.local_temp[i]), float(world.local_od[i]), float(world.local_tox[i])
                ),
                vision=float(world.vision[i]),
                visible_exits=visible_exits,
                herd_votes={z: float(votes[row, z]) for z in range(n_zones) if votes[row, z] > 0},
                herd_total=float(totals[row]),
                congestion_by_exit={z: int(congestion[row, z]) for z in range(n_zones) if congestion[row, z]},
                follow_distance={z: float(follow[row, z]) for z in range(n_zones) if np.isfinite(follow[row, z])},
                _world=world,
                _index=i,
            )
        )
    return percepts


def perceive(world: WorldView, agent_index: int, collab_all: np.ndarray | None = None) -> Percept:
    """Percept for a single agent (bulk path with one index)."""
    if collab_all is None:
        collab_all = np.zeros(len(world.positions))
    return build_percepts(world, np.array([agent_index]), collab_all)[0]


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------


@dataclass
class Intention:
    target_exit: int                       # exit zone id, or NO_TARGET when lost
    waypoint: tuple[float, float] | None   # m
    desired_speed: float                   # m/s, <= speed_cap
    announce: list[tuple] = field(default_factory=list)
    replanned: bool = False
    lost: bool = False


def choose_exit(agent, percept: Percept, beliefs: BeliefStore, rng=None, params: dict | None = None) -> int | None:
    """Pick the best exit by expected cost, blended with the crowd.

    Utility trades off travel time, visible congestion, hazard along the
    way and familiarity; the herding term follows where visible
    neighbours (leaders amplified) are heading, weighted by the agent's
    nervousness.  Returns None when no candidate exit exists.
    """
    del rng  # selection is deterministic; ties break on the smallest id
    p = params or PARAM_DEFAULTS
    candidates: dict[int, ExitSight] = {}
    for sight in percept.visible_exits:
        candidates[sight.exit_id] = sight
    world = percept._world
    for z, familiar in beliefs.known.items():
        if z in candidates:
            continue
        if world is not None and percept._index >= 0:
            d = world.exit_distance_m(percept._index, z)
            if not math.isfinite(d):
                continue
        else:
            d = None
        if d is None:
            continue
        candidates[z] = ExitSight(exit_id=z, distance=d, congestion=0.0, hazard=0.0)
    for z, d_follow in percept.follow_distance.items():
        if z not in candidates:
            candidates[z] = ExitSight(
                exit_id=z,
                distance=d_follow + float(p["follow_penalty"]),
                congestion=float(percept.congestion_by_exit.get(z, 0)),
                hazard=0.0,
            )
    for z in beliefs.blocked:
        candidates.pop(z, None)
    if not candidates:
        return None

    v = max(effective_speed(agent, p), 0.1)
    n = agent.nervousness
    best_z = None
    best_score = -math.inf
    for z in sorted(candidates):
        sight = candidates[z]
        utility = (
            -float(p["w_distance"]) * sight.distance / v
            - float(p["w_congestion"]) * sight.congestion
            - float(p["w_hazard"]) * sight.hazard
            + float(p["w_familiar"]) * (1.0 if beliefs.known.get(z) else 0.0)
        )
        herd = percept.herd_votes.get(z, 0.0) / percept.herd_total if percept.herd_total > 0 else 0.0
        score = (1.0 - n) * utility + n * herd
        if score > best_score:
            best_score = score
            best_z = z
    return best_z


def update_insistence(agent, beliefs: BeliefStore, dt_window: float, params: dict | None = None) -> None:
    """Decay insistence when the displacement over the progress window
    falls short of a fraction of what the agent could have walked."""
    p = params or PARAM_DEFAULTS
    if len(beliefs.progress) < 2:
        return
    t1, x1, y1 = beliefs.progress[-1]
    t0, x0, y0 = beliefs.progress[0]
    if t1 - t0 < dt_window * 0.5:
        return
    displacement = math.hypot(x1 - x0, y1 - y0)
    threshold = float(p["progress_eta"]) * effective_speed(agent, p) * (t1 - t0)
    if displacement < threshold:
        agent.insistence = max(float(p["insistence_floor"]), agent.insistence * float(p["insistence_decay"]))


def inform_neighbors(agent, agent_index: int, messages: list[tuple], world: WorldView, beliefs_all: list[BeliefStore], rng: np.random.Generator) -> list[int]:
    """Deliver belief messages to visible neighbours, each with probability
    equal to the sender's collaboration.  One hop per tick: receivers do
    not relay until their own next decision round.  Returns receiver ids."""
    if not messages:
        return []
    receivers = []
    for j in world.query_visible(agent_index):
        if rng.random() < agent.collaboration:
            for message in messages:
                beliefs_all[int(j)].apply_message(message)
            receivers.append(int(j))
    return receivers


def decide(agent, percept: Percept, beliefs: BeliefStore, rng: np.random.Generator, params: dict | None = None) -> Intention:
    """One decision round for one agent past its pre-movement delay.

    Marks freshly observed blocked exits (and queues announcements),
    decays insistence when progress stalls, rolls the replan lottery,
    picks an exit if needed, and derives waypoint and desired speed.
    Nervousness grows with replans and dense smoke, damped by
    experience; desired speed is effective speed scaled by (1 +
    nervousness), capped globally.
    """
    p = params or PARAM_DEFAULTS
    world = percept._world
    announce: list[tuple] = []
    grew_nervous = 0.0

    # blocked-exit discovery
    newly_blocked = False
    for sight in percept.visible_exits:
        if sight.od_at_exit > float(p["od_blocked"]) and sight.exit_id not in beliefs.blocked:
            beliefs.block_exit(sight.exit_id, percept.t)
            announce.append(("exit_blocked", sight.exit_id, percept.t))
            if sight.exit_id == agent.target_exit:
                newly_blocked = True

    # newly seen exits become known (learned, not familiar)
    for sight in percept.visible_exits:
        beliefs.learn_exit(sight.exit_id)

    # progress bookkeeping at the configured window
    window = float(p["progress_window"])
    beliefs.record_position(percept.t, agent.position, window)
    if beliefs.next_progress_check is None:
        beliefs.next_progress_check = percept.t + window
    elif percept.t >= beliefs.next_progress_check:
        update_insistence(agent, beliefs, window, p)
        beliefs.next_progress_check = percept.t + window

    target = agent.target_exit
    replanned = False
    need_choice = (
        target == NO_TARGET
        or target in beliefs.blocked
        or newly_blocked
        or beliefs.lost
    )
    if not need_choice and rng.random() < 1.0 - agent.insistence:
        need_choice = True

    if need_choice:
        choice = choose_exit(agent, percept, beliefs, None, p)
        if choice is None:
            beliefs.lost = True
            new_target = NO_TARGET
        else:
            beliefs.lost = False
            new_target = choice
        if new_target != target and target != NO_TARGET:
            replanned = True
            grew_nervous += float(p["dn_replan"])
        target = new_target

    if percept.local_hazard.optical_density > float(p["od_nervous"]):
        grew_nervous += float(p["dn_smoke"])

    if grew_nervous:
        scale = float(p["nervousness_growth"]) * (1.0 - 0.5 * agent.experience)
        agent.nervousness = min(1.0, max(0.0, agent.nervousness + grew_nervous * scale))

    waypoint = None
    lost = target == NO_TARGET
    if not lost and world is not None and world.waypoint_fn is not None:
        waypoint = world.waypoint_fn(percept._index, target)
    elif lost and world is not None and world.lost_waypoint_fn is not None:
        waypoint = world.lost_waypoint_fn(percept._index)

    desired = min(effective_speed(agent, p) * (1.0 + agent.nervousness), float(p["speed_cap"]))
    agent.target_exit = target
    return Intention(
        target_exit=target,
        waypoint=waypoint,
        desired_speed=desired,
        announce=announce,
        replanned=replanned,
        lost=lost,
    )
