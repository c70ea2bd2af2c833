"""Simulation driver: one loop stepping hazard, minds and bodies.

Each tick advances the clock from t to t + dt through a fixed phase
order: hazard exposure and deaths, pre-movement transitions, decision
rounds (with message delivery after every agent has decided), the
movement backend, and finally door/clog bookkeeping.  Every event
raised while advancing t -> t + dt is stamped exactly t; trajectory
samples are taken at the top of the loop, so a sample at time s
reflects precisely the events stamped strictly before s.

Determinism is load-bearing throughout: agents are always iterated in
ascending id order, random substreams are dedicated per concern, and
float accumulation happens over sorted index arrays.
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .agents import (
    NO_TARGET,
    AgentStatus,
    WorldView,
    build_percepts,
    decide,
    effective_speed_bulk,
    inform_neighbors,
    init_beliefs,
    spawn_population,
)
from .ca import CaState, ca_step
from .config import RunConfig, SF_DECISION_INTERVAL, SF_TRAJECTORY_INTERVAL, half_up
from .errors import SimulationError
from .flow import FlowState, flow_step, route_to_destination
from .hazard import (
    AMBIENT_TEMP,
    HazardField,
    builtin_smoke,
    health_decrement,
    load_hazard_series,
    visibility_range_bulk,
)
from .metrics import EventRecord, PerAgentRecord, RunResult, build_door_bins
from .rng import RngStreams
from .scenario import (
    NEIGHBOURS_8,
    CellKind,
    Geometry,
    Scenario,
    derive_network,
    distance_field,
    parse_scenario,
)
from .socialforce import SfState, detect_arch, exposed_wall_cells, sf_step

CA_DECISION_INTERVAL = 1.0   # s between decision rounds on the grid backend
ARCH_CHECK_INTERVAL = 1.0    # s between clog checks at doors
SENSE_EPS = 1e-9             # anything above ambient by this much is noticed
CROSS_SLACK = 0.4            # m of tangential tolerance for plane crossings


def state_digest(
    t: float,
    xs,
    ys,
    statuses,
    health,
    nervousness,
    insistence,
    targets,
) -> str:
    """64-bit fingerprint of the dynamic simulation state.

    Arrays enter in agent-id order with fixed-width little-endian
    encoding, so equal states produce equal digests across runs,
    platforms and worker counts.
    """
    h = hashlib.blake2b(digest_size=8)
    xs = np.asarray(xs, dtype=np.float64)
    h.update(struct.pack("<dQ", float(t), len(xs)))
    h.update(np.ascontiguousarray(np.asarray(statuses, dtype=np.uint8)).tobytes())
    h.update(np.ascontiguousarray(np.asarray(targets, dtype=np.int32)).tobytes())
    for arr in (xs, ys, health, nervousness, insistence):
        h.update(np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).tobytes())
    return h.hexdigest()


#: digest of the agentless state at t = 0; pinned by the test suite
EMPTY_STATE_DIGEST = state_digest(0.0, (), (), (), (), (), (), ())


def load_hazard_field(scenario: Scenario) -> HazardField:
    """Materialise the scenario's hazard source into a sampled field."""
    source = scenario.hazard_source
    geometry = scenario.geometry
    if source.kind == "ambient":
        return HazardField.ambient(geometry.height, geometry.width)
    if source.kind == "file":
        path = source.path
        if not os.path.isabs(path):
            path = os.path.join(source.base_dir, path)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise SimulationError(f"cannot read hazard series {path!r}: {exc}") from exc
        return load_hazard_series(text, geometry.height, geometry.width)
    if source.kind == "builtin":
        spec = dict(source.builtin or {})
        origin = spec.pop("source")
        return builtin_smoke(geometry, (int(origin[0]), int(origin[1])), spec)
    raise SimulationError(f"unknown hazard source kind {source.kind!r}")


@dataclass
class DoorSite:
    """A doorway (or bare exit span) instrumented for flow counting."""

    door_id: str
    cells: list[tuple[int, int]]
    center: np.ndarray        # (2,) m
    upstream: np.ndarray      # (2,) unit normal pointing into the crowd side
    half_span: float          # m along the opening
    covers_exit: bool = False  # opening lies on exit cells (bodies vanish here)

    # mutable per-run counters
    first_cross_t: float | None = None
    recent: list = field(default_factory=list)   # (t, persons) crossing records
    clogged: bool = False


def _make_door_site(geometry: Geometry, door_id: str, cells: list[tuple[int, int]]) -> DoorSite:
    cs = geometry.cell_size
    arr = np.asarray(cells, dtype=np.int64)
    center = (arr.mean(axis=0) + 0.5) * cs
    ext = arr.max(axis=0) - arr.min(axis=0)
    if ext[0] > ext[1]:
        normal_axis = 1          # span runs along x, passage along y
    elif ext[1] > ext[0]:
        normal_axis = 0
    else:
        # single cell (or square cluster): passage direction is the axis
        # with more open neighbours
        open_mask = geometry.open_mask
        counts = [0, 0]
        for (x, y) in cells:
            for axis, (dx, dy) in ((0, (1, 0)), (0, (-1, 0)), (1, (0, 1)), (1, (0, -1))):
                nx, ny = x + dx, y + dy
                if geometry.in_bounds(nx, ny) and open_mask[ny, nx]:
                    counts[axis] += 1
        normal_axis = 0 if counts[0] >= counts[1] else 1
    step = np.zeros(2, dtype=np.int64)
    step[normal_axis] = 1
    plus = minus = 0
    for (x, y) in cells:
        for sign in (1, -1):
            nx, ny = x + sign * step[0], y + sign * step[1]
            if geometry.in_bounds(nx, ny) and geometry.kinds[ny, nx] == CellKind.EMPTY:
                if sign > 0:
                    plus += 1
                else:
                    minus += 1
    upstream = np.zeros(2)
    upstream[normal_axis] = 1.0 if plus >= minus else -1.0
    tangent_axis = 1 - normal_axis
    half_span = (int(ext[tangent_axis]) + 1) * cs / 2.0
    covers_exit = any(geometry.kinds[y, x] == CellKind.EXIT for (x, y) in cells)
    return DoorSite(
        door_id=door_id,
        cells=list(cells),
        center=center,
        upstream=upstream,
        half_span=half_span,
        covers_exit=covers_exit,
    )


def door_sites(geometry: Geometry) -> list[DoorSite]:
    """Instrumented openings: every declared door plus each exit zone
    whose cells no door covers (synthetic id ``exit:<zone>``)."""
    sites = []
    covered: set[tuple[int, int]] = set()
    for door in geometry.doors:
        sites.append(_make_door_site(geometry, door.id, door.cells))
        covered.update(door.cells)
    for zone in geometry.exit_zones:
        if any(c not in covered for c in zone.cells):
            sites.append(_make_door_site(geometry, f"exit:{zone.id}", zone.cells))
    return sites


class _Simulation:
    """Mutable run state; built once per run() call."""

    def __init__(self, scenario: Scenario, config: RunConfig | None = None):
        self.scenario = scenario
        self.geometry = scenario.geometry
        self.config = config if config is not None else scenario.config
        self.config.validate()
        self.backend = self.config.backend
        self.params = self.config.params()
        self.cs = self.geometry.cell_size
        self.dt = self.config.resolved_dt(self.cs)
        self.streams = RngStreams(self.config.seed)
        self.warnings: list[str] = []
        self.events: list[EventRecord] = []
        self.trajectory: list[tuple] = []
        self.crossings: list[tuple[float, str, int]] = []

        geometry = self.geometry
        self.zones = geometry.exit_zones
        self.zone_grid = geometry.zone_of_cell()
        self.exit_fields = [distance_field(geometry, z.cells) for z in self.zones]
        self.field_global = distance_field(geometry)
        blocked = geometry.blocked_mask
        self.has_interior_blockers = (
            bool(blocked[1:-1, 1:-1].any()) if min(blocked.shape) > 2 else False
        )
        self.zone_centers = (
            np.array([z.center(self.cs) for z in self.zones])
            if self.zones
            else np.zeros((0, 2))
        )
        self.zone_cells = [np.asarray(z.cells, dtype=np.int64) for z in self.zones]

        # route network: the flow backend moves on it, the continuous
        # backend steers by it, and spawn-by-node needs its room labels
        self.network = None
        self.room_labels = None
        needs_network = self.backend in ("flow", "sf") or scenario.population.spawn_node is not None
        if self.backend == "flow" and scenario.network is not None:
            self.network = scenario.network
            self.room_labels = scenario.network.room_labels
        elif needs_network:
            self.network = derive_network(geometry, self.params)
            self.room_labels = self.network.room_labels
        if self.network is not None:
            self.warnings.extend(self.network.warnings)
        self.n_rooms = (
            int(self.room_labels.max()) + 1
            if self.room_labels is not None and self.room_labels.size
            else 0
        )

        self.hazard = load_hazard_field(scenario)
        self.ambient_only = bool(
            self.hazard.optical_density.max() <= 0.0
            and self.hazard.toxicity.max() <= 0.0
            and self.hazard.temperature.max() <= AMBIENT_TEMP + SENSE_EPS
        )

        # population
        agents = spawn_population(
            scenario.population, geometry, self.streams, self.params, self.backend, self.room_labels
        )
        self.agents = agents
        n = len(agents)
        self.n = n
        self.beliefs = init_beliefs(agents, len(self.zones), self.streams.spawn_attrs)

        self.ids = np.arange(n, dtype=np.int64)
        self.pos = np.array([a.position for a in agents], dtype=np.float64).reshape(n, 2)
        self.heading = np.zeros((n, 2))
        self.status = np.full(n, int(AgentStatus.PREMOVEMENT), dtype=np.uint8)
        self.target = np.full(n, NO_TARGET, dtype=np.int32)
        self.health = np.array([a.health for a in agents], dtype=np.float64)
        self.mobility = np.array([a.mobility for a in agents], dtype=np.int64)
        self.speed_pref = np.array([a.speed_pref for a in agents], dtype=np.float64)
        self.collab = np.array([a.collaboration for a in agents], dtype=np.float64)
        self.roles = np.array([a.role for a in agents], dtype=np.int64)
        self.rt = np.array([a.reaction_time for a in agents], dtype=np.float64)
        self.vision = np.array([a.vision_range for a in agents], dtype=np.float64)
        self.desired = np.zeros(n)
        self.waypoint = np.full((n, 2), np.nan)
        self.path_len = np.zeros(n)
        self.replans = np.zeros(n, dtype=np.int64)
        self.exit_t = np.full(n, np.nan)
        self.death_t = np.full(n, np.nan)

        # local hazard exposure, refreshed per tick (constant when ambient)
        self.local_temp = np.full(n, AMBIENT_TEMP)
        self.local_od = np.zeros(n)
        self.local_tox = np.zeros(n)
        self.temp_frame, self.od_frame, self.tox_frame = self.hazard.frame_at(0.0)

        # cadences, in ticks
        decision_interval = float(self.params["decision_interval"])
        if decision_interval <= 0:
            decision_interval = (
                SF_DECISION_INTERVAL if self.backend == "sf" else CA_DECISION_INTERVAL
            )
        self.decide_every = max(1, half_up(decision_interval / self.dt))
        traj_interval = float(self.params["trajectory_interval"])
        if traj_interval <= 0:
            traj_interval = SF_TRAJECTORY_INTERVAL if self.backend == "sf" else self.dt
        self.sample_every = max(1, half_up(traj_interval / self.dt))
        self.arch_every = max(1, half_up(ARCH_CHECK_INTERVAL / self.dt))

        self.sites = door_sites(geometry) if self.backend in ("ca", "sf") else []
        self.site_of_cell = np.full((geometry.height, geometry.width), -1, dtype=np.int32)
        for si, site in enumerate(self.sites):
            for (x, y) in site.cells:
                self.site_of_cell[y, x] = si

        self._init_backend()

    # -- backend wiring ----------------------------------------------------

    def _init_backend(self) -> None:
        geometry = self.geometry
        p = self.params
        self.ca_state = None
        self.sf_state = None
        self.flow_state = None
        if self.backend == "ca":
            cells = [geometry.cell_of((x, y)) for x, y in self.pos]
            self.ca_state = CaState.from_cells(geometry, cells)
            self.fields_stack = np.stack(self.exit_fields + [self.field_global])
            self.v_grid = self.cs / self.dt
        elif self.backend == "sf":
            self.sf_state = SfState.from_agents(self.agents, p)
            self.pos = self.sf_state.pos  # shared storage: sf_step moves it in place
            self.wall_cells = exposed_wall_cells(geometry)
            self._route_tables: dict[int, dict[int, int | None]] = {}
            self._arc_push: dict[int, np.ndarray | None] = {}
        elif self.backend == "flow":
            self._init_flow()
        else:
            raise SimulationError(f"unknown backend {self.backend!r}")

    def _init_flow(self) -> None:
        network = self.network
        spawn_node = self.scenario.population.spawn_node
        assignment: dict[int, int] = {}
        if spawn_node is not None:
            for i in range(self.n):
                assignment[i] = spawn_node
        else:
            if self.room_labels is None:
                raise SimulationError(
                    "area-spawned populations need a network with room labels; "
                    "use spawn.node with a hand-written network"
                )
            for i in range(self.n):
                cx, cy = self.geometry.cell_of((self.pos[i][0], self.pos[i][1]))
                label = int(self.room_labels[cy, cx])
                if label < 0:
                    label = self._nearest_room_label(cx, cy)
                assignment[i] = label
        self.flow_state = FlowState.from_assignment(network, assignment)

        # display/health positions for the coarse model
        self.node_points: dict[int, np.ndarray] = {}
        for node in network.nodes:
            point = None
            if node.kind == "room" and self.room_labels is not None:
                ys, xs = np.nonzero(self.room_labels == node.id)
                if len(xs):
                    point = np.array([(xs.mean() + 0.5) * self.cs, (ys.mean() + 0.5) * self.cs])
            if point is None and node.cell is not None:
                point = np.array(self.geometry.cell_center(*node.cell))
            if point is None:
                members = [i for i, nd in assignment.items() if nd == node.id]
                if members:
                    point = self.pos[members].mean(axis=0)
                else:
                    point = np.zeros(2)
                    self.warnings.append(f"node {node.id} has no geometry; placed at origin")
            self.node_points[node.id] = point
        doors = {d.id: d for d in self.geometry.doors}
        self.arc_points = []
        for arc in network.arcs:
            door = doors.get(arc.door_id)
            if door is not None:
                self.arc_points.append(np.array(door.center(self.cs)))
            else:
                self.arc_points.append(
                    0.5 * (self.node_points[arc.src] + self.node_points[arc.dst])
                )

    def _nearest_room_label(self, cx: int, cy: int) -> int:
        """Closest labelled cell (Chebyshev rings); for agents spawned on
        door-span cells that belong to no room region."""
        labels = self.room_labels
        h, w = labels.shape
        for r in range(1, max(h, w)):
            best = None
            for y in range(max(0, cy - r), min(h, cy + r + 1)):
                for x in range(max(0, cx - r), min(w, cx + r + 1)):
                    if max(abs(x - cx), abs(y - cy)) != r:
                        continue
                    if labels[y, x] >= 0:
                        d = (x - cx) ** 2 + (y - cy) ** 2
                        key = (d, int(labels[y, x]))
                        if best is None or key < best:
                            best = key
            if best is not None:
                return best[1]
        raise SimulationError(f"no room region near cell ({cx}, {cy})")

    # -- social-force steering ----------------------------------------------

    def _route_table(self, zone_id: int) -> dict[int, int | None]:
        table = self._route_tables.get(zone_id)
        if table is None:
            table = route_to_destination(self.network, self.n_rooms + zone_id)
            self._route_tables[zone_id] = table
        return table

    def _arc_push_point(self, arc_index: int) -> np.ndarray | None:
        """Where to aim when taking this arc: just beyond the door centre
        on the destination side (None for doorless arcs)."""
        if arc_index in self._arc_push:
            return self._arc_push[arc_index]
        arc = self.network.arcs[arc_index]
        doors = {d.id: d for d in self.geometry.doors}
        door = doors.get(arc.door_id)
        point = None
        if door is not None:
            center = np.array(door.center(self.cs))

            # destination-side cells adjacent to the span
            if arc.dst >= self.n_rooms:
                zone_id = arc.dst - self.n_rooms

                def member(x: int, y: int) -> bool:
                    return int(self.zone_grid[y, x]) == zone_id

            else:

                def member(x: int, y: int) -> bool:
                    return int(self.room_labels[y, x]) == arc.dst

            acc = np.zeros(2)
            count = 0
            for (x, y) in door.cells:
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nx, ny = x + dx, y + dy
                    if self.geometry.in_bounds(nx, ny) and member(nx, ny):
                        acc += self.geometry.cell_center(nx, ny)
                        count += 1
            if count:
                direction = acc / count - center
                norm = float(np.linalg.norm(direction))
                if norm > 1e-9:
                    point = center + direction / norm * (0.9 * self.cs)
            if point is None:
                point = center
        self._arc_push[arc_index] = point
        return point

    def _field_hop(self, field_grid: np.ndarray, cx: int, cy: int) -> tuple[float, float] | None:
        """Centre of the steepest-descent neighbour cell, or None at a
        minimum / in an unreachable pocket."""
        geometry = self.geometry
        here = field_grid[cy, cx]
        best = None
        best_val = here if math.isfinite(here) else math.inf
        open_mask = geometry.open_mask
        for dx, dy, _cost in NEIGHBOURS_8:
            nx, ny = cx + dx, cy + dy
            if not geometry.in_bounds(nx, ny) or not open_mask[ny, nx]:
                continue
            if dx and dy and not (open_mask[cy, nx] and open_mask[ny, cx]):
                continue
            val = field_grid[ny, nx]
            if val < best_val:
                best_val = val
                best = (nx, ny)
        if best is None:
            return None
        return self.geometry.cell_center(*best)

    def _sf_waypoint(self, i: int, zone_id: int) -> tuple[float, float] | None:
        geometry = self.geometry
        cx, cy = geometry.cell_of((self.pos[i][0], self.pos[i][1]))
        wp = None
        room = int(self.room_labels[cy, cx]) if self.room_labels is not None else -1
        if room >= 0:
            arc_index = self._route_table(zone_id).get(room)
            if arc_index is not None:
                wp = self._arc_push_point(arc_index)
                if wp is None:
                    # doorless hop straight for the nearest zone cell
                    zc = self.zone_cells[zone_id]
                    centers = (zc + 0.5) * self.cs
                    d2 = ((centers - self.pos[i]) ** 2).sum(axis=1)
                    wp = centers[int(np.argmin(d2))]
        if wp is None:
            wp = self._field_hop(self.exit_fields[zone_id], cx, cy)
        if wp is not None:
            dx = float(wp[0]) - self.pos[i][0]
            dy = float(wp[1]) - self.pos[i][1]
            if math.hypot(dx, dy) < float(self.params["waypoint_reach"]):
                hop = self._field_hop(self.exit_fields[zone_id], cx, cy)
                if hop is not None:
                    wp = hop
        if wp is None:
            return None
        return (float(wp[0]), float(wp[1]))

    def _lost_waypoint(self, i: int) -> tuple[float, float] | None:
        cx, cy = self.geometry.cell_of((self.pos[i][0], self.pos[i][1]))
        return self._field_hop(self.field_global, cx, cy)

    # -- per-tick phases -----------------------------------------------------

    def _inside_mask(self) -> np.ndarray:
        return (self.status == int(AgentStatus.PREMOVEMENT)) | (
            self.status == int(AgentStatus.MOVING)
        )

    def _all_done(self) -> bool:
        return not bool(self._inside_mask().any())

    def _hazard_phase(self, t: float) -> None:
        if self.ambient_only:
            return
        self.temp_frame, self.od_frame, self.tox_frame = self.hazard.frame_at(t)
        inside = np.nonzero(self._inside_mask())[0]
        if len(inside) == 0:
            return
        cs = self.cs
        cx = np.clip((self.pos[inside, 0] / cs).astype(np.int64), 0, self.geometry.width - 1)
        cy = np.clip((self.pos[inside, 1] / cs).astype(np.int64), 0, self.geometry.height - 1)
        temp = self.temp_frame[cy, cx]
        od = self.od_frame[cy, cx]
        tox = self.tox_frame[cy, cx]
        self.local_temp[inside] = temp
        self.local_od[inside] = od
        self.local_tox[inside] = tox

        dec = health_decrement(temp, od, tox, self.dt, self.params)
        hurt = dec > 0
        if hurt.any():
            rows = inside[hurt]
            self.health[rows] = np.maximum(0.0, self.health[rows] - dec[hurt])
            for i in rows:
                self.agents[i].health = float(self.health[i])
            dead = rows[self.health[rows] <= 0.0]
            for i in dead:
                self._kill(int(i), t)
        self.vision[inside] = visibility_range_bulk(
            self.local_od[inside], self.health[inside], self.params
        )

    def _kill(self, i: int, t: float) -> None:
        self.status[i] = int(AgentStatus.DEAD)
        self.agents[i].status = AgentStatus.DEAD
        self.agents[i].health = 0.0
        self.death_t[i] = t
        self.events.append(EventRecord(t, "died", i, {}))
        if self.ca_state is not None:
            self.ca_state.vacate(i)
        if self.sf_state is not None:
            self.sf_state.active[i] = False
            self.sf_state.vel[i] = 0.0
        if self.flow_state is not None:
            self.flow_state.remove(i)
            self.flow_state.eligible.discard(i)

    def _premovement_phase(self, t: float) -> np.ndarray:
        """Start everyone whose delay has elapsed or who senses the
        hazard directly; returns the newly moving indices."""
        waiting = self.status == int(AgentStatus.PREMOVEMENT)
        if not waiting.any():
            return np.zeros(0, dtype=np.int64)
        due = np.zeros(self.n, dtype=bool)
        if t + SENSE_EPS >= self.config.alarm_time:
            due = t + SENSE_EPS >= self.config.alarm_time + self.rt
        sensed = (
            (self.local_od > SENSE_EPS)
            | (self.local_temp > AMBIENT_TEMP + SENSE_EPS)
            | (self.local_tox > SENSE_EPS)
        )
        start = np.nonzero(waiting & (due | sensed))[0]
        for i in start:
            self.status[i] = int(AgentStatus.MOVING)
            self.agents[i].status = AgentStatus.MOVING
        if self.flow_state is not None and len(start):
            self.flow_state.eligible.update(int(i) for i in start)
        return start

    def _decision_phase(self, k: int, t: float, newly_moving: np.ndarray) -> None:
        if self.backend == "flow":
            return  # routing is static on the coarse network
        if k % self.decide_every == 0:
            deciders = np.nonzero(
                (self.status == int(AgentStatus.MOVING)) & (self.mobility > 0)
            )[0]
        else:
            deciders = newly_moving[self.mobility[newly_moving] > 0]
        if len(deciders) == 0:
            return
        world = WorldView(
            geometry=self.geometry,
            params=self.params,
            t=t,
            alarm_active=t + SENSE_EPS >= self.config.alarm_time,
            positions=self.pos,
            headings=self.heading,
            statuses=self.status,
            targets=self.target,
            roles=self.roles,
            vision=self.vision,
            local_temp=self.local_temp,
            local_od=self.local_od,
            local_tox=self.local_tox,
            od_frame=self.od_frame,
            temp_frame=self.temp_frame,
            tox_frame=self.tox_frame,
            exit_fields=self.exit_fields,
            field_global=self.field_global,
            zone_centers=self.zone_centers,
            zone_cells=self.zone_cells,
            has_interior_blockers=self.has_interior_blockers,
            ambient_air=self.ambient_only,
            waypoint_fn=self._sf_waypoint if self.backend == "sf" else None,
            lost_waypoint_fn=self._lost_waypoint if self.backend == "sf" else None,
        )
        percepts = build_percepts(world, deciders, self.collab)
        rng = self.streams.decisions
        announcers: list[tuple[int, list[tuple]]] = []
        for row, i in enumerate(deciders):
            i = int(i)
            agent = self.agents[i]
            agent.position = (float(self.pos[i][0]), float(self.pos[i][1]))
            agent.health = float(self.health[i])
            intent = decide(agent, percepts[row], self.beliefs[i], rng, self.params)
            if intent.replanned:
                self.replans[i] += 1
                self.events.append(
                    EventRecord(t, "replanned", i, {"to": int(intent.target_exit)})
                )
            self.target[i] = intent.target_exit
            self.desired[i] = intent.desired_speed
            if intent.waypoint is None:
                self.waypoint[i] = (np.nan, np.nan)
            else:
                self.waypoint[i] = intent.waypoint
            if intent.announce:
                announcers.append((i, intent.announce))
        # message barrier: deliveries land after every decision this round
        for i, messages in announcers:
            receivers = inform_neighbors(
                self.agents[i], i, messages, world, self.beliefs, rng
            )
            if receivers:
                self.events.append(
                    EventRecord(
                        t,
                        "informed",
                        i,
                        {"receivers": receivers, "kinds": sorted({m[0] for m in messages})},
                    )
                )

    def _exit_agent(self, i: int, t: float, zone_id: int | None, door_id: str | None) -> None:
        self.status[i] = int(AgentStatus.EXITED)
        self.agents[i].status = AgentStatus.EXITED
        self.exit_t[i] = t
        payload: dict = {}
        if zone_id is not None:
            payload["exit"] = int(zone_id)
        if door_id is not None:
            payload["door"] = door_id
        self.events.append(EventRecord(t, "exited", i, payload))

    def _record_crossing(self, t: float, site_index: int, count: int) -> None:
        site = self.sites[site_index]
        self.crossings.append((t, site.door_id, count))
        site.recent.append((t, count))
        if site.first_cross_t is None:
            site.first_cross_t = t

    # -- backend ticks ---------------------------------------------------

    def _flow_tick(self, t: float) -> None:
        state = self.flow_state
        delivered = flow_step(state)
        network = self.network
        for cohort in delivered:
            arc = network.arcs[cohort.arc_index]
            if arc.door_id:
                self.crossings.append((t, arc.door_id, len(cohort.ids)))
            src_pt = self.node_points[arc.src]
            dst_pt = self.node_points[arc.dst]
            hop = float(np.linalg.norm(dst_pt - src_pt))
            dst_node = network.node_by_id(arc.dst)
            for agent_id in cohort.ids:
                self.path_len[agent_id] += hop
                self.pos[agent_id] = dst_pt
                if dst_node.kind == "destination":
                    zone_id = arc.dst - self.n_rooms if arc.dst >= self.n_rooms else None
                    self._exit_agent(agent_id, t, zone_id, arc.door_id)
        for cohort in state.in_transit:
            point = self.arc_points[cohort.arc_index]
            for agent_id in cohort.ids:
                self.pos[agent_id] = point

    def _ca_tick(self, k: int, t: float) -> None:
        state = self.ca_state
        geometry = self.geometry
        # arrival check first: anyone standing on an exit cell leaves
        present = np.nonzero(state.present)[0]
        if len(present):
            zones_here = self.zone_grid[state.y[present], state.x[present]]
            leaving = present[zones_here >= 0]
            for i in leaving:
                i = int(i)
                zone_id = int(self.zone_grid[state.y[i], state.x[i]])
                site_index = int(self.site_of_cell[state.y[i], state.x[i]])
                door_id = self.sites[site_index].door_id if site_index >= 0 else None
                self._exit_agent(i, t, zone_id, door_id)
                state.vacate(i)

        movable = (
            (self.status == int(AgentStatus.MOVING))
            & (self.mobility > 0)
            & state.present
        )
        move_ids = np.nonzero(movable)[0]
        if len(move_ids):
            # walk at the decided speed (nervousness-scaled); agents that
            # have not decided yet fall back to their bodily speed
            v_eff = effective_speed_bulk(
                self.health[move_ids],
                self.mobility[move_ids],
                self.speed_pref[move_ids],
                self.params,
            )
            v_des = self.desired[move_ids]
            v_move = np.where(v_des > 0, v_des, v_eff)
            skip = np.maximum(1, np.floor(self.v_grid / np.maximum(v_move, 1e-9) + 0.5))
            move_ids = move_ids[(k % skip.astype(np.int64)) == 0]
        if len(move_ids) == 0:
            state.tick += 1
            return
        field_index = np.where(self.target >= 0, self.target, len(self.zones)).astype(np.int64)
        old_x = state.x[move_ids].copy()
        old_y = state.y[move_ids].copy()
        moved = ca_step(
            state,
            geometry,
            self.fields_stack,
            field_index,
            move_ids,
            self.streams.ca_conflicts,
            float(self.params["ca_noise"]),
        )
        if len(moved) == 0:
            return
        sel = np.searchsorted(move_ids, moved)
        ox = old_x[sel].astype(np.float64)
        oy = old_y[sel].astype(np.float64)
        nx = state.x[moved].astype(np.float64)
        ny = state.y[moved].astype(np.float64)
        self.pos[moved, 0] = (nx + 0.5) * self.cs
        self.pos[moved, 1] = (ny + 0.5) * self.cs
        dx = (nx - ox) * self.cs
        dy = (ny - oy) * self.cs
        length = np.hypot(dx, dy)
        self.path_len[moved] += length
        nonzero = length > 0
        self.heading[moved[nonzero], 0] = dx[nonzero] / length[nonzero]
        self.heading[moved[nonzero], 1] = dy[nonzero] / length[nonzero]
        # crossings: stepping onto an instrumented span from outside it
        site_new = self.site_of_cell[ny.astype(np.int64), nx.astype(np.int64)]
        site_old = self.site_of_cell[oy.astype(np.int64), ox.astype(np.int64)]
        entered = (site_new >= 0) & (site_new != site_old)
        if entered.any():
            for site_index in np.unique(site_new[entered]):
                count = int((site_new[entered] == site_index).sum())
                self._record_crossing(t, int(site_index), count)

    def _sf_tick(self, k: int, t: float) -> None:
        state = self.sf_state
        moving = (self.status == int(AgentStatus.MOVING)) & (self.mobility > 0)
        desired = np.where(moving, self.desired, 0.0)
        old_pos = self.pos.copy()
        sf_step(
            state,
            self.geometry,
            self.wall_cells,
            desired,
            self.waypoint,
            self.dt,
            self.params,
        )
        active = np.nonzero(state.active)[0]
        if len(active) == 0:
            return
        delta = self.pos[active] - old_pos[active]
        length = np.hypot(delta[:, 0], delta[:, 1])
        self.path_len[active] += length
        speed = np.hypot(state.vel[active, 0], state.vel[active, 1])
        turn = speed > 1e-3
        rows = active[turn]
        self.heading[rows] = state.vel[rows] / speed[turn, None]

        # plane crossings through interior openings; openings lying on
        # exit cells swallow bodies before their centre reaches the
        # plane, so those are counted at removal below instead
        for site_index, site in enumerate(self.sites):
            if site.covers_exit:
                continue
            rel_old = old_pos[active] - site.center
            rel_new = self.pos[active] - site.center
            s_old = rel_old @ site.upstream
            s_new = rel_new @ site.upstream
            tangent = np.array([-site.upstream[1], site.upstream[0]])
            offset = np.abs(rel_new @ tangent)
            crossed = (s_old > 0) & (s_new <= 0) & (offset <= site.half_span + CROSS_SLACK)
            count = int(crossed.sum())
            if count:
                self._record_crossing(t, site_index, count)

        # arrivals: a body whose centre reaches an exit cell is out
        cs = self.cs
        cx = np.clip((self.pos[active, 0] / cs).astype(np.int64), 0, self.geometry.width - 1)
        cy = np.clip((self.pos[active, 1] / cs).astype(np.int64), 0, self.geometry.height - 1)
        zones_here = self.zone_grid[cy, cx]
        leaving = active[zones_here >= 0]
        through: dict[int, int] = {}
        for i in leaving:
            i = int(i)
            gx, gy = self.geometry.cell_of((self.pos[i][0], self.pos[i][1]))
            zone_id = int(self.zone_grid[gy, gx])
            site_index = int(self.site_of_cell[gy, gx])
            door_id = self.sites[site_index].door_id if site_index >= 0 else None
            self._exit_agent(i, t, zone_id, door_id)
            state.active[i] = False
            state.vel[i] = 0.0
            if site_index >= 0:
                through[site_index] = through.get(site_index, 0) + 1
        for site_index, count in through.items():
            self._record_crossing(t, site_index, count)

    def _clog_phase(self, t: float) -> None:
        window = float(self.params["clog_window"])
        positions = self.pos[self.sf_state.active]
        for site in self.sites:
            if site.first_cross_t is None:
                continue
            if t < site.first_cross_t + window:
                continue
            site.recent = [(et, n) for (et, n) in site.recent if et > t - window - 1.0]
            through = sum(n for (et, n) in site.recent if t - window < et <= t)
            rate = through / window
            clogged, band = detect_arch(
                positions,
                (float(site.center[0]), float(site.center[1])),
                (float(site.upstream[0]), float(site.upstream[1])),
                rate,
                self.params,
            )
            if clogged and not site.clogged:
                site.clogged = True
                self.events.append(
                    EventRecord(t, "clog_start", site.door_id, {"band": band, "flow": rate})
                )
            elif not clogged and site.clogged:
                site.clogged = False
                self.events.append(
                    EventRecord(t, "clog_end", site.door_id, {"band": band, "flow": rate})
                )

    # -- sampling and assembly ---------------------------------------------

    def _sample(self, t: float) -> None:
        self.trajectory.append(
            (
                t,
                self.ids,
                self.pos[:, 0].astype(np.float32),
                self.pos[:, 1].astype(np.float32),
                self.health.astype(np.float32),
                self.status.copy(),
            )
        )

    def _tick(self, k: int, t: float) -> None:
        self._hazard_phase(t)
        newly_moving = self._premovement_phase(t)
        self._decision_phase(k, t, newly_moving)
        if self.backend == "flow":
            self._flow_tick(t)
        elif self.backend == "ca":
            self._ca_tick(k, t)
        else:
            self._sf_tick(k, t)
            if k % self.arch_every == 0:
                self._clog_phase(t)

    def run(self) -> RunResult:
        max_ticks = max(1, int(math.ceil(self.config.max_sim_time / self.dt - 1e-9)))
        k = 0
        while k < max_ticks:
            t = k * self.dt
            if k % self.sample_every == 0:
                self._sample(t)
            if self._all_done():
                break
            self._tick(k, t)
            k += 1
        t_end = k * self.dt
        timeout = not self._all_done()
        # close out open clog episodes so durations are well defined
        for site in self.sites:
            if site.clogged:
                site.clogged = False
                self.events.append(
                    EventRecord(t_end, "clog_end", site.door_id, {"end_of_run": True})
                )
        if not self.trajectory or self.trajectory[-1][0] != t_end:
            self._sample(t_end)

        nervousness = np.array([a.nervousness for a in self.agents], dtype=np.float64)
        insistence = np.array([a.insistence for a in self.agents], dtype=np.float64)
        digest = state_digest(
            t_end,
            self.pos[:, 0],
            self.pos[:, 1],
            self.status,
            self.health,
            nervousness,
            insistence,
            self.target,
        )

        exited = int((self.status == int(AgentStatus.EXITED)).sum())
        fatalities = int((self.status == int(AgentStatus.DEAD)).sum())
        assert exited + fatalities + int(self._inside_mask().sum()) == self.n

        curve = []
        total = 0
        for event in self.events:
            if event.kind == "exited":
                total += 1
                curve.append((event.t, total))

        per_agent = []
        for i in range(self.n):
            if not math.isnan(self.exit_t[i]):
                outcome, end_t = "exited", float(self.exit_t[i])
            elif not math.isnan(self.death_t[i]):
                outcome, end_t = "dead", float(self.death_t[i])
            else:
                outcome, end_t = "inside", None
            per_agent.append(
                PerAgentRecord(
                    id=i,
                    spawn_t=0.0,
                    end_t=end_t,
                    outcome=outcome,
                    path_length=float(self.path_len[i]),
                    replan_count=int(self.replans[i]),
                )
            )

        config_echo = {
            "backend": self.backend,
            "dt": self.dt,
            "seed": self.config.seed,
            "alarm_time": self.config.alarm_time,
            "max_sim_time": self.config.max_sim_time,
            "population": self.n,
            "cell_size": self.cs,
            "params": {key: self.params[key] for key in sorted(self.params)},
        }

        warnings = list(self.warnings)
        if self.ca_state is not None:
            warnings.extend(self.ca_state.warnings)
        if self.sf_state is not None:
            warnings.extend(self.sf_state.warnings)

        return RunResult(
            backend=self.backend,
            dt=self.dt,
            seed=self.config.seed,
            population=self.n,
            t_end=t_end,
            timeout=timeout,
            exited=exited,
            fatalities=fatalities,
            egress_curve=curve,
            per_agent=per_agent,
            events=self.events,
            crossings=self.crossings,
            door_flows=build_door_bins(self.crossings, t_end),
            config_echo=config_echo,
            digest=digest,
            trajectory=self.trajectory,
            warnings=warnings,
        )


def run(scenario: Scenario | str, config: RunConfig | None = None) -> RunResult:
    """Simulate a scenario to completion (or the time limit).

    ``scenario`` is either a parsed ``Scenario`` or raw JSON text.
    ``config`` overrides the scenario's embedded run configuration when
    given.  Identical scenario + config + seed always produces an
    identical result, including its state digest.
    """
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    return _Simulation(scenario, config).run()
