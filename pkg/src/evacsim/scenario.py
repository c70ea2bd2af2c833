"""Scenario model: floor-plan geometry, egress network, population.

A scenario document is JSON with four sections -- ``geometry``,
``population``, optional ``network`` and ``hazard`` -- plus a ``config``
block.  The grid is encoded as strings, one character per cell:
``.`` walkable, ``#`` wall, ``o`` obstacle, ``E`` exit.  Cell (x, y) is
column x of row y; positions in metres put the origin at the top-left
corner of cell (0, 0).
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .config import PARAM_DEFAULTS, RunConfig, half_up
from .errors import ScenarioSyntaxError, SchemaViolation, SemanticViolation

DEFAULT_CELL_SIZE = 0.4  # m

SQRT2 = math.sqrt(2.0)


class CellKind(IntEnum):
    EMPTY = 0
    WALL = 1
    OBSTACLE = 2
    EXIT = 3


GLYPH_TO_KIND = {".": CellKind.EMPTY, "#": CellKind.WALL, "o": CellKind.OBSTACLE, "E": CellKind.EXIT}
KIND_TO_GLYPH = {int(v): k for k, v in GLYPH_TO_KIND.items()}


@dataclass
class Door:
    """A straight run of walkable cells that connects two spaces."""

    id: str
    cells: list[tuple[int, int]]
    width: float  # m, clear width used for capacity derivation

    def span_length(self, cell_size: float) -> float:
        return len(self.cells) * cell_size

    def center(self, cell_size: float) -> tuple[float, float]:
        xs = [c[0] + 0.5 for c in self.cells]
        ys = [c[1] + 0.5 for c in self.cells]
        return (sum(xs) / len(xs) * cell_size, sum(ys) / len(ys) * cell_size)


@dataclass
class ExitZone:
    """A connected cluster of exit cells, addressed by a small integer id."""

    id: int
    cells: list[tuple[int, int]]

    def center(self, cell_size: float) -> tuple[float, float]:
        xs = [c[0] + 0.5 for c in self.cells]
        ys = [c[1] + 0.5 for c in self.cells]
        return (sum(xs) / len(xs) * cell_size, sum(ys) / len(ys) * cell_size)


@dataclass(eq=False)
class Geometry:
    width: int
    height: int
    cell_size: float
    kinds: np.ndarray          # int8 [height, width] of CellKind codes
    exits: list[tuple[int, int]]
    doors: list[Door]

    def __post_init__(self):
        self.kinds = np.asarray(self.kinds, dtype=np.int8)
        self._exit_zones: list[ExitZone] | None = None

    # -- masks ---------------------------------------------------------
    @property
    def open_mask(self) -> np.ndarray:
        return (self.kinds == CellKind.EMPTY) | (self.kinds == CellKind.EXIT)

    @property
    def blocked_mask(self) -> np.ndarray:
        return ~self.open_mask

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_open(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and bool(self.open_mask[y, x])

    # -- coordinate helpers --------------------------------------------
    def cell_center(self, x: int, y: int) -> tuple[float, float]:
        return ((x + 0.5) * self.cell_size, (y + 0.5) * self.cell_size)

    def cell_of(self, pos: tuple[float, float]) -> tuple[int, int]:
        x = min(self.width - 1, max(0, int(pos[0] / self.cell_size)))
        y = min(self.height - 1, max(0, int(pos[1] / self.cell_size)))
        return (x, y)

    # -- exits -----------------------------------------------------------
    @property
    def exit_zones(self) -> list[ExitZone]:
        """Exit cells grouped into 4-connected clusters, in scan order."""
        if self._exit_zones is None:
            exit_mask = self.kinds == CellKind.EXIT
            seen = np.zeros_like(exit_mask, dtype=bool)
            zones: list[ExitZone] = []
            for y in range(self.height):
                for x in range(self.width):
                    if exit_mask[y, x] and not seen[y, x]:
                        cells = _flood(exit_mask, seen, x, y)
                        zones.append(ExitZone(id=len(zones), cells=sorted(cells, key=lambda c: (c[1], c[0]))))
            self._exit_zones = zones
        return self._exit_zones

    def zone_of_cell(self) -> np.ndarray:
        """int32 grid mapping exit cells to their zone id, -1 elsewhere."""
        out = np.full((self.height, self.width), -1, dtype=np.int32)
        for zone in self.exit_zones:
            for (x, y) in zone.cells:
                out[y, x] = zone.id
        return out

    # -- validation ------------------------------------------------------
    def validate(self) -> list[str]:
        """Raise on invariant violations; return a list of warnings."""
        if self.width < 1 or self.height < 1:
            raise SemanticViolation("geometry.size", "grid must be at least 1x1")
        if self.kinds.shape != (self.height, self.width):
            raise SemanticViolation("geometry.cells", "cell grid does not match declared size")
        if not self.cell_size > 0:
            raise SemanticViolation("geometry.cell_size", "must be > 0")
        if not (self.kinds == CellKind.EXIT).any():
            raise SemanticViolation("geometry.exits", "grid contains no exit cell")
        for (x, y) in self.exits:
            if not self.in_bounds(x, y):
                raise SemanticViolation("geometry.exits", f"exit ({x}, {y}) outside the grid")
            on_boundary = x in (0, self.width - 1) or y in (0, self.height - 1)
            if not on_boundary and self.kinds[y, x] != CellKind.EXIT:
                raise SemanticViolation(
                    "geometry.exits",
                    f"exit ({x}, {y}) is neither on the boundary nor on an exit cell",
                )
        seen_door_ids: set[str] = set()
        for door in self.doors:
            if door.id in seen_door_ids:
                raise SemanticViolation("geometry.doors", f"duplicate door id {door.id!r}")
            seen_door_ids.add(door.id)
            _check_door_span(self, door)
        warnings = []
        dist = distance_field(self)
        unreachable = int((self.open_mask & ~np.isfinite(dist)).sum())
        if unreachable:
            warnings.append(f"{unreachable} open cell(s) cannot reach any exit")
        return warnings

    def __eq__(self, other) -> bool:
        if not isinstance(other, Geometry):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.cell_size == other.cell_size
            and np.array_equal(self.kinds, other.kinds)
            and self.exits == other.exits
            and self.doors == other.doors
        )


def _flood(mask: np.ndarray, seen: np.ndarray, x: int, y: int) -> list[tuple[int, int]]:
    """4-connected component of ``mask`` containing (x, y); marks ``seen``."""
    h, w = mask.shape
    stack = [(x, y)]
    seen[y, x] = True
    cells = []
    while stack:
        cx, cy = stack.pop()
        cells.append((cx, cy))
        for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if 0 <= nx < w and 0 <= ny < h and mask[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                stack.append((nx, ny))
    return cells


def _check_door_span(geometry: Geometry, door: Door) -> None:
    cells = door.cells
    if not cells:
        raise SemanticViolation("geometry.doors", f"door {door.id!r} has an empty span")
    for (x, y) in cells:
        if not geometry.in_bounds(x, y):
            raise SemanticViolation("geometry.doors", f"door {door.id!r} cell ({x}, {y}) outside the grid")
        if geometry.kinds[y, x] == CellKind.WALL:
            raise SemanticViolation("geometry.doors", f"door {door.id!r} spans a wall cell ({x}, {y})")
    xs = {c[0] for c in cells}
    ys = {c[1] for c in cells}
    if len(xs) > 1 and len(ys) > 1:
        raise SemanticViolation("geometry.doors", f"door {door.id!r} span is not a straight run")
    ordered = sorted(cells)
    for a, b in zip(ordered, ordered[1:]):
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
            raise SemanticViolation("geometry.doors", f"door {door.id!r} span is not contiguous")
    if door.width <= 0:
        raise SemanticViolation("geometry.doors", f"door {door.id!r} width must be > 0")


# ---------------------------------------------------------------------------
# distance fields
# ---------------------------------------------------------------------------

# 8-neighbourhood offsets in a fixed scan order (dx, dy, step cost).
NEIGHBOURS_8 = (
    (-1, -1, SQRT2), (0, -1, 1.0), (1, -1, SQRT2),
    (-1, 0, 1.0),                  (1, 0, 1.0),
    (-1, 1, SQRT2),  (0, 1, 1.0),  (1, 1, SQRT2),
)


def distance_field(geometry: Geometry, sources: list[tuple[int, int]] | None = None) -> np.ndarray:
    """Geodesic distance (in cells) from every open cell to the nearest source.

    Sources default to all exit cells.  Straight steps cost 1, diagonal
    steps sqrt(2); walls and obstacles are impassable and a diagonal step
    may not cut past a blocked corner (both orthogonal neighbours of the
    move must be open).
    """
    open_mask = geometry.open_mask
    h, w = open_mask.shape
    dist = np.full((h, w), np.inf, dtype=np.float64)
    if sources is None:
        ys, xs = np.nonzero(geometry.kinds == CellKind.EXIT)
        sources = list(zip(xs.tolist(), ys.tolist()))
    heap: list[tuple[float, int, int]] = []
    for (x, y) in sources:
        if 0 <= x < w and 0 <= y < h and open_mask[y, x]:
            dist[y, x] = 0.0
            heap.append((0.0, x, y))
    heapq.heapify(heap)
    while heap:
        d, x, y = heapq.heappop(heap)
        if d > dist[y, x]:
            continue
        for dx, dy, cost in NEIGHBOURS_8:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h) or not open_mask[ny, nx]:
                continue
            if dx and dy and not (open_mask[y, nx] and open_mask[ny, x]):
                continue  # no cutting past a blocked corner
            nd = d + cost
            if nd < dist[ny, nx]:
                dist[ny, nx] = nd
                heapq.heappush(heap, (nd, nx, ny))
    return dist


def line_of_sight(geometry: Geometry, a: tuple[int, int], b: tuple[int, int]) -> bool:
    """True when the straight segment between cell centres stays clear.

    The segment is sampled at half-cell intervals; it is blocked when any
    sample falls inside a wall or obstacle cell.  Sight may pass
    diagonally between two blocked corners (movement may not).
    """
    blocked = geometry.blocked_mask
    return bool(los_pairs(blocked, np.array([a]), np.array([b]))[0])


def los_pairs(blocked: np.ndarray, a_cells: np.ndarray, b_cells: np.ndarray) -> np.ndarray:
    """Vectorised line-of-sight over cell pairs; True where sight is clear."""
    a_cells = np.asarray(a_cells, dtype=np.float64)
    b_cells = np.asarray(b_cells, dtype=np.float64)
    n_pairs = len(a_cells)
    if n_pairs == 0:
        return np.zeros(0, dtype=bool)
    h, w = blocked.shape
    delta = b_cells - a_cells
    cheb = np.abs(delta).max(axis=1)
    max_cheb = int(cheb.max()) if n_pairs else 0
    n_samples = 2 * max_cheb + 1
    out = np.ones(n_pairs, dtype=bool)
    # chunk to bound memory at ~4M samples
    chunk = max(1, int(4_000_000 // max(1, n_samples)))
    s = np.linspace(0.0, 1.0, n_samples)
    for start in range(0, n_pairs, chunk):
        end = min(n_pairs, start + chunk)
        a = a_cells[start:end] + 0.5
        d = delta[start:end]
        pts = a[:, None, :] + d[:, None, :] * s[None, :, None]
        cx = np.clip(pts[:, :, 0].astype(np.int64), 0, w - 1)
        cy = np.clip(pts[:, :, 1].astype(np.int64), 0, h - 1)
        out[start:end] = ~blocked[cy, cx].any(axis=1)
    return out


# ---------------------------------------------------------------------------
# egress network
# ---------------------------------------------------------------------------


@dataclass
class Node:
    id: int
    area: float               # m^2 of usable floor
    kind: str                 # "room" | "destination"
    cell: tuple[int, int] | None = None  # representative cell, if known


@dataclass
class Arc:
    src: int
    dst: int
    traversal_time: int       # ticks, >= 0
    capacity: int             # persons per tick, >= 1
    door_id: str | None = None


@dataclass(eq=False)
class EgressNetwork:
    nodes: list[Node]
    arcs: list[Arc]
    room_labels: np.ndarray | None = None   # int32 grid, room region id or -1
    warnings: list[str] = field(default_factory=list)

    def node_by_id(self, node_id: int) -> Node:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def destinations(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "destination"]

    def out_arcs(self, node_id: int) -> list[tuple[int, Arc]]:
        return [(i, a) for i, a in enumerate(self.arcs) if a.src == node_id]

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise SemanticViolation("network.nodes", "duplicate node ids")
        if not any(n.kind == "destination" for n in self.nodes):
            raise SemanticViolation("network.nodes", "network has no destination node")
        known = set(ids)
        for i, arc in enumerate(self.arcs):
            if arc.src not in known or arc.dst not in known:
                raise SemanticViolation("network.arcs", f"arc {i} references an unknown node")
            if arc.traversal_time < 0:
                raise SemanticViolation("network.arcs", f"arc {i} traversal_time must be >= 0")
            if arc.capacity < 1:
                raise SemanticViolation("network.arcs", f"arc {i} capacity must be >= 1")
        unreachable = self.unreachable_nodes()
        if unreachable:
            raise SemanticViolation(
                "network.reachability",
                f"nodes {sorted(unreachable)} cannot reach any destination",
            )

    def unreachable_nodes(self) -> set[int]:
        """Node ids with no arc path to any destination."""
        reachable = {n.id for n in self.nodes if n.kind == "destination"}
        changed = True
        while changed:
            changed = False
            for arc in self.arcs:
                if arc.dst in reachable and arc.src not in reachable:
                    reachable.add(arc.src)
                    changed = True
        return {n.id for n in self.nodes} - reachable

    def __eq__(self, other) -> bool:
        if not isinstance(other, EgressNetwork):
            return NotImplemented
        return self.nodes == other.nodes and self.arcs == other.arcs


def room_regions(geometry: Geometry) -> np.ndarray:
    """Label 4-connected walkable regions, excluding door spans and exits.

    Returns an int32 grid: region id in scan order, or -1 for walls,
    obstacles, exit cells and door cells (door cells act as separators).
    """
    door_cells = {cell for door in geometry.doors for cell in door.cells}
    fillable = (geometry.kinds == CellKind.EMPTY).copy()
    for (x, y) in door_cells:
        if geometry.in_bounds(x, y):
            fillable[y, x] = False
    labels = np.full((geometry.height, geometry.width), -1, dtype=np.int32)
    seen = np.zeros_like(fillable, dtype=bool)
    next_label = 0
    for y in range(geometry.height):
        for x in range(geometry.width):
            if fillable[y, x] and not seen[y, x]:
                for (cx, cy) in _flood(fillable, seen, x, y):
                    labels[cy, cx] = next_label
                next_label += 1
    return labels


def _region_centroid_cell(cells: list[tuple[int, int]]) -> tuple[int, int]:
    cx = sum(c[0] for c in cells) / len(cells)
    cy = sum(c[1] for c in cells) / len(cells)
    return min(cells, key=lambda c: ((c[0] - cx) ** 2 + (c[1] - cy) ** 2, c[1], c[0]))


def derive_network(geometry: Geometry, params: dict | None = None) -> EgressNetwork:
    """Build the coarse egress network from the floor plan.

    Walkable regions separated by door spans become room nodes; each
    exit-cell cluster becomes a destination.  Every door yields an arc
    pair between the rooms it joins (one-way when it leads into an
    exit); rooms directly adjacent to exit cells get a one-way arc as
    well.  Arc traversal time comes from the span length at the
    reference walking speed; capacity from the clear width.
    """
    p = dict(PARAM_DEFAULTS)
    if params:
        p.update(params)
    cs = geometry.cell_size
    v_ref = float(p["v_ref"])
    flow_tick = float(p["flow_tick"])
    c_door = float(p["c_door"])

    labels = room_regions(geometry)
    n_rooms = int(labels.max()) + 1 if labels.size else 0
    region_cells: dict[int, list[tuple[int, int]]] = {r: [] for r in range(n_rooms)}
    for y in range(geometry.height):
        for x in range(geometry.width):
            r = int(labels[y, x])
            if r >= 0:
                region_cells[r].append((x, y))

    zones = geometry.exit_zones
    zone_grid = geometry.zone_of_cell()

    nodes: list[Node] = []
    for r in range(n_rooms):
        cells = region_cells[r]
        nodes.append(Node(id=r, area=len(cells) * cs * cs, kind="room", cell=_region_centroid_cell(cells)))
    zone_node_id = {zone.id: n_rooms + zone.id for zone in zones}
    for zone in zones:
        nodes.append(
            Node(
                id=zone_node_id[zone.id],
                area=len(zone.cells) * cs * cs,
                kind="destination",
                cell=_region_centroid_cell(zone.cells),
            )
        )

    arcs: list[Arc] = []

    def door_params(door: Door) -> tuple[int, int]:
        traversal = math.ceil(door.span_length(cs) / (v_ref * flow_tick))
        capacity = max(1, half_up(door.width * c_door))
        return traversal, capacity

    doored_pairs: set[tuple[int, int]] = set()
    for door in geometry.doors:
        adj_rooms: set[int] = set()
        adj_zones: set[int] = set()
        for (x, y) in door.cells:
            if zone_grid[y, x] >= 0:
                adj_zones.add(int(zone_grid[y, x]))
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if not geometry.in_bounds(nx, ny):
                    continue
                if labels[ny, nx] >= 0:
                    adj_rooms.add(int(labels[ny, nx]))
                if zone_grid[ny, nx] >= 0:
                    adj_zones.add(int(zone_grid[ny, nx]))
        traversal, capacity = door_params(door)
        rooms = sorted(adj_rooms)
        for i, r1 in enumerate(rooms):
            for r2 in rooms[i + 1:]:
                arcs.append(Arc(r1, r2, traversal, capacity, door.id))
                arcs.append(Arc(r2, r1, traversal, capacity, door.id))
                doored_pairs.add((r1, r2))
                doored_pairs.add((r2, r1))
        for r in rooms:
            for z in sorted(adj_zones):
                arcs.append(Arc(r, zone_node_id[z], traversal, capacity, door.id))
                doored_pairs.add((r, zone_node_id[z]))

    # direct room/exit contact without a door record
    contact: dict[tuple[int, int], int] = {}
    for y in range(geometry.height):
        for x in range(geometry.width):
            r = int(labels[y, x])
            if r < 0:
                continue
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if geometry.in_bounds(nx, ny) and zone_grid[ny, nx] >= 0:
                    key = (r, int(zone_grid[ny, nx]))
                    contact[key] = contact.get(key, 0) + 1
    for (r, z), n_cells in sorted(contact.items()):
        if (r, zone_node_id[z]) in doored_pairs:
            continue
        width = n_cells * cs
        traversal = math.ceil(cs / (v_ref * flow_tick))
        capacity = max(1, half_up(width * c_door))
        arcs.append(Arc(r, zone_node_id[z], traversal, capacity, f"exit:{z}"))

    network = EgressNetwork(nodes=nodes, arcs=arcs, room_labels=labels)

    # prune rooms that cannot reach any destination (e.g. sealed rooms)
    unreachable = network.unreachable_nodes()
    if unreachable:
        network.warnings.append(f"dropped unreachable room nodes {sorted(unreachable)}")
        network.nodes = [n for n in network.nodes if n.id not in unreachable]
        network.arcs = [a for a in network.arcs if a.src not in unreachable and a.dst not in unreachable]
    network.validate()
    return network


# ---------------------------------------------------------------------------
# population
# ---------------------------------------------------------------------------

DIST_KINDS = ("constant", "uniform", "categorical")


@dataclass
class DistSpec:
    """Sampling spec for one agent attribute."""

    kind: str
    value: object = None                     # constant
    lo: float | None = None                  # uniform
    hi: float | None = None
    values: list | None = None               # categorical
    weights: list[float] | None = None

    def validate(self, attr: str) -> None:
        where = f"population.attributes.{attr}"
        if self.kind not in DIST_KINDS:
            raise SchemaViolation(where, f"unknown distribution {self.kind!r}")
        if self.kind == "constant" and self.value is None:
            raise SchemaViolation(where, "constant distribution needs a value")
        if self.kind == "uniform":
            if self.lo is None or self.hi is None:
                raise SchemaViolation(where, "uniform distribution needs lo and hi")
            if self.lo > self.hi:
                raise SemanticViolation(where, "uniform lo must be <= hi")
        if self.kind == "categorical":
            if not self.values:
                raise SchemaViolation(where, "categorical distribution needs values")
            if self.weights is not None:
                if len(self.weights) != len(self.values):
                    raise SchemaViolation(where, "weights length must match values")
                if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
                    raise SemanticViolation(where, "weights must be non-negative and sum > 0")

    def support(self) -> list:
        if self.kind == "constant":
            return [self.value]
        if self.kind == "uniform":
            return [self.lo, self.hi]
        return list(self.values)

    def to_dict(self, attr: str) -> dict:
        doc: dict = {"attr": attr, "dist": self.kind}
        if self.kind == "constant":
            doc["value"] = self.value
        elif self.kind == "uniform":
            doc["lo"] = self.lo
            doc["hi"] = self.hi
        else:
            doc["values"] = list(self.values)
            if self.weights is not None:
                doc["weights"] = list(self.weights)
        return doc


@dataclass
class PopulationSpec:
    count: int
    spawn_rect: tuple[int, int, int, int] | None = None  # inclusive cell bounds x0,y0,x1,y1
    spawn_node: int | None = None
    attributes: dict[str, DistSpec] = field(default_factory=dict)

    def validate(self, geometry: Geometry) -> None:
        if not isinstance(self.count, int) or isinstance(self.count, bool) or self.count < 0:
            raise SchemaViolation("population.count", "must be a non-negative integer")
        if self.spawn_rect is not None and self.spawn_node is not None:
            raise SchemaViolation("population.spawn", "give either a rect or a node, not both")
        if self.spawn_rect is not None:
            x0, y0, x1, y1 = self.spawn_rect
            if x0 > x1 or y0 > y1:
                raise SemanticViolation("population.spawn", "rect corners are inverted")
            if not (geometry.in_bounds(x0, y0) and geometry.in_bounds(x1, y1)):
                raise SemanticViolation("population.spawn", "rect extends outside the grid")
        for attr, dist in self.attributes.items():
            dist.validate(attr)


# ---------------------------------------------------------------------------
# hazard source description (the field itself lives in evacsim.hazard)
# ---------------------------------------------------------------------------


@dataclass
class HazardSource:
    """Where hazard data comes from: a CSV file, the built-in smoke
    generator, or nothing (ambient conditions)."""

    kind: str                          # "ambient" | "file" | "builtin"
    path: str | None = None            # file: as written in the document
    base_dir: str = "."                # directory the path is relative to
    builtin: dict | None = None        # builtin generator parameters

    def to_dict(self) -> dict | None:
        if self.kind == "ambient":
            return None
        if self.kind == "file":
            return {"file": self.path}
        return {"builtin": dict(sorted(self.builtin.items()))}


BUILTIN_SMOKE_DEFAULTS = {
    "rate": 0.5,            # optical density added at the source per step
    "diffusion": 0.2,       # neighbour exchange coefficient (stable < 0.25)
    "step": 0.25,           # s, generator integration step
    "frame_interval": 1.0,  # s between emitted frames
    "duration": 120.0,      # s of generated field
    "temp_per_od": 100.0,   # degC added per unit optical density
    "tox_per_od": 0.02,     # toxicity per unit optical density
}


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Scenario:
    geometry: Geometry
    population: PopulationSpec
    config: RunConfig
    network: EgressNetwork | None = None
    hazard_source: HazardSource = field(default_factory=lambda: HazardSource(kind="ambient"))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.population == other.population
            and self.config == other.config
            and self.network == other.network
            and _hazard_eq(self.hazard_source, other.hazard_source)
        )


def _hazard_eq(a: HazardSource, b: HazardSource) -> bool:
    return a.kind == b.kind and a.path == b.path and a.builtin == b.builtin


def _require(doc: dict, key: str, kind, where: str):
    if key not in doc:
        raise SchemaViolation(f"{where}.{key}", "missing required field")
    value = doc[key]
    if kind is int and isinstance(value, bool):
        raise SchemaViolation(f"{where}.{key}", "expected an integer")
    if not isinstance(value, kind):
        raise SchemaViolation(f"{where}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _reject_unknown(doc: dict, known: set[str], where: str) -> None:
    for key in doc:
        if key not in known:
            raise SchemaViolation(f"{where}.{key}", "unknown field")


def parse_scenario(text: str, base_dir: str = ".") -> Scenario:
    """Parse and validate a scenario document.

    Raises :class:`ScenarioSyntaxError` for malformed JSON (with the
    position), :class:`SchemaViolation` for missing/unknown/mistyped
    fields (naming the field), and :class:`SemanticViolation` for
    structurally valid input that breaks an invariant.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioSyntaxError(exc.msg, line=exc.lineno, column=exc.colno) from None
    if not isinstance(doc, dict):
        raise SchemaViolation("$", "scenario document must be a JSON object")
    _reject_unknown(doc, {"geometry", "network", "population", "hazard", "config"}, "$")

    geometry = _parse_geometry(_require(doc, "geometry", dict, "$"))
    geometry.validate()

    network = None
    if doc.get("network") is not None:
        network = _parse_network(doc["network"])
        network.validate()

    population = _parse_population(_require(doc, "population", dict, "$"))
    population.validate(geometry)
    if population.spawn_node is not None and network is None:
        # spawn-by-node against the derived network is resolved at run time;
        # make sure derivation will succeed so errors surface at parse time
        derive_network(geometry)

    hazard_source = _parse_hazard_source(doc.get("hazard"), base_dir)

    config = RunConfig.from_dict(doc.get("config", {}) or {})
    return Scenario(
        geometry=geometry,
        population=population,
        config=config,
        network=network,
        hazard_source=hazard_source,
    )


def load_scenario(path: str) -> Scenario:
    import os

    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_scenario(text, base_dir=os.path.dirname(os.path.abspath(path)))


def _parse_geometry(doc: dict) -> Geometry:
    _reject_unknown(doc, {"cell_size", "cells", "doors", "exits"}, "geometry")
    rows = _require(doc, "cells", list, "geometry")
    if not rows or not all(isinstance(r, str) for r in rows):
        raise SchemaViolation("geometry.cells", "must be a non-empty list of strings")
    width = len(rows[0])
    if width == 0:
        raise SchemaViolation("geometry.cells", "rows must not be empty")
    kinds = np.zeros((len(rows), width), dtype=np.int8)
    for y, row in enumerate(rows):
        if len(row) != width:
            raise SemanticViolation("geometry.cells", f"row {y} length {len(row)} != {width}")
        for x, glyph in enumerate(row):
            if glyph not in GLYPH_TO_KIND:
                raise SchemaViolation("geometry.cells", f"unknown glyph {glyph!r} at ({x}, {y})")
            kinds[y, x] = GLYPH_TO_KIND[glyph]

    cell_size = doc.get("cell_size", DEFAULT_CELL_SIZE)
    if not isinstance(cell_size, (int, float)) or isinstance(cell_size, bool):
        raise SchemaViolation("geometry.cell_size", "must be a number")

    doors = []
    for i, ddoc in enumerate(doc.get("doors", []) or []):
        if not isinstance(ddoc, dict):
            raise SchemaViolation(f"geometry.doors[{i}]", "must be an object")
        _reject_unknown(ddoc, {"id", "cells", "width"}, f"geometry.doors[{i}]")
        cells_doc = _require(ddoc, "cells", list, f"geometry.doors[{i}]")
        cells = [_parse_cell(c, f"geometry.doors[{i}].cells") for c in cells_doc]
        door_id = ddoc.get("id", f"d{i}")
        if not isinstance(door_id, str):
            raise SchemaViolation(f"geometry.doors[{i}].id", "must be a string")
        width_m = ddoc.get("width", len(cells) * float(cell_size))
        if not isinstance(width_m, (int, float)) or isinstance(width_m, bool):
            raise SchemaViolation(f"geometry.doors[{i}].width", "must be a number")
        doors.append(Door(id=door_id, cells=cells, width=float(width_m)))

    exits_doc = doc.get("exits")
    if exits_doc is None:
        ys, xs = np.nonzero(kinds == CellKind.EXIT)
        exits = list(zip(xs.tolist(), ys.tolist()))
    else:
        if not isinstance(exits_doc, list):
            raise SchemaViolation("geometry.exits", "must be a list of [x, y] pairs")
        exits = [_parse_cell(c, "geometry.exits") for c in exits_doc]

    return Geometry(
        width=width,
        height=len(rows),
        cell_size=float(cell_size),
        kinds=kinds,
        exits=exits,
        doors=doors,
    )


def _parse_cell(doc, where: str) -> tuple[int, int]:
    if (
        not isinstance(doc, (list, tuple))
        or len(doc) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in doc)
    ):
        raise SchemaViolation(where, f"expected [x, y] integers, got {doc!r}")
    return (int(doc[0]), int(doc[1]))


def _parse_network(doc: dict) -> EgressNetwork:
    if not isinstance(doc, dict):
        raise SchemaViolation("network", "must be an object")
    _reject_unknown(doc, {"nodes", "arcs"}, "network")
    nodes = []
    for i, ndoc in enumerate(_require(doc, "nodes", list, "network")):
        if not isinstance(ndoc, dict):
            raise SchemaViolation(f"network.nodes[{i}]", "must be an object")
        _reject_unknown(ndoc, {"id", "area", "kind", "cell"}, f"network.nodes[{i}]")
        kind = _require(ndoc, "kind", str, f"network.nodes[{i}]")
        if kind not in ("room", "destination"):
            raise SchemaViolation(f"network.nodes[{i}].kind", "must be 'room' or 'destination'")
        cell = None
        if ndoc.get("cell") is not None:
            cell = _parse_cell(ndoc["cell"], f"network.nodes[{i}].cell")
        area = _require(ndoc, "area", (int, float), f"network.nodes[{i}]")
        if area < 0:
            raise SemanticViolation(f"network.nodes[{i}].area", "must be >= 0")
        nodes.append(Node(id=_require(ndoc, "id", int, f"network.nodes[{i}]"), area=float(area), kind=kind, cell=cell))
    arcs = []
    for i, adoc in enumerate(doc.get("arcs", []) or []):
        if not isinstance(adoc, dict):
            raise SchemaViolation(f"network.arcs[{i}]", "must be an object")
        _reject_unknown(adoc, {"from", "to", "traversal_time", "capacity", "door"}, f"network.arcs[{i}]")
        door = adoc.get("door")
        if door is not None and not isinstance(door, str):
            raise SchemaViolation(f"network.arcs[{i}].door", "must be a string")
        arcs.append(
            Arc(
                src=_require(adoc, "from", int, f"network.arcs[{i}]"),
                dst=_require(adoc, "to", int, f"network.arcs[{i}]"),
                traversal_time=_require(adoc, "traversal_time", int, f"network.arcs[{i}]"),
                capacity=_require(adoc, "capacity", int, f"network.arcs[{i}]"),
                door_id=door,
            )
        )
    return EgressNetwork(nodes=nodes, arcs=arcs)


def _parse_population(doc: dict) -> PopulationSpec:
    _reject_unknown(doc, {"count", "spawn", "attributes"}, "population")
    count = _require(doc, "count", int, "population")
    spawn_rect = None
    spawn_node = None
    spawn = doc.get("spawn")
    if spawn is not None:
        if not isinstance(spawn, dict):
            raise SchemaViolation("population.spawn", "must be an object")
        _reject_unknown(spawn, {"rect", "node"}, "population.spawn")
        if "rect" in spawn:
            rect = spawn["rect"]
            if not isinstance(rect, list) or len(rect) != 4 or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in rect
            ):
                raise SchemaViolation("population.spawn.rect", "expected [x0, y0, x1, y1] integers")
            spawn_rect = tuple(rect)
        if "node" in spawn:
            node = spawn["node"]
            if not isinstance(node, int) or isinstance(node, bool):
                raise SchemaViolation("population.spawn.node", "must be an integer node id")
            spawn_node = node

    attributes: dict[str, DistSpec] = {}
    attrs_doc = doc.get("attributes", []) or []
    if isinstance(attrs_doc, dict):
        raise SchemaViolation("population.attributes", "must be a list of {attr, dist, ...} objects")
    for i, adoc in enumerate(attrs_doc):
        if not isinstance(adoc, dict):
            raise SchemaViolation(f"population.attributes[{i}]", "must be an object")
        _reject_unknown(adoc, {"attr", "dist", "value", "lo", "hi", "values", "weights"}, f"population.attributes[{i}]")
        attr = _require(adoc, "attr", str, f"population.attributes[{i}]")
        if attr in attributes:
            raise SchemaViolation(f"population.attributes[{i}]", f"duplicate spec for {attr!r}")
        dist = DistSpec(
            kind=_require(adoc, "dist", str, f"population.attributes[{i}]"),
            value=adoc.get("value"),
            lo=adoc.get("lo"),
            hi=adoc.get("hi"),
            values=adoc.get("values"),
            weights=adoc.get("weights"),
        )
        attributes[attr] = dist
    return PopulationSpec(count=count, spawn_rect=spawn_rect, spawn_node=spawn_node, attributes=attributes)


def _parse_hazard_source(doc, base_dir: str) -> HazardSource:
    if doc is None:
        return HazardSource(kind="ambient")
    if not isinstance(doc, dict):
        raise SchemaViolation("hazard", "must be an object")
    _reject_unknown(doc, {"file", "builtin"}, "hazard")
    if ("file" in doc) == ("builtin" in doc):
        raise SchemaViolation("hazard", "give exactly one of 'file' or 'builtin'")
    if "file" in doc:
        path = doc["file"]
        if not isinstance(path, str):
            raise SchemaViolation("hazard.file", "must be a path string")
        return HazardSource(kind="file", path=path, base_dir=base_dir)
    bdoc = doc["builtin"]
    if not isinstance(bdoc, dict):
        raise SchemaViolation("hazard.builtin", "must be an object")
    _reject_unknown(bdoc, set(BUILTIN_SMOKE_DEFAULTS) | {"source"}, "hazard.builtin")
    if "source" not in bdoc:
        raise SchemaViolation("hazard.builtin.source", "missing required field")
    source = _parse_cell(bdoc["source"], "hazard.builtin.source")
    builtin = dict(BUILTIN_SMOKE_DEFAULTS)
    for key, value in bdoc.items():
        if key == "source":
            continue
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaViolation(f"hazard.builtin.{key}", "must be a number")
        builtin[key] = float(value)
    builtin["source"] = list(source)
    if builtin["rate"] < 0:
        raise SemanticViolation("hazard.builtin.rate", "must be >= 0")
    if not 0 <= builtin["diffusion"] <= 0.25:
        raise SemanticViolation("hazard.builtin.diffusion", "must lie in [0, 0.25] for stability")
    if builtin["step"] <= 0 or builtin["frame_interval"] <= 0 or builtin["duration"] <= 0:
        raise SemanticViolation("hazard.builtin", "step, frame_interval and duration must be > 0")
    return HazardSource(kind="builtin", builtin=builtin)


def serialize_scenario(scenario: Scenario) -> str:
    """Canonical JSON for a scenario, with all defaults resolved.

    ``parse_scenario(serialize_scenario(s))`` reproduces ``s`` exactly.
    """
    g = scenario.geometry
    rows = ["".join(KIND_TO_GLYPH[int(k)] for k in g.kinds[y]) for y in range(g.height)]
    doc: dict = {
        "geometry": {
            "cell_size": g.cell_size,
            "cells": rows,
            "doors": [
                {"id": d.id, "cells": [list(c) for c in d.cells], "width": d.width} for d in g.doors
            ],
            "exits": [list(c) for c in g.exits],
        },
        "population": {
            "count": scenario.population.count,
            "attributes": [
                spec.to_dict(attr) for attr, spec in sorted(scenario.population.attributes.items())
            ],
        },
        "config": scenario.config.to_dict(),
    }
    if scenario.population.spawn_rect is not None:
        doc["population"]["spawn"] = {"rect": list(scenario.population.spawn_rect)}
    elif scenario.population.spawn_node is not None:
        doc["population"]["spawn"] = {"node": scenario.population.spawn_node}
    if scenario.network is not None:
        doc["network"] = {
            "nodes": [
                {"id": n.id, "area": n.area, "kind": n.kind, **({"cell": list(n.cell)} if n.cell else {})}
                for n in scenario.network.nodes
            ],
            "arcs": [
                {
                    "from": a.src,
                    "to": a.dst,
                    "traversal_time": a.traversal_time,
                    "capacity": a.capacity,
                    **({"door": a.door_id} if a.door_id else {}),
                }
                for a in scenario.network.arcs
            ],
        }
    hazard = scenario.hazard_source.to_dict()
    if hazard is not None:
        doc["hazard"] = hazard
    return json.dumps(doc, indent=2, sort_keys=True)
