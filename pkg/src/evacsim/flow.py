"""Coarse network-flow backend.

People are held in per-node FIFO queues and move along arcs in whole
cohorts, at most ``capacity`` persons per tick per arc, arriving after
the arc's traversal time.  Routing is static: every node forwards
toward its nearest destination (by total traversal time), so the model
stays transparent enough to check against closed-form queueing results.

Individual ids are carried through the queues so per-person exit times
and positions remain well defined, even though the dynamics only ever
act on counts.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

from .errors import SemanticViolation, SimulationError
from .scenario import EgressNetwork


def _reverse_adjacency(network: EgressNetwork) -> dict[int, list[tuple[int, int]]]:
    """dst node id -> list of (arc index, src node id)."""
    rev: dict[int, list[tuple[int, int]]] = {n.id: [] for n in network.nodes}
    for i, arc in enumerate(network.arcs):
        rev[arc.dst].append((i, arc.src))
    return rev


def _distances_to(network: EgressNetwork, dest_id: int) -> dict[int, int]:
    """Total traversal time from every node to one destination."""
    rev = _reverse_adjacency(network)
    dist = {dest_id: 0}
    heap = [(0, dest_id)]
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist[node]:
            continue
        for arc_index, src in rev[node]:
            nd = d + network.arcs[arc_index].traversal_time
            if src not in dist or nd < dist[src]:
                dist[src] = nd
                heapq.heappush(heap, (nd, src))
    return dist


def route_to_destination(network: EgressNetwork, dest_id: int) -> dict[int, int | None]:
    """Next-arc table toward one specific destination.

    Maps node id to the index of the outgoing arc that starts a
    shortest path to ``dest_id`` (ties broken by smallest arc index),
    or None when the node is the destination itself or cannot reach it.
    """
    dist = _distances_to(network, dest_id)
    table: dict[int, int | None] = {}
    for node in network.nodes:
        if node.id == dest_id or node.id not in dist:
            table[node.id] = None
            continue
        best_arc = None
        best_time = None
        for arc_index, arc in network.out_arcs(node.id):
            if arc.dst not in dist:
                continue
            t = arc.traversal_time + dist[arc.dst]
            if best_time is None or t < best_time:
                best_time = t
                best_arc = arc_index
        table[node.id] = best_arc
    return table


def flow_route(network: EgressNetwork) -> dict[int, int | None]:
    """Static next-arc table: every node forwards toward its nearest
    destination, ties broken by smallest destination id, then smallest
    arc index.  Destinations map to None (absorbing).

    Raises when some node cannot reach any destination.
    """
    dests = sorted(n.id for n in network.destinations())
    per_dest = {d: _distances_to(network, d) for d in dests}
    table: dict[int, int | None] = {}
    dest_set = set(dests)
    for node in network.nodes:
        if node.id in dest_set:
            table[node.id] = None
            continue
        best: tuple[int, int] | None = None  # (time, dest id)
        for d in dests:
            if node.id in per_dest[d]:
                cand = (per_dest[d][node.id], d)
                if best is None or cand < best:
                    best = cand
        if best is None:
            raise SemanticViolation(
                "network.connectivity", f"node {node.id} cannot reach any destination"
            )
        _, dest = best
        dist = per_dest[dest]
        best_arc = None
        best_time = None
        for arc_index, arc in network.out_arcs(node.id):
            if arc.dst not in dist:
                continue
            t = arc.traversal_time + dist[arc.dst]
            if best_time is None or t < best_time:
                best_time = t
                best_arc = arc_index
        table[node.id] = best_arc
    return table


@dataclass
class Cohort:
    arc_index: int
    ids: list[int]
    depart_tick: int
    arrival_tick: int


@dataclass
class FlowState:
    """Mutable queue state of the flow backend.

    ``queues`` holds waiting ids per node in FIFO order; ``in_transit``
    holds departed cohorts until their arrival tick; ``arrived`` maps
    each id to (arrival tick, destination node id).
    """

    network: EgressNetwork
    routes: dict[int, int | None]
    queues: dict[int, deque] = field(default_factory=dict)
    in_transit: list[Cohort] = field(default_factory=list)
    arrived: dict[int, tuple[int, int]] = field(default_factory=dict)
    eligible: set[int] = field(default_factory=set)
    tick: int = 0
    total: int = 0

    @classmethod
    def from_assignment(cls, network: EgressNetwork, assignment: dict[int, int],
                        routes: dict[int, int | None] | None = None) -> "FlowState":
        """Build the initial state from an id -> node placement."""
        if routes is None:
            routes = flow_route(network)
        state = cls(network=network, routes=routes)
        state.queues = {n.id: deque() for n in network.nodes}
        for agent_id in sorted(assignment):
            node_id = assignment[agent_id]
            if node_id not in state.queues:
                raise SimulationError(f"agent {agent_id} assigned to unknown node {node_id}")
            state.queues[node_id].append(agent_id)
        state.total = len(assignment)
        return state

    # -- accounting ------------------------------------------------------
    def waiting_count(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def transit_count(self) -> int:
        return sum(len(c.ids) for c in self.in_transit)

    def check_conservation(self) -> None:
        have = self.waiting_count() + self.transit_count() + len(self.arrived)
        if have != self.total:
            raise AssertionError(
                f"person conservation broken at tick {self.tick}: {have} != {self.total}"
            )

    def locate(self, agent_id: int):
        """('node', node id) | ('arc', arc index) | ('arrived', node id)."""
        if agent_id in self.arrived:
            return ("arrived", self.arrived[agent_id][1])
        for node_id, q in self.queues.items():
            if agent_id in q:
                return ("node", node_id)
        for cohort in self.in_transit:
            if agent_id in cohort.ids:
                return ("arc", cohort.arc_index)
        return None

    def remove(self, agent_id: int) -> bool:
        """Take one person out of the system (death); ignores arrived ids."""
        for q in self.queues.values():
            if agent_id in q:
                q.remove(agent_id)
                self.total -= 1
                return True
        for cohort in self.in_transit:
            if agent_id in cohort.ids:
                cohort.ids.remove(agent_id)
                self.total -= 1
                return True
        return False


def flow_step(state: FlowState) -> list[Cohort]:
    """Advance one tick; returns the cohorts that landed this tick, in
    deterministic (depart tick, arc index) order.

    Departure phase: every node sends up to its routed arc's capacity
    of eligible waiting persons (FIFO, ineligible ones are skipped in
    place).  Arrival phase: cohorts whose time has come either join the
    destination record or the next node's queue.  A zero-traversal arc
    delivers within the same tick.  The caller classifies each landed
    cohort by the kind of its arc's destination node.
    """
    network = state.network
    tick = state.tick

    for node_id in sorted(state.queues):
        arc_index = state.routes.get(node_id)
        if arc_index is None:
            continue
        queue = state.queues[node_id]
        if not queue:
            continue
        arc = network.arcs[arc_index]
        taken: list[int] = []
        kept: list[int] = []
        while queue and len(taken) < arc.capacity:
            agent_id = queue.popleft()
            if agent_id in state.eligible:
                taken.append(agent_id)
            else:
                kept.append(agent_id)
        for agent_id in reversed(kept):
            queue.appendleft(agent_id)
        if not taken:
            continue
        assert len(taken) <= arc.capacity
        state.in_transit.append(
            Cohort(arc_index=arc_index, ids=taken, depart_tick=tick, arrival_tick=tick + arc.traversal_time)
        )

    still: list[Cohort] = []
    due = []
    for cohort in state.in_transit:
        if cohort.arrival_tick <= tick:
            due.append(cohort)
        else:
            still.append(cohort)
    due.sort(key=lambda c: (c.depart_tick, c.arc_index))
    for cohort in due:
        arc = network.arcs[cohort.arc_index]
        dst = network.node_by_id(arc.dst)
        if dst.kind == "destination":
            for agent_id in cohort.ids:
                state.arrived[agent_id] = (tick, dst.id)
        else:
            state.queues[dst.id].extend(cohort.ids)
    state.in_transit = still

    state.check_conservation()
    state.tick = tick + 1
    return due
