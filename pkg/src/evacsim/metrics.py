"""Run results and everything derived from them: egress statistics,
door-flow series, trajectory export, ASCII snapshots.

All functions here are pure over a completed :class:`RunResult`, so
they can be applied after the fact, in parallel, or to results loaded
from another process.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agents import STATUS_TOKENS, AgentStatus
from .scenario import CellKind, Geometry


@dataclass
class EventRecord:
    """One timestamped simulation event.

    ``subject`` is an agent id for agent events and a door id string
    for clog events.
    """

    t: float
    kind: str           # exited | died | replanned | informed | clog_start | clog_end
    subject: object
    payload: dict = field(default_factory=dict)


@dataclass
class PerAgentRecord:
    id: int
    spawn_t: float
    end_t: float | None      # exit or death time; None if still inside at the end
    outcome: str             # exited | dead | inside
    path_length: float       # m actually walked
    replan_count: int


@dataclass
class RunResult:
    """Everything a finished run leaves behind."""

    backend: str
    dt: float
    seed: int
    population: int
    t_end: float
    timeout: bool
    exited: int
    fatalities: int
    egress_curve: list[tuple[float, int]]
    per_agent: list[PerAgentRecord]
    events: list[EventRecord]
    crossings: list[tuple[float, str, int]]       # (t, door id, persons)
    door_flows: dict[str, list[tuple[float, int]]]  # door id -> 1 s bins
    config_echo: dict
    digest: str
    trajectory: list[tuple]                        # (t, ids, x, y, health, status) arrays
    warnings: list[str] = field(default_factory=list)


def build_door_bins(crossings: list[tuple[float, str, int]], t_end: float) -> dict[str, list[tuple[float, int]]]:
    """Crossing events folded into per-door 1-second bins."""
    bins: dict[str, dict[int, int]] = {}
    for t, door_id, count in crossings:
        slot = int(t)  # bin [slot, slot+1)
        bins.setdefault(door_id, {})[slot] = bins.get(door_id, {}).get(slot, 0) + count
    n_bins = int(math.ceil(t_end)) if t_end > 0 else 0
    out: dict[str, list[tuple[float, int]]] = {}
    for door_id, slots in bins.items():
        out[door_id] = [(float(s), slots.get(s, 0)) for s in range(max(n_bins, max(slots) + 1 if slots else 0))]
    return out


def egress_stats(result: RunResult) -> tuple[float, float, float, int]:
    """(t_total, t_50, t_95, fatalities).

    t_total is the last exit time, +inf when the run timed out with
    people still inside, and 0 for an empty population.  The quantile
    times cover eventual evacuees only.
    """
    if result.population == 0:
        return (0.0, 0.0, 0.0, 0)
    exit_times = sorted(e.t for e in result.events if e.kind == "exited")
    fatalities = result.fatalities
    if result.timeout:
        t_total = math.inf
    elif exit_times:
        t_total = exit_times[-1]
    else:
        t_total = math.inf  # nobody made it out
    if not exit_times:
        return (t_total, math.inf, math.inf, fatalities)
    n = len(exit_times)
    t_50 = exit_times[max(0, math.ceil(0.5 * n) - 1)]
    t_95 = exit_times[max(0, math.ceil(0.95 * n) - 1)]
    return (t_total, t_50, t_95, fatalities)


def door_flow(result: RunResult, door_id: str, window: float = 5.0) -> list[tuple[float, float]]:
    """Trailing-window flow through one door, persons per second.

    Sampled every second from t=window to the end of the run; each
    sample counts crossings in (t - window, t].
    """
    if door_id not in result.door_flows and all(c[1] != door_id for c in result.crossings):
        raise KeyError(f"unknown door {door_id!r}")
    events = [(t, n) for (t, d, n) in result.crossings if d == door_id]
    series = []
    t = window
    while t <= result.t_end + 1e-9:
        count = sum(n for (et, n) in events if t - window < et <= t)
        series.append((t, count / window))
        t += 1.0
    return series


def clog_fraction(result: RunResult) -> float:
    """Fraction of the run during which at least one door was clogged."""
    if result.t_end <= 0:
        return 0.0
    intervals: list[tuple[float, float]] = []
    open_at: dict[object, float] = {}
    for event in result.events:
        if event.kind == "clog_start":
            open_at[event.subject] = event.t
        elif event.kind == "clog_end":
            start = open_at.pop(event.subject, None)
            if start is not None:
                intervals.append((start, event.t))
    for subject, start in open_at.items():
        intervals.append((start, result.t_end))
    if not intervals:
        return 0.0
    intervals.sort()
    merged = 0.0
    cur_lo, cur_hi = intervals[0]
    for lo, hi in intervals[1:]:
        if lo > cur_hi:
            merged += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    merged += cur_hi - cur_lo
    return min(1.0, merged / result.t_end)


TRAJECTORY_HEADER = "t,id,x,y,health,status"


def export_trajectories(result: RunResult, sink) -> None:
    """Write the trajectory log: one line per agent per sample, ordered
    by (t, id), fixed decimal places, '\\n' terminators."""
    sink.write(TRAJECTORY_HEADER + "\n")
    for (t, ids, xs, ys, health, statuses) in result.trajectory:
        for row in range(len(ids)):
            token = STATUS_TOKENS[AgentStatus(int(statuses[row]))]
            sink.write(
                f"{t:.6f},{int(ids[row])},{xs[row]:.4f},{ys[row]:.4f},{health[row]:.4f},{token}\n"
            )


def metrics_summary(result: RunResult) -> dict:
    """Scalar metrics plus the full config echo, ready for JSON export."""
    t_total, t_50, t_95, fatalities = egress_stats(result)
    event_counts: dict[str, int] = {}
    for event in result.events:
        event_counts[event.kind] = event_counts.get(event.kind, 0) + 1
    return {
        "backend": result.backend,
        "dt": result.dt,
        "seed": result.seed,
        "population": result.population,
        "exited": result.exited,
        "fatalities": fatalities,
        "timeout": result.timeout,
        "t_end": result.t_end,
        "t_total": None if math.isinf(t_total) else t_total,
        "t_50": None if math.isinf(t_50) else t_50,
        "t_95": None if math.isinf(t_95) else t_95,
        "clog_fraction": clog_fraction(result),
        "event_counts": dict(sorted(event_counts.items())),
        "digest": result.digest,
        "config": result.config_echo,
    }


_KIND_GLYPH = {
    int(CellKind.EMPTY): ".",
    int(CellKind.WALL): "#",
    int(CellKind.OBSTACLE): "o",
    int(CellKind.EXIT): "E",
}


def ascii_snapshot(geometry: Geometry, positions: np.ndarray, statuses: np.ndarray) -> str:
    """Text rendering of one instant: geometry glyphs under agents.

    '@' one live agent, '+' several bodies in one cell, 'x' a dead one;
    exited agents do not appear.
    """
    rows = [[_KIND_GLYPH[int(k)] for k in line] for line in geometry.kinds]
    alive_count = np.zeros((geometry.height, geometry.width), dtype=np.int64)
    dead_count = np.zeros_like(alive_count)
    for i in range(len(positions)):
        status = int(statuses[i])
        if status == AgentStatus.EXITED:
            continue
        cx, cy = geometry.cell_of((positions[i][0], positions[i][1]))
        if status == AgentStatus.DEAD:
            dead_count[cy, cx] += 1
        else:
            alive_count[cy, cx] += 1
    for cy in range(geometry.height):
        for cx in range(geometry.width):
            total = alive_count[cy, cx] + dead_count[cy, cx]
            if total >= 2:
                rows[cy][cx] = "+"
            elif dead_count[cy, cx] == 1:
                rows[cy][cx] = "x"
            elif alive_count[cy, cx] == 1:
                rows[cy][cx] = "@"
    return "\n".join("".join(r) for r in rows)


def reconstruct_egress_counts(result: RunResult) -> list[tuple[float, int]]:
    """Exited counts per trajectory sample time, from statuses alone.

    Must agree with counting exit events strictly before each sample
    time; the acceptance suite holds the two together.
    """
    out = []
    for (t, ids, xs, ys, health, statuses) in result.trajectory:
        out.append((t, int((statuses == int(AgentStatus.EXITED)).sum())))
    return out
