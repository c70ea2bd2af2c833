"""Scenario parsing, geometry derivations, and the network builder."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from evacsim import (
    ScenarioSyntaxError,
    SchemaViolation,
    SemanticViolation,
    derive_network,
    load_scenario,
    parse_scenario,
    serialize_scenario,
)
from evacsim.scenario import (
    CellKind,
    distance_field,
    half_up,
    line_of_sight,
    los_pairs,
    room_regions,
)

from conftest import doc_text, grid_rows, make_scenario, room_doc

SQRT2 = math.sqrt(2.0)


# -- parsing ----------------------------------------------------------------


def test_glyphs_map_to_cell_kinds():
    doc = room_doc(["#E##", "#.o#", "####"], count=1, spawn=[1, 1, 1, 1])
    geo = make_scenario(doc).geometry
    assert geo.kinds[0, 1] == CellKind.EXIT
    assert geo.kinds[1, 1] == CellKind.EMPTY
    assert geo.kinds[1, 2] == CellKind.OBSTACLE
    assert geo.kinds[0, 0] == CellKind.WALL
    assert geo.exits == [(1, 0)]


def test_bad_json_is_a_syntax_error():
    with pytest.raises(ScenarioSyntaxError):
        parse_scenario("{not json")


def test_unknown_top_level_key_rejected():
    doc = room_doc(grid_rows(6, 5, exits=[(5, 2)]))
    doc["extra"] = 1
    with pytest.raises(SchemaViolation):
        make_scenario(doc)


def test_unknown_glyph_rejected():
    doc = room_doc(["####", "#?E#", "####"], count=1, spawn=[1, 1, 1, 1])
    with pytest.raises(SchemaViolation):
        make_scenario(doc)


def test_ragged_rows_rejected():
    doc = room_doc(grid_rows(6, 5, exits=[(5, 2)]))
    doc["geometry"]["cells"][2] = doc["geometry"]["cells"][2][:-1]
    with pytest.raises(SemanticViolation):
        make_scenario(doc)


def test_missing_population_count_rejected():
    doc = room_doc(grid_rows(6, 5, exits=[(5, 2)]))
    del doc["population"]["count"]
    with pytest.raises(SchemaViolation):
        make_scenario(doc)


def test_scenario_without_exit_rejected():
    doc = room_doc(grid_rows(6, 5))
    with pytest.raises(SemanticViolation):
        make_scenario(doc)


def test_spawn_rect_outside_grid_rejected():
    doc = room_doc(grid_rows(6, 5, exits=[(5, 2)]), spawn=[1, 1, 9, 3])
    with pytest.raises(SemanticViolation):
        make_scenario(doc)


def test_unreachable_pocket_is_a_warning_not_an_error():
    # a sealed-off pocket parses fine (partial buildings are inspectable)
    # but validation flags the cells that cannot reach an exit
    rows = grid_rows(8, 5, exits=[(7, 2)], walls=[(3, 1), (3, 2), (3, 3)])
    doc = room_doc(rows, spawn=[1, 1, 2, 3])
    scn = make_scenario(doc)
    warnings = scn.geometry.validate()
    assert any("reach" in w for w in warnings)


def test_unknown_override_key_rejected():
    doc = room_doc(grid_rows(6, 5, exits=[(5, 2)]), overrides={"no_such_knob": 1.0})
    with pytest.raises(SchemaViolation):
        make_scenario(doc)


def test_bad_backend_rejected():
    doc = room_doc(grid_rows(6, 5, exits=[(5, 2)]), backend="quantum")
    with pytest.raises(SchemaViolation):
        make_scenario(doc)


def test_declared_door_on_wall_cell_rejected():
    doc = room_doc(
        grid_rows(8, 6, exits=[(7, 2)]),
        doors=[{"id": "d0", "cells": [[0, 0]], "width": 0.5}],
    )
    with pytest.raises(SemanticViolation):
        make_scenario(doc)


def test_hazard_requires_exactly_one_source():
    rows = grid_rows(6, 5, exits=[(5, 2)])
    doc = room_doc(rows, hazard={"file": "x.csv", "builtin": {"source": [1, 1]}})
    with pytest.raises(SchemaViolation):
        make_scenario(doc)


def test_builtin_smoke_diffusion_bound_enforced():
    rows = grid_rows(6, 5, exits=[(5, 2)])
    doc = room_doc(rows, hazard={"builtin": {"source": [2, 2], "diffusion": 0.3}})
    with pytest.raises(SemanticViolation):
        make_scenario(doc)


def test_serialize_round_trip_is_stable():
    doc = room_doc(
        grid_rows(10, 8, exits=[(9, 3), (9, 4)], obstacles=[(4, 4)]),
        count=7,
        attributes=[
            {"attr": "age", "dist": "uniform", "lo": 20, "hi": 60},
            {"attr": "gender", "dist": "categorical", "values": [0, 1], "weights": [0.5, 0.5]},
        ],
        doors=[{"id": "main", "cells": [[9, 3], [9, 4]], "width": 1.0}],
        overrides={"v_ref": 1.5},
    )
    scn = make_scenario(doc)
    text = serialize_scenario(scn)
    again = parse_scenario(text)
    assert serialize_scenario(again) == text
    assert np.array_equal(again.geometry.kinds, scn.geometry.kinds)
    assert again.population.count == scn.population.count
    assert again.config.overrides == scn.config.overrides


def test_load_scenario_reads_files(tmp_path):
    doc = room_doc(grid_rows(6, 5, exits=[(5, 2)]))
    path = tmp_path / "s.json"
    path.write_text(doc_text(doc))
    scn = load_scenario(str(path))
    assert scn.geometry.width == 6


def test_shipped_scenarios_parse():
    import glob
    import os

    root = os.path.join(os.path.dirname(__file__), "..", "scenarios")
    paths = sorted(glob.glob(os.path.join(root, "*.json")))
    assert len(paths) >= 4
    for path in paths:
        scn = load_scenario(path)
        assert scn.geometry.exits, path


# -- rounding ---------------------------------------------------------------


def test_half_up_rounds_halves_upward():
    assert half_up(0.5) == 1
    assert half_up(1.5) == 2
    assert half_up(2.5) == 3
    assert half_up(2.4999) == 2
    assert half_up(3.0) == 3


# -- distance field ----------------------------------------------------------


def _bellman_distances(geo, sources):
    """Plain iterate-to-fixpoint relaxation, the slow reference."""
    open_mask = geo.open_mask
    h, w = open_mask.shape
    dist = np.full((h, w), np.inf)
    for (x, y) in sources:
        if open_mask[y, x]:
            dist[y, x] = 0.0
    moves = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
             (-1, -1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (1, 1, SQRT2)]
    changed = True
    while changed:
        changed = False
        for y in range(h):
            for x in range(w):
                if not open_mask[y, x]:
                    continue
                for dx, dy, cost in moves:
                    nx, ny = x + dx, y + dy
                    if not (0 <= nx < w and 0 <= ny < h) or not open_mask[ny, nx]:
                        continue
                    if dx and dy and not (open_mask[y, nx] and open_mask[ny, x]):
                        continue
                    if dist[ny, nx] + cost < dist[y, x] - 1e-12:
                        dist[y, x] = dist[ny, nx] + cost
                        changed = True
    return dist


def test_distance_field_matches_relaxation_reference():
    rng = np.random.default_rng(7)
    for trial in range(6):
        w, h = int(rng.integers(6, 12)), int(rng.integers(5, 10))
        rows = [list(r) for r in grid_rows(w, h)]
        for _ in range(int(rng.integers(0, 6))):
            x, y = int(rng.integers(1, w - 1)), int(rng.integers(1, h - 1))
            rows[y][x] = "#"
        ex, ey = int(rng.integers(1, w - 1)), 0
        rows[ey][ex] = "E"
        rows[1][ex] = "."  # keep the exit approachable
        doc = room_doc(["".join(r) for r in rows], count=1, spawn=[ex, 1, ex, 1])
        geo = make_scenario(doc).geometry
        got = distance_field(geo)
        want = _bellman_distances(geo, geo.exits)
        assert np.allclose(got, want, equal_nan=True), f"trial {trial}"


def test_distance_field_blocks_diagonal_corner_cuts():
    # exit reachable only around an L-shaped wall: the diagonal squeeze
    # between two blocked cells must not shortcut the path
    rows = [
        "#####",
        "#..E#",
        "#.###",
        "#...#",
        "#####",
    ]
    doc = room_doc(rows, count=1, spawn=[1, 1, 1, 1])
    geo = make_scenario(doc).geometry
    d = distance_field(geo)
    # every diagonal here squeezes past the blocked (2, 2) corner, so the
    # legal path is all straight steps: (1,3) -> (1,2) -> (1,1) -> (2,1) -> exit
    assert np.isclose(d[3, 1], 4.0)
    assert np.isclose(d[3, 2], 5.0)


def test_distance_field_unreachable_cells_are_infinite():
    rows = [
        "#####",
        "#.#E#",
        "#####",
    ]
    doc = room_doc(rows, count=1, spawn=[3, 1, 3, 1])
    geo = make_scenario(doc).geometry
    d = distance_field(geo)
    assert np.isinf(d[1, 1])
    assert d[1, 3] == 0.0


# -- line of sight ------------------------------------------------------------


def _blocked_chord(geo, a, b):
    """Longest run of the centre-to-centre segment inside any blocked cell.

    Measured in cell units by clipping the segment against each blocked
    cell's open box, so it is exact where the sampled implementation is
    approximate.
    """
    ax, ay = a[0] + 0.5, a[1] + 0.5
    dx, dy = b[0] - a[0], b[1] - a[1]
    length = math.hypot(dx, dy)
    if length == 0:
        return 0.0
    worst = 0.0
    for (cy, cx) in np.argwhere(geo.blocked_mask):
        t0, t1 = 0.0, 1.0
        for origin, delta, lo, hi in ((ax, dx, cx, cx + 1), (ay, dy, cy, cy + 1)):
            if delta == 0:
                if not (lo < origin < hi):
                    t0, t1 = 1.0, 0.0
                    break
            else:
                ta, tb = (lo - origin) / delta, (hi - origin) / delta
                t0 = max(t0, min(ta, tb))
                t1 = min(t1, max(ta, tb))
        if t1 > t0:
            worst = max(worst, (t1 - t0) * length)
    return worst


def _touches_lattice_corner(a, b):
    """True when the segment passes (numerically) through a grid corner.

    Those rays sit exactly on the documented tie between seeing past a
    corner and not, so the oracle makes no claim about them.
    """
    ax, ay = a[0] + 0.5, a[1] + 0.5
    dx, dy = b[0] - a[0], b[1] - a[1]
    cheb = max(abs(dx), abs(dy))
    for k in range(2 * cheb + 1):
        f = k / (2 * cheb) if cheb else 0.0
        x, y = ax + dx * f, ay + dy * f
        if abs(x - round(x)) < 1e-9 and abs(y - round(y)) < 1e-9:
            return True
    return False


def test_line_of_sight_agrees_with_exact_clipping():
    # one-sided oracle: a ray that never enters a blocked cell must be
    # visible; a ray spending more than the sampling interval inside one
    # must be blocked.  Shorter clips are the sampler's documented slack,
    # and corner-grazing rays are documented ties.
    rng = np.random.default_rng(11)
    rows = grid_rows(12, 9, exits=[(11, 4)], obstacles=[(4, 3), (5, 3), (6, 6), (7, 2)])
    doc = room_doc(rows, count=1, spawn=[1, 1, 1, 1])
    geo = make_scenario(doc).geometry
    open_cells = np.argwhere(geo.open_mask)  # (y, x)
    checked_clear = checked_blocked = 0
    for _ in range(300):
        ai, bi = rng.integers(0, len(open_cells), size=2)
        a = (int(open_cells[ai][1]), int(open_cells[ai][0]))
        b = (int(open_cells[bi][1]), int(open_cells[bi][0]))
        if _touches_lattice_corner(a, b):
            continue
        chord = _blocked_chord(geo, a, b)
        if chord == 0.0:
            assert line_of_sight(geo, a, b), (a, b)
            checked_clear += 1
        elif chord >= 0.75:
            assert not line_of_sight(geo, a, b), (a, b, chord)
            checked_blocked += 1
    assert checked_clear >= 50
    assert checked_blocked >= 50


def test_line_of_sight_is_symmetric():
    rows = grid_rows(10, 8, exits=[(9, 3)], obstacles=[(4, 3), (5, 4)])
    doc = room_doc(rows, count=1, spawn=[1, 1, 1, 1])
    geo = make_scenario(doc).geometry
    rng = np.random.default_rng(3)
    open_cells = np.argwhere(geo.open_mask)
    for _ in range(100):
        ai, bi = rng.integers(0, len(open_cells), size=2)
        a = (int(open_cells[ai][1]), int(open_cells[ai][0]))
        b = (int(open_cells[bi][1]), int(open_cells[bi][0]))
        assert line_of_sight(geo, a, b) == line_of_sight(geo, b, a)


def test_los_pairs_blocked_by_wall():
    rows = [
        "#####",
        "#.#.#",
        "#.#E#",
        "#...#",
        "#####",
    ]
    doc = room_doc(rows, count=1, spawn=[1, 1, 1, 1])
    geo = make_scenario(doc).geometry
    a = np.array([[1, 1], [1, 3]])
    b = np.array([[3, 1], [3, 3]])
    vis = los_pairs(geo.blocked_mask, a, b)
    assert not vis[0]  # straight through the dividing wall
    assert vis[1]  # along the open corridor


# -- rooms and the derived network --------------------------------------------


def test_room_regions_separates_rooms():
    rows = [
        "#######",
        "#..#..#",
        "#..#..E",
        "#..#..#",
        "#######",
    ]
    doc = room_doc(rows, count=1, spawn=[5, 2, 5, 2])
    geo = make_scenario(doc).geometry
    labels = room_regions(geo)
    assert labels[1, 1] != labels[1, 4]
    assert labels[1, 4] == labels[3, 5]
    assert labels[0, 0] < 0  # walls carry no room label


def test_derive_network_two_rooms_one_door():
    rows = [
        "########",
        "#..#...#",
        "#......E",
        "#..#...#",
        "########",
    ]
    doc = room_doc(
        rows,
        count=1,
        spawn=[1, 1, 2, 3],
        doors=[{"id": "mid", "cells": [[3, 2]], "width": 0.5}],
    )
    geo = make_scenario(doc).geometry
    net = derive_network(geo)
    kinds = sorted(n.kind for n in net.nodes)
    assert kinds.count("destination") == 1
    assert kinds.count("room") == 2
    # rooms connect through the declared door and on to the exit
    dests = {n.id for n in net.nodes if n.kind == "destination"}
    srcs = {a.src for a in net.arcs}
    assert all(n.id in srcs for n in net.nodes if n.kind == "room")
    assert any(a.dst in dests for a in net.arcs)
    assert any(a.door_id == "mid" for a in net.arcs)
    for arc in net.arcs:
        assert arc.capacity >= 1
        assert arc.traversal_time >= 0


def test_undeclared_gap_joins_rooms_into_one():
    # without a declared door the gap keeps the open space 4-connected,
    # so segmentation sees a single room
    rows = [
        "########",
        "#..#...#",
        "#......E",
        "#..#...#",
        "########",
    ]
    doc = room_doc(rows, count=1, spawn=[1, 1, 2, 3])
    geo = make_scenario(doc).geometry
    net = derive_network(geo)
    assert sorted(n.kind for n in net.nodes).count("room") == 1


def test_derive_network_declared_door_capacity_scales_with_width():
    base = {
        "geometry": {
            "cell_size": 0.5,
            "cells": [
                "########",
                "#..#...#",
                "#..d...E",
                "#..#...#",
                "########",
            ],
        },
        "population": {"count": 1, "spawn": {"rect": [1, 1, 2, 3]}},
        "config": {"backend": "flow", "seed": 0},
    }

    def with_width(width):
        doc = json.loads(json.dumps(base))
        doc["geometry"]["cells"] = [r.replace("d", ".") for r in doc["geometry"]["cells"]]
        doc["geometry"]["doors"] = [{"id": "mid", "cells": [[3, 2]], "width": width}]
        net = derive_network(make_scenario(doc).geometry)
        return next(a.capacity for a in net.arcs if a.door_id == "mid")

    assert with_width(2.0) > with_width(0.5)
