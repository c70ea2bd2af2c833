"""Shared builders for the test suite.

Scenario documents are assembled as plain dicts and serialised with
``json.dumps`` so individual tests can tweak any field before parsing.
"""

from __future__ import annotations

import json

import numpy as np

from evacsim import parse_scenario


def grid_rows(width, height, exits=(), obstacles=(), walls=()):
    """Bordered rectangular room as glyph rows.

    ``width`` x ``height`` is the full grid including the one-cell wall
    border; ``exits``, ``obstacles`` and extra ``walls`` are (x, y)
    cells punched into it afterwards.
    """
    rows = []
    for y in range(height):
        row = []
        for x in range(width):
            border = x in (0, width - 1) or y in (0, height - 1)
            row.append("#" if border else ".")
        rows.append(row)
    for x, y in walls:
        rows[y][x] = "#"
    for x, y in obstacles:
        rows[y][x] = "o"
    for x, y in exits:
        rows[y][x] = "E"
    return ["".join(r) for r in rows]


def room_doc(
    rows,
    count=5,
    backend="ca",
    seed=0,
    spawn=None,
    attributes=None,
    cell_size=0.5,
    max_sim_time=120.0,
    overrides=None,
    doors=None,
    hazard=None,
    dt=None,
    alarm_time=None,
):
    """Scenario document for a single-room drill."""
    width = len(rows[0])
    height = len(rows)
    if spawn is None:
        spawn = [1, 1, width - 2, height - 2]
    config = {"backend": backend, "seed": seed, "max_sim_time": max_sim_time}
    if overrides:
        config["overrides"] = overrides
    if dt is not None:
        config["dt"] = dt
    if alarm_time is not None:
        config["alarm_time"] = alarm_time
    geometry = {"cell_size": cell_size, "cells": list(rows)}
    if doors:
        geometry["doors"] = doors
    population = {"count": count, "spawn": {"rect": list(spawn)}}
    if attributes is not None:
        population["attributes"] = attributes
    doc = {"geometry": geometry, "population": population, "config": config}
    if hazard is not None:
        doc["hazard"] = hazard
    return doc


def make_scenario(doc):
    return parse_scenario(json.dumps(doc))


def doc_text(doc):
    return json.dumps(doc)


def instant_reaction():
    """Attribute list pinning reaction time to its 1 s floor."""
    return [{"attr": "reaction_time", "dist": "constant", "value": 1.0}]


def brute_force_pairs(positions, radius):
    """All index pairs (i < j) within ``radius``, lexicographically sorted."""
    n = len(positions)
    out = []
    r2 = radius * radius
    for i in range(n):
        d = positions[i + 1 :] - positions[i]
        hit = np.nonzero((d * d).sum(axis=1) <= r2)[0]
        out.extend((i, i + 1 + int(j)) for j in hit)
    return sorted(out)
