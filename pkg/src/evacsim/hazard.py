"""Time-indexed environmental hazard fields.

A hazard field holds per-cell temperature (degC), optical smoke density
(1/m) and toxicity (dose rate, fraction of full health per second) on
the scenario grid, at a strictly increasing list of timestamps.
Sampling interpolates linearly in time and extrapolates by holding the
first/last frame.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .config import PARAM_DEFAULTS
from .errors import HazardFormatError

AMBIENT_TEMP = 20.0  # degC everywhere unless a frame says otherwise


@dataclass(frozen=True)
class HazardSample:
    temperature: float      # degC
    optical_density: float  # 1/m, >= 0
    toxicity: float         # health dose rate, >= 0


@dataclass(eq=False)
class HazardField:
    timestamps: np.ndarray  # (T,) float64, strictly increasing
    temperature: np.ndarray  # (T, H, W)
    optical_density: np.ndarray
    toxicity: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.timestamps.ndim != 1 or len(self.timestamps) == 0:
            raise HazardFormatError("field needs at least one frame")
        if np.any(np.diff(self.timestamps) <= 0):
            raise HazardFormatError("timestamps must be strictly increasing")
        shape = self.temperature.shape
        if self.optical_density.shape != shape or self.toxicity.shape != shape:
            raise HazardFormatError("frame stacks disagree in shape")
        if shape[0] != len(self.timestamps):
            raise HazardFormatError("frame count does not match timestamps")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.temperature.shape[1:]

    @classmethod
    def ambient(cls, height: int, width: int) -> "HazardField":
        shape = (1, height, width)
        return cls(
            timestamps=np.array([0.0]),
            temperature=np.full(shape, AMBIENT_TEMP),
            optical_density=np.zeros(shape),
            toxicity=np.zeros(shape),
        )

    def _bracket(self, t: float) -> tuple[int, int, float]:
        ts = self.timestamps
        if t <= ts[0]:
            return 0, 0, 0.0
        if t >= ts[-1]:
            last = len(ts) - 1
            return last, last, 0.0
        hi = int(np.searchsorted(ts, t, side="right"))
        lo = hi - 1
        alpha = (t - ts[lo]) / (ts[hi] - ts[lo])
        return lo, hi, float(alpha)

    def sample_cells(self, xs: np.ndarray, ys: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised sampling at cell coordinates for one instant."""
        lo, hi, alpha = self._bracket(t)
        if lo == hi:
            return (
                self.temperature[lo, ys, xs],
                self.optical_density[lo, ys, xs],
                self.toxicity[lo, ys, xs],
            )
        w0 = 1.0 - alpha
        return (
            w0 * self.temperature[lo, ys, xs] + alpha * self.temperature[hi, ys, xs],
            w0 * self.optical_density[lo, ys, xs] + alpha * self.optical_density[hi, ys, xs],
            w0 * self.toxicity[lo, ys, xs] + alpha * self.toxicity[hi, ys, xs],
        )

    def frame_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo, hi, alpha = self._bracket(t)
        if lo == hi:
            return self.temperature[lo], self.optical_density[lo], self.toxicity[lo]
        w0 = 1.0 - alpha
        return (
            w0 * self.temperature[lo] + alpha * self.temperature[hi],
            w0 * self.optical_density[lo] + alpha * self.optical_density[hi],
            w0 * self.toxicity[lo] + alpha * self.toxicity[hi],
        )


def sample_hazard(field: HazardField, cell: tuple[int, int], t: float) -> HazardSample:
    """Conditions at one cell and instant (linear in time, clamped ends)."""
    x, y = cell
    h, w = field.grid_shape
    if not (0 <= x < w and 0 <= y < h):
        raise HazardFormatError(f"cell ({x}, {y}) outside the {w}x{h} grid")
    temp, od, tox = field.sample_cells(np.array([x]), np.array([y]), t)
    return HazardSample(float(temp[0]), float(od[0]), float(tox[0]))


def load_hazard_series(text: str, height: int, width: int) -> HazardField:
    """Parse the CSV hazard format: ``t,x,y,temp,od,tox`` per row.

    Rows are grouped by timestamp in ascending order; ``#`` starts a
    comment line.  Cells absent from a frame stay at ambient (20 degC,
    no smoke, no toxicity).  A trailing ``pressure`` column is accepted
    and ignored.  An empty document yields a single ambient frame at
    t = 0.
    """
    frames: list[tuple[float, dict[tuple[int, int], tuple[float, float, float]]]] = []
    current_t: float | None = None
    current: dict[tuple[int, int], tuple[float, float, float]] = {}

    for row_no, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) == 7:
            parts = parts[:6]  # optional pressure column, ignored
        if len(parts) != 6:
            raise HazardFormatError(f"expected 6 fields 't,x,y,temp,od,tox', got {len(parts)}", row=row_no)
        if parts[0].lower() == "t":
            continue  # header row
        try:
            t = float(parts[0])
            x = int(parts[1])
            y = int(parts[2])
            temp = float(parts[3])
            od = float(parts[4])
            tox = float(parts[5])
        except ValueError as exc:
            raise HazardFormatError(str(exc), row=row_no) from None
        if not (0 <= x < width and 0 <= y < height):
            raise HazardFormatError(f"cell ({x}, {y}) outside the {width}x{height} grid", row=row_no)
        if od < 0:
            raise HazardFormatError("optical density must be >= 0", row=row_no)
        if tox < 0:
            raise HazardFormatError("toxicity must be >= 0", row=row_no)
        if current_t is None:
            current_t = t
        elif t != current_t:
            if t < current_t:
                raise HazardFormatError(
                    f"timestamp {t} after {current_t}: frames must be in ascending order", row=row_no
                )
            frames.append((current_t, current))
            current_t = t
            current = {}
        current[(x, y)] = (temp, od, tox)
    if current_t is not None:
        frames.append((current_t, current))

    if not frames:
        return HazardField.ambient(height, width)

    n = len(frames)
    temp = np.full((n, height, width), AMBIENT_TEMP)
    od = np.zeros((n, height, width))
    tox = np.zeros((n, height, width))
    for i, (_, cells) in enumerate(frames):
        for (x, y), (tv, ov, xv) in cells.items():
            temp[i, y, x] = tv
            od[i, y, x] = ov
            tox[i, y, x] = xv
    return HazardField(
        timestamps=np.array([t for t, _ in frames]),
        temperature=temp,
        optical_density=od,
        toxicity=tox,
    )


def builtin_smoke(geometry, source: tuple[int, int], params: dict | None = None) -> HazardField:
    """Generate a toy smoke field by discrete diffusion on open cells.

    Each step adds ``rate`` at the source and exchanges a ``diffusion``
    fraction of the density difference with each open 4-neighbour, then
    clamps at zero.  Temperature and toxicity are affine in the local
    density.  While nothing clamps, total density is conserved up to the
    source injection, so the grid sum after time t equals
    ``rate * t / step``.
    """
    from .scenario import BUILTIN_SMOKE_DEFAULTS  # shared defaults with the file format

    p = dict(BUILTIN_SMOKE_DEFAULTS)
    if params:
        p.update(params)
    rate = float(p["rate"])
    diffusion = float(p["diffusion"])
    step = float(p["step"])
    frame_interval = float(p["frame_interval"])
    duration = float(p["duration"])
    temp_per_od = float(p["temp_per_od"])
    tox_per_od = float(p["tox_per_od"])

    open_mask = geometry.open_mask
    sx, sy = source
    if not geometry.is_open(sx, sy):
        raise HazardFormatError(f"smoke source ({sx}, {sy}) is not an open cell")

    od = np.zeros(open_mask.shape)
    open_f = open_mask.astype(np.float64)
    # per-cell count of open neighbours, for the conservative exchange term
    n_open = (
        _shift(open_f, 0, -1) + _shift(open_f, 0, 1)
    ) + (
        _shift(open_f, -1, 0) + _shift(open_f, 1, 0)
    )

    n_steps = int(round(duration / step))
    every = max(1, int(round(frame_interval / step)))

    timestamps = [0.0]
    od_frames = [od.copy()]
    for k in range(1, n_steps + 1):
        # sum of open-neighbour densities; pairs grouped so mirror
        # geometries produce bitwise-mirrored fields
        nbr_sum = (_shift(od, 0, -1) + _shift(od, 0, 1)) + (_shift(od, -1, 0) + _shift(od, 1, 0))
        od = od + diffusion * (nbr_sum - n_open * od)
        od[sy, sx] += rate
        od *= open_f
        np.maximum(od, 0.0, out=od)
        if k % every == 0 or k == n_steps:
            timestamps.append(k * step)
            od_frames.append(od.copy())

    od_stack = np.stack(od_frames)
    return HazardField(
        timestamps=np.array(timestamps),
        temperature=AMBIENT_TEMP + temp_per_od * od_stack,
        optical_density=od_stack,
        toxicity=tox_per_od * od_stack,
    )


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Array shifted by (dy, dx) with zero fill outside."""
    out = np.zeros_like(a)
    h, w = a.shape
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def visibility_range(sample: HazardSample, health: float, params: dict | None = None) -> float:
    """How far an agent can see, in metres.

    Sight shrinks inversely with optical density and degrades linearly
    with failing health down to half range at zero health.
    """
    p = params or PARAM_DEFAULTS
    r_max = float(p["vis_r_max"])
    k = float(p["vis_k"])
    eps = float(p["vis_eps"])
    base = min(r_max, k / max(sample.optical_density, eps))
    return base * (0.5 + 0.5 * health)


def visibility_range_bulk(od: np.ndarray, health: np.ndarray, params: dict) -> np.ndarray:
    r_max = float(params["vis_r_max"])
    k = float(params["vis_k"])
    eps = float(params["vis_eps"])
    base = np.minimum(r_max, k / np.maximum(od, eps))
    return base * (0.5 + 0.5 * health)


def health_decrement(temp, od, tox, dt: float, params: dict):
    """Health lost over ``dt`` from heat above the harm threshold plus
    toxicity.  Smoke density harms only via visibility, not health."""
    del od  # optical density does not injure directly
    t_crit = float(params["temp_crit"])
    t_scale = float(params["temp_scale"])
    c_temp = float(params["c_temp"])
    c_tox = float(params["c_tox"])
    heat = np.maximum(0.0, np.asarray(temp) - t_crit) / t_scale
    return dt * (c_temp * heat + c_tox * np.asarray(tox))


def update_health(agent, sample: HazardSample, dt: float, params: dict | None = None) -> float:
    """Apply one tick of hazard exposure to an agent in place.

    Health only ever decreases; at zero the agent is dead and immobile.
    Returns the new health value.
    """
    from .agents import AgentStatus

    p = params or PARAM_DEFAULTS
    loss = float(health_decrement(sample.temperature, sample.optical_density, sample.toxicity, dt, p))
    new_health = min(agent.health, max(0.0, min(1.0, agent.health - loss)))
    agent.health = new_health
    if new_health <= 0.0:
        agent.health = 0.0
        agent.mobility = 0
        agent.status = AgentStatus.DEAD
    return agent.health


def smoke_mass(field: HazardField, frame_index: int) -> float:
    """Total optical density in one stored frame (conservation checks)."""
    return float(field.optical_density[frame_index].sum())
