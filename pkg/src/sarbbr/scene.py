"""Synthetic slant-range amplitude scenes of LoD1 buildings.

Every building contributes five regions, all derived from its projected
base polygon P:

* footprint: P itself (ground reflectivity; occluded ground is not imaged)
* roof: P moved ``layover_px(h)`` toward near range
* layover: the sensor-facing walls swept from the base up to the roof
* double bounce: the sensor-facing base edges, one pixel thick in range
* shadow: the far-facing walls swept from the roof to ``shadow_px(h)``
  beyond the base

Per pixel the highest-priority region wins (double bounce > layover > roof
> footprint > shadow); between buildings the brighter value wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import LinearRing

from sarbbr.geometry import SensorModel, layover_px, project, shadow_px
from sarbbr.raster import draw_range_crossings, fill_polygon

REGIONS = ("shadow", "footprint", "roof", "layover", "double_bounce")


class BuildingOutsideGrid(ValueError):
    def __init__(self, building_id: str, detail: str = ""):
        self.building_id = building_id
        super().__init__(f"building {building_id!r} falls outside the image grid{detail}")


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class BuildingRecord:
    """A footprint ring (open, counter-clockwise, world meters) with a height."""

    id: str
    footprint: np.ndarray
    height: float
    ground: float = 0.0

    def __post_init__(self):
        ring = np.array(self.footprint, dtype=np.float64)
        if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 3:
            raise ValueError(f"building {self.id!r}: footprint needs at least 3 (x, y) vertices")
        if np.allclose(ring[0], ring[-1]) and len(ring) > 3:
            ring = ring[:-1]
        if not np.all(np.isfinite(ring)):
            raise ValueError(f"building {self.id!r}: footprint coordinates must be finite")
        if not (math.isfinite(self.height) and self.height >= 0):
            raise ValueError(f"building {self.id!r}: height must be finite and >= 0")
        if not math.isfinite(self.ground):
            raise ValueError(f"building {self.id!r}: ground height must be finite")
        area = _signed_area(ring)
        if area == 0:
            raise ValueError(f"building {self.id!r}: footprint is degenerate (zero area)")
        if area < 0:
            raise ValueError(f"building {self.id!r}: footprint ring must be counter-clockwise")
        if not LinearRing(ring).is_simple:
            raise ValueError(f"building {self.id!r}: footprint is self-intersecting")
        ring.setflags(write=False)
        object.__setattr__(self, "footprint", ring)
        object.__setattr__(self, "height", float(self.height))
        object.__setattr__(self, "ground", float(self.ground))

    @property
    def area(self) -> float:
        return _signed_area(self.footprint)

    def translated(self, dx: float, dy: float) -> "BuildingRecord":
        return BuildingRecord(self.id, self.footprint + np.array([dx, dy]), self.height, self.ground)


@dataclass(frozen=True)
class ReflectivityProfile:
    ground: float = 0.20
    roof: float = 0.45
    layover: float = 0.70
    double_bounce: float = 1.00
    shadow: float = 0.05

    def __post_init__(self):
        if not (0 <= self.shadow < self.ground < self.roof < self.layover < self.double_bounce):
            raise ValueError("reflectivities must satisfy shadow < ground < roof < layover < double_bounce")

    def region_values(self) -> dict:
        return {
            "shadow": self.shadow,
            "footprint": self.ground,
            "roof": self.roof,
            "layover": self.layover,
            "double_bounce": self.double_bounce,
        }

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("ground", "roof", "layover", "double_bounce", "shadow")}


@dataclass(frozen=True)
class Scene:
    amplitude: np.ndarray
    sensor: SensorModel
    buildings: tuple = ()
    profile: ReflectivityProfile = field(default_factory=ReflectivityProfile)
    seed: int | None = None

    @property
    def dims(self) -> tuple:
        return self.amplitude.shape


def base_polygon(b: BuildingRecord, sensor: SensorModel) -> np.ndarray:
    """The footprint ring projected at ground level, as (rg, az) pixel vertices."""
    rg, az = project(b.footprint[:, 0], b.footprint[:, 1], 0.0, sensor)
    return np.column_stack([rg, az])


def region_polygons(b: BuildingRecord, sensor: SensorModel) -> dict:
    """Image-space polygons per region; layover/shadow/double bounce are lists of pieces."""
    base = base_polygon(b, sensor)
    lay = layover_px(b.height, sensor)
    sha = shadow_px(b.height, sensor)
    shift = np.array([1.0, 0.0])
    out = {"footprint": base, "roof": base - lay * shift, "layover": [], "shadow": [], "double_bounce": []}
    if b.height == 0:
        return out
    n = len(base)
    for k in range(n):
        a, c = base[k], base[(k + 1) % n]
        # counter-clockwise ring: outward normal x-component is (c_az - a_az)
        if c[1] < a[1]:
            out["layover"].append(np.array([a, c, c - lay * shift, a - lay * shift]))
            out["double_bounce"].append((a, c))
        elif c[1] > a[1]:
            out["shadow"].append(np.array([a - lay * shift, c - lay * shift, c + sha * shift, a + sha * shift]))
    return out


def region_extent(b: BuildingRecord, sensor: SensorModel):
    """(rg_min, rg_max, az_min, az_max) over every region of ``b``."""
    base = base_polygon(b, sensor)
    lay = layover_px(b.height, sensor)
    sha = shadow_px(b.height, sensor)
    return (
        float(base[:, 0].min() - lay),
        float(base[:, 0].max() + sha),
        float(base[:, 1].min()),
        float(base[:, 1].max()),
    )


def _check_inside(b: BuildingRecord, sensor: SensorModel, dims) -> None:
    rows, cols = dims
    r0, r1, a0, a1 = region_extent(b, sensor)
    if r0 < 0 or a0 < 0 or r1 > cols or a1 > rows:
        raise BuildingOutsideGrid(b.id, f" (rg {r0:.1f}..{r1:.1f}, az {a0:.1f}..{a1:.1f}; grid {rows}x{cols})")


def region_masks(b: BuildingRecord, sensor: SensorModel, grid_dims) -> dict:
    """Boolean full-grid masks of each region of one building (no priority applied)."""
    _check_inside(b, sensor, grid_dims)
    polys = region_polygons(b, sensor)
    masks = {name: np.zeros(grid_dims, dtype=bool) for name in REGIONS}
    fill_polygon(masks["footprint"], polys["footprint"])
    fill_polygon(masks["roof"], polys["roof"])
    for piece in polys["layover"]:
        fill_polygon(masks["layover"], piece)
    for piece in polys["shadow"]:
        fill_polygon(masks["shadow"], piece)
    for a, c in polys["double_bounce"]:
        draw_range_crossings(masks["double_bounce"], a, c)
    return masks


def _priority_codes(b: BuildingRecord, sensor: SensorModel, dims):
    """Region code per pixel (0 = untouched, 1..5 = REGIONS order) in a tight window."""
    r_lo, r_hi, a_lo, a_hi = region_extent(b, sensor)
    c0, c1 = max(0, math.floor(r_lo)), min(dims[1], math.ceil(r_hi) + 1)
    w0, w1 = max(0, math.floor(a_lo)), min(dims[0], math.ceil(a_hi) + 1)
    offset = np.array([c0, w0], dtype=np.float64)
    polys = region_polygons(b, sensor)
    shape = (w1 - w0, c1 - c0)
    codes = np.zeros(shape, dtype=np.uint8)
    for code, name in enumerate(REGIONS, start=1):
        m = np.zeros(shape, dtype=bool)
        if name in ("footprint", "roof"):
            fill_polygon(m, polys[name] - offset)
        elif name == "double_bounce":
            for a, c in polys[name]:
                draw_range_crossings(m, a - offset, c - offset)
        else:
            for piece in polys[name]:
                fill_polygon(m, piece - offset)
        codes[m] = code
    return (w0, w1, c0, c1), codes


def reflectivity_map(buildings, sensor: SensorModel, profile: ReflectivityProfile, grid_dims, zero_ids=()):
    """Noise-free reflectivity of the scene."""
    rows, cols = grid_dims
    refl = np.full((rows, cols), profile.ground, dtype=np.float64)
    covered = np.zeros((rows, cols), dtype=bool)
    values = profile.region_values()
    lut = np.array([0.0] + [values[name] for name in REGIONS])
    zero_ids = set(zero_ids)
    for b in buildings:
        _check_inside(b, sensor, grid_dims)
        (w0, w1, c0, c1), codes = _priority_codes(b, sensor, grid_dims)
        hit = codes > 0
        val = lut[codes] if b.id not in zero_ids else np.zeros(codes.shape)
        sub_r = refl[w0:w1, c0:c1]
        sub_c = covered[w0:w1, c0:c1]
        merged = np.where(sub_c, np.maximum(sub_r, val), val)
        sub_r[hit] = merged[hit]
        sub_c |= hit
    return refl


def render(
    buildings,
    sensor: SensorModel,
    profile: ReflectivityProfile | None = None,
    speckle_seed: int | None = 0,
    grid_dims=(512, 512),
    speckle: bool = True,
    zero_reflectivity_ids=(),
) -> Scene:
    """Render an amplitude scene.

    Amplitude is ``sqrt(reflectivity * E)`` with ``E`` unit-mean exponential
    speckle drawn from ``speckle_seed``; ``speckle=False`` sets ``E = 1``.
    Buildings listed in ``zero_reflectivity_ids`` are drawn with zero
    reflectivity over all their regions (a stand-in for demolished or
    otherwise stale records).
    """
    profile = profile or ReflectivityProfile()
    rows, cols = (int(v) for v in grid_dims)
    if rows < 1 or cols < 1:
        raise ValueError("grid dims must be positive")
    buildings = tuple(buildings)
    ids = [b.id for b in buildings]
    if len(set(ids)) != len(ids):
        raise ValueError("building ids must be unique")
    refl = reflectivity_map(buildings, sensor, profile, (rows, cols), zero_reflectivity_ids)
    if speckle:
        rng = np.random.default_rng(speckle_seed)
        refl = refl * rng.exponential(1.0, size=(rows, cols))
    amp = np.sqrt(refl)
    amp.setflags(write=False)
    return Scene(amp, sensor, buildings, profile, speckle_seed if speckle else None)
