"""Random footprints and whole synthetic cities for the simulator."""

from __future__ import annotations

import math

import numpy as np

from sarbbr.geometry import SensorModel, layover_px, shadow_px
from sarbbr.scene import BuildingRecord

# Characteristics of the four TerraSAR-X acquisitions used as presets:
# (spacing_rg m, spacing_az m, incidence deg)
SENSOR_PRESETS = {
    "berlin-hs": (0.455, 0.871, 36.08),
    "berlin-sm": (0.909, 1.836, 46.68),
    "rotterdam": (1.364, 1.852, 39.28),
    "new-york": (1.364, 2.203, 42.65),
}


def preset_sensor(name: str, rg_origin: float = 0.0, az_origin: float = 0.0) -> SensorModel:
    rg, az, theta = SENSOR_PRESETS[name]
    return SensorModel(theta, rg, az, rg_origin, az_origin)


def rectangle(cx, cy, length, width, angle_deg=0.0) -> np.ndarray:
    """Counter-clockwise rectangle ring centred at (cx, cy)."""
    hl, hw = length / 2, width / 2
    pts = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return pts @ rot.T + [cx, cy]


def random_star_polygon(rng: np.random.Generator, n_min=3, n_max=9, r_min=3.0, r_max=25.0, center=(0.0, 0.0)):
    """Simple counter-clockwise polygon: vertices at increasing angles around a center."""
    n = int(rng.integers(n_min, n_max + 1))
    while True:
        ang = np.sort(rng.uniform(0, 2 * math.pi, n))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * math.pi]]))
        if gaps.max() < math.pi and gaps.min() > 1e-3:
            break
    rad = rng.uniform(r_min, r_max, n)
    return np.column_stack([center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang)])


def random_city(
    n_buildings: int,
    sensor: SensorModel,
    seed: int = 0,
    heights=(3.0, 40.0),
    size_range=(10.0, 30.0),
    cell=(60.0, 45.0),
    max_rotation_deg: float = 30.0,
    margin_px: float = 4.0,
):
    """Place rotated rectangles on a jittered grid.

    Returns ``(buildings, sensor, grid_dims)``: the sensor origins are moved
    so that every region of every building lands inside the grid.
    """
    rng = np.random.default_rng(seed)
    n_cols = max(1, int(round(math.sqrt(n_buildings * cell[1] / cell[0]))))
    n_rows = math.ceil(n_buildings / n_cols)
    recs = []
    for k in range(n_buildings):
        i, j = divmod(k, n_cols)
        length = rng.uniform(*size_range)
        width = rng.uniform(*size_range)
        ang = rng.uniform(-max_rotation_deg, max_rotation_deg)
        # keep the rotated footprint inside its cell
        half_x = 0.5 * (abs(length * math.cos(math.radians(ang))) + abs(width * math.sin(math.radians(ang))))
        half_y = 0.5 * (abs(length * math.sin(math.radians(ang))) + abs(width * math.cos(math.radians(ang))))
        jx = max(0.0, cell[0] / 2 - half_x - 1.0)
        jy = max(0.0, cell[1] / 2 - half_y - 1.0)
        cx = (j + 0.5) * cell[0] + rng.uniform(-jx, jx)
        cy = (i + 0.5) * cell[1] + rng.uniform(-jy, jy)
        h = rng.uniform(*heights)
        recs.append(BuildingRecord(f"b{k:05d}", rectangle(cx, cy, length, width, ang), h))
    lay = layover_px(heights[1], sensor)
    sha = shadow_px(heights[1], sensor)
    rg_origin = margin_px + lay
    az_origin = margin_px
    placed = SensorModel(sensor.theta, sensor.spacing_rg, sensor.spacing_az, rg_origin, az_origin)
    cols = math.ceil(n_cols * cell[0] * sensor.sin_theta / sensor.spacing_rg + rg_origin + sha + margin_px)
    rows = math.ceil(n_rows * cell[1] / sensor.spacing_az + 2 * margin_px)
    return recs, placed, (rows, cols)
