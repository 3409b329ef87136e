"""Heights from predicted boxes, LoD1 prisms and error statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import LinearRing

from sarbbr.boxes import Box
from sarbbr.geometry import SensorModel, height_from_layover

HIST_RANGE_M = 30.0
HIST_BIN_M = 1.0
# errors are reported at this resolution; float rounding residue below it is not an error
ERROR_RESOLUTION_M = 1e-9


@dataclass(frozen=True)
class HeightResult:
    building_id: str
    predicted_height: float
    true_height: float | None = None
    clamped: bool = False

    @property
    def error(self) -> float:
        """Signed error, true minus predicted."""
        if self.true_height is None:
            raise ValueError(f"building {self.building_id!r} has no true height")
        return self.true_height - self.predicted_height


def height_from_boxes(pred, fb, sensor: SensorModel, building_id: str = "", true_height=None) -> HeightResult:
    """Height from the range-width difference of building and footprint boxes.

    A building box narrower than its footprint would mean negative layover;
    it is reported as 0 m with ``clamped`` set.
    """
    pred, fb = Box(*pred), Box(*fb)
    for b in (pred, fb):
        if not (all(math.isfinite(v) for v in b) and b.w > 0 and b.h > 0):
            raise ValueError(f"invalid box {tuple(b)}")
    layover = pred.w - fb.w
    if layover < 0:
        return HeightResult(building_id, 0.0, true_height, True)
    return HeightResult(building_id, height_from_layover(layover * sensor.spacing_rg, sensor), true_height, False)


@dataclass(frozen=True)
class Lod1Mesh:
    building_id: str
    vertices: np.ndarray  # (2n, 3): base ring then top ring
    faces: tuple  # tuples of 0-based vertex indices, outward winding

    def edges(self):
        out = []
        for f in self.faces:
            out.extend(zip(f, f[1:] + f[:1]))
        return out


def extrude_lod1(footprint, height: float, ground: float = 0.0, building_id: str = "") -> Lod1Mesh:
    """Flat-roofed prism over a footprint ring (or a BuildingRecord)."""
    if hasattr(footprint, "footprint"):
        building_id = building_id or footprint.id
        ground = footprint.ground
        footprint = footprint.footprint
    ring = np.array(footprint, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 3:
        raise ValueError("footprint needs at least 3 (x, y) vertices")
    if len(ring) > 3 and np.allclose(ring[0], ring[-1]):
        ring = ring[:-1]
    if not (math.isfinite(height) and height >= 0):
        raise ValueError(f"height must be finite and >= 0, got {height}")
    if height == 0:
        raise ValueError(f"building {building_id!r}: zero height gives a degenerate prism, nothing to extrude")
    lr = LinearRing(ring)
    if not lr.is_simple:
        raise ValueError(f"building {building_id!r}: footprint is self-intersecting")
    if not lr.is_ccw:
        ring = ring[::-1]
    n = len(ring)
    base = np.column_stack([ring, np.full(n, ground)])
    top = np.column_stack([ring, np.full(n, ground + height)])
    faces = [tuple(range(n - 1, -1, -1)), tuple(range(n, 2 * n))]
    for i in range(n):
        j = (i + 1) % n
        faces.append((i, j, n + j, n + i))
    return Lod1Mesh(building_id, np.vstack([base, top]), tuple(faces))


def write_obj(path, meshes) -> None:
    lines = []
    offset = 1
    for m in meshes:
        lines.append(f"o {m.building_id}")
        lines.extend(f"v {x!r} {y!r} {z!r}" for x, y, z in m.vertices.tolist())
        lines.extend("f " + " ".join(str(i + offset) for i in f) for f in m.faces)
        offset += len(m.vertices)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class Metrics:
    he_mean: float
    he_std: float
    mae: float
    n: int
    clamped_count: int
    bin_edges: tuple
    counts: tuple

    def to_dict(self) -> dict:
        return {
            "he_mean_m": self.he_mean,
            "he_std_m": self.he_std,
            "mae_m": self.mae,
            "n": self.n,
            "clamped_count": self.clamped_count,
            "histogram": {"bin_edges_m": list(self.bin_edges), "counts": list(self.counts)},
        }


def error_histogram(errors):
    """1 m bins over [-30, 30]; errors beyond the range land in the end bins."""
    edges = np.arange(-HIST_RANGE_M, HIST_RANGE_M + HIST_BIN_M / 2, HIST_BIN_M)
    clipped = np.clip(np.asarray(errors, dtype=np.float64), -HIST_RANGE_M, HIST_RANGE_M)
    counts, _ = np.histogram(clipped, bins=edges)
    return edges, counts


def metrics(results) -> Metrics:
    """Mean, population std and MAE of signed errors (true - predicted)."""
    results = list(results)
    if not results:
        raise ValueError("no results to evaluate")
    errors = np.array([r.error for r in results], dtype=np.float64)
    errors = np.round(errors / ERROR_RESOLUTION_M) * ERROR_RESOLUTION_M
    edges, counts = error_histogram(errors)
    return Metrics(
        float(errors.mean()),
        float(errors.std()),
        float(np.abs(errors).mean()),
        len(errors),
        sum(r.clamped for r in results),
        tuple(float(e) for e in edges),
        tuple(int(c) for c in counts),
    )


def write_report(path, m: Metrics) -> None:
    with open(path, "w") as fh:
        json.dump(m.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
