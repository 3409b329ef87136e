"""Reference-data generation: masks, boxes, stale filtering, patches, splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from sarbbr.boxes import Box
from sarbbr.formats import read_gray32, write_gray32
from sarbbr.geometry import SensorModel, layover_px
from sarbbr.raster import rasterize_polygon
from sarbbr.scene import BuildingRecord, base_polygon

log = logging.getLogger(__name__)


class EmptyFootprintError(ValueError):
    pass


class EmptyMaskWarning(UserWarning):
    pass


# ---------------------------------------------------------------- footprints and boxes


def rasterize_footprint(b: BuildingRecord, sensor: SensorModel, grid_dims) -> np.ndarray:
    """Binary uint8 mask: 1 where a pixel center lies inside the projected base polygon."""
    poly = base_polygon(b, sensor)
    rows, cols = grid_dims
    if poly[:, 0].max() <= 0 or poly[:, 1].max() <= 0 or poly[:, 0].min() >= cols or poly[:, 1].min() >= rows:
        raise EmptyFootprintError(f"building {b.id!r}: footprint lies entirely outside the grid")
    mask = rasterize_polygon(poly, grid_dims).astype(np.uint8)
    if not mask.any():
        warnings.warn(f"building {b.id!r}: footprint covers no pixel center", EmptyMaskWarning, stacklevel=2)
    return mask


def footprint_bbox(poly) -> Box:
    """Tight box over projected polygon vertices (continuous pixel coordinates)."""
    poly = np.asarray(poly, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2 or len(poly) == 0:
        raise EmptyFootprintError("footprint polygon is empty")
    x0, y0 = poly.min(axis=0)
    x1, y1 = poly.max(axis=0)
    if not (x1 > x0 and y1 > y0):
        raise EmptyFootprintError("footprint polygon has zero extent")
    return Box.from_corners(float(x0), float(y0), float(x1), float(y1))


def footprint_bbox_from_mask(mask) -> Box:
    """Box over the pixel squares of a mask's support."""
    rows, cols = np.nonzero(np.asarray(mask))
    if rows.size == 0:
        raise EmptyFootprintError("footprint mask is empty")
    return Box.from_corners(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def building_bbox(fb, h: float, sensor: SensorModel) -> Box:
    """Widen the footprint box toward near range by the layover of height ``h``."""
    fb = Box(*fb)
    lay = layover_px(h, sensor)
    return Box(fb.cx - 0.5 * lay, fb.cy, fb.w + lay, fb.h)


def box_pixel_window(box, dims):
    """(r0, r1, c0, c1) of pixels whose centers lie inside ``box``; at least one pixel."""
    box = Box(*box)
    rows, cols = dims
    c0 = max(0, math.ceil(box.x0 - 0.5))
    c1 = min(cols, math.floor(box.x1 - 0.5) + 1)
    r0 = max(0, math.ceil(box.y0 - 0.5))
    r1 = min(rows, math.floor(box.y1 - 0.5) + 1)
    if c1 <= c0:
        c0 = min(max(0, math.floor(box.cx)), cols - 1)
        c1 = c0 + 1
    if r1 <= r0:
        r0 = min(max(0, math.floor(box.cy)), rows - 1)
        r1 = r0 + 1
    return r0, r1, c0, c1


# ---------------------------------------------------------------- stale filter


def intensity_mode(amplitude, bins: int = 256) -> float:
    """Center of the fullest bin of the amplitude-squared histogram over [min, max]."""
    inten = np.square(np.asarray(amplitude, dtype=np.float64))
    if inten.size == 0:
        raise ValueError("empty image")
    lo, hi = float(inten.min()), float(inten.max())
    if lo == hi:
        return lo
    counts, edges = np.histogram(inten, bins=bins, range=(lo, hi))
    k = int(np.argmax(counts))
    return float(0.5 * (edges[k] + edges[k + 1]))


def filter_stale(boxes: dict, amplitude, bins: int = 256):
    """Drop boxes whose mean intensity falls below the image intensity mode.

    Returns ``(kept, report)``; ``report`` holds the threshold, the dropped
    ids and each box's mean intensity.
    """
    amplitude = np.asarray(amplitude)
    if amplitude.size == 0:
        raise ValueError("scene is empty")
    thr = intensity_mode(amplitude, bins)
    kept, dropped, means = {}, [], {}
    for bid in sorted(boxes):
        r0, r1, c0, c1 = box_pixel_window(boxes[bid], amplitude.shape)
        m = float(np.mean(np.square(amplitude[r0:r1, c0:c1], dtype=np.float64)))
        means[bid] = m
        if m < thr:
            dropped.append(bid)
        else:
            kept[bid] = boxes[bid]
    return kept, {"threshold": thr, "bins": bins, "dropped": dropped, "mean_intensity": means}


# ---------------------------------------------------------------- positioning errors


def _building_rng(seed: int, building_id: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(building_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([int(seed), key])


def draw_offset(rng: np.random.Generator, mu: float, sigma: float):
    """Offset magnitude |N(mu, sigma^2)| and an integer-degree direction.

    A negative normal draw is read as the same offset pointing the other way,
    which keeps the mean magnitude within 0.01 m of ``mu`` for the default
    (4.13, 1.71); rejecting negative draws instead would bias it by +0.037 m.
    """
    while True:
        mag = abs(float(rng.normal(mu, sigma))) if sigma > 0 else float(mu)
        if mag > 0:
            break
    alpha = int(rng.integers(0, 360))
    return mag, alpha


def inject_positioning_errors(buildings, mu: float = 4.13, sigma: float = 1.71, seed: int = 0):
    """Rigidly shift each footprint; the angle is measured from the +x (ground range) axis."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = []
    for b in buildings:
        mag, alpha = draw_offset(_building_rng(seed, b.id), mu, sigma)
        rad = math.radians(alpha)
        out.append(b.translated(mag * math.cos(rad), mag * math.sin(rad)))
    return out


# ---------------------------------------------------------------- samples and patches


@dataclass
class BuildingTarget:
    """Scene-coordinate quantities of one building, before cropping."""

    id: str
    mask: np.ndarray  # full-scene uint8
    footprint_box: Box
    gt_box: Box
    height: float
    support: tuple  # (rmin, rmax, cmin, cmax) inclusive pixel bounds of the mask


@dataclass
class Sample:
    building_id: str
    patch: np.ndarray
    mask: np.ndarray
    footprint_box: Box
    gt_box: Box
    true_height: float
    patch_origin: tuple = (0, 0)
    split: str = "train"
    scale: float = 1.0


def building_targets(buildings, sensor: SensorModel, grid_dims):
    """Masks and boxes for every building; empty-mask buildings are skipped with a warning."""
    out, skipped = [], []
    for b in buildings:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyMaskWarning)
            try:
                mask = rasterize_footprint(b, sensor, grid_dims)
            except EmptyFootprintError:
                skipped.append(b.id)
                continue
        if not mask.any():
            skipped.append(b.id)
            continue
        rows, cols = np.nonzero(mask)
        fb = footprint_bbox(base_polygon(b, sensor))
        out.append(
            BuildingTarget(
                b.id,
                mask,
                fb,
                building_bbox(fb, b.height, sensor),
                b.height,
                (int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())),
            )
        )
    if skipped:
        warnings.warn(f"{len(skipped)} buildings have empty footprint masks: {skipped}", EmptyMaskWarning, stacklevel=2)
    return out, skipped


def patch_origins(dims, patch_size: int, stride: int):
    rows, cols = dims
    if patch_size > rows or patch_size > cols:
        raise ValueError(f"patch size {patch_size} exceeds scene dims {dims}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n_r = (rows - patch_size) // stride + 1
    n_c = (cols - patch_size) // stride + 1
    return [(i * stride, j * stride) for i in range(n_r) for j in range(n_c)]


def containing_origins(t: BuildingTarget, dims, patch_size: int, stride: int):
    """Patch origins whose interior holds the whole mask support and gt box.

    Nothing may touch the outermost row or column of the patch.
    """
    rmin, rmax, cmin, cmax = t.support
    g = t.gt_box
    found = []
    for r0, c0 in patch_origins(dims, patch_size, stride):
        if not (rmin >= r0 + 1 and rmax <= r0 + patch_size - 2):
            continue
        if not (cmin >= c0 + 1 and cmax <= c0 + patch_size - 2):
            continue
        if not (g.x0 >= c0 + 1 and g.x1 <= c0 + patch_size - 1 and g.y0 >= r0 + 1 and g.y1 <= r0 + patch_size - 1):
            continue
        found.append((r0, c0))
    return found


def crop_patches(amplitude, targets, patch_size: int, stride: int):
    """One Sample per (building, fully containing patch).

    Returns ``(samples, uncovered_ids)``. Patch arrays are shared views of
    ``amplitude``; boxes are patch-local.
    """
    amplitude = np.asarray(amplitude)
    dims = amplitude.shape
    patch_origins(dims, patch_size, stride)  # validates
    samples, uncovered = [], []
    for t in targets:
        origins = containing_origins(t, dims, patch_size, stride)
        if not origins:
            uncovered.append(t.id)
            continue
        for r0, c0 in origins:
            samples.append(
                Sample(
                    t.id,
                    amplitude[r0 : r0 + patch_size, c0 : c0 + patch_size],
                    t.mask[r0 : r0 + patch_size, c0 : c0 + patch_size],
                    t.footprint_box.shifted(-c0, -r0),
                    t.gt_box.shifted(-c0, -r0),
                    t.height,
                    (r0, c0),
                )
            )
    if uncovered:
        warnings.warn(f"{len(uncovered)} buildings are not fully inside any patch: {uncovered}", stacklevel=2)
    return samples, uncovered


def nearest_center_sample(samples, patch_size: int):
    """The sample whose patch center is nearest the building center; ties -> smaller origin."""

    def key(s):
        cx = s.gt_box.cx - patch_size / 2
        cy = s.gt_box.cy - patch_size / 2
        return (cx * cx + cy * cy, s.patch_origin)

    return min(samples, key=key)


def split(samples, fraction: float, guard_px: float, scene_rows: int, patch_size: int):
    """Spatial train/test split along azimuth.

    Buildings are ordered by the scene azimuth of their gt box center; the
    boundary is the ``fraction`` quantile. Buildings whose gt box reaches
    within ``guard_px`` of the boundary are dropped. Training keeps every
    sample; testing keeps one per building (:func:`nearest_center_sample`).
    """
    if not 0 < fraction < 1:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    if guard_px < 0 or guard_px >= scene_rows:
        raise ValueError(f"guard {guard_px} px must be >= 0 and below the scene height {scene_rows}")
    by_id: dict = {}
    for s in samples:
        by_id.setdefault(s.building_id, []).append(s)
    if not by_id:
        raise ValueError("no samples to split")
    centers = {}
    extents = {}
    for bid, group in by_id.items():
        s = group[0]
        cy = s.gt_box.cy + s.patch_origin[0]
        centers[bid] = cy
        extents[bid] = (s.gt_box.y0 + s.patch_origin[0], s.gt_box.y1 + s.patch_origin[0])
    boundary = float(np.quantile(np.array(sorted(centers.values())), fraction))
    train, test = [], []
    for bid in sorted(by_id):
        y0, y1 = extents[bid]
        if centers[bid] < boundary and y1 <= boundary - guard_px:
            train.extend(replace(s, split="train") for s in by_id[bid])
        elif centers[bid] >= boundary and y0 >= boundary + guard_px:
            test.append(replace(nearest_center_sample(by_id[bid], patch_size), split="test"))
    if not train or not test:
        raise ValueError(f"split leaves an empty side (train {len(train)}, test {len(test)})")
    return train, test, boundary


# ---------------------------------------------------------------- normalisation


@dataclass(frozen=True)
class Normalization:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"degenerate normalisation range lo={self.lo}, hi={self.hi}")

    def apply(self, arr) -> np.ndarray:
        out = (np.asarray(arr, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def fit_normalization(train_samples) -> Normalization:
    """1st/99th percentiles over the distinct training patches."""
    if not train_samples:
        raise ValueError("no training samples to normalise")
    seen = {}
    for s in train_samples:
        seen.setdefault(s.patch_origin, s.patch)
    pix = np.concatenate([np.asarray(seen[k], dtype=np.float64).ravel() for k in sorted(seen)])
    lo, hi = np.percentile(pix, [1.0, 99.0])
    return Normalization(float(lo), float(hi))


def normalize(samples, norm: Normalization):
    """New samples with patches mapped to [0, 1]; patches shared across samples stay shared."""
    cache = {}
    out = []
    for s in samples:
        key = s.patch_origin
        if key not in cache:
            cache[key] = norm.apply(s.patch)
        out.append(replace(s, patch=cache[key]))
    return out


def rescale_sample(s: Sample, size: int) -> Sample:
    """Resample a square sample to ``size`` pixels: bilinear patch, nearest mask re-thresholded."""
    n = s.patch.shape[0]
    if size == n:
        return s
    f = size / n
    patch = ndimage.zoom(np.asarray(s.patch, dtype=np.float64), f, order=1, mode="nearest", grid_mode=True)
    mask = ndimage.zoom(np.asarray(s.mask, dtype=np.float64), f, order=0, mode="nearest", grid_mode=True)
    fb, gb = s.footprint_box, s.gt_box
    return replace(
        s,
        patch=patch.astype(np.float32),
        mask=(mask >= 0.5).astype(np.uint8),
        footprint_box=Box(fb.cx * f, fb.cy * f, fb.w * f, fb.h * f),
        gt_box=Box(gb.cx * f, gb.cy * f, gb.w * f, gb.h * f),
        scale=s.scale * f,
    )


# ---------------------------------------------------------------- dataset assembly


@dataclass
class Dataset:
    sensor: SensorModel
    patch_size: int
    stride: int
    norm: Normalization
    samples: list
    input_size: int = 0
    meta: dict = field(default_factory=dict)

    def split_samples(self, name: str):
        return [s for s in self.samples if s.split == name]


def build_dataset(
    amplitude,
    sensor: SensorModel,
    buildings,
    patch_size: int = 256,
    stride: int = 150,
    fraction: float = 0.8,
    guard_px: float = 0.0,
    train_buildings=None,
    input_size: int | None = None,
    filter_bins: int = 256,
):
    """Run the full reference-data workflow on one scene.

    ``train_buildings`` optionally replaces the footprints used for the
    training side (e.g. with injected positioning errors); the split and the
    test side always use ``buildings``.
    Returns ``(dataset, report)``.
    """
    amplitude = np.asarray(amplitude)
    dims = amplitude.shape
    targets, empty = building_targets(buildings, sensor, dims)
    kept, filt = filter_stale({t.id: t.gt_box for t in targets}, amplitude, filter_bins)
    targets = [t for t in targets if t.id in kept]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        samples, uncovered = crop_patches(amplitude, targets, patch_size, stride)
    train, test, boundary = split(samples, fraction, guard_px, dims[0], patch_size)
    if train_buildings is not None:
        train_ids = {s.building_id for s in train}
        moved = [b for b in train_buildings if b.id in train_ids]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            moved_targets, _ = building_targets(moved, sensor, dims)
            moved_samples, _ = crop_patches(amplitude, moved_targets, patch_size, stride)
        train = [replace(s, split="train") for s in moved_samples]
        if not train:
            raise ValueError("no training samples left after replacing footprints")
    norm = fit_normalization(train)
    samples = normalize(train + test, norm)
    size = input_size or patch_size
    samples = [rescale_sample(s, size) for s in samples]
    report = {
        "filter": filt,
        "empty_masks": empty,
        "uncovered": uncovered,
        "split_boundary_az_px": boundary,
        "n_train": sum(s.split == "train" for s in samples),
        "n_test": sum(s.split == "test" for s in samples),
    }
    log.info("dataset: %d train / %d test samples", report["n_train"], report["n_test"])
    return Dataset(sensor, patch_size, stride, norm, samples, size), report


# ---------------------------------------------------------------- manifest


def _box_list(b) -> list:
    return [float(v) for v in b]


def write_dataset(ds: Dataset, outdir) -> Path:
    """Write patches/, masks/ and manifest.json; returns the manifest path."""
    outdir = Path(outdir)
    (outdir / "patches").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(parents=True, exist_ok=True)
    written = set()
    entries = []
    for s in ds.samples:
        r0, c0 = s.patch_origin
        ppath = f"patches/p_{r0:06d}_{c0:06d}.gray32"
        if ppath not in written:
            write_gray32(outdir / ppath, s.patch)
            written.add(ppath)
        mpath = f"masks/{s.split}_{_safe(s.building_id)}_{r0:06d}_{c0:06d}.gray32"
        write_gray32(outdir / mpath, s.mask)
        entries.append(
            {
                "id": s.building_id,
                "split": s.split,
                "patch": ppath,
                "mask": mpath,
                "footprint_box": _box_list(s.footprint_box),
                "gt_box": _box_list(s.gt_box),
                "height_m": float(s.true_height),
                "patch_origin": [int(r0), int(c0)],
                "scale": float(s.scale),
            }
        )
    manifest = {
        "version": 1,
        "sensor": ds.sensor.to_dict(),
        "patch_size": ds.patch_size,
        "stride": ds.stride,
        "input_size": ds.input_size,
        "normalization": {"lo": ds.norm.lo, "hi": ds.norm.hi},
        "meta": ds.meta,
        "samples": entries,
    }
    path = outdir / "manifest.json"
    path.write_text(dump_manifest(manifest))
    return path


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=1, sort_keys=True) + "\n"


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def load_dataset(manifest_path, splits=("train", "test")) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    man = read_manifest(manifest_path)
    root = manifest_path.parent
    patches = {}
    samples = []
    for e in man["samples"]:
        if e["split"] not in splits:
            continue
        if e["patch"] not in patches:
            patches[e["patch"]] = read_gray32(root / e["patch"])
        samples.append(
            Sample(
                e["id"],
                patches[e["patch"]],
                read_gray32(root / e["mask"]),
                Box(*e["footprint_box"]),
                Box(*e["gt_box"]),
                float(e["height_m"]),
                tuple(e["patch_origin"]),
                e["split"],
                float(e.get("scale", 1.0)),
            )
        )
    norm = Normalization(man["normalization"]["lo"], man["normalization"]["hi"])
    return Dataset(
        SensorModel.from_dict(man["sensor"]),
        int(man["patch_size"]),
        int(man["stride"]),
        norm,
        samples,
        int(man.get("input_size", man["patch_size"])),
        man.get("meta", {}),
    )


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
