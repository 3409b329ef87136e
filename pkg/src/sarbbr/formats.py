"""On-disk formats: .gray32 rasters, footprints JSON, prediction CSV."""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from sarbbr.boxes import Box

GRAY32_MAGIC = b"SARP"
GRAY32_VERSION = 1


class FormatError(ValueError):
    """Input file does not match its schema."""


def write_gray32(path, arr) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("gray32 rasters are 2-d")
    header = GRAY32_MAGIC + struct.pack("<III", GRAY32_VERSION, *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_gray32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != GRAY32_MAGIC:
        raise FormatError(f"{path}: not a gray32 raster")
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != GRAY32_VERSION:
        raise FormatError(f"{path}: unsupported gray32 version {version}")
    if len(data) != 16 + 4 * rows * cols:
        raise FormatError(f"{path}: expected {rows}x{cols} samples, file size is {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float32)


def parse_footprints(text: str, source: str = "<footprints>"):
    """Parse footprints JSON into BuildingRecords.

    Raises FormatError carrying line/column for malformed JSON.
    """
    from sarbbr.scene import BuildingRecord

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("buildings"), list):
        raise FormatError(f"{source}: expected an object with a 'buildings' list")
    crs = doc.get("crs", "local-meters")
    if crs != "local-meters":
        raise FormatError(f"{source}: unsupported crs {crs!r}")
    records = []
    for k, item in enumerate(doc["buildings"]):
        try:
            records.append(
                BuildingRecord(
                    id=str(item["id"]),
                    footprint=np.asarray(item["footprint"], dtype=np.float64),
                    height=float(item["height_m"]),
                    ground=float(item.get("ground_m", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{source}: building #{k}: {exc}") from exc
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{source}: duplicate building ids")
    return records


def read_footprints(path):
    return parse_footprints(Path(path).read_text(), str(path))


def dump_footprints(records) -> str:
    doc = {
        "crs": "local-meters",
        "buildings": [
            {
                "id": r.id,
                "footprint": [[float(x), float(y)] for x, y in r.footprint],
                "height_m": r.height,
                "ground_m": r.ground,
            }
            for r in records
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def write_footprints(path, records) -> None:
    Path(path).write_text(dump_footprints(records))


PRED_HEADER = ["building_id", "cx", "cy", "w", "h"]


def write_predictions(path, preds: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRED_HEADER)
    for bid in sorted(preds):
        w.writerow([bid] + [repr(float(v)) for v in preds[bid]])
    Path(path).write_text(buf.getvalue(), newline="")


def read_predictions(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != PRED_HEADER:
        raise FormatError(f"{path}: header must be {','.join(PRED_HEADER)}")
    preds = {}
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5:
            raise FormatError(f"{path}: line {n}: expected 5 fields")
        try:
            box = Box(*(float(v) for v in row[1:]))
        except ValueError as exc:
            raise FormatError(f"{path}: line {n}: {exc}") from exc
        if row[0] in preds:
            raise FormatError(f"{path}: line {n}: duplicate building id {row[0]!r}")
        if not (box.w > 0 and box.h > 0):
            raise FormatError(f"{path}: line {n}: box must have positive size")
        preds[row[0]] = box
    return preds
