"""Command-line entry point: ``sarbbr <command> ...``.

Exit codes: 0 ok, 2 invalid input, 3 unknown or missing building ids,
4 numerical failure. ``SARBBR_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from sarbbr import dataset as dsmod
from sarbbr import heights, model, nn
from sarbbr.boxes import Box
from sarbbr.formats import FormatError, read_footprints, read_gray32, read_predictions, write_footprints, write_gray32, write_predictions
from sarbbr.geometry import SensorModel
from sarbbr.scene import BuildingOutsideGrid, ReflectivityProfile, base_polygon, render
from sarbbr.synthetic import SENSOR_PRESETS, preset_sensor, random_city

log = logging.getLogger("sarbbr")

EXIT_INPUT = 2
EXIT_REFERENCE = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"input not found: {p}")
    return p


def _output(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise CliError(f"{p} exists; pass --force to overwrite")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _pair(text: str, kind=int):
    try:
        a, b = (kind(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise CliError(f"expected two comma-separated values, got {text!r}") from None
    return a, b


def _key_values(text: str) -> dict:
    out = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"expected key=value, got {item!r}")
        out[key.strip()] = float(val)
    return out


def _sensor_from_args(a) -> SensorModel:
    try:
        if a.preset:
            base = preset_sensor(a.preset)
        else:
            if None in (a.theta, a.spacing_rg, a.spacing_az):
                raise CliError("give --preset or all of --theta, --spacing-rg, --spacing-az")
            base = SensorModel(a.theta, a.spacing_rg, a.spacing_az)
        return SensorModel(base.theta, base.spacing_rg, base.spacing_az, a.rg_origin, a.az_origin)
    except ValueError as e:
        raise CliError(str(e)) from None


def _add_sensor_flags(p):
    p.add_argument("--preset", choices=sorted(SENSOR_PRESETS))
    p.add_argument("--theta", type=float, help="incidence angle, degrees")
    p.add_argument("--spacing-rg", type=float, help="slant-range pixel spacing, m")
    p.add_argument("--spacing-az", type=float, help="azimuth pixel spacing, m")
    p.add_argument("--rg-origin", type=float, default=0.0, help="range pixel of world x=0")
    p.add_argument("--az-origin", type=float, default=0.0, help="azimuth pixel of world y=0")


def meta_path(scene_path) -> Path:
    p = Path(scene_path)
    return p.with_name(p.stem + ".meta.json")


def model_meta_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".json")


def loss_log_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".loss.csv")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def _scene_footprint_box(entry: dict) -> Box:
    fb = Box(*entry["footprint_box"])
    s = float(entry.get("scale", 1.0))
    r0, c0 = entry["patch_origin"]
    return Box(fb.cx / s + c0, fb.cy / s + r0, fb.w / s, fb.h / s)


def _reference_entries(manifest: dict) -> dict:
    """One manifest entry per building id, test-split entries preferred."""
    out = {}
    for e in manifest["samples"]:
        if e["id"] not in out or (e["split"] == "test" and out[e["id"]]["split"] != "test"):
            out[e["id"]] = e
    return out


def _check_ids(pred_ids, known, what: str) -> None:
    unknown = sorted(set(pred_ids) - set(known))
    if unknown:
        shown = ", ".join(unknown[:20]) + (" ..." if len(unknown) > 20 else "")
        raise CliError(f"{len(unknown)} predicted id(s) not in {what}: {shown}", EXIT_REFERENCE)


# ---------------------------------------------------------------- commands


def cmd_synth(a) -> int:
    sensor = preset_sensor(a.preset)
    lo, hi = _pair(a.heights, float)
    recs, placed, dims = random_city(a.n, sensor, a.seed, heights=(lo, hi))
    out = _output(a.out, a.force)
    write_footprints(out, recs)
    print(f"--preset {a.preset} --rg-origin {placed.rg_origin!r} --az-origin {placed.az_origin!r} --dims {dims[0]},{dims[1]}")
    return 0


def cmd_simulate(a) -> int:
    buildings = read_footprints(_existing(a.footprints))
    sensor = _sensor_from_args(a)
    dims = _pair(a.dims)
    zero_ids = [s for s in (a.zero_reflectivity or "").split(",") if s]
    _check_ids(zero_ids, [b.id for b in buildings], "the footprints")
    out = _output(a.out, a.force)
    profile = ReflectivityProfile()
    try:
        scene = render(buildings, sensor, profile, a.seed, dims, speckle=not a.no_speckle, zero_reflectivity_ids=zero_ids)
    except BuildingOutsideGrid as e:
        raise CliError(str(e)) from None
    write_gray32(out, scene.amplitude)
    _write_json(
        meta_path(out),
        {
            "sensor": sensor.to_dict(),
            "seed": a.seed,
            "dims": list(dims),
            "speckle": not a.no_speckle,
            "profile": profile.to_dict(),
            "zero_reflectivity_ids": zero_ids,
            "footprints": str(a.footprints),
        },
    )
    log.info("wrote %s (%d x %d, %d buildings)", out, dims[0], dims[1], len(buildings))
    return 0


def cmd_gen_dataset(a) -> int:
    scene_path = _existing(a.scene)
    meta = _read_json(_existing(meta_path(scene_path)))
    sensor = SensorModel.from_dict(meta["sensor"])
    amplitude = read_gray32(scene_path)
    buildings = read_footprints(_existing(a.footprints))
    if not 0 < a.split < 1:
        raise CliError(f"--split must lie strictly between 0 and 1, got {a.split}")
    if a.patch < 1 or a.stride < 1:
        raise CliError("--patch and --stride must be positive")
    moved = None
    injected = None
    if a.inject_errors:
        kv = _key_values(a.inject_errors)
        injected = {"mu": kv.get("mu", 4.13), "sigma": kv.get("sigma", 1.71), "seed": int(kv.get("seed", 0))}
        moved = dsmod.inject_positioning_errors(buildings, injected["mu"], injected["sigma"], injected["seed"])
    outdir = Path(a.out)
    if (outdir / "manifest.json").exists() and not a.force:
        raise CliError(f"{outdir / 'manifest.json'} exists; pass --force to overwrite")
    try:
        ds, report = dsmod.build_dataset(
            amplitude, sensor, buildings, a.patch, a.stride, a.split, a.guard, moved, a.input_size or None
        )
    except BuildingOutsideGrid as e:
        raise CliError(str(e)) from None
    ds.meta = {"scene": meta, "split_fraction": a.split, "guard_px": a.guard, "inject_errors": injected}
    if outdir.exists() and a.force:
        for sub in ("patches", "masks"):
            for f in (outdir / sub).glob("*.gray32"):
                f.unlink()
    dsmod.write_dataset(ds, outdir)
    _write_json(outdir / "filter_report.json", report)
    print(f"{report['n_train']} train / {report['n_test']} test samples, {len(report['filter']['dropped'])} stale")
    return 0


def _train_configs(a, ds):
    channels = tuple(int(c) for c in a.channels.split(","))
    mcfg = model.ModelConfig(channels=channels, head_width=a.head_width, patch_size=ds.input_size or ds.patch_size)
    tcfg = model.TrainConfig(
        epochs=a.epochs, batch=a.batch, lr=a.lr, seed=a.seed, plateau_patience=a.plateau_patience
    )
    return mcfg, tcfg


def cmd_train(a) -> int:
    ds = dsmod.load_dataset(_existing(a.data), splits=("train",))
    try:
        mcfg, tcfg = _train_configs(a, ds)
    except ValueError as e:
        raise CliError(str(e)) from None
    out = _output(a.out, a.force)
    res = model.train(ds.samples, mcfg, tcfg)
    nn.save_weights(res.params, out)
    model.write_loss_log(loss_log_path(out), res.log)
    _write_json(
        model_meta_path(out),
        {"model": mcfg.to_dict(), "train": asdict(tcfg), "data": str(a.data)},
    )
    print(f"final epoch loss {res.log[-1][1]:.6f}")
    return 0


def _load_model(path):
    params = nn.load_weights(_existing(path))
    meta = _read_json(_existing(model_meta_path(path)))
    cfg = dict(meta["model"])
    cfg["channels"] = tuple(cfg["channels"])
    return model.ModelConfig(**cfg), params


def cmd_predict(a) -> int:
    cfg, params = _load_model(a.model)
    ds = dsmod.load_dataset(_existing(a.data), splits=(a.split,))
    if not ds.samples:
        raise CliError(f"no samples in split {a.split!r}")
    samples = ds.samples
    if a.split == "train":
        # one prediction per building: the most central crop
        by_id = {}
        for s in samples:
            by_id.setdefault(s.building_id, []).append(s)
        samples = [dsmod.nearest_center_sample(v, ds.input_size or ds.patch_size) for v in by_id.values()]
    out = _output(a.out, a.force)
    try:
        preds = model.predict(samples, cfg, params)
    except ValueError as e:
        raise CliError(str(e)) from None
    write_predictions(out, preds)
    return 0


def _height_results(preds: dict, manifest: dict, sensor: SensorModel):
    refs = _reference_entries(manifest)
    _check_ids(preds, refs, "the manifest")
    results = []
    for bid in sorted(preds):
        e = refs[bid]
        results.append(
            heights.height_from_boxes(preds[bid], _scene_footprint_box(e), sensor, bid, float(e["height_m"]))
        )
    return results


def cmd_eval(a) -> int:
    preds = read_predictions(_existing(a.pred))
    if not preds:
        raise CliError(f"{a.pred} holds no predictions")
    manifest = _read_json(_existing(a.manifest))
    sensor = SensorModel.from_dict(manifest["sensor"])
    m = heights.metrics(_height_results(preds, manifest, sensor))
    heights.write_report(_output(a.report, a.force), m)
    print(f"he_mean {m.he_mean:.4f} m  he_std {m.he_std:.4f} m  mae {m.mae:.4f} m  n {m.n}")
    return 0


def cmd_reconstruct(a) -> int:
    preds = read_predictions(_existing(a.pred))
    buildings = {b.id: b for b in read_footprints(_existing(a.footprints))}
    manifest = _read_json(_existing(a.manifest))
    sensor = SensorModel.from_dict(manifest["sensor"])
    _check_ids(preds, buildings, "the footprints")
    meshes = []
    for bid in sorted(preds):
        b = buildings[bid]
        fb = dsmod.footprint_bbox(base_polygon(b, sensor))
        r = heights.height_from_boxes(preds[bid], fb, sensor, bid)
        if r.predicted_height == 0:
            log.warning("building %s: zero predicted height, no prism written", bid)
            continue
        meshes.append(heights.extrude_lod1(b, r.predicted_height))
    heights.write_obj(_output(a.out, a.force), meshes)
    print(f"{len(meshes)} prisms written")
    return 0


def cmd_gradcheck(a) -> int:
    err = model.tiny_model_gradcheck(a.seed)
    print(f"max relative error {err:.3e}")
    return 0 if err <= a.tol else EXIT_NUMERIC


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sarbbr", description="Building heights from SAR bounding boxes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write footprints for a random synthetic city")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--preset", choices=sorted(SENSOR_PRESETS), default="berlin-sm")
    p.add_argument("--heights", default="3,40", help="min,max building height in m")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="render a speckled amplitude scene")
    p.add_argument("--footprints", required=True)
    _add_sensor_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="512,512", help="rows,cols")
    p.add_argument("--zero-reflectivity", help="comma-separated ids rendered with zero backscatter")
    p.add_argument("--no-speckle", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-dataset", help="crop, split and normalise training data")
    p.add_argument("--scene", required=True)
    p.add_argument("--footprints", required=True)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--stride", type=int, default=150)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--guard", type=float, default=0.0, help="azimuth guard band in pixels")
    p.add_argument("--inject-errors", help="mu=4.13,sigma=1.71,seed=N")
    p.add_argument("--input-size", type=int, default=0, help="rescale patches to this size")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the box regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", default=",".join(str(c) for c in model.ModelConfig.channels))
    p.add_argument("--head-width", type=int, default=model.ModelConfig.head_width)
    p.add_argument("--plateau-patience", type=int, default=model.TrainConfig.plateau_patience)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict scene-coordinate building boxes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="height error statistics of a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="write LoD1 prisms as OBJ")
    p.add_argument("--pred", required=True)
    p.add_argument("--footprints", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def _threads():
    raw = os.environ.get("SARBBR_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"SARBBR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError("SARBBR_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()), warnings.catch_warnings():
            if not a.verbose:
                warnings.simplefilter("ignore", dsmod.EmptyMaskWarning)
            return a.func(a)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except model.NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, dsmod.EmptyFootprintError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
