"""Command-line entry point: ``cpstrack {track,synth,eval,inspect}``.

Every ``track`` run writes into one run directory::

    RUN_DIR/run_meta.json           resolved config, inputs, seeds
    RUN_DIR/<sequence>/frame_00000.lmk ...
    RUN_DIR/<sequence>/result.json  tracklet table
    RUN_DIR/<sequence>/memory.json  with --dump-memory

Nothing time-dependent goes into those files, so two runs from the same
``run_meta.json`` give byte-identical directories. Timings are printed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, CpsTrackError, FormatError
from .evalkit import cycle_consistency, evaluate, tracks_from_labels
from .synth import SynthSpec, generate
from .tensor_io import (
    load_sequence,
    read_embedding_grid,
    read_label_mask,
    read_manifest,
    write_label_mask,
)
from .tracker import TrackerConfig, run_manifest

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_ENV = "CPSTRACK_CONFIG"
META_VERSION = 1
ABLATIONS = ("disable_memory", "disable_cycle_pairs", "disable_object_state")

log = logging.getLogger("cpstrack")


# -- config ------------------------------------------------------------------

def load_config_file(path) -> dict:
    """Tracker options from a TOML or JSON file (flat, or under ``[tracker]``)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(raw)
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a table/object")
    doc = doc.get("tracker", doc)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: 'tracker' must be a table/object")
    return doc


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def resolve_config(config_path=None, overrides=(), ablations=()) -> TrackerConfig:
    """File (or ``$CPSTRACK_CONFIG``) < ``--set`` overrides < ablation flags."""
    options: dict = {}
    source = config_path or os.environ.get(CONFIG_ENV)
    if source:
        options.update(load_config_file(source))
    for text in overrides:
        key, value = _parse_override(text)
        options[key] = value
    for name in ablations:
        options[name] = True
    try:
        return TrackerConfig.from_dict(options)
    except TypeError as exc:
        raise ConfigError(f"{source or 'config'}: {exc}") from exc


# -- track -------------------------------------------------------------------

def _sequence_dirs(manifests: list[Path]) -> list[str]:
    names, seen = [], {}
    for i, m in enumerate(manifests):
        base = read_manifest(m).name or m.parent.name or f"seq{i}"
        n = seen.get(base, 0)
        seen[base] = n + 1
        names.append(base if n == 0 else f"{base}_{n}")
    return names


def _seeds_for(manifest: Path) -> dict:
    spec_file = manifest.parent / "synth_spec.json"
    if spec_file.exists():
        try:
            return {"synth_seed": json.loads(spec_file.read_text()).get("seed")}
        except (OSError, ValueError):
            pass
    return {}


def _track_one(job: dict) -> dict:
    manifest = read_manifest(job["manifest"])
    config = TrackerConfig.from_dict(job["config"])
    result = run_manifest(manifest, config, semi_supervised=job["semi_supervised"])
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    for t, label in enumerate(result.label_maps):
        write_label_mask(label, out / f"frame_{t:05d}.lmk")
    with open(out / "result.json", "w") as fh:
        json.dump(result.to_json(), fh, indent=2)
        fh.write("\n")
    if job["dump_memory"] and result.memory is not None:
        result.memory.dump(out / "memory.json")
    return {"name": job["name"], "timings": result.timings, "failures": len(result.failures)}


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_track(args) -> int:
    if args.from_meta:
        meta = json.loads(Path(args.from_meta).read_text())
        if meta.get("version") != META_VERSION:
            raise ConfigError(f"{args.from_meta}: unsupported run_meta version {meta.get('version')}")
        config = TrackerConfig.from_dict(meta["config"])
        manifests = [Path(p) for p in meta["manifests"]]
        semi = bool(meta["semi_supervised"])
        dump_memory = bool(meta.get("dump_memory", False))
    else:
        if not args.manifests:
            raise ConfigError("track needs at least one manifest (or --from-meta)")
        ablations = [a for a in ABLATIONS if getattr(args, a)]
        config = resolve_config(args.config, args.set or (), ablations)
        manifests = [Path(p).resolve() for p in args.manifests]
        semi = args.semi_supervised
        dump_memory = args.dump_memory
    for m in manifests:
        if not m.is_file():
            raise ConfigError(f"manifest not found: {m}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = _sequence_dirs(manifests)
    meta = {
        "version": META_VERSION,
        "command": "track",
        "manifests": [str(m) for m in manifests],
        "sequences": names,
        "semi_supervised": semi,
        "dump_memory": dump_memory,
        "config": config.to_dict(),
        "seeds": {n: _seeds_for(m) for n, m in zip(names, manifests)},
    }
    _write_json(out / "run_meta.json", meta)
    jobs = [
        {"manifest": str(m), "config": config.to_dict(), "semi_supervised": semi,
         "out": str(out / n), "name": n, "dump_memory": dump_memory}
        for m, n in zip(manifests, names)
    ]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_track_one, jobs))
    else:
        summaries = [_track_one(j) for j in jobs]
    for s in summaries:
        ms = 1e3 * np.asarray(s["timings"])
        print(
            f"{s['name']}: {len(ms)} frames, total {ms.sum():.1f} ms, "
            f"mean {ms.mean():.1f} ms/frame, max {ms.max():.1f} ms, failures {s['failures']}"
        )
    return 0


# -- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = load_config_file(args.spec) if args.spec else {}
    doc = doc.get("synth", doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    seq = generate(spec)
    seq.save(args.out)
    print(f"wrote {len(seq)} frames of {spec.height}x{spec.width}x{spec.dim} to {args.out}")
    return 0


# -- eval --------------------------------------------------------------------

def _load_predictions(pred_dir: Path) -> list[np.ndarray]:
    result_file = pred_dir / "result.json"
    try:
        doc = json.loads(result_file.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {result_file}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{result_file}: invalid JSON ({exc})") from exc
    frames = doc.get("frames") if isinstance(doc, dict) else None
    if not isinstance(frames, int) or frames < 1:
        raise FormatError(f"{result_file}: 'frames' must be a positive integer")
    return [read_label_mask(pred_dir / f"frame_{t:05d}.lmk").labels for t in range(frames)]


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    manifest = read_manifest(args.gt)
    pred = _load_predictions(pred_dir)
    grids, masks = load_sequence(manifest)
    if any(m is None for m in masks):
        raise FormatError(f"{args.gt}: every frame needs a ground-truth mask for eval")
    if len(pred) != len(masks):
        raise FormatError(f"{pred_dir}: {len(pred)} predicted frames, ground truth has {len(masks)}")
    gt = tracks_from_labels(masks)
    report = evaluate(pred, gt)
    if args.cycle:
        from .tracker import SequenceResult

        meta_file = pred_dir.parent / "run_meta.json"
        cfg = TrackerConfig.from_dict(json.loads(meta_file.read_text())["config"]) if meta_file.exists() else None
        forward = SequenceResult(pred, [], [])
        cyc = cycle_consistency(forward, grids, cfg)
        report.cycle_consistency_iou = cyc.mean_iou
        report.cycle_excluded = cyc.excluded
    doc = report.to_json()
    out = Path(args.out) if args.out else pred_dir / "eval_report.json"
    _write_json(out, doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# -- inspect -----------------------------------------------------------------

def _inspect_result(doc: dict) -> str:
    lines = [f"sequence {doc.get('name') or '-'}: {doc.get('frames')} frames, "
             f"{len(doc['tracklets'])} tracklets, {len(doc.get('failures', []))} failures",
             f"{'id':>5} {'birth':>6} {'death':>6} {'frames':>7}  presence"]
    for tr in doc["tracklets"]:
        pres = tr.get("presence", [])
        bar = "".join("#" if p else "." for p in pres)
        death = "-" if tr.get("death_frame") is None else tr["death_frame"]
        lines.append(f"{tr['id']:>5} {tr['birth_frame']:>6} {death:>6} {sum(pres):>7}  {bar}")
    return "\n".join(lines)


def _inspect_memory(doc: dict) -> str:
    entries = doc["entries"]
    lines = [f"memory bank: {len(entries)}/{doc.get('capacity')} entries, "
             f"frames {doc.get('initial_frame')}..{doc.get('latest_frame')}"]
    by_obj: dict = {}
    for e in entries:
        d = by_obj.setdefault(e["object_id"], {"n": 0, "frames": set(), "util": 0})
        d["n"] += 1
        d["frames"].add(e["frame_of_origin"])
        d["util"] += e["utilization"]
    lines.append(f"{'object':>7} {'entries':>8} {'frames':>7} {'util':>7}")
    for obj in sorted(by_obj):
        d = by_obj[obj]
        lines.append(f"{obj:>7} {d['n']:>8} {len(d['frames']):>7} {d['util']:>7}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    path = Path(args.path)
    suffix = path.suffix.lower()
    if suffix == ".egr":
        g = read_embedding_grid(path)
        print(f"{path}: embedding grid {g.height}x{g.width}, dim {g.dim}")
    elif suffix == ".lmk":
        m = read_label_mask(path)
        ids = m.object_ids()
        areas = ", ".join(f"{i}:{int((m.labels == i).sum())}" for i in ids)
        print(f"{path}: label mask {m.height}x{m.width}, objects {{{areas}}}")
    else:
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from exc
        except ValueError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        if isinstance(doc, dict) and "tracklets" in doc:
            print(_inspect_result(doc))
        elif isinstance(doc, dict) and "entries" in doc:
            print(_inspect_memory(doc))
        elif isinstance(doc, dict) and "frames" in doc and isinstance(doc["frames"], list):
            man = read_manifest(path)
            print(f"{path}: manifest '{man.name}', {len(man.frames)} frames, fps {man.fps}")
        else:
            print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpstrack", description="Open-world tracking over patch embeddings.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-frame diagnostics")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="track one or more sequences")
    t.add_argument("manifests", nargs="*", help="manifest.json files")
    t.add_argument("-o", "--out", required=True, help="run directory")
    t.add_argument("-c", "--config", help=f"TOML/JSON config (default: ${CONFIG_ENV})")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a tracker option")
    t.add_argument("--semi-supervised", action="store_true", help="seed objects from the first-frame mask")
    t.add_argument("--jobs", type=int, default=1, help="sequences tracked in parallel")
    t.add_argument("--from-meta", help="replay the inputs and config of a run_meta.json")
    t.add_argument("--dump-memory", action="store_true", help="write the final memory bank")
    for name in ABLATIONS:
        t.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true")
    t.set_defaults(func=cmd_track)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("spec", nargs="?", help="TOML/JSON synth spec (defaults if omitted)")
    s.add_argument("out", help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="score a tracked sequence against ground truth")
    e.add_argument("pred", help="sequence output directory (holds result.json)")
    e.add_argument("gt", help="ground-truth manifest.json")
    e.add_argument("--out", help="report path (default: PRED/eval_report.json)")
    e.add_argument("--cycle", action="store_true", help="also run the backward cycle check")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="describe a result, memory dump, manifest, .egr or .lmk")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CpsTrackError, OSError, KeyError, ValueError) as exc:
        print(f"cpstrack {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
