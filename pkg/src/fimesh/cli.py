"""Command-line entry point: ``fimesh <subcommand> ...``.

Exit codes: 0 ok, 2 bad configuration, 3 missing input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from fimesh import __version__
from fimesh import autograd as ag
from fimesh.geometry_ops import build_operators, save_operators
from fimesh.mesh import (
    FOCUSED,
    FULL,
    MeshError,
    equivalent_resolution,
    full_vertex_count,
    make_focused,
    make_full,
    make_mesh,
    save_mesh,
)
from fimesh.nn import ConfigError, ModelConfig, SSRModel
from fimesh.resample import (
    CHANNEL_MODES,
    DatasetManifest,
    EquirectImage,
    ResampleError,
    build_dataset,
    downscale_equirect,
    input_width,
    read_image,
    read_items,
    render_to_equirect,
    sample_to_mesh,
    stack_items,
    write_image,
    write_items,
)
from fimesh.rotations import N_FACES, build_rotation_table, load_table, save_table
from fimesh.synth import PATTERNS, synth_frame
from fimesh.train import (
    SCHEDULES,
    NumericError,
    item_psnrs,
    predict,
    stream_rng,
    train_model,
    upsample_floor,
)

log = logging.getLogger("fimesh")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
CACHE_ENV = "FIMESH_CACHE_DIR"
# Full meshes past this level need several GB for vertices plus operators.
FULL_LEVEL_GUARD = 9
SCHEMA_PATH = Path(__file__).with_name("schemas") / "metrics.schema.json"


# -- helpers ------------------------------------------------------------------


def cache_dir(args) -> Path:
    d = Path(args.cache_dir or os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "fimesh")
    d.mkdir(parents=True, exist_ok=True)
    return d


def require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input: {p}")
    return p


def write_resolved(args, out_dir: Path, name: str = "resolved_config.json") -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}
    cfg["version"] = __version__
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def emit(args, payload: dict) -> None:
    def fmt(v):
        if isinstance(v, float):
            return round(v, args.precision)
        if isinstance(v, dict):
            return {k: fmt(x) for k, x in v.items()}
        if isinstance(v, list):
            return [fmt(x) for x in v]
        return v

    print(json.dumps(fmt(payload), sort_keys=True))


def rotation_table(args, level: int, path=None):
    """Load ``path`` if given, else a cached table for ``level``, building it on a miss."""
    if path is not None:
        table = load_table(require(path))
        if table.focused_level < level:
            raise ConfigError(f"table level {table.focused_level} is coarser than required {level}")
        return table
    cached = cache_dir(args) / f"rotations_L{level}.bin"
    if cached.exists():
        return load_table(cached)
    table = build_rotation_table(make_full(1), make_focused(level))
    save_table(table, cached)
    return table


def load_run(run_dir, which: str = "best"):
    run = require(run_dir)
    config = ModelConfig.from_json(require(run / "model_config.json").read_text())
    store = ag.load_checkpoint(require(run / f"{which}.ckpt"))
    model = SSRModel(config)
    if set(store.params) != set(model.store.params) or any(
        store.params[n].shape != t.shape for n, t in model.store.params.items()
    ):
        raise ConfigError(f"{run}/{which}.ckpt does not match model_config.json")
    model.store.load_from(store)
    return config, model


def load_split(path):
    items = read_items(require(path))
    if not items:
        raise ConfigError(f"{path} holds no samples")
    return items


def parse_faces(text: str):
    if text == "all":
        return "all"
    try:
        faces = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"--faces must be 'all' or a comma list of ints: {text!r}") from e
    if not faces or min(faces) < 0 or max(faces) >= N_FACES:
        raise ConfigError(f"face indices must lie in [0, {N_FACES})")
    return faces


# -- subcommands --------------------------------------------------------------


def cmd_gen_mesh(args) -> int:
    if args.kind == FULL and args.level >= FULL_LEVEL_GUARD and not args.allow_large:
        raise ConfigError(f"Full Level-{args.level} needs --allow-large")
    t = time.perf_counter()
    mesh = make_mesh(args.level, args.kind)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out)
    write_resolved(args, out.parent)
    w, h, _ = equivalent_resolution(full_vertex_count(args.level))
    emit(args, {"level": args.level, "kind": args.kind, "vertices": mesh.n_vertices,
                "faces": mesh.n_faces, "equivalent_resolution": [w, h],
                "elapsed_s": time.perf_counter() - t})
    return EXIT_OK


def cmd_gen_ops(args) -> int:
    mesh = make_mesh(args.level, args.kind)
    ops = build_operators(mesh)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_operators(ops, out)
    write_resolved(args, out.parent)
    emit(args, {"level": args.level, "kind": args.kind, "vertices": mesh.n_vertices,
                "nnz": {n: op.nnz for n, op in zip(("identity", "grad_lat", "grad_lng", "laplacian"),
                                                    ops.as_tuple())}})
    return EXIT_OK


def cmd_precompute_rotations(args) -> int:
    t = time.perf_counter()
    table = build_rotation_table(make_full(1), make_focused(args.level))
    out = Path(args.out) if args.out else cache_dir(args) / f"rotations_L{args.level}.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_table(table, out)
    write_resolved(args, out.parent)
    dev = table.orthogonality_deviation()
    emit(args, {"level": args.level, "path": str(out), "vertices": table.n_vertices,
                "max_orthogonality_deviation": float(dev.max()),
                "elapsed_s": time.perf_counter() - t})
    return EXIT_OK


def cmd_synth_frames(args) -> int:
    if args.width % 2 or args.width < 8:
        raise ConfigError("--width must be an even number >= 8")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = stream_rng(args.seed, "synth")
    names = []
    for i in range(args.count):
        img = synth_frame(rng, args.width, args.pattern, channels=3)
        name = f"frame_{i:04d}.png"
        write_image(img, out / name)
        names.append(name)
    manifest = DatasetManifest(frames=names, seed=args.seed, levels=tuple(args.levels),
                               channel_mode=args.channel_mode)
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    write_resolved(args, out)
    emit(args, {"frames": len(names), "manifest": str(out / "manifest.json")})
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    manifest = DatasetManifest.load(require(args.manifest))
    table = rotation_table(args, manifest.levels[1], args.table)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in ("train", "test"):
        counts[split] = write_items(build_dataset(manifest, table, threads=args.threads, split=split),
                                    out / f"{split}.samples")
    summary = {"levels": list(manifest.levels), "channels": manifest.channels, "items": counts}
    (out / "dataset.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_resolved(args, out)
    emit(args, summary)
    return EXIT_OK


def cmd_train(args) -> int:
    data = require(args.data)
    train_items = load_split(data / "train.samples")
    test_path = data / "test.samples"
    test_items = read_items(test_path) if test_path.exists() else []
    l_in, l_out = train_items[0].level_in, train_items[0].level_out
    if l_out != l_in + 2:
        raise ConfigError(f"models upsample by two levels; dataset is L{l_in} -> L{l_out}")
    config = ModelConfig(
        level_in=l_in,
        channels=args.channels,
        up_channels=tuple(args.up_channels),
        image_channels=train_items[0].channels,
        model=args.model,
        mesh_kind=FOCUSED,
        res_blocks=args.res_blocks,
        mean_shift=not args.no_mean_shift,
        seed=args.seed,
    )
    xtr, ytr = stack_items(train_items)
    xte, yte = stack_items(test_items) if test_items else (xtr[:0], ytr[:0])
    model = SSRModel(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(args, out)
    (out / "model_config.json").write_text(config.to_json() + "\n")

    metrics = open(out / "metrics.jsonl", "w")

    def on_epoch(row):
        metrics.write(json.dumps(row, sort_keys=True) + "\n")
        metrics.flush()
        log.info("epoch %d train_mse %.6g test_psnr %s", row["epoch"], row["train_mse"], row["test_psnr"])

    try:
        result = train_model(model, xtr, ytr, xte, yte, epochs=args.epochs, batch=args.batch,
                             lr=args.lr, schedule=args.schedule, seed=args.seed, on_epoch=on_epoch)
    except NumericError:
        ag.save_checkpoint(model.store, out / "failed.ckpt")
        raise
    finally:
        metrics.close()
    ag.save_checkpoint(model.store, out / "last.ckpt")
    ag.save_checkpoint(result.best_store, out / "best.ckpt")
    floor = (float(item_psnrs(upsample_floor(xte, l_in, FOCUSED), yte).mean())
             if len(xte) else None)
    last = result.history[-1]
    summary = {
        "params": model.store.count(),
        "best_epoch": result.best_epoch,
        "last_test_psnr": last["test_psnr"],
        "last_train_mse": last["train_mse"],
        "floor_psnr": floor,
        "train_items": len(xtr),
        "test_items": len(xte),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    emit(args, summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    config, model = load_run(args.run, args.which)
    rows, per_dataset = [], {}
    for path in args.data:
        items = load_split(path)
        if items[0].level_in != config.level_in or items[0].channels != config.image_channels:
            raise ConfigError(f"{path} does not match the model (level/channels)")
        x, y = stack_items(items)
        scores = item_psnrs(predict(model, x), y)
        floor = item_psnrs(upsample_floor(x, config.level_in, config.mesh_kind), y)
        per_dataset[str(path)] = {"mean_psnr": float(scores.mean()), "floor_psnr": float(floor.mean()),
                                  "items": len(items)}
        for it, s, f in zip(items, scores, floor):
            rows.append({"dataset": str(path), "frame": it.frame_id, "face": it.face,
                         "psnr": float(s), "floor_psnr": float(f)})
    report = {
        "datasets": per_dataset,
        "average_psnr": float(np.mean([d["mean_psnr"] for d in per_dataset.values()])),
        "average_floor_psnr": float(np.mean([d["floor_psnr"] for d in per_dataset.values()])),
        "checkpoint": args.which,
    }
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["dataset", "frame", "face", "psnr", "floor_psnr"])
            w.writeheader()
            w.writerows(rows)
    out = Path(args.out) if args.out else Path(args.run)
    write_resolved(args, out, "eval_resolved_config.json")
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    emit(args, report)
    return EXIT_OK


def time_forward(model: SSRModel, batch: int, trials: int, warmup: int, rng) -> list[float]:
    x = rng.random((batch, model.config.image_channels, model.n_in))
    for _ in range(warmup):
        model(x, training=False)
    times = []
    for _ in range(trials):
        t = time.perf_counter()
        model(x, training=False)
        times.append(time.perf_counter() - t)
    return times


def cmd_bench(args) -> int:
    if args.trials < 2:
        raise ConfigError("--trials must be at least 2 to report a stdev")
    report = {"batch": args.batch, "trials": args.trials, "models": {}}
    for run in args.run:
        config, model = load_run(run, "last")
        times = time_forward(model, args.batch, args.trials, args.warmup, stream_rng(args.seed, "init"))
        per_item = [t / args.batch for t in times]
        per_frame_ms = [1e3 * N_FACES * t for t in per_item]
        report["models"][str(run)] = {
            "model": config.model,
            "params": model.store.count(),
            "per_frame_ms_mean": statistics.mean(per_frame_ms),
            "per_frame_ms_stdev": statistics.stdev(per_frame_ms),
            "per_item_ms_mean": 1e3 * statistics.mean(per_item),
        }
    out = Path(args.out) if args.out else Path(args.run[0])
    write_resolved(args, out, "bench_resolved_config.json")
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    emit(args, report)
    return EXIT_OK


def cmd_render(args) -> int:
    faces = parse_faces(args.faces)
    if (args.signal is None) == (args.image is None):
        raise ConfigError("give exactly one of --signal or --image")
    if args.signal is not None:
        signal = np.load(require(args.signal))
        level = args.level
        if level is None:
            n = signal.shape[-1]
            level = next((k for k in range(1, 12) if make_focused(k).n_vertices == n), None)
            if level is None:
                raise ConfigError(f"no focused level has {n} vertices")
    else:
        img = read_image(require(args.image))
        if args.run:
            config, model = load_run(args.run, args.which)
            img = img.to_channels("luma" if config.image_channels == 1 else "rgb")
            level = config.level_out
            table = rotation_table(args, level, args.table)
            low = downscale_equirect(img, min(input_width(config.level_in), img.width - img.width % 2))
            mesh_in = make_focused(config.level_in)
            face_ids = range(N_FACES) if faces == "all" else faces
            x = np.zeros((N_FACES, config.image_channels, mesh_in.n_vertices))
            for f in face_ids:
                x[f] = sample_to_mesh(low, table, f, mesh_in)
            signal = np.clip(predict(model, x), 0.0, 1.0)
        else:
            if args.level is None:
                raise ConfigError("--image without --run needs --level")
            level = args.level
            table = rotation_table(args, level, args.table)
            mesh = make_focused(level)
            signal = np.stack([sample_to_mesh(img, table, f, mesh) for f in range(N_FACES)])
    table = rotation_table(args, level, args.table)
    width = args.width or equivalent_resolution(full_vertex_count(level))[0]
    if signal.ndim == 3 and signal.shape[0] != N_FACES:
        raise ConfigError(f"signal must be (80, C, V) or (C, V), got {signal.shape}")
    canvas = render_to_equirect(signal, table, faces, width, make_focused(level))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(canvas, out)
    write_resolved(args, out.parent, "render_resolved_config.json")
    emit(args, {"out": str(out), "width": width, "level": level})
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fimesh", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads for dataset building")
    p.add_argument("--precision", type=int, default=4, help="decimals in printed reports")
    p.add_argument("--cache-dir", default=None, help=f"defaults to ${CACHE_ENV} or ~/.cache/fimesh")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", default=None,
                   help="replay a resolved_config.json written by an earlier run")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("gen-mesh", help="build and save a Full or Focused mesh")
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--kind", choices=(FULL, FOCUSED), default=FOCUSED)
    s.add_argument("--out", required=True)
    s.add_argument("--allow-large", action="store_true", help=f"permit Full Level >= {FULL_LEVEL_GUARD}")
    s.set_defaults(func=cmd_gen_mesh)

    s = sub.add_parser("gen-ops", help="build and save the four mesh operators")
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--kind", choices=(FULL, FOCUSED), default=FOCUSED)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_ops)

    s = sub.add_parser("precompute-rotations", help="per-face map table for a focused level")
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--out", default=None, help="defaults to the cache directory")
    s.set_defaults(func=cmd_precompute_rotations)

    s = sub.add_parser("synth-frames", help="write procedural equirect frames and a manifest")
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--width", type=int, default=360)
    s.add_argument("--pattern", choices=PATTERNS, default="noise")
    s.add_argument("--levels", type=int, nargs=2, default=(4, 6), metavar=("L_IN", "L_OUT"))
    s.add_argument("--channel-mode", choices=CHANNEL_MODES, default="luma")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth_frames)

    s = sub.add_parser("build-dataset", help="sample manifest frames into train/test item files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--table", default=None, help="rotation table; cached build if omitted")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", help="train an SSR or transpose-baseline model")
    s.add_argument("--data", required=True, help="directory with train.samples / test.samples")
    s.add_argument("--out", required=True)
    s.add_argument("--model", choices=("ssr", "transpose"), default="ssr")
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--up-channels", type=int, nargs=2, default=(16, 4))
    s.add_argument("--res-blocks", type=int, default=2)
    s.add_argument("--no-mean-shift", action="store_true")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--schedule", choices=SCHEDULES, default="constant")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-item PSNR of a trained run")
    s.add_argument("--run", required=True)
    s.add_argument("--data", nargs="+", required=True, help="one or more .samples files")
    s.add_argument("--which", choices=("best", "last"), default="best")
    s.add_argument("--csv", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="batch forward timing, scaled to one full frame")
    s.add_argument("--run", nargs="+", required=True, help="one or two run directories")
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("render", help="paint mesh signals back to an equirect PNG")
    s.add_argument("--signal", default=None, help=".npy of shape (80, C, V) or (C, V)")
    s.add_argument("--image", default=None, help="equirect image to resample (or super-resolve)")
    s.add_argument("--run", default=None, help="super-resolve --image with this trained run")
    s.add_argument("--which", choices=("best", "last"), default="best")
    s.add_argument("--level", type=int, default=None)
    s.add_argument("--table", default=None)
    s.add_argument("--faces", default="all", help="'all' or comma-separated face ids")
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def replay_args(parser, path) -> argparse.Namespace:
    """Namespace rebuilt from a resolved config; unknown keys are rejected."""
    cfg = json.loads(require(path).read_text())
    cfg.pop("version", None)
    cfg["config"] = None
    command = cfg.get("command")
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subs.choices:
        parser.error(f"{path}: unknown command {command!r}")
    sub = subs.choices[command]
    known = {a.dest for a in parser._actions + sub._actions}
    extra = set(cfg) - known
    if extra:
        parser.error(f"{path}: unknown keys {sorted(extra)}")
    args = argparse.Namespace(**cfg)
    args.func = sub.get_default("func")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            args = replay_args(parser, args.config)
        except FileNotFoundError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_MISSING
    elif args.command is None:
        parser.error("a subcommand is required")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ResampleError, MeshError, ValueError, KeyError) as e:
        print(f"bad configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
