"""Command-line entry points: ``train``, ``eval``, ``matrix``, ``plot``, ``synth``.

Every command writes its outputs under ``--out`` together with a
``manifest.json`` that indexes them.
"""

import argparse
import copy
import csv
import itertools
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from advdepth import config as cfg
from advdepth.model import ConfigError

log = logging.getLogger("advdepth")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class Manifest:
    def __init__(self, out, command):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.data = {"command": command, "artifacts": []}

    def add(self, path, kind):
        rel = Path(path).resolve().relative_to(self.out.resolve())
        self.data["artifacts"].append({"path": str(rel), "kind": kind})

    def write(self, **extra):
        self.data.update(extra)
        (self.out / "manifest.json").write_text(json.dumps(self.data, indent=2), encoding="utf-8")


def _load(args, extra_overrides=()):
    if not args.config:
        raise UsageError("--config is required")
    overrides = list(args.set or []) + list(extra_overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.deterministic:
        overrides.append("train.deterministic=true")
    return cfg.load_config(args.config, overrides)


# --- train ------------------------------------------------------------------

def cmd_train(args):
    from advdepth.engine import run_restarts

    config = _load(args)
    out = Path(args.out or f"runs/{config.name}")
    manifest = Manifest(out, "train")
    resolved = cfg.to_dict(config)
    log.info("config: %s", json.dumps(resolved, sort_keys=True))
    (out / "config.json").write_text(json.dumps(resolved, indent=2), encoding="utf-8")
    manifest.add(out / "config.json", "config")
    records, _ = run_restarts(config, out_dir=out)
    for i, rec in enumerate(records):
        sub = out / f"restart_{i:02d}"
        for name, kind in (("run_record.json", "run_record"), ("run_log.jsonl", "run_log"),
                           ("checkpoint.pt", "checkpoint")):
            if (sub / name).exists():
                manifest.add(sub / name, kind)
    manifest.write(config_hash=records[0].config_hash, seeds=[r.seed for r in records])
    print(json.dumps({"config_hash": records[0].config_hash, "runs": [
        {"seed": r.seed, "checkpoint": r.checkpoint, "final_val": r.final_val} for r in records]}, indent=2))
    return records


# --- eval -------------------------------------------------------------------

def _test_samples(config, data_root=None, data_kind=None):
    from advdepth.data import load_split
    from advdepth.engine import build_datasets

    if data_root:
        kind = data_kind or (config.data.kind if config and config.data.kind != "synthetic" else "kitti")
        size = (config.data.height, config.data.width) if config else None
        return list(load_split(kind, data_root, "test", size, with_depth=True))
    if config is None:
        raise UsageError("--data is required for checkpoints without an embedded config")
    return build_datasets(config).test


def _protocol(args, config):
    from advdepth.eval import EvalProtocol

    ec = config.eval if config is not None else cfg.EvalConfig()
    return EvalProtocol(
        depth_cap=args.cap if args.cap is not None else ec.cap,
        depth_floor=ec.floor,
        crop=args.crop or ec.crop,
        use_flip_merge=ec.flip_merge and not args.no_flip_merge,
    )


def cmd_eval(args):
    from advdepth.engine import load_checkpoint
    from advdepth.eval import evaluate_model, image_quality_table

    gen, payload = load_checkpoint(args.checkpoint)
    config = cfg.from_dict(payload["config"]) if payload.get("config") else None
    if args.config:
        wanted = _load(args)
        if payload.get("kind") == "generator" and cfg.arch_hash(wanted.generator) != payload["arch_hash"]:
            raise UsageError(
                f"checkpoint architecture hash {payload['arch_hash']} does not match "
                f"--config generator hash {cfg.arch_hash(wanted.generator)}; refusing to evaluate")
        config = wanted if config is None else config
    samples = _test_samples(config, args.data, args.data_kind)
    protocol = _protocol(args, config)
    report = evaluate_model(gen, samples, protocol=protocol)
    out = Path(args.out or "eval")
    manifest = Manifest(out, "eval")
    name = args.name or (config.name if config else Path(args.checkpoint).stem)
    report.write_csv(out / "metrics.csv", name)
    report.write_jsonl(out / "per_image.jsonl")
    manifest.add(out / "metrics.csv", "aggregate_csv")
    manifest.add(out / "per_image.jsonl", "per_image_jsonl")
    if args.image_quality:
        write_image_quality(out / "image_quality.csv", image_quality_table({name: gen}, samples))
        manifest.add(out / "image_quality.csv", "image_quality_csv")
    manifest.write(protocol={"cap": protocol.depth_cap, "floor": protocol.depth_floor,
                             "crop": protocol.crop, "flip_merge": protocol.use_flip_merge},
                   excluded=report.errors)
    print(json.dumps({"experiment": name, **report.aggregate(), "n": report.n_images}))
    return report


def write_image_quality(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("model", "l1", "l2", "ssim"))
        for row in rows:
            writer.writerow((row["model"], _fmt(row["l1"]), _fmt(row["l2"]), _fmt(row["ssim"])))


# --- matrix -----------------------------------------------------------------

TABLE_HEADER = ("experiment", "index", "L1", "LR", "DISP", "SSIM", "gan", "normalization", "scales",
                "backbone", "restarts", "ard", "srd", "rmse", "log_rmse", "d1", "d2", "d3", "n", "status")


def expand_matrix(matrix, base_dir="."):
    """Resolve a matrix file into ``[(name, index, raw_config_dict)]``."""
    base = matrix.get("base", {})
    if isinstance(base, str):
        base = json.loads((Path(base_dir) / base).read_text(encoding="utf-8"))
    shared = matrix.get("set", {})
    rows = []
    for row in matrix.get("rows", []):
        rows.append((row["name"], row.get("index", ""), {**shared, **row.get("set", {})}))
    if "grid" in matrix:
        axes = matrix["grid"]
        for combo in itertools.product(*[list(axis.items()) for axis in axes]):
            name = "+".join(label for label, _ in combo)
            sets = dict(shared)
            for _, s in combo:
                sets.update(s)
            rows.append((name, "", sets))
    names = [r[0] for r in rows]
    if len(set(names)) != len(names):
        raise ConfigError("matrix row names must be unique")
    resolved = []
    for name, index, sets in rows:
        raw = copy.deepcopy(base)
        raw["name"] = name
        raw = cfg.apply_overrides(raw, list(sets.items()))
        cfg.from_dict(raw)
        resolved.append((name, index, raw))
    return resolved


def run_matrix_row(name, index, raw, out_dir):
    """Train (with restarts) and evaluate one matrix row; never raises."""
    from advdepth.engine import build_datasets, report_restarts, run_restarts
    from advdepth.eval import EvalProtocol, evaluate_model

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = cfg.from_dict(raw)
    (out_dir / "config.json").write_text(json.dumps(raw, indent=2), encoding="utf-8")
    g, w = config.generator, config.weights
    row = {"experiment": name, "index": index,
           **{c: int(c in w.components) for c in ("L1", "LR", "DISP", "SSIM")},
           "gan": config.gan.kind.value, "normalization": g.normalization.value,
           "scales": g.num_output_scales, "backbone": g.backbone.value, "restarts": config.train.restarts}
    try:
        data = build_datasets(config)
        records, gens = run_restarts(config, data, out_dir)
        protocol = EvalProtocol.from_config(config.eval)
        reports = [evaluate_model(gen, data.test, protocol=protocol) for gen in gens]
        for i, rep in enumerate(reports):
            rep.write_jsonl(out_dir / f"restart_{i:02d}" / "per_image.jsonl")
        aggs = [rep.aggregate() for rep in reports]
        row.update({m: float(np.mean([a[m] for a in aggs])) for m in aggs[0]})
        row["n"] = reports[0].n_images
        row["status"] = "ok"
        row["config_hash"] = records[0].config_hash
        row["seeds"] = [r.seed for r in records]
        if len(records) > 1:
            row["restart_stats"] = report_restarts(records, aggs)
    except Exception as exc:  # recorded per row; the matrix carries on
        log.error("matrix row %s failed: %s", name, exc)
        (out_dir / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def _slug(name):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def write_table(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_HEADER)
        for row in rows:
            writer.writerow([_fmt(row.get(k, "")) for k in TABLE_HEADER])


def write_restart_table(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("experiment", "metric", "min", "max", "mean", "std", "restarts"))
        for row in rows:
            for metric, s in row.get("restart_stats", {}).items():
                writer.writerow((row["experiment"], metric, _fmt(s["min"]), _fmt(s["max"]),
                                 _fmt(s["mean"]), _fmt(s["std"]), row["restarts"]))


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def cmd_matrix(args):
    path = Path(args.matrix)
    matrix = json.loads(path.read_text(encoding="utf-8"))
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    rows = expand_matrix(matrix, path.parent)
    if overrides:
        rows = [(n, i, cfg.apply_overrides(raw, overrides)) for n, i, raw in rows]
    out = Path(args.out or f"runs/{matrix.get('name', path.stem)}")
    manifest = Manifest(out, "matrix")
    jobs = [(n, i, raw, out / "rows" / _slug(n)) for n, i, raw in rows]
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(run_matrix_row, *zip(*jobs)))
    else:
        results = [run_matrix_row(*job) for job in jobs]
    write_table(out / "table.csv", results)
    manifest.add(out / "table.csv", "table_csv")
    if any(r.get("restart_stats") for r in results):
        write_restart_table(out / "restarts.csv", results)
        manifest.add(out / "restarts.csv", "restart_csv")
    failed = [r["experiment"] for r in results if r["status"] != "ok"]
    manifest.write(rows=[{k: r.get(k) for k in ("experiment", "status", "config_hash", "seeds")} for r in results],
                   failed=failed)
    print(f"matrix {matrix.get('name', path.stem)}: {len(results) - len(failed)}/{len(results)} rows ok")
    if failed:
        print("failed rows: " + ", ".join(failed), file=sys.stderr)
    return results, failed


# --- plot -------------------------------------------------------------------

def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from advdepth.eval import pairwise_scatter, read_jsonl_report, write_scatter_csv

    out = Path(args.out or "plots")
    manifest = Manifest(out, "plot")
    if not (args.scatter or args.curve or args.disparity):
        raise UsageError("nothing to plot: pass --scatter, --curve and/or --disparity")
    if args.scatter:
        a, b = (read_jsonl_report(p) for p in args.scatter)
        try:
            points = pairwise_scatter(a, b, args.metric)
        except ValueError as exc:
            raise UsageError(f"--scatter reports do not pair up: {exc}") from None
        write_scatter_csv(out / "scatter.csv", points)
        xs, ys = [p[1] for p in points], [p[2] for p in points]
        hi = max(xs + ys) * 1.05 if points else 1.0
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(xs, ys, s=8)
        ax.plot([0, hi], [0, hi], "k--", lw=0.8)
        ax.set_xlabel(f"{args.metric} ({Path(args.scatter[0]).parent.name or 'A'})")
        ax.set_ylabel(f"{args.metric} ({Path(args.scatter[1]).parent.name or 'B'})")
        fig.tight_layout()
        fig.savefig(out / "scatter.png", dpi=120)
        plt.close(fig)
        manifest.add(out / "scatter.csv", "scatter_csv")
        manifest.add(out / "scatter.png", "scatter_plot")
    if args.curve:
        fig, ax = plt.subplots(figsize=(5, 3))
        for p in args.curve:
            steps, totals = [], []
            with open(p, encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    steps.append(rec["step"])
                    totals.append(rec["total"])
            ax.plot(steps, totals, label=Path(p).parent.name)
        ax.set_xlabel("step")
        ax.set_ylabel("training objective")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "curves.png", dpi=120)
        plt.close(fig)
        manifest.add(out / "curves.png", "training_curve")
    if args.disparity:
        manifest_paths = plot_disparity_grids(args.disparity, args.data, out / "disparity", args.limit)
        for p in manifest_paths:
            manifest.add(p, "disparity_grid")
    manifest.write()


def plot_disparity_grids(checkpoint, data_root, out_dir, limit=None):
    import matplotlib.pyplot as plt
    import torch

    from advdepth.engine import load_checkpoint
    from advdepth.geometry import warp

    gen, payload = load_checkpoint(checkpoint)
    config = cfg.from_dict(payload["config"]) if payload.get("config") else None
    samples = _test_samples(config, data_root)[:limit]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with torch.no_grad():
        for s in samples:
            d = gen(s.left[None])[0]
            recon = warp(s.right[None], d[:, 0:1], -1)[0]
            fig, axes = plt.subplots(3, 1, figsize=(4, 6))
            axes[0].imshow(s.left.permute(1, 2, 0).numpy())
            axes[1].imshow(d[0, 0].numpy(), cmap="plasma")
            axes[2].imshow(recon.clamp(0, 1).permute(1, 2, 0).numpy())
            for ax, title in zip(axes, ("input", "disparity", "reconstruction")):
                ax.set_title(title, fontsize=8)
                ax.axis("off")
            fig.tight_layout()
            path = out_dir / f"{_slug(s.id)}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            paths.append(path)
    return paths


# --- synth ------------------------------------------------------------------

def cmd_synth(args):
    from advdepth.data import write_dataset
    from advdepth.engine import build_datasets

    config = _load(args) if args.config else cfg.from_dict({"data": {"kind": "synthetic", "height": 64, "width": 128}})
    if config.data.kind != "synthetic":
        raise UsageError("synth needs a config with data.kind = synthetic")
    data = build_datasets(config)
    out = Path(args.out or "synthetic")
    manifest = Manifest(out, "synth")
    split_manifest = write_dataset(out, {"train": data.train.samples, "val": data.val, "test": data.test})
    for name in ("train", "val", "test"):
        manifest.add(out / "splits" / f"{name}.txt", "split")
    manifest.add(out / "rig.json", "rig")
    manifest.write(counts=split_manifest.counts())
    print(json.dumps(split_manifest.counts()))


# --- parser -----------------------------------------------------------------

def _common(suppress):
    default = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)", **default)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dot-path config override", **default)
    common.add_argument("--out", help="output directory", **default)
    common.add_argument("--seed", type=int, help="override train.seed", **default)
    common.add_argument("--deterministic", action="store_true", help="force deterministic kernels", **default)
    common.add_argument("-v", "--verbose", action="store_true", **default)
    return common


def build_parser():
    # global flags are accepted before or after the subcommand
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="advdepth", parents=[_common(suppress=False)],
                                     description="Self-supervised monocular depth experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a generator")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset root with a test split (default: the checkpoint's config)")
    p.add_argument("--data-kind", choices=("kitti", "cityscapes"),
                   help="layout of --data, e.g. cityscapes for a KITTI-trained model")
    p.add_argument("--image-quality", action="store_true", help="also score right-view reconstructions")
    p.add_argument("--no-flip-merge", action="store_true")
    p.add_argument("--crop", choices=("garg", "none"))
    p.add_argument("--cap", type=float, default=None, help="depth cap in metres (default 80)")
    p.add_argument("--name", help="experiment name in the CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", parents=[common], help="run an ablation matrix")
    p.add_argument("matrix")
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("plot", parents=[common], help="render scatter, curve and disparity figures")
    p.add_argument("--scatter", nargs=2, metavar=("A.jsonl", "B.jsonl"))
    p.add_argument("--metric", default="ard")
    p.add_argument("--curve", nargs="+", metavar="RUN_LOG")
    p.add_argument("--disparity", metavar="CHECKPOINT")
    p.add_argument("--data")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic stereo dataset")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.command == "matrix" and result[1]:
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
