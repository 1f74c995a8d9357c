"""``spotr`` command line: gen-data, train, eval, ablate, bench, inspect.

Exit codes: 0 ok, 2 usage error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .bench import bench_csv, ratio_csv, sweep
from .block import VARIANTS
from .attention import RELATIONS
from .geometry import NUM_PARTS, SHAPE_CLASSES, FormatError, PointCloud, gen_shapes, read_pc, write_pc
from .model import ModelConfig, collate, load_checkpoint, save_checkpoint
from .numerics import NumericError
from .train import DivergenceError, TrainConfig, content_hash, evaluate, experiment_record, train

EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _out_dir(path: str, force: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _csv_list(text: str, allowed=None, what="value") -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"empty {what} list")
    if allowed is not None:
        bad = [t for t in items if t not in allowed]
        if bad:
            raise UsageError(f"unknown {what}(s) {bad}; choose from {list(allowed)}")
    return items


def load_dataset(data_dir: str, split: str) -> tuple[list[PointCloud], dict, str]:
    """Clouds of one split, the manifest, and the manifest's content hash."""
    root = Path(data_dir)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    raw = mpath.read_bytes()
    manifest = json.loads(raw)
    files = [f for f in manifest["files"] if f["split"] == split]
    if not files:
        raise UsageError(f"dataset {root} has no {split!r} split")
    clouds = []
    for f in files:
        data = (root / f["name"]).read_bytes()
        if content_hash(data) != f["hash"]:
            raise FormatError(f"{f['name']}: content hash does not match the manifest")
        clouds.append(read_pc(root / f["name"]))
    return clouds, manifest, content_hash(raw)


def read_config(path: str | None) -> tuple[dict, dict]:
    """``[model]`` and ``[train]`` sections of a ``key = value`` file."""
    if not path:
        return {}, {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file {path} not found")
    extra = set(cp.sections()) - {"model", "train"}
    if extra:
        raise UsageError(f"unknown config sections {sorted(extra)}")
    model = dict(cp["model"]) if cp.has_section("model") else {}
    tr = dict(cp["train"]) if cp.has_section("train") else {}
    known = {f.name for f in fields(TrainConfig)}
    bad = set(tr) - known
    if bad:
        raise UsageError(f"unknown [train] keys {sorted(bad)}")
    return model, tr


def _train_config(file_kv: dict, args) -> TrainConfig:
    base = TrainConfig()
    values = {}
    for f in fields(TrainConfig):
        if f.name in file_kv:
            values[f.name] = type(getattr(base, f.name))(file_kv[f.name])
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return TrainConfig(**values)


def _model_config(file_kv: dict, task: str) -> ModelConfig:
    kv = dict(file_kv)
    if "task" in kv and kv["task"] != task:
        raise UsageError(f"config task {kv['task']!r} does not match the dataset ({task!r})")
    kv["task"] = task
    return ModelConfig.from_kv(kv)


def _announce(name: str, **resolved) -> None:
    print(f"[spotr {name}] resolved config:")
    for k, v in resolved.items():
        print(f"  {k} = {v}")
    sys.stdout.flush()


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    classes = _csv_list(args.classes, SHAPE_CLASSES, "class")
    if args.n_samples < 1:
        raise UsageError("--n-samples must be >= 1")
    if args.n_test < 0 or args.n_points < 1:
        raise UsageError("--n-test must be >= 0 and --n-points >= 1")
    _announce("gen-data", classes=",".join(classes), n_points=args.n_points, n_samples=args.n_samples,
              n_test=args.n_test, jitter=args.jitter, segmentation=args.segmentation, seed=args.seed)
    out = _out_dir(args.out, args.force)
    files = []
    for split, count, offset in (("train", args.n_samples, 0), ("test", args.n_test, args.n_samples)):
        clouds = gen_shapes(classes, args.n_points, count, args.seed, args.jitter, args.segmentation, offset)
        for i, pc in enumerate(clouds):
            name = f"{split}_{i:05d}.pcd"
            write_pc(out / name, pc)
            files.append({"name": name, "split": split, "label": pc.label,
                          "hash": content_hash((out / name).read_bytes())})
    manifest = {
        "format": "PCD1",
        "classes": classes,
        "task": "segment" if args.segmentation else "classify",
        "num_parts": NUM_PARTS,
        "n_points": args.n_points,
        "seed": args.seed,
        "files": files,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    _write(out / MANIFEST, text)
    print(f"wrote {len(files)} clouds to {out}; manifest hash {content_hash(text.encode())}")
    return 0


def cmd_train(args) -> int:
    model_kv, train_kv = read_config(args.config)
    clouds, manifest, dhash = load_dataset(args.data, "train")
    test = None
    if any(f["split"] == "test" for f in manifest["files"]):
        test, _, _ = load_dataset(args.data, "test")
    tc = _train_config(train_kv, args)
    cfg = _model_config(model_kv, manifest["task"])
    if cfg.task == "classify":
        cfg = replace(cfg, num_classes=len(manifest["classes"]))
    cfg = replace(cfg, variant=tc.variant, relation=tc.relation)
    _announce("train", **cfg.to_kv(), **{f"train.{k}": v for k, v in asdict(tc).items()}, dataset_hash=dhash)
    out = _out_dir(args.out, args.force)
    result = train(clouds, cfg, tc, test)
    save_checkpoint(out / "checkpoint.ckpt", result.model, {"seed": tc.seed, "dataset_hash": dhash})
    _write(out / "metrics.csv", result.metrics_csv())
    record = experiment_record(result.model.cfg, tc, dhash)
    _write(out / "record.json", json.dumps(record, indent=1, sort_keys=True) + "\n")
    last = result.history[-1] if result.history else {}
    print(f"done: {last}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    model, meta = load_checkpoint(args.checkpoint)
    clouds, manifest, dhash = load_dataset(args.data, args.split)
    if manifest["task"] != model.cfg.task:
        raise UsageError(f"checkpoint task {model.cfg.task!r} does not match the dataset ({manifest['task']!r})")
    _announce("eval", checkpoint=args.checkpoint, split=args.split, seed=meta.get("seed", "n/a"), dataset_hash=dhash)
    m = evaluate(clouds, model)
    out = _out_dir(args.out, args.force)
    row = {"split": args.split, "loss": m["loss"], "oa": m["oa"], "macc": m["macc"]}
    if "miou" in m:
        row["miou"] = m["miou"]
    row.update({f"acc_class_{k}": v for k, v in m["per_class"].items()})
    _write(out / "eval.json", json.dumps(row, indent=1, sort_keys=True) + "\n")
    print(json.dumps(row, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    rows = _csv_list(args.rows, VARIANTS, "row")
    rels = _csv_list(args.relations, RELATIONS, "relation")
    model_kv, train_kv = read_config(args.config)
    clouds, manifest, dhash = load_dataset(args.data, "train")
    has_test = any(f["split"] == "test" for f in manifest["files"])
    test = load_dataset(args.data, "test")[0] if has_test else clouds
    base_tc = _train_config(train_kv, args)
    cfg = _model_config(model_kv, manifest["task"])
    if cfg.task == "classify":
        cfg = replace(cfg, num_classes=len(manifest["classes"]))
    _announce("ablate", rows=",".join(rows), relations=",".join(rels), eval_split="test" if has_test else "train",
              **{f"train.{k}": v for k, v in asdict(base_tc).items()}, dataset_hash=dhash)
    out = _out_dir(args.out, args.force)
    lines = [["variant", "relation", "oa", "macc"]]
    for row in rows:
        for rel in rels:
            tc = replace(base_tc, variant=row, relation=rel)
            result = train(clouds, cfg, tc)
            m = evaluate(test, result.model)
            lines.append([row, rel, "%.6f" % m["oa"], "%.6f" % m["macc"]])
            print(f"{row:>13s} {rel:>9s} oa={m['oa']:.4f} macc={m['macc']:.4f}")
            sys.stdout.flush()
    with open(out / "ablation.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(lines)
    return 0


def cmd_bench(args) -> int:
    ns = [int(v) for v in _csv_list(args.n_list, what="N")]
    if any(n < 1 for n in ns) or args.S < 1 or args.C < 1:
        raise UsageError("N, S and C must be positive")
    _announce("bench", n_list=",".join(map(str, ns)), S=args.S, C=args.C, hidden=args.hidden or args.C,
              wall=not args.no_wall, wall_max_n=args.wall_max_n, warmup=args.warmup, runs=args.runs)
    out = _out_dir(args.out, args.force)
    reports = sweep(ns, args.S, args.C, args.hidden, wall=not args.no_wall, wall_max_n=args.wall_max_n,
                    warmup=args.warmup, runs=args.runs)
    _write(out / "bench.csv", bench_csv(reports))
    _write(out / "bench_ratio.csv", ratio_csv(reports))
    print(ratio_csv(reports), end="")
    return 0


PALETTE = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
           (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
           (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195)]


def write_ply(path: Path, gray: np.ndarray, colored: np.ndarray) -> None:
    """ASCII PLY 1.0: ``gray`` points in gray, ``colored`` points from the palette."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(gray) + len(colored)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    for p in gray:
        lines.append("%.9g %.9g %.9g 128 128 128" % tuple(p))
    for s, p in enumerate(colored):
        lines.append("%.9g %.9g %.9g %d %d %d" % (tuple(p) + PALETTE[s % len(PALETTE)]))
    _write(path, "\n".join(lines) + "\n")


def cmd_inspect(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    model, meta = load_checkpoint(args.checkpoint)
    pc = read_pc(args.input)
    n_layers = len(model.blocks)
    if not 0 <= args.layer < n_layers:
        raise UsageError(f"--layer {args.layer} out of range [0, {n_layers})")
    if model.blocks[args.layer].spa is None:
        raise UsageError(f"layer {args.layer} has no SPA (variant {model.cfg.variant!r})")
    _announce("inspect", checkpoint=args.checkpoint, input=args.input, layer=args.layer,
              sample_id=args.sample_id, seed=meta.get("seed", "n/a"))
    out = _out_dir(args.out, args.force)
    plan = model.plan(pc.positions)
    with nx.no_grad():
        _, parts = model.encode(collate([plan]), return_parts=True)
    state = parts[args.layer]["state"]
    delta = state.delta.data[0]
    g, h = state.g.data[0], state.h.data[0]
    layer_points = plan.levels[args.layer]
    rows = [["sample_id", "layer", "s", "dx", "dy", "dz"]]
    rows += [[args.sample_id, args.layer, s, *("%.17g" % v for v in d)] for s, d in enumerate(delta)]
    with open(out / "sp_points.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    with open(out / "kernels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "i", "g", "h", "gh"])
        for s in range(g.shape[0]):
            for i in range(g.shape[1]):
                w.writerow([s, i, "%.17g" % g[s, i], "%.17g" % h[s, i], "%.17g" % (g[s, i] * h[s, i])])
    write_ply(out / "overlay.ply", layer_points, delta)
    print(f"wrote {len(delta)} SP points for layer {args.layer} to {out}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="clouds per optimizer step")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--optimizer", choices=["sgd", "adam"], help="optimizer")
    p.add_argument("--eval-every", dest="eval_every", type=int, help="epochs between test evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spotr", description="Toy SPoTr: data, training, ablations, cost benchmarks")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--classes", default=",".join(SHAPE_CLASSES), help="comma list from sphere,cube,torus,cylinder")
    p.add_argument("--n-points", dest="n_points", type=int, default=256, help="points per cloud")
    p.add_argument("--n-samples", dest="n_samples", type=int, required=True, help="training clouds")
    p.add_argument("--n-test", dest="n_test", type=int, default=0, help="test clouds")
    p.add_argument("--jitter", type=float, default=0.02, help="Gaussian jitter sigma")
    p.add_argument("--segmentation", action="store_true", help="add per-point part labels")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--config", help="key = value config file with [model] and [train] sections")
    p.add_argument("--seed", type=int, help="RNG seed (init and shuffling)")
    p.add_argument("--variant", choices=VARIANTS, help="ablation row")
    p.add_argument("--relation", choices=RELATIONS, help="semantic relation R")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file from train")
    p.add_argument("--split", default="test", choices=["train", "test"], help="dataset split")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every (row, relation) pair and tabulate")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--rows", default=",".join(VARIANTS), help=f"comma list from {','.join(VARIANTS)}")
    p.add_argument("--relations", default="sub", help=f"comma list from {','.join(RELATIONS)}")
    p.add_argument("--seed", type=int, help="shared RNG seed")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="SPA vs GSA cost sweep")
    p.add_argument("--n-list", dest="n_list", default="256,512,1024,2048,4096,8192", help="comma list of N")
    p.add_argument("--S", type=int, default=16, help="SP points")
    p.add_argument("--C", type=int, default=64, help="channels")
    p.add_argument("--hidden", type=int, default=None, help="mapping hidden width (default C)")
    p.add_argument("--no-wall", dest="no_wall", action="store_true", help="skip wall-clock timing")
    p.add_argument("--wall-max-n", dest="wall_max_n", type=int, default=2048, help="largest N to time")
    p.add_argument("--warmup", type=int, default=3, help="warmup runs (>= 3)")
    p.add_argument("--runs", type=int, default=10, help="measured runs (>= 10)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="dump SP points and kernels for one cloud")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="PCD1 cloud")
    p.add_argument("--layer", type=int, default=0, help="block index")
    p.add_argument("--sample-id", dest="sample_id", default="0", help="id written to sp_points.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"spotr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DivergenceError) as exc:
        print(f"spotr {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, json.JSONDecodeError) as exc:
        print(f"spotr {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
