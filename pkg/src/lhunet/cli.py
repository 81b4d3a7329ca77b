"""Command-line entry point: ``lhunet <subcommand> ...``.

Exit codes: 0 success, 2 usage/configuration error, 1 runtime failure.
Machine-readable output goes to ``--out``; summaries go to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import analyzer, archconfig, dataio, inference, network, trainloop
from .archconfig import ConfigError, ScheduleParseError

log = logging.getLogger("lhunet")

FORMATS = ("text", "csv", "json")
SUBCOMMANDS = ("analyze", "train", "infer", "evaluate", "ablate", "phantom", "split")
DEFAULT_PHANTOMS = 4


class UsageError(Exception):
    pass


def cache_dir() -> Path:
    return Path(os.environ.get("LHUNET_CACHE_DIR", Path.home() / ".cache" / "lhunet"))


def _write(path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def _config(args) -> archconfig.RunConfig:
    return archconfig.load_config(args.preset, args.config, args.schedule)


def phantom_cache(arch: archconfig.ArchSpec, seed: int, count: int = DEFAULT_PHANTOMS) -> Path:
    """Phantom dataset matching ``arch`` (channels, classes, patch), cached on disk."""
    spec = dataio.PhantomSpec(shape=tuple(arch.patch_size), channels=arch.in_channels,
                              n_classes=arch.out_channels, seed=seed,
                              radius_range=_radii(arch.patch_size))
    key = f"phantoms_{'x'.join(map(str, spec.shape))}_c{spec.channels}_k{spec.n_classes}_s{seed}_n{count}"
    d = cache_dir() / key
    if not (d / "images").is_dir() or len(dataio.list_records(d)) != count:
        dataio.write_phantom_dataset(d, spec, count)
    return d


def _radii(shape) -> tuple[float, float]:
    m = min(shape)
    return (m / 8, m / 4 - 0.5)


def _datasets(data_dir: Path):
    """(train, val) from ``splits.json`` (first split) or all records for both."""
    manifest = data_dir / "splits.json"
    if manifest.exists():
        s = json.loads(manifest.read_text(encoding="utf-8"))["splits"][0]
        return dataio.load_dataset(data_dir, s["train"]), dataio.load_dataset(data_dir, s["val"] or s["train"])
    ds = dataio.load_dataset(data_dir)
    return ds, ds


# ------------------------------------------------------------ subcommands

def cmd_analyze(args) -> int:
    cfg = _config(args)
    rep = analyzer.analyze(cfg.arch)
    rep.label = f"{args.preset or 'toy8'} {cfg.arch.schedule.render()}"
    if args.out:
        _write(args.out, rep.render(args.format))
    elif args.format != "text":
        sys.stdout.write(rep.render(args.format))
        return 0
    print(f"{rep.label}: params {rep.total_params:,} ({rep.total_params / 1e6:.2f} M), "
          f"FLOPs {rep.total_flops:,} ({rep.total_flops / 1e9:.2f} G)")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if not args.out:
        raise UsageError("train requires --out DIR")
    data = Path(args.data) if args.data else phantom_cache(cfg.arch, args.seed)
    train_ds, val_ds = _datasets(data)
    net = network.build(cfg.arch, seed=args.seed)
    res = trainloop.train(net, train_ds, cfg.train, iters=args.iters, out_dir=args.out,
                          seed=args.seed, val_dataset=val_ds)
    losses = res.losses()
    tail = f", final loss {losses[-1]:.4f}" if losses else ""
    print(f"trained {len(losses)} iterations{tail}, best val DSC {max(res.best_dsc, 0):.4f}; "
          f"checkpoint {res.last_checkpoint}")
    return 0


def cmd_infer(args) -> int:
    if not (args.ckpt and args.inp and args.out):
        raise UsageError("infer requires --ckpt, --in and --out")
    net = network.load(args.ckpt)
    rec = dataio.read_volume(args.inp)
    labels = inference.predict_labels(net, rec.voxels.astype(np.float32), overlap=args.overlap)
    names = [f"class{k}" for k in range(net.spec.out_channels)]
    dataio.write_volume(args.out, dataio.VolumeRecord(labels, rec.spacing, names))
    counts = np.bincount(labels.ravel(), minlength=net.spec.out_channels)
    print(f"wrote {args.out}: shape {labels.shape}, voxels per class {counts.tolist()}")
    return 0


def _metrics_table(m: inference.SegMetrics) -> list[dict]:
    rows = [{"label": k, "dsc": v.dsc, "hd95": v.hd95, "flags": ",".join(v.flags)} for k, v in m.per_class.items()]
    rows.append({"label": "mean", "dsc": m.mean_dsc, "hd95": m.mean_hd95, "flags": ""})
    return rows


def cmd_evaluate(args) -> int:
    if not (args.pred and args.gt):
        raise UsageError("evaluate requires --pred and --gt")
    pred = dataio.read_volume(args.pred)
    gt = dataio.read_volume(args.gt)
    m = inference.evaluate(pred.voxels[0], gt.voxels[0], args.classes, gt.spacing)
    text = json.dumps(m.to_dict(), indent=1) if args.format == "json" else \
        analyzer.render_table(_metrics_table(m), args.format)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    if args.out or args.format == "text":
        print(f"mean DSC {m.mean_dsc:.4f}, mean HD95 {m.mean_hd95:.4f}")
    return 0


def cmd_ablate(args) -> int:
    base = _config(args)
    names = args.schedules.split(",") if args.schedules else archconfig.table4_schedules()
    # every schedule is parsed and validated before any training starts
    specs = []
    for s in names:
        spec = base.arch.with_schedule(archconfig.parse_schedule(s.strip()))
        problems = archconfig.validate(spec)
        if problems:
            raise ConfigError(f"schedule {s}: " + "; ".join(problems))
        specs.append(spec)
    iters = args.iters or 0
    data = None
    if iters:
        data = Path(args.data) if args.data else phantom_cache(base.arch, args.seed)
    rows = []
    for s, spec in zip(names, specs):
        rep = analyzer.analyze(spec)
        row = {"schedule": s.strip(), "params": rep.total_params, "flops": rep.total_flops}
        if iters:
            train_ds, val_ds = _datasets(data)
            net = network.build(spec, seed=args.seed)
            res = trainloop.train(net, train_ds, base.train, iters=iters, seed=args.seed, val_dataset=val_ds)
            row["toy_dsc"] = res.best_dsc
        rows.append(row)
        print(f"{s.strip():>10}: {rep.total_params / 1e6:8.3f} M params, {rep.total_flops / 1e9:8.2f} G FLOPs"
              + (f", toy DSC {row['toy_dsc']:.4f}" if iters else ""))
    if args.out:
        _write(args.out, analyzer.render_table(rows, args.format))
    return 0


def cmd_phantom(args) -> int:
    if not args.out:
        raise UsageError("phantom requires --out DIR")
    raw = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    count = int(raw.pop("count", args.count))
    fields = {f.name for f in dataclasses.fields(dataio.PhantomSpec)}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
    for k in ("shape", "radius_range"):
        if k in raw:
            raw[k] = tuple(raw[k])
    if "profiles" in raw:
        raw["profiles"] = tuple(tuple(r) for r in raw["profiles"])
    raw.setdefault("seed", args.seed)
    spec = dataio.PhantomSpec(**raw)
    ids = dataio.write_phantom_dataset(args.out, spec, count)
    print(f"wrote {len(ids)} phantoms of shape {spec.shape} to {args.out}")
    return 0


def cmd_split(args) -> int:
    if not args.dir:
        raise UsageError("split requires --dir")
    ratios = None
    if args.ratio:
        ratios = [float(x) for x in args.ratio.split(":")]
    if (ratios is None) == (args.folds is None):
        raise UsageError("give exactly one of --folds or --ratio")
    m = dataio.split(args.dir, ratios=ratios, k_folds=args.folds, seed=args.seed)
    if args.out:
        _write(args.out, json.dumps(m, indent=1))
    sizes = [(len(s["train"]), len(s["val"])) for s in m["splits"]]
    print(f"{m['n_records']} records -> {len(sizes)} split(s), train/val sizes {sizes}")
    return 0


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=FORMATS, default="text")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    cfg = argparse.ArgumentParser(add_help=False)
    cfg.add_argument("--preset", help=f"one of {sorted(archconfig.PRESETS)}")
    cfg.add_argument("--config", help="JSON file with arch/train/data overrides")
    cfg.add_argument("--schedule", help='attention schedule, e.g. "SSC-DDD"')

    p = argparse.ArgumentParser(prog="lhunet", description="Hybrid CNN/attention 3-D segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    s = sub.add_parser("analyze", parents=[common, cfg], help="per-layer parameter and FLOP report")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("train", parents=[common, cfg], help="train on a dataset directory (or cached phantoms)")
    s.add_argument("--data", help="dataset directory with images/ and labels/")
    s.add_argument("--iters", type=int, help="iteration budget (default epochs x iters_per_epoch)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="sliding-window prediction of one volume")
    s.add_argument("--ckpt", help="checkpoint path (.json or .bin)")
    s.add_argument("--in", dest="inp", help="input volume")
    s.add_argument("--overlap", type=float, default=0.5)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", parents=[common], help="DSC / HD95 of a prediction against ground truth")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--classes", help='"1,2" or region unions "WT=1,2,3;TC=1,3;ET=3"')
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common, cfg], help="cost (and optional toy DSC) per attention schedule")
    s.add_argument("--schedules", help="comma-separated schedules (default: the eight ablation rows)")
    s.add_argument("--iters", type=int, default=0, help="toy training budget per schedule (0 = cost only)")
    s.add_argument("--data")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom dataset")
    s.add_argument("--spec", help="JSON file with PhantomSpec fields plus optional 'count'")
    s.add_argument("--count", type=int, default=DEFAULT_PHANTOMS)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("split", parents=[common], help="write splits.json for a dataset directory")
    s.add_argument("--dir")
    s.add_argument("--folds", type=int)
    s.add_argument("--ratio", help='train:val ratio, e.g. "80:20"')
    s.set_defaults(func=cmd_split)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ScheduleParseError) as e:
        print(f"lhunet {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"lhunet {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
