"""Command-line entry points.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .augmentations import AugmentationConfigError
from .data import (
    DatasetFormatError,
    DatasetValueError,
    SplitConfigError,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_splits,
    resplit_union,
    save_dataset,
    split_dataset,
)
from .evaluation import (
    EvaluationConfigError,
    export_embeddings,
    finetune_semisupervised,
    linear_probe,
    record_report,
    run_supervised_baseline,
    summarize,
    write_table,
)
from .network import NetworkStateError, load_checkpoint
from .trainer import (
    KERNEL_VARIANTS,
    PRESETS,
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    config_from_dict,
    configure_threads,
    load_config,
    preset,
    pretrain,
)

log = logging.getLogger("freqboot")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
LAMBDA_GRID = (0.005, 0.5, 5.0, 500.0)
ABLATION_AXES = ("heads", "augmentation", "kernel", "lambda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage, which collides with the data-error code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, data=True, config=True):
    if config:
        p.add_argument("--config", type=Path, help="JSON config file (may name a preset)")
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--strict-determinism", action="store_true",
                   help="single thread and deterministic kernels; logs carry no timings")
    if data:
        p.add_argument("--split-mode", choices=("stored", "resplit"), default="stored",
                       help="use the stored splits, or pool them and re-split 60/20/20 by --seed")


def build_parser():
    parser = _Parser(prog="freqboot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)

    p = sub.add_parser("eval", help="linear, semi-supervised or baseline evaluation")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--linear", action="store_true")
    mode.add_argument("--semi", action="store_true")
    mode.add_argument("--baseline", choices=("supervised", "random"))
    p.add_argument("--fraction", type=float, default=1.0, help="label fraction for --semi/--baseline")

    p = sub.add_parser("ablate", help="ablation grids with one comparison table per axis")
    _common(p)
    p.add_argument("--axis", choices=ABLATION_AXES, action="append", required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per grid point")

    p = sub.add_parser("synth-gen", help="write the synthetic low/high-frequency dataset")
    _common(p, data=False)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--length", type=int)

    p = sub.add_parser("export-embeddings", help="frozen encoder features of the test split as CSV")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_data(args):
    path = args.data
    if path is None or not Path(path).is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    if args.split_mode == "resplit":
        seed = 0 if args.seed is None else args.seed
        splits = dict(zip(("train", "val", "test"), resplit_union(path, SplitSpec(seed=seed))))
    else:
        splits = load_splits(path)
    if "train" not in splits:
        raise DatasetFormatError(f"{path} has no train split")
    return splits


def _resolve_config(args, dataset_name=None, fallback=None):
    if args.config is not None:
        cfg = load_config(args.config)
    elif fallback is not None:
        cfg = fallback
    elif dataset_name in PRESETS:
        cfg = preset(dataset_name)
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg = config_from_dict({"seed": args.seed}, cfg)
    return cfg


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_config(out, cfg):
    _write_json(out / "config.json", {"config_hash": cfg.config_hash(), "config": cfg.to_dict()})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args):
    splits = _load_data(args)
    cfg = _resolve_config(args, splits["train"].name)
    args.out.mkdir(parents=True, exist_ok=True)
    _write_config(args.out, cfg)
    net = pretrain(cfg, splits["train"], args.out, strict=args.strict_determinism)
    print(f"pretrained {len(net.history_)} steps; checkpoints in {args.out} (config {cfg.config_hash()})")
    return EXIT_OK


def cmd_eval(args):
    splits = _load_data(args)
    if "test" not in splits:
        raise DatasetFormatError(f"{args.data} has no test split")
    train, test = splits["train"], splits["test"]
    configure_threads(args.strict_determinism)
    if not 0.0 < args.fraction <= 1.0:
        raise ConfigError(f"--fraction must be in (0, 1], got {args.fraction}")
    if args.baseline:
        cfg = _resolve_config(args, train.name)
        seed = cfg.seed
        report = run_supervised_baseline(cfg, train, test, seed, args.baseline, args.fraction)
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required for --linear and --semi")
        ckpt = load_checkpoint(args.checkpoint)
        base = config_from_dict(ckpt.config) if ckpt.config else None
        cfg = _resolve_config(args, train.name, base)
        seed = cfg.seed
        if args.linear:
            report = linear_probe(ckpt.network, train, test, cfg, seed, "linear")
        else:
            report = finetune_semisupervised(ckpt.network, train, test, args.fraction, seed, cfg)
    path = record_report(report, args.out)
    print(f"{report.protocol}: accuracy {report.accuracy:.4f}  macro-F1 {report.macro_f1:.4f} -> {path}")
    return EXIT_OK


def ablation_grid(axis, base):
    """Named configuration variants for one ablation axis."""
    if axis == "heads":
        return {
            "TCN + MLP": base,
            "no-MLP-head": config_from_dict({"disable_mlp_head": True}, base),
            "no-TCN-head": config_from_dict({"disable_tcn_head": True}, base),
        }
    if axis == "augmentation":
        return {
            "Same Aug": config_from_dict({"augmentation": {"family": "jitter_permute_rotate"}}, base),
            "Different Aug": config_from_dict({"augmentation": {"family": "jitter_scale"}}, base),
        }
    if axis == "kernel":
        return {label: config_from_dict({"tcn": {"kernel_size": v["kernel_size"],
                                                 "dilations": list(v["dilations"])}}, base)
                for label, v in KERNEL_VARIANTS.items()}
    if axis == "lambda":
        return {f"lambda={lam:g}": config_from_dict({"lam": lam}, base) for lam in LAMBDA_GRID}
    raise ConfigError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args):
    splits = _load_data(args)
    if "test" not in splits:
        raise DatasetFormatError(f"{args.data} has no test split")
    train, test = splits["train"], splits["test"]
    base = _resolve_config(args, train.name)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    for axis in dict.fromkeys(args.axis):
        grid = ablation_grid(axis, base)
        reports = []
        for label, cfg in grid.items():
            for k in range(args.seeds):
                run_cfg = config_from_dict({"seed": base.seed + k}, cfg)
                slug = "".join(ch if ch.isalnum() else "_" for ch in label).strip("_")
                run_dir = args.out / axis / slug / f"seed{run_cfg.seed}"
                _write_config(run_dir, run_cfg)
                net = pretrain(run_cfg, train, run_dir, strict=args.strict_determinism)
                report = linear_probe(net, train, test, run_cfg, run_cfg.seed, "linear", method=label)
                record_report(report, args.out / axis)
                reports.append(report)
        table = args.out / f"ablation_{axis}.csv"
        write_table(summarize(reports), table)
        print(f"{axis}: {len(grid)} variants x {args.seeds} seeds -> {table}")
    return EXIT_OK


def cmd_synth_gen(args):
    data = {}
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            data = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
    for key in ("n_per_class", "channels", "length"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    split = data.pop("split", {})
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        spec = SyntheticSpec(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    seed = 0 if args.seed is None else args.seed
    ds = generate_synthetic(spec, seed)
    tr, va, te = split_dataset(ds, SplitSpec(**{"seed": seed, **split}))
    save_dataset(args.out, {"train": tr, "val": va, "test": te}, name="synthetic")
    _write_json(args.out / "synthetic_spec.json", {"seed": seed, "spec": asdict(spec)})
    print(f"wrote {len(tr)}/{len(va)}/{len(te)} train/val/test samples to {args.out}")
    return EXIT_OK


def cmd_export_embeddings(args):
    splits = _load_data(args)
    if args.split not in splits:
        raise DatasetFormatError(f"{args.data} has no {args.split} split (available: {sorted(splits)})")
    configure_threads(args.strict_determinism)
    out = args.out / f"embeddings_{args.split}.csv"
    export_embeddings(args.checkpoint, splits[args.split], out)
    ckpt = load_checkpoint(args.checkpoint)
    _write_json(args.out / "embeddings_meta.json", {
        "checkpoint": str(args.checkpoint), "split": args.split,
        "config_hash": ckpt.extra.get("config_hash", "") if ckpt.extra else "",
    })
    print(f"wrote {len(splits[args.split])} embeddings to {out}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "synth-gen": cmd_synth_gen,
    "export-embeddings": cmd_export_embeddings,
}

CONFIG_ERRORS = (ConfigError, EvaluationConfigError, SplitConfigError, AugmentationConfigError, UsageError)
DATA_ERRORS = (FileNotFoundError, DatasetFormatError, DatasetValueError, NetworkStateError, OSError)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        worst = sorted(exc.norms.items(), key=lambda kv: -abs(kv[1]) if np.isfinite(kv[1]) else -np.inf)[:5]
        print(f"training diverged: {exc}; largest parameter norms: {worst}", file=sys.stderr)
        return EXIT_DIVERGED
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
