"""Command-line entry point.

Every run writes into its own directory: ``config.json`` (the fully resolved
configuration), ``run_log.jsonl`` and ``best.ckpt``. Exit codes: 0 success,
1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import CheckpointError, read_checkpoint
from .convergence import DEFAULT_SNAPSHOTS, DEFAULT_THRESHOLDS, MetricCurve, compare_runs
from .data.adapters import (
    ADAPTERS,
    DATA_ROOT_ENV,
    DataError,
    open_dataset,
    prepare_deepglobe,
    resolve_root,
)
from .data.geometry import preprocess
from .data.splits import write_split_manifest
from .data.synthetic import generate_synthetic_dataset
from .models.transfer import (
    ParameterStore,
    build_downstream_segmenter,
    build_pretrain_model,
    export_encoder,
    load_external_encoder,
)
from .objectives import focal_loss, miou
from .task import AugmentationConfig, assemble_pretrain_example
from .training import (
    RunLog,
    TrainConfig,
    evaluate_overlap,
    evaluate_segmentation,
    resolve_device,
    run_finetuning,
    run_pretraining,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATASETS = ("synthetic",) + tuple(ADAPTERS)
INIT_CHOICES = ("random", "imagenet", "lvd142m")

log = logging.getLogger("subimage_overlap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_assignments(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value.strip())
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text()
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if data is None:
        return {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise UsageError(f"{path} must be a flat key-value document")
    return data


def resolve_config(task: str, file_values: dict, flag_values: dict) -> TrainConfig:
    """Defaults, then the config file, then command-line values (last write wins)."""
    base = TrainConfig() if task == "pretrain" else TrainConfig.finetune_defaults()
    merged = {**base.to_dict(), **file_values, **flag_values, "task": task}
    unknown = sorted(set(merged) - set(TrainConfig.keys()))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; valid keys: {TrainConfig.keys()}")
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _fresh_run_dir(path) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise UsageError(f"run directory {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _open(args):
    if args.dataset == "synthetic":
        return generate_synthetic_dataset(args.synthetic_n, (args.synthetic_size,) * 2,
                                          args.synthetic_classes, args.data_seed)
    dataset = open_dataset(args.dataset, args.root)
    if hasattr(dataset, "check"):
        dataset.check()
    return dataset


def _dataset_record(args) -> dict:
    rec = {"name": args.dataset}
    if args.dataset == "synthetic":
        rec.update(n=args.synthetic_n, size=args.synthetic_size,
                   classes=args.synthetic_classes, seed=args.data_seed)
    else:
        rec["root"] = str(resolve_root(args.root, args.dataset))
    return rec


def _write_resolved(run_dir: Path, config: TrainConfig, args, init: str | None):
    resolved = {"train": config.to_dict(), "dataset": _dataset_record(args),
                "output": str(run_dir), "init": init}
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _flag_overrides(args, names) -> dict:
    out = {}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


_COMMON_FLAGS = ("arch", "epochs", "batch_size", "initial_lr", "seed", "resolution", "device",
                 "patch_size", "vit_dim", "vit_depth", "vit_heads", "cnn_depth")


def _config_from_args(task, args, extra_flags=()) -> TrainConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {**_parse_assignments(args.set), **_flag_overrides(args, _COMMON_FLAGS + extra_flags)}
    return resolve_config(task, file_values, flags)


def cmd_prepare_data(args) -> int:
    out = Path(args.out) if args.out else None
    if args.dataset == "deepglobe":
        raw = resolve_root(args.root, "deepglobe")
        summary = prepare_deepglobe(raw, out, args.val_fraction, args.seed, args.grid)
        dataset = open_dataset("deepglobe", out or raw)
        summary = {**summary, **dataset.summary()}
    else:
        dataset = _open(args)
        summary = dataset.summary()
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            for split in dataset.splits:
                write_split_manifest(out / f"{split}.txt", dataset.split_ids(split), split,
                                     args.seed, args.val_fraction)
    summary = {"dataset": args.dataset, **summary}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _config_from_args("pretrain", args, ("subimage_size", "flip", "jitter"))
    if config.arch == "vit":
        print(f"joint sequence length: {config.sequence_length()}")
    print(f"architecture: {config.arch}")
    if args.dry_run:
        print(json.dumps(config.to_dict(), sort_keys=True))
        return EXIT_OK
    init = None
    if args.init_weights:
        init = load_external_encoder(args.init_weights, config.arch, config.model_spec(),
                                     args.init_provenance)
    dataset = _open(args)
    run_dir = _fresh_run_dir(args.out)
    _write_resolved(run_dir, config, args, args.init_provenance if init else None)
    _, run_log = run_pretraining(config, dataset, run_dir, init)
    print(f"best val IoU {max(run_log.curve('val')):.4f}; run written to {run_dir}")
    return EXIT_OK


def _finetune_init(args, config: TrainConfig) -> tuple[ParameterStore | None, str]:
    choice = args.init
    if choice == "random":
        if not args.allow_random:
            raise UsageError(
                "--init random needs --allow-random (the reference baselines start from "
                "imagenet weights for dual_cnn and lvd142m weights for vit)"
            )
        return None, "random"
    if choice in ("imagenet", "lvd142m"):
        if not args.init_weights:
            raise UsageError(f"--init {choice} needs --init-weights pointing at a state dict")
        store = load_external_encoder(args.init_weights, config.arch, config.model_spec(), choice)
        return store, choice
    ckpt = read_checkpoint(choice, expected_arch=config.arch)
    store = ckpt.store
    if not all(k.startswith("encoder.") for k in store.tensors) or "sep_token" in store.tensors:
        store = export_encoder(store, config.arch)
    return store, f"checkpoint:{choice}"


def cmd_finetune(args) -> int:
    config = _config_from_args("finetune", args,
                               ("label_fraction", "loss", "gamma", "alpha_policy", "crop_size",
                                "flip"))
    init, provenance = _finetune_init(args, config)
    if init is not None:
        config = TrainConfig.from_dict({**config.to_dict(), **_spec_overrides(init)})
    print(f"architecture: {config.arch}; init: {provenance}")
    if args.dry_run:
        print(json.dumps(config.to_dict(), sort_keys=True))
        return EXIT_OK
    dataset = _open(args)
    run_dir = _fresh_run_dir(args.out)
    _write_resolved(run_dir, config, args, provenance)
    _, run_log = run_finetuning(config, dataset, init, run_dir, allow_random=args.allow_random)
    print(f"best val mIoU {max(run_log.curve('val')):.4f}; run written to {run_dir}")
    return EXIT_OK


def _spec_overrides(store: ParameterStore) -> dict:
    spec = store.spec
    return {"patch_size": spec.patch_size, "vit_dim": spec.dim, "vit_depth": spec.depth,
            "vit_heads": spec.num_heads, "pos_grid": spec.pos_grid, "cnn_depth": spec.cnn_depth}


def cmd_evaluate(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    config = TrainConfig.from_dict(ckpt.config) if ckpt.config else None
    if config is None:
        raise UsageError(f"{args.checkpoint} carries no training config")
    dataset = _open(args)
    device = resolve_device(args.device or config.device)
    ids = dataset.split_ids(args.split)
    size = (config.resolution, config.resolution)
    if config.task == "pretrain":
        model = build_pretrain_model(ckpt.store.spec)
        ckpt.store.load_into(model)
        model.to(device)
        sub = (config.subimage_size, config.subimage_size)
        examples = []
        for i, sid in enumerate(ids):
            image = preprocess(dataset.load(args.split, sid), size, None).image
            examples.append(assemble_pretrain_example(
                image, sub, AugmentationConfig(), args.split,
                np.random.default_rng([config.seed, 0, i])))
        alpha = None if config.alpha_policy == "none" else tuple(config.alpha)
        gamma = config.gamma if config.loss == "focal" else 0.0
        losses, cm = evaluate_overlap(model, examples,
                                      lambda lo, t: focal_loss(lo, t, alpha, gamma),
                                      config.batch_size, device)
    else:
        num_classes = ckpt.extra.get("num_classes", dataset.num_classes)
        model = build_downstream_segmenter(None, config.arch, num_classes, ckpt.store.spec)
        ckpt.store.load_into(model)
        model.to(device)
        crop = config.crop_size if config.crop_size is not None else dataset.crop_size
        samples = [preprocess(dataset.load(args.split, sid), size, crop, "val") for sid in ids]
        ignore = dataset.ignore_index
        losses, cm = evaluate_segmentation(
            model, samples, num_classes, ignore,
            lambda lo, t: focal_loss(lo, t, None, 0.0, ignore), config.batch_size, device)
    per_class, mean = miou(cm)
    result = {"checkpoint": str(args.checkpoint), "task": config.task, "split": args.split,
              "samples": len(ids), "miou": mean,
              "per_class_iou": [None if v != v else v for v in per_class.tolist()]}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _read_run(run_dir: Path, split: str) -> MetricCurve:
    path = run_dir / "run_log.jsonl"
    if not path.is_file():
        raise DataError(f"missing run log: expected {path}")
    run_log = RunLog.read(path)
    return MetricCurve(tuple(run_log.curve(split)), run_dir.name)


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.runs]
    if args.baseline and Path(args.baseline) not in dirs:
        dirs.insert(0, Path(args.baseline))
    for d in dirs:
        if not d.is_dir():
            raise DataError(f"run directory not found: {d}")
    curves = [_read_run(d, args.split) for d in dirs]
    snapshots = [int(x) for x in args.snapshots.split(",") if x]
    thresholds = sorted(float(x) for x in args.thresholds.split(",") if x)
    baseline = Path(args.baseline).name if args.baseline else None
    try:
        report = compare_runs(curves, snapshots, thresholds, baseline=baseline)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    delimiter = "\t" if args.format == "tsv" else ","
    if args.out:
        for path in report.write(args.out, delimiter):
            log.info("wrote %s", path)
    sys.stdout.write(report.to_csv(delimiter))
    return EXIT_OK


def _add_data_args(p):
    p.add_argument("--dataset", choices=DATASETS, default="synthetic")
    p.add_argument("--root", help=f"dataset root (default: ${DATA_ROOT_ENV})")
    p.add_argument("--synthetic-n", type=int, default=200)
    p.add_argument("--synthetic-size", type=int, default=64)
    p.add_argument("--synthetic-classes", type=int, default=3)
    p.add_argument("--data-seed", type=int, default=0)


def _add_train_args(p):
    p.add_argument("--config", help="JSON or YAML file of TrainConfig keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=True, help="run directory (must be new or empty)")
    p.add_argument("--arch", choices=("vit", "dual_cnn"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--initial-lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--device")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--vit-dim", type=int)
    p.add_argument("--vit-depth", type=int)
    p.add_argument("--vit-heads", type=int)
    p.add_argument("--cnn-depth", choices=("resnet18", "resnet34", "resnet50"))
    p.add_argument("--dry-run", action="store_true", help="resolve and print the config only")
    _add_data_args(p)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subimage-overlap",
                     description="Subimage overlap pretraining for segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="tile/split a dataset and write manifests")
    _add_data_args(p)
    p.add_argument("--out", help="output directory for tiles, manifests and summary")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=4)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("pretrain", help="run subimage overlap pretraining")
    _add_train_args(p)
    p.add_argument("--subimage-size", type=int)
    p.add_argument("--flip", type=_bool)
    p.add_argument("--jitter", type=_bool)
    p.add_argument("--init-weights", help="external encoder state dict to start from")
    p.add_argument("--init-provenance", default="external")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a segmentation model")
    _add_train_args(p)
    p.add_argument("--init", required=True,
                   help="pretraining checkpoint path, or one of " + ", ".join(INIT_CHOICES))
    p.add_argument("--init-weights", help="state dict for --init imagenet/lvd142m")
    p.add_argument("--allow-random", action="store_true")
    p.add_argument("--label-fraction", type=float)
    p.add_argument("--loss", choices=("focal", "ce"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha-policy", choices=("fixed", "inverse_sqrt", "none"))
    p.add_argument("--crop-size", type=int)
    p.add_argument("--flip", type=_bool)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="val")
    p.add_argument("--device")
    p.add_argument("--out", help="write the metrics JSON here")
    _add_data_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="convergence report over run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--baseline", help="run directory deltas are computed against")
    p.add_argument("--snapshots", default=",".join(str(e) for e in DEFAULT_SNAPSHOTS))
    p.add_argument("--thresholds", default=",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS))
    p.add_argument("--split", default="val")
    p.add_argument("--format", choices=("csv", "tsv"), default="csv")
    p.add_argument("--out", help="directory for summary and series files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA if "not found" in str(exc) or "corrupt" in str(exc) else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
