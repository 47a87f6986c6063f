"""Command-line entry point: pretrain | finetune | grid | preview | gradcheck.

Settings come from (lowest to highest priority) built-in defaults, the
``LEAVES_SEED`` environment variable (seed only), a ``key=value`` config file,
``--set key=value`` flags and dedicated flags such as ``--seed``.

Exit codes: 0 success, 1 check failure, 2 usage/config error,
3 data/checkpoint incompatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path


from . import gradsuite
from .augment import AugmentParams, NoiseBundle, faithfulness_proxy, leaves_forward, write_view_csv
from .data import CsvSchema, DataError, SyntheticSpec, gen_synthetic, load_csv, normalize, split
from .encoder import CheckpointError
from .trainer import (
    DEFAULT_SIGMAS,
    TrainConfig,
    TrainingDiverged,
    baseline_grid,
    finetune,
    load_augment,
    load_encoder,
    pretrain_adversarial,
    save_augment,
    save_encoder,
    supervised_baseline,
    table_cell,
    write_grid_csv,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("leaves")

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
# data and experiment keys that are not part of TrainConfig
_EXTRA_DEFAULTS = {
    "data": "synthetic",
    "csv_channels": 1,
    "csv_length": 256,
    "csv_classes": 0,
    "classes": 3,
    "samples_per_class": 150,
    "length": 256,
    "channels": 1,
    "noise": SyntheticSpec.noise,
    "ecg_like": False,
    "data_seed": 0,
    "train_fraction": 2 / 3,
    "normalization": "zscore-per-channel",
    "sigmas": ",".join(repr(s) for s in DEFAULT_SIGMAS),
    "preview_samples": 3,
}


class UsageError(Exception):
    pass


class IncompatibleError(Exception):
    pass


# ----------------------------------------------------------------- config


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TRAIN_KEYS and key not in _EXTRA_DEFAULTS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str):
    default = asdict(TrainConfig()).get(key, _EXTRA_DEFAULTS.get(key))
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise UsageError(f"bad value for {key}: {value!r}") from None
    return value


def resolve_config(args) -> dict:
    """Merge defaults, LEAVES_SEED, the config file, --set and --seed into one flat dict."""
    settings = {**asdict(TrainConfig()), **_EXTRA_DEFAULTS}
    env_seed = os.environ.get("LEAVES_SEED")
    if env_seed is not None:
        settings["seed"] = _coerce("seed", env_seed)
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        for key, value in parse_config_text(path.read_text(), str(path)).items():
            settings[key] = _coerce(key, value)
    for item in args.set or []:
        for key, value in parse_config_text(item, "--set").items():
            settings[key] = _coerce(key, value)
    if args.seed is not None:
        settings["seed"] = args.seed
    if getattr(args, "probe_only", False):
        settings["probe_only"] = True
    return settings


def train_config(settings: dict) -> TrainConfig:
    try:
        return TrainConfig(**{k: settings[k] for k in _TRAIN_KEYS})
    except ValueError as err:
        raise UsageError(str(err)) from None


def write_resolved(out: Path, settings: dict, command: str):
    lines = [f"# resolved configuration for `{command}`"]
    lines += [f"{key}={settings[key]}" for key in sorted(settings)]
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------- data


def load_data(settings: dict):
    """Returns (train, test), normalized with train statistics."""
    try:
        if settings["data"] == "synthetic":
            spec = SyntheticSpec(
                classes=settings["classes"],
                samples_per_class=settings["samples_per_class"],
                length=settings["length"],
                channels=settings["channels"],
                noise=settings["noise"],
                ecg_like=settings["ecg_like"],
                seed=settings["data_seed"],
            )
            ds = gen_synthetic(spec)
        else:
            classes = settings["csv_classes"] or None
            ds = load_csv(settings["data"], CsvSchema(settings["csv_channels"], settings["csv_length"], classes))
        frac = settings["train_fraction"]
        train, test = split(ds, (frac, 1 - frac), seed=settings["data_seed"])
        train, stats = normalize(train, settings["normalization"])
        test, _ = normalize(test, settings["normalization"], stats=stats)
    except DataError as err:
        raise IncompatibleError(f"data: {err}") from None
    return train, test


def _sigmas(settings) -> list[float]:
    try:
        return [float(s) for s in str(settings["sigmas"]).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad sigma list: {settings['sigmas']!r}") from None


def _check_compatible(encoder, train):
    cfg = encoder.config
    if cfg.channels_in != train.channels or cfg.num_classes != train.classes:
        raise IncompatibleError(
            f"checkpoint expects {cfg.channels_in} channels / {cfg.num_classes} classes, "
            f"data has {train.channels} / {train.classes}"
        )


def _load_encoder(path):
    try:
        return load_encoder(path)
    except FileNotFoundError:
        raise IncompatibleError(f"checkpoint not found: {path}") from None
    except (CheckpointError, ValueError, KeyError) as err:
        raise IncompatibleError(f"{path}: {err}") from None


# --------------------------------------------------------------- commands


def cmd_pretrain(args, settings, out: Path) -> int:
    config = train_config(settings)
    if config.mode == "supervised":
        raise UsageError("pretrain needs mode=leaves or mode=fixed-sigma")
    train, _ = load_data(settings)
    t0 = time.perf_counter()
    encoder, params, runlog = pretrain_adversarial(train, config)
    save_encoder(out / "encoder.ckpt", encoder)
    save_augment(out / "augment.ckpt", params)
    runlog.write_jsonl(out / "runlog.jsonl")
    runlog.write_trajectories(out / "trajectories.csv")
    last = runlog.epochs[-1]["mean_loss"] if runlog.epochs else float("nan")
    print(f"pretrained {config.pretrain_epochs} epochs ({len(runlog.steps)} steps) in "
          f"{time.perf_counter() - t0:.1f}s; final epoch loss {last:.4f}")
    print(f"effective augmentation: {json.dumps(params.effective(), sort_keys=True)}")
    return EXIT_OK


def cmd_finetune(args, settings, out: Path) -> int:
    config = train_config(settings)
    train, test = load_data(settings)
    if args.checkpoint is None:
        if config.mode != "supervised":
            raise UsageError("finetune needs --checkpoint (or mode=supervised for training from scratch)")
        encoder, metrics = supervised_baseline(train, test, config)
    else:
        encoder = _load_encoder(args.checkpoint)
        _check_compatible(encoder, train)
        encoder, metrics = finetune(encoder, train, test, config)
    save_encoder(out / "finetuned.ckpt", encoder)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    cell = table_cell(metrics["accuracy"], metrics["macro_f1"])
    print(f"acc/f1 {cell} on {metrics['n_test']} test samples ({metrics['n_labelled']} labelled)")
    return EXIT_OK


def cmd_grid(args, settings, out: Path) -> int:
    config = train_config(settings)
    train, test = load_data(settings)
    rows = baseline_grid(train, test, config, _sigmas(settings))
    write_grid_csv(out / "grid.csv", rows)
    for r in rows:
        print(f"sigma={r['sigma']:g}  {table_cell(r['accuracy'], r['macro_f1'])}")
    return EXIT_OK


def cmd_preview(args, settings, out: Path) -> int:
    train, _ = load_data(settings)
    if args.augment is not None:
        try:
            params = load_augment(args.augment)
        except FileNotFoundError:
            raise IncompatibleError(f"checkpoint not found: {args.augment}") from None
        except (CheckpointError, ValueError, KeyError, TypeError) as err:
            raise IncompatibleError(f"{args.augment}: {err}") from None
    else:
        params = AugmentParams.init(train_config(settings).bounds())
    count = args.samples if args.samples is not None else settings["preview_samples"]
    if not 1 <= count <= len(train):
        raise UsageError(f"sample count must lie in [1, {len(train)}]")
    x = train.signals[:count]
    noise = NoiseBundle.draw(settings["seed"], x.shape, params.bounds)
    view = leaves_forward(x, params, noise).data
    faith = faithfulness_proxy(x, view)
    report = ["sample,channel,rmse,pearson"]
    for i in range(count):
        write_view_csv(out / f"sample_{i}_original.csv", x[i], train.channel_names)
        write_view_csv(out / f"sample_{i}_view.csv", view[i], train.channel_names)
        for c in range(train.channels):
            report.append(f"{i},{train.channel_names[c]},{float(faith['rmse'][i, c])!r},{float(faith['pearson'][i, c])!r}")
    (out / "faithfulness.csv").write_text("\n".join(report) + "\n")
    print(f"wrote {count} original/view pairs; mean rmse {faith['rmse'].mean():.4f}, "
          f"mean pearson {faith['pearson'].mean():.4f}")
    return EXIT_OK


def cmd_gradcheck(args, settings, out: Path | None) -> int:
    t0 = time.perf_counter()
    results = gradsuite.run_suite(seeds=range(args.seeds), tolerance=args.tolerance)
    summary = gradsuite.summarize(results)
    worst = summary["worst"]
    print(f"{len(results)} checks over {args.seeds} seeds in {time.perf_counter() - t0:.1f}s")
    print(f"worst offender: {worst.name} (seed {worst.seed}) error {worst.error:.3e} tolerance {worst.tolerance:g}")
    if out is not None:
        lines = ["check,max_error,tolerance"]
        lines += [f"{r.name},{r.error!r},{r.tolerance!r}" for r in summary["per_check"].values()]
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    if summary["failed"]:
        for name in summary["failed"]:
            r = summary["per_check"][name]
            print(f"FAIL {name}: error {r.error:.3e} >= {r.tolerance:g}")
        return EXIT_CHECK
    print("all gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "grid": cmd_grid,
    "preview": cmd_preview,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leaves", description="Learnable time-series augmentations for contrastive pretraining.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", help="run directory (created if missing)")
        p.add_argument("--seed", type=int, help="overrides config file and LEAVES_SEED")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "finetune":
            p.add_argument("--checkpoint", help="pretrained encoder checkpoint")
            p.add_argument("--probe-only", action="store_true", help="freeze the encoder, train the probe")
        if name == "preview":
            p.add_argument("--augment", help="augmentation checkpoint (default: initial parameters)")
            p.add_argument("--samples", type=int, help="number of training samples to export")
        if name == "gradcheck":
            p.add_argument("--tolerance", type=float, help="single tolerance for every check")
            p.add_argument("--seeds", type=int, default=20)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        settings = resolve_config(args)
        out = None
        if args.out is not None:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            write_resolved(out, settings, args.command)
        elif args.command != "gradcheck":
            raise UsageError("--out is required")
        return COMMANDS[args.command](args, settings, out)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_CHECK
    except (ValueError, ArithmeticError, OSError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
