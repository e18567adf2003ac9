"""Command-line entry point: gen-data, train, sample, evaluate, ablate, report.

Flags mirror RunConfig keys. A --config file (JSON or YAML, same nesting as
RunConfig) is applied on top of the flags. Exit codes: 0 success, 2 config
error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .training import NumericAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# flag dest -> (section, key) in RunConfig
FLAG_KEYS = {
    "count": ("data", "count"),
    "difficulty": ("data", "difficulty"),
    "val_fraction": ("data", "val_fraction"),
    "noise_sigma": ("data", "noise_sigma"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "lambda_cls": ("train", "lambda_cls"),
    "padding": ("train", "padding"),
    "freeze_encoder": ("train", "freeze_encoder"),
    "pretrained_encoder": ("train", "pretrained_encoder_path"),
    "val_every": ("train", "val_every"),
    "timesteps_per_scene": ("train", "timesteps_per_scene"),
    "k": ("sampler", "k"),
    "eta": ("sampler", "eta"),
    "tau": ("sampler", "tau"),
    "n": ("sampler", "n"),
    "max_scenes": ("eval", "max_scenes"),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON/YAML file; its values override flags")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--signal-scale", type=float, help="coordinate scale of the diffused state")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_sampler(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="denoising steps")
    p.add_argument("--eta", type=float, help="DDIM stochasticity")
    p.add_argument("--tau", type=float, help="score threshold for query re-initialization")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vecmapdiff", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--difficulty", choices=["easy", "medium", "hard"])
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--noise-sigma", type=float)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-cls", type=float)
    p.add_argument("--padding", choices=["repeat", "zero", "smooth", "gaussian", "uniform"])
    p.add_argument("--freeze-encoder", action="store_true", default=None)
    p.add_argument("--pretrained-encoder", help="checkpoint whose encoder weights initialize this run")
    p.add_argument("--val-every", type=int, help="validate every N epochs (0 disables)")
    p.add_argument("--timesteps-per-scene", type=int, help="noised query sets per step sharing one encoding")

    p = sub.add_parser("sample", help="draw maps for every validation scene")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, help="samples per scene")
    p.add_argument("--max-scenes", type=int)
    p.add_argument("--workers", type=int, default=1)
    _add_sampler(p)

    p = sub.add_parser("evaluate", help="aggregate samples and compute metrics")
    _add_common(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-scenes", type=int)

    p = sub.add_parser("ablate", help="sweep one axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=list(pl.SAMPLING_AXES + pl.RETRAIN_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="trained checkpoint for k/eta/tau sweeps")
    p.add_argument("--train-limit", type=int, help="training scenes for retraining axes")
    p.add_argument("--val-limit", type=int, default=50, help="validation scenes per value")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--padding", choices=["repeat", "zero", "smooth", "gaussian", "uniform"])
    _add_sampler(p)

    p = sub.add_parser("report", help="assemble an evaluation directory into text and figures")
    p.add_argument("--eval", required=True, help="evaluation output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args: argparse.Namespace) -> pl.RunConfig:
    """Flags first, then the config file on top."""
    d: dict = {}
    for key in ("seed", "signal_scale"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    for dest, (section, key) in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            d.setdefault(section, {})[key] = v
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise pl.ConfigError(f"config file {path} does not exist")
        d = pl.merge(d, pl.load_config_file(path))
    return pl.RunConfig.from_dict(d)


def _require(path: str | None, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise pl.ConfigError(f"{what} {path} does not exist")
    return Path(path)


def _parse_values(axis: str, text: str) -> list:
    parts = [v.strip() for v in text.split(",") if v.strip()]
    if axis == "k":
        return [int(v) for v in parts]
    if axis in ("eta", "tau"):
        return [float(v) for v in parts]
    return parts


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            out = pl.build_report(_require(args.eval, "evaluation directory"), args.out, args.force)
            print(f"report written to {out}")
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "gen-data":
            m = pl.gen_data(args.out, cfg, args.force)
            print(f"{len(m['scenes'])} scenes written to {args.out}")
        elif args.command == "train":
            _require(args.data, "dataset")
            if cfg.train.pretrained_encoder_path:
                _require(cfg.train.pretrained_encoder_path, "pretrained encoder checkpoint")
            model = pl.train_run(args.data, args.out, cfg, args.force)
            print(f"checkpoint {Path(args.out) / pl.CHECKPOINT} sha256 {model.checksum()}")
        elif args.command == "sample":
            _require(args.data, "dataset")
            _require(args.checkpoint, "checkpoint")
            res = pl.sample_run(args.checkpoint, args.data, args.out, cfg, cfg.sampler.n, args.force, args.workers)
            print(f"{sum(map(len, res.values()))} samples for {len(res)} scenes written to {args.out}")
        elif args.command == "evaluate":
            _require(args.samples, "samples directory")
            _require(args.data, "dataset")
            report = pl.evaluate_run(args.samples, args.data, args.out, cfg, args.force)
            print(report.summary(), end="")
        elif args.command == "ablate":
            _require(args.data, "dataset")
            values = _parse_values(args.axis, args.values)
            model = None
            if args.axis in pl.SAMPLING_AXES:
                from .denoiser import DenoiserModel

                model = DenoiserModel.load(_require(args.checkpoint, "checkpoint"), cfg.schedule())
            out = pl.prepare_output(args.out, args.force)
            train_set = pl.load_split(args.data, "train", args.train_limit) if args.axis in pl.RETRAIN_AXES else []
            val_set = pl.load_split(args.data, "val", args.val_limit)
            rows = pl.ablate(args.axis, values, cfg, train_set, val_set, model, out)
            pl.write_run_meta(out, "ablate", cfg, axis=args.axis, values=values)
            for r in rows:
                print(json.dumps(r))
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pl.ConfigError, pl.OutputExists, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
