"""Command-line entry points: synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 data error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DataError, SynthSpec, load_dataset, synthesize, write_dataset
from .diagnostics import dump_attention
from .encoders import ConfigError
from .localizer import read_predictions, write_predictions
from .metrics import recall_at
from .model import CheckpointError, IANet, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import NumericalError
from .training import predict, train_loop

log = logging.getLogger("ianet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_DATA = 0, 2, 3, 4

RUN_DEFAULTS = {
    "train.epochs": 10,
    "train.max_steps": None,
    "eval.n_list": [1, 5],
    "eval.m_list": [0.3, 0.5, 0.7],
    "eval.strict": True,
}


def default_config() -> dict:
    """Every accepted dotted key with its default value."""
    cfg = {f"model.{k}": v for k, v in ModelConfig().to_dict().items()}
    cfg.update({f"synth.{f.name}": f.default for f in dataclasses.fields(SynthSpec)})
    cfg.update(RUN_DEFAULTS)
    return cfg


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then command-line overrides; unknown keys are rejected."""
    cfg = default_config()
    layers = []
    if path is not None:
        try:
            layers.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(layers[-1], dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    layers.append(overrides or {})
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg.update(layer)
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(section(cfg, "model"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def synth_spec(d: dict) -> SynthSpec:
    try:
        return SynthSpec.from_dict(d)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _overrides(args) -> dict:
    out = _parse_set(args.set)
    if args.seed is not None:
        out["model.seed"] = args.seed
        out["synth.seed"] = args.seed
    for flag, key in (("epochs", "train.epochs"), ("max_steps", "train.max_steps"), ("lr", "model.lr"),
                      ("alpha", "model.alpha"), ("lam", "model.lam")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _log_resolved(cfg: dict, args) -> None:
    shown = dict(cfg, deterministic=args.deterministic, precision=args.precision)
    log.info("resolved config: %s", json.dumps(shown, sort_keys=True))


def _dtype(args):
    return np.float64 if args.precision == 64 else np.float32


def _dump(net: IANet, samples, out_dir) -> None:
    if out_dir:
        for s in samples:
            dump_attention(net, s, out_dir)
        log.info("attention maps written to %s", out_dir)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: dict) -> int:
    fields = section(cfg, "synth")
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read spec {args.spec}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"spec {args.spec} must hold a JSON object")
        fields.update({k.removeprefix("synth."): v for k, v in raw.items()})
        if args.seed is not None:
            fields["seed"] = args.seed
    spec = synth_spec(fields)
    ds = synthesize(spec)
    ann = write_dataset(ds.samples, args.out)
    log.info("wrote %d samples to %s", len(ds.samples), ann.parent)
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    config = model_config(cfg)
    samples = load_dataset(args.data)
    if args.resume:
        net = load_checkpoint(args.resume, expected=config, dtype=_dtype(args))
        log.info("resumed parameters from %s", args.resume)
    else:
        net = IANet(config, dtype=_dtype(args))
    log_path = args.log or str(args.checkpoint) + ".log.jsonl"
    result = train_loop(samples, config, cfg["train.epochs"], net=net, log_path=log_path,
                        max_steps=cfg["train.max_steps"])
    save_checkpoint(args.checkpoint, result.net)
    log.info("checkpoint written to %s, epoch log to %s", args.checkpoint, log_path)
    return EXIT_OK


def _ground_truths(samples) -> dict:
    return {s.sample_id: s.segment for s in samples if not s.is_distractor}


def cmd_predict(args, cfg: dict) -> int:
    config = model_config(cfg)
    net = load_checkpoint(args.checkpoint, expected=config if args.config or args.set else None,
                          dtype=_dtype(args))
    samples = load_dataset(args.data)
    preds = predict(net, samples, args.top_n)
    write_predictions(args.out, preds)
    _dump(net, samples, args.dump_attention)
    log.info("predictions for %d samples written to %s", len(preds), args.out)
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    samples = load_dataset(args.data)
    gts = _ground_truths(samples)
    if args.predictions:
        preds = read_predictions(args.predictions)
    elif args.checkpoint:
        config = model_config(cfg)
        net = load_checkpoint(args.checkpoint, expected=config if args.config or args.set else None,
                              dtype=_dtype(args))
        real = [s for s in samples if not s.is_distractor]
        preds = predict(net, real, max(cfg["eval.n_list"]))
        _dump(net, samples, args.dump_attention)
    else:
        raise ConfigError("eval needs --checkpoint or --predictions")
    preds = {sid: m for sid, m in preds.items() if sid in gts}
    table = recall_at(preds, gts, cfg["eval.n_list"], cfg["eval.m_list"], strict=cfg["eval.strict"])
    print(table.to_text())
    print(table.to_json())
    if args.json_out:
        Path(args.json_out).write_text(table.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args, cfg: dict) -> int:
    from .gradcheck import TINY_CONFIG, check_model, check_primitives

    # finite differences on the default-size model would take hours; audit the tiny
    # configuration with any model keys the user changed layered on top
    defaults = default_config()
    changed = {k: v for k, v in section(cfg, "model").items() if defaults[f"model.{k}"] != v}
    try:
        config = ModelConfig.from_dict({**TINY_CONFIG.to_dict(), **changed})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    ops = check_primitives()
    print(ops.to_text())
    model = check_model(config)
    print(model.to_text())
    if not (ops.passed and model.passed):
        failed = [e.name for e in ops.failures + model.failures]
        raise NumericalError(f"gradient check failed for {failed}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON file with flat dotted keys, e.g. {\"model.D\": 64}")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bitwise reruns")
    shared.add_argument("--precision", type=int, choices=(32, 64), default=32)
    shared.add_argument("--dump-attention", metavar="DIR", help="write per-block attention maps as CSV")

    parser = argparse.ArgumentParser(prog="ianet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared], help="write a synthetic dataset")
    p.add_argument("--spec", help="SynthSpec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[shared], help="train and write a checkpoint")
    p.add_argument("--data", required=True, help="annotations.jsonl")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--log", help="epoch log (JSON lines); default <checkpoint>.log.jsonl")
    p.add_argument("--resume", help="start from this checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lam", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[shared], help="write top-n moments per sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-n", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[shared], help="R@n, IoU=m table")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient audit")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.INFO)
    limits = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
    try:
        with limits:
            cfg = resolve_config(args.config, _overrides(args))
            _log_resolved(cfg, args)
            return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
