"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O or file-format error. MARGINFORGE_SEED overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .attack import AttackConfig, AttackError
from .data import DataError, IdxFormatError, load_idx
from .harness import (ConfigError, TrainingDiverged, build_datasets,
                      config_from_dict, sweep_generalization, sweep_noise,
                      sweep_adversarial, train)
from .margin import MarginError, mean_layer_distances
from .net import ModelError, load_model
from .optim import OptimizerError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

_CONFIG_ERRORS = (ConfigError, MarginError, OptimizerError, AttackError, DataError,
                  ModelError, ValueError)


def _load_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise _IoFailure(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    cfg = config_from_dict(raw)
    env_seed = os.environ.get("MARGINFORGE_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"MARGINFORGE_SEED must be an integer, got {env_seed!r}")
    return cfg


class _IoFailure(Exception):
    pass


def _floats(text):
    return [float(t) for t in text.split(",") if t != ""]


def _ints(text):
    return [int(t) for t in text.split(",") if t != ""]


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    datasets = build_datasets(cfg)
    from .report import emit_report
    try:
        report = train(cfg, datasets)
    except TrainingDiverged as e:
        if e.report is not None:
            emit_report(e.report, args.out)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    emit_report(report, args.out)
    print(f"test accuracy {report.test_accuracy:.4f} "
          f"(best step {report.best_step}); artifacts in {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    seeds = _ints(args.seeds) if args.seeds else [cfg.seed]
    from .report import emit_attack_results, emit_report, emit_sweep_summary
    if args.what == "noise":
        if cfg.task.kind != "noisy" or not cfg.task.fractions:
            raise ConfigError("sweep noise needs task kind 'noisy' with fractions")
        runs = sweep_noise(cfg, cfg.task.fractions, seeds)
        emit_sweep_summary(runs, args.out, "noise")
    elif args.what == "data":
        if cfg.task.kind != "generalization" or not cfg.task.fractions:
            raise ConfigError("sweep data needs task kind 'generalization' with fractions")
        runs = sweep_generalization(cfg, cfg.task.fractions, seeds)
        emit_sweep_summary(runs, args.out, "data")
    else:
        if cfg.task.kind != "adversarial" or cfg.task.attack is None:
            raise ConfigError("sweep attack needs task kind 'adversarial'")
        losses = args.losses.split(",") if args.losses else [cfg.loss]
        datasets = build_datasets(cfg)
        trained = []
        for loss in losses:
            sub = config_from_dict(report_safe_clone(cfg, loss))
            rep = train(sub, datasets)
            emit_report(rep, os.path.join(args.out, f"run_{loss}"))
            trained.append((loss, rep.model))
        eps_list = cfg.task.eps_list or [cfg.task.attack.eps]
        results = sweep_adversarial(trained, cfg.task.attack, eps_list,
                                    datasets.test, seed=cfg.seed)
        emit_attack_results(results, args.out)
    print(f"sweep {args.what} complete; artifacts in {args.out}")
    return EXIT_OK


def report_safe_clone(cfg, loss: str) -> dict:
    from .harness import config_to_dict
    raw = config_to_dict(cfg)
    raw["loss"] = loss
    if loss != "margin":
        raw["margin"] = None
    elif raw.get("margin") is None:
        raise ConfigError("cannot sweep loss 'margin' without margin settings")
    return raw


def _load_idx_dir(path, split: str):
    names = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}[split]
    return load_idx(os.path.join(path, names[0]), os.path.join(path, names[1]))


def _load_checkpoint(path):
    try:
        return load_model(path)
    except ModelError as e:
        raise _IoFailure(str(e)) from e


def cmd_distances(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    ds = _load_idx_dir(args.data, args.split)
    if args.limit and args.limit < len(ds):
        ds = ds.take(range(args.limit))
    if args.layers == "all":
        layers = list(range(model.n_captured_layers))
    else:
        layers = _ints(args.layers)
    p = float("inf") if args.p == "inf" else float(args.p)
    means = mean_layer_distances(model, ds, layers, p, 1e-6)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "distances.csv")
    with open(out_csv, "w", newline="") as f:
        f.write("step,layer,mean_distance\n")
        for l in layers:
            f.write(f"0,{l},{means[l]!r}\n")
    for l in layers:
        print(f"layer {l}: mean distance {means[l]:.6g}")
    print(f"wrote {out_csv}")
    return EXIT_OK


def cmd_attack(args) -> int:
    source = _load_checkpoint(args.source)
    target = _load_checkpoint(args.target) if args.target else source
    ds = _load_idx_dir(args.data, "test")
    if args.limit and args.limit < len(ds):
        ds = ds.take(range(args.limit))
    config = AttackConfig(kind=args.kind, eps=max(_floats(args.eps)),
                          alpha=args.alpha, iters=args.iters)
    from .attack import evaluate_attack
    result = evaluate_attack(source, target, ds, config, _floats(args.eps),
                             source_name=os.path.basename(args.source),
                             target_name=os.path.basename(args.target or args.source))
    from .report import emit_attack_results
    emit_attack_results([result], args.out)
    print(f"clean accuracy {result.clean_accuracy:.4f}")
    for eps, acc in result.rows:
        print(f"eps {eps:g}: accuracy {acc:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="marginforge",
                                 description="Large-margin training toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="run a noise/data/attack sweep")
    p.add_argument("what", choices=["noise", "data", "attack"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated run seeds")
    p.add_argument("--losses", default=None,
                   help="comma-separated losses to train for sweep attack")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("distances", help="mean per-layer boundary distances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with IDX files")
    p.add_argument("--layers", required=True, help="'all' or comma-separated indices")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--p", default="2", help="norm exponent: 1, 2 or inf")
    p.add_argument("--limit", type=int, default=256)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_distances)

    p = sub.add_parser("attack", help="attack a target model with source gradients")
    p.add_argument("--source", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--eps", required=True, help="comma-separated eps values")
    p.add_argument("--data", required=True, help="directory with IDX files")
    p.add_argument("--kind", choices=["fgsm", "ifgsm", "gaussian"], default="ifgsm")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_attack)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IdxFormatError, _IoFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
