"""Experiment driver. Verbs: train, eval, sweep, landscape, toy-demo.

Every run writes metrics.csv, final.ckpt, landscape_<method>.csv and
summary.json into its output directory; exit codes are 0 (success),
1 (config error), 2 (aborted on a non-finite gradient).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import metrics as metrics_mod
from . import models as models_mod
from . import training
from .attacks import AttackSpec
from .config import (ParseError, ValidationError, build_datasets, build_model,
                     eval_settings, parse_config)

_OVERRIDE_RE = re.compile(r"^--([a-z_]+\.[a-z_]+)=(.*)$")


def run(cfg, ckpt=None, eval_only=False):
    """Train (unless eval_only) and summarize one experiment. Returns exit code."""
    out = cfg.output.dir
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()

    train_ds, test_ds = build_datasets(cfg)
    model = build_model(cfg)
    cfg.train.augment_pad = cfg.data.augment_pad
    if ckpt:
        models_mod.load_into(model, models_mod.load_checkpoint(ckpt))

    steps_per_epoch = math.ceil(len(train_ds) / cfg.train.batch)
    records = []
    aborted = None
    if not eval_only:
        writer = metrics_mod.MetricCsvWriter(os.path.join(out, "metrics.csv"))
        try:
            training.train(model, train_ds, cfg.train,
                           sinks=(writer, records.append),
                           eval_data=test_ds, eval_settings=eval_settings(cfg))
        except training.NonFiniteGradient as exc:
            aborted = str(exc)
        finally:
            writer.close()
    elif os.path.exists(os.path.join(out, "metrics.csv")):
        records = metrics_mod.read_metrics_csv(os.path.join(out, "metrics.csv"))

    eps = cfg.eval.epsilon if cfg.eval.epsilon is not None else cfg.train.epsilon
    attack = AttackSpec(kind="pgd", epsilon=eps, alpha=cfg.eval.alpha,
                        steps=cfg.eval.steps, restarts=cfg.eval.restarts,
                        clamp=test_ds.input_scale, seed=cfg.eval.seed)
    pick = np.random.default_rng((cfg.seed, 7919))
    idx = pick.permutation(len(test_ds))[:cfg.eval.n_eval]
    eval_subset = test_ds.subset(idx)

    summary = {
        "method": cfg.train.method,
        "seed": cfg.seed,
        "epochs": cfg.train.epochs,
        "steps_per_epoch": steps_per_epoch,
        "clean_acc": metrics_mod.accuracy(model, eval_subset.xs, eval_subset.ys),
        "robust_acc": metrics_mod.robust_accuracy(model, eval_subset, attack),
        "attack": {"kind": "pgd", "epsilon": eps, "steps": cfg.eval.steps,
                   "restarts": cfg.eval.restarts},
        "aborted": aborted,
    }
    window = cfg.eval.co_window or 2 * steps_per_epoch
    summary["co_step"] = metrics_mod.detect_catastrophic_overfitting(
        records, window) if records else None
    if model.input_shape == (2,) and model.n_classes == 2:
        summary["boundary_ratio"] = metrics_mod.boundary_nonrobust_ratio(model)

    if cfg.output.save_landscape and aborted is None:
        sample = eval_subset.subset(np.arange(min(64, len(eval_subset))))
        grid = metrics_mod.loss_landscape(model, sample.xs, sample.ys, eps,
                                          n=cfg.eval.landscape_n,
                                          seed=cfg.eval.seed)
        metrics_mod.save_landscape_csv(
            grid, os.path.join(out, f"landscape_{cfg.train.method}.csv"))
    if cfg.output.save_checkpoint and not eval_only:
        models_mod.save_checkpoint(model, os.path.join(out, "final.ckpt"))

    summary["wall_clock_sec"] = time.perf_counter() - t0
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 2 if aborted else 0


def sweep(config_path, overrides, param, values, out_root):
    """One run per value of a dotted config parameter; merged sweep.csv."""
    if not values:
        raise ValidationError([f"sweep over {param}: empty value list"])
    os.makedirs(out_root, exist_ok=True)

    def one(value):
        ov = dict(overrides)
        ov[param] = value
        tag = re.sub(r"[^A-Za-z0-9_.-]", "_", value)
        ov["output.dir"] = os.path.join(out_root, f"{param}_{tag}")
        try:
            cfg = parse_config(config_path, ov)
            code = run(cfg)
            with open(os.path.join(ov["output.dir"], "summary.json")) as fh:
                summary = json.load(fh)
            return value, code, summary
        except (ParseError, ValidationError) as exc:
            return value, 1, {"error": str(exc)}

    env = os.environ.get("SLATLAB_THREADS")
    workers = int(env) if env else min(len(values), os.cpu_count() or 1)
    workers = max(1, workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, values))

    with open(os.path.join(out_root, "sweep.csv"), "w") as fh:
        fh.write(f"{param},exit_code,clean_acc,robust_acc,co_step\n")
        for value, code, summary in results:
            fh.write(",".join([
                value, str(code),
                repr(summary.get("clean_acc", float("nan"))),
                repr(summary.get("robust_acc", float("nan"))),
                str(summary.get("co_step")),
            ]) + "\n")
    worst = max((code for _, code, _ in results), default=0)
    return worst


def toy_demo(config_path, overrides):
    """Paired standard / FGSM-AT / SLAT runs on the toy task."""
    base = parse_config(config_path, overrides)
    out_root = base.output.dir
    os.makedirs(out_root, exist_ok=True)
    merged = {}
    code = 0
    for method in ("standard", "fgsm_at", "slat"):
        ov = dict(overrides)
        ov["train.method"] = method
        ov["output.dir"] = os.path.join(out_root, method)
        cfg = parse_config(config_path, ov)
        code = max(code, run(cfg))
        with open(os.path.join(ov["output.dir"], "summary.json")) as fh:
            s = json.load(fh)
        merged[method] = {k: s.get(k) for k in
                          ("clean_acc", "robust_acc", "boundary_ratio", "co_step")}
    with open(os.path.join(out_root, "summary.json"), "w") as fh:
        json.dump(merged, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(merged, indent=2, sort_keys=True))
    return code


def _split_overrides(argv):
    rest, overrides = [], {}
    for tok in argv:
        m = _OVERRIDE_RE.match(tok)
        if m:
            overrides[m.group(1)] = m.group(2)
        else:
            rest.append(tok)
    return rest, overrides


def _build_parser():
    p = argparse.ArgumentParser(prog="slatlab",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="INI experiment config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("train", help="train a model and write artifacts")
    common(sp)
    sp.add_argument("--ckpt", default=None, help="warm-start checkpoint")
    sp.add_argument("--eval-only", action="store_true",
                    help="skip training; summarize the checkpoint")
    sp = sub.add_parser("eval", help="summarize a saved checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp = sub.add_parser("sweep", help="run the config once per parameter value")
    common(sp)
    sp.add_argument("--param", required=True, help="dotted key, e.g. train.epsilon")
    sp.add_argument("--values", required=True,
                    help="comma-separated values, fractions like 8/255 allowed")
    sp = sub.add_parser("landscape", help="loss-landscape grid for a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp = sub.add_parser("toy-demo", help="standard vs FGSM-AT vs SLAT on the toy task")
    common(sp)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    rest, overrides = _split_overrides(argv)
    args = _build_parser().parse_args(rest)
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["output.dir"] = args.out

    try:
        if args.verb == "sweep":
            return sweep(args.config, overrides, args.param,
                         args.values.split(","),
                         overrides.get("output.dir", "sweep_out"))
        if args.verb == "toy-demo":
            return toy_demo(args.config, overrides)

        cfg = parse_config(args.config, overrides)
        if args.verb == "train":
            return run(cfg, ckpt=args.ckpt, eval_only=args.eval_only)
        if args.verb == "eval":
            return run(cfg, ckpt=args.ckpt, eval_only=True)
        if args.verb == "landscape":
            _, test_ds = build_datasets(cfg)
            model = build_model(cfg)
            models_mod.load_into(model, models_mod.load_checkpoint(args.ckpt))
            eps = (cfg.eval.epsilon if cfg.eval.epsilon is not None
                   else cfg.train.epsilon)
            sample = test_ds.subset(np.arange(min(64, len(test_ds))))
            grid = metrics_mod.loss_landscape(model, sample.xs, sample.ys, eps,
                                              n=cfg.eval.landscape_n,
                                              seed=cfg.eval.seed)
            os.makedirs(cfg.output.dir, exist_ok=True)
            path = os.path.join(cfg.output.dir,
                                f"landscape_{cfg.train.method}.csv")
            metrics_mod.save_landscape_csv(grid, path)
            print(path)
            return 0
    except (ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
