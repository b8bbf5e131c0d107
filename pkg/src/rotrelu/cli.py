"""Command line: train, select-gamma, prune, report, analyze, export-hist.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from . import accounting, data
from .errors import CheckpointError, DivergenceError, RReLUError, StructuralError
from .init import init_type1, init_type2
from .models import Model, checkpoint_metadata, load_checkpoint, parse_model_name, save_checkpoint
from .pruning import (
    apply_mask_zero,
    compact,
    derive_mask,
    select_gamma,
    verify_equivalence,
)
from .training import TrainConfig, evaluate, train, train_slopes_only

logger = logging.getLogger("rotrelu")

DEFAULTS = {
    "model": "fcnn-784-500-10",
    "activation": "rrelu",
    "dataset": "mnist",
    "data_dir": None,
    "train_limit": None,
    "test_limit": None,
    "synthetic_n": 512,
    "synthetic_test_n": 256,
    "synthetic_shape": [1, 8, 8],
    "synthetic_classes": 2,
    "synthetic_separation": 4.0,
    "init": "type1",
    "pretrained": None,
    "slopes_only": False,
    "out": "runs/train",
    "epochs": 1,
    "batch_size": 128,
    "optimizer": "adam",
    "lr": 1e-3,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "scheduler": "constant",
    "milestones": [],
    "decay": 0.1,
    "lr_min": 0.0,
    "augment": "none",
    "seed": 0,
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config

def load_config(path: Optional[str], overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(user) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(user)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], optimizer=cfg["optimizer"], lr=cfg["lr"],
            momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], scheduler=cfg["scheduler"],
            milestones=tuple(cfg["milestones"]), decay=cfg["decay"], lr_min=cfg["lr_min"],
            seed=cfg["seed"], augment=cfg["augment"])
    except RReLUError as e:
        raise UsageError(str(e)) from e


def load_datasets(cfg: dict):
    """Train and test splits, standardized with train-split statistics."""
    kind = cfg["dataset"]
    if kind == "mnist":
        tr, te = data.load_mnist(cfg["data_dir"], "train"), data.load_mnist(cfg["data_dir"], "test")
    elif kind in ("cifar10", "cifar100"):
        variant = "c10" if kind == "cifar10" else "c100"
        root = data.data_dir(cfg["data_dir"])
        tr, te = data.load_cifar_bin(root, variant, "train"), data.load_cifar_bin(root, variant, "test")
    elif kind == "synthetic":
        full = data.synthetic_blobs(cfg["synthetic_n"] + cfg["synthetic_test_n"], cfg["synthetic_shape"],
                                    cfg["synthetic_classes"], cfg["synthetic_separation"], cfg["seed"])
        n = cfg["synthetic_n"]
        tr, te = full.subset(np.arange(n), "train"), full.subset(np.arange(n, len(full)), "test")
    else:
        raise UsageError(f"unknown dataset {kind!r}")
    if cfg.get("train_limit"):
        tr = tr.subset(np.arange(min(cfg["train_limit"], len(tr))))
    if cfg.get("test_limit"):
        te = te.subset(np.arange(min(cfg["test_limit"], len(te))))
    return data.standardize_splits(tr, te)


def build_spec(cfg: dict, ds: data.Dataset):
    shape = ds.images.shape[1:]
    try:
        return parse_model_name(cfg["model"], ds.num_classes, shape[0], shape[-1], cfg["activation"])
    except RReLUError as e:
        raise UsageError(str(e)) from e


@contextlib.contextmanager
def locked(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    sentinel = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(sentinel, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is locked by another command ({sentinel} exists)")
    os.close(fd)
    try:
        yield out_dir
    finally:
        os.remove(sentinel)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_config(args.config, {
        "model": args.model, "activation": args.activation, "dataset": args.dataset,
        "data_dir": args.data_dir, "epochs": args.epochs, "batch_size": args.batch_size,
        "optimizer": args.optimizer, "lr": args.lr, "scheduler": args.scheduler, "seed": args.seed,
        "init": args.init, "pretrained": args.pretrained, "out": args.out,
        "train_limit": args.train_limit, "test_limit": args.test_limit,
        "slopes_only": True if args.slopes_only else None,
    })
    if cfg["init"] not in ("type1", "type2"):
        raise UsageError(f"--init must be type1 or type2, got {cfg['init']!r}")
    if cfg["init"] == "type2" and not cfg["pretrained"]:
        raise UsageError("--init type2 requires --pretrained PATH")
    tcfg = train_config(cfg)
    train_set, test_set = load_datasets(cfg)
    model = Model(build_spec(cfg, train_set))
    if cfg["init"] == "type1":
        init_type1(model, cfg["seed"])
    else:
        init_type2(model, cfg["pretrained"])
    with locked(cfg["out"]) as out:
        _write(os.path.join(out, "config.json"), json.dumps(cfg, indent=1, sort_keys=True) + "\n")
        if cfg["slopes_only"]:
            model, log = train_slopes_only(model, train_set, tcfg, test_set)
        else:
            model, log = train(model, train_set, tcfg, test_set)
        acc = evaluate(model, test_set)
        save_checkpoint(model, os.path.join(out, "checkpoint"),
                        {"config": cfg, "test_accuracy": acc, "stats": [s.tolist() for s in train_set.stats]})
        log.to_csv(os.path.join(out, "runlog.csv"))
    print(f"test accuracy {acc:.2f}%  checkpoint {os.path.join(cfg['out'], 'checkpoint')}")
    return 0


def _checkpoint_config(path: str, args) -> dict:
    meta = checkpoint_metadata(path)
    base = dict(meta.get("config", {}))
    over = {k: getattr(args, k, None) for k in ("dataset", "data_dir", "test_limit")}
    cfg = dict(DEFAULTS)
    cfg.update(base)
    cfg.update({k: v for k, v in over.items() if v is not None})
    return cfg


def cmd_select_gamma(args) -> int:
    cfg = _checkpoint_config(args.checkpoint, args)
    model = load_checkpoint(args.checkpoint)
    _, test_set = load_datasets(cfg)
    half_a, half_b = test_set.halves()
    result = select_gamma(model, half_a, args.tolerance_pp)
    pruned = apply_mask_zero(model, derive_mask(model, result.gamma))
    result.final_accuracy = evaluate(pruned, half_b)
    doc = json.loads(result.to_json())
    doc["unpruned_accuracy_half_b"] = evaluate(model, half_b)
    doc["tolerance_pp"] = args.tolerance_pp
    doc["filters_ignored"] = derive_mask(model, result.gamma).count()
    doc["total_channels"] = derive_mask(model, result.gamma).total()
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "gamma.json")
    _write(out, json.dumps(doc, indent=1) + "\n")
    print(f"gamma {result.gamma:.6g}: {doc['filters_ignored']}/{doc['total_channels']} slopes below; "
          f"accuracy half B {doc['unpruned_accuracy_half_b']:.2f} -> {result.final_accuracy:.2f}")
    return 0


def cmd_prune(args) -> int:
    if args.gamma is None and not args.gamma_file:
        raise UsageError("prune needs --gamma X or --gamma-file gamma.json")
    if args.gamma is not None:
        gamma = args.gamma
    else:
        with open(args.gamma_file, encoding="utf-8") as f:
            g = json.load(f)["gamma"]
        gamma = float(g)
    model = load_checkpoint(args.checkpoint)
    mask = derive_mask(model, gamma)
    zeroed = apply_mask_zero(model, mask)
    pruned = compact(model, mask)
    # surgery is checked in float64 so that only structural errors can exceed the tolerance
    eq = verify_equivalence(zeroed.astype(np.float64), pruned.astype(np.float64),
                            n_samples=args.samples, tol=args.tol)
    if not eq.passed:
        print(f"equivalence check failed: max |logit diff| {eq.max_abs_diff:.3g} > {eq.tol:.3g}",
              file=sys.stderr)
        return 1
    with locked(args.out) as out:
        meta = checkpoint_metadata(args.checkpoint)
        meta.update({"gamma": gamma, "source": os.path.abspath(args.checkpoint),
                     "equivalence_max_abs_diff": eq.max_abs_diff})
        save_checkpoint(pruned, os.path.join(out, "checkpoint"), meta)
        _write(os.path.join(out, "mask.json"), mask.to_json() + "\n")
        report = accounting.savings_report(model.spec, pruned.spec, gamma, model.slopes())
        _write(os.path.join(out, "report.txt"), report.to_text())
        _write(os.path.join(out, "report.csv"), report.to_csv())
    print(report.to_text(), end="")
    return 0


def cmd_report(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.pruned:
        pruned = load_checkpoint(args.pruned)
        gamma = float(checkpoint_metadata(args.pruned).get("gamma", 0.0))
    else:
        pruned, gamma = model, 0.0
    report = accounting.savings_report(model.spec, pruned.spec, gamma, model.slopes())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "report.txt"), report.to_text())
        _write(os.path.join(args.out, "report.csv"), report.to_csv())
    print(report.to_text(), end="")
    return 0


def cmd_analyze(args) -> int:
    if not args.filter_path and not args.hist:
        raise UsageError("analyze needs --filter-path and/or --hist BINS")
    model = load_checkpoint(args.checkpoint)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    if args.filter_path:
        counts = accounting.unit_active_counts(model.spec)
        if not counts:
            raise UsageError("filter-path analysis needs a residual network")
        dist = accounting.filter_path_distribution(counts)
        _write(os.path.join(out, "filter_path.csv"), dist.to_csv())
        print(f"{dist.num_units} units, max filter-path length {dist.max_length}, mean {dist.mean():.1f}")
    if args.hist:
        accounting.slope_histogram_export(model, args.hist, os.path.join(out, "slope_hist.csv"))
        print(f"slope histogram with {args.hist} bins written to {os.path.join(out, 'slope_hist.csv')}")
    return 0


def cmd_export_hist(args) -> int:
    model = load_checkpoint(args.checkpoint)
    path = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "slope_hist.csv")
    accounting.slope_histogram_export(model, args.bins, path)
    print(path)
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotrelu", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network (Type-I, Type-II or slopes-only)")
    t.add_argument("--config")
    t.add_argument("--model")
    t.add_argument("--activation", choices=["relu", "rrelu"])
    t.add_argument("--dataset", choices=["mnist", "cifar10", "cifar100", "synthetic"])
    t.add_argument("--data-dir", dest="data_dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--lr", type=float)
    t.add_argument("--scheduler", choices=["multistep", "cosine", "constant"])
    t.add_argument("--seed", type=int)
    t.add_argument("--init", choices=["type1", "type2"])
    t.add_argument("--pretrained")
    t.add_argument("--slopes-only", dest="slopes_only", action="store_true")
    t.add_argument("--train-limit", dest="train_limit", type=int)
    t.add_argument("--test-limit", dest="test_limit", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("select-gamma", help="choose the pruning threshold on half of the test set")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--dataset", choices=["mnist", "cifar10", "cifar100", "synthetic"])
    g.add_argument("--data-dir", dest="data_dir")
    g.add_argument("--test-limit", dest="test_limit", type=int)
    g.add_argument("--tolerance-pp", dest="tolerance_pp", type=float, default=0.2)
    g.add_argument("--out")
    g.set_defaults(func=cmd_select_gamma)

    pr = sub.add_parser("prune", help="remove channels with |slope| < gamma")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--gamma", type=float)
    pr.add_argument("--gamma-file", dest="gamma_file")
    pr.add_argument("--out", required=True)
    pr.add_argument("--samples", type=int, default=100)
    pr.add_argument("--tol", type=float, default=1e-5)
    pr.set_defaults(func=cmd_prune)

    r = sub.add_parser("report", help="parameter/FLOP savings table")
    r.add_argument("checkpoint")
    r.add_argument("pruned", nargs="?")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("analyze", help="filter-path distribution and slope histograms")
    a.add_argument("checkpoint")
    a.add_argument("--filter-path", dest="filter_path", action="store_true")
    a.add_argument("--hist", type=int, metavar="BINS")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("export-hist", help="write the slope histogram CSV")
    e.add_argument("checkpoint")
    e.add_argument("--bins", type=int, default=50)
    e.add_argument("--out")
    e.set_defaults(func=cmd_export_hist)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DivergenceError, StructuralError, CheckpointError, RReLUError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
