"""Command-line harness: gen, train, eval, inspect-ckpt.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(including training divergence). Run directories are self-contained: the
resolved config, the metrics CSV, and checkpoints are enough to reproduce
or resume a run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import decode as DEC
from . import model as M
from . import training as TR
from .checkpoint import (CheckpointMismatch, describe_checkpoint, load_checkpoint,
                         save_checkpoint)
from .config import Config, ConfigError, parse_config
from .data import FormatError
from .optim import OptimizerState
from .rng import generator_state, restore_generator, stream

METRICS_HEADER = "# dram-metrics v1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on bad usage instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _generate(task: str, count: int, seed: int):
    digits, labels = D.builtin_digit_corpus()
    if task == "sequence-large":
        return D.gen_sequence_task(digits, labels, count=count, seed=seed, scale=2)
    return D.GENERATORS[task](digits, labels, count=count, seed=seed)


def _load_or_generate(path, task, count, seed):
    if path:
        return D.load_dataset(path)
    return _generate(task, count, seed)


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    ds = _generate(args.task, args.count, args.seed)
    D.save_dataset(ds, args.out)
    hist = D.label_histogram(ds)
    print(f"wrote {len(ds)} {args.task} samples to {args.out}")
    print("label histogram:")
    for k, n in enumerate(hist):
        print(f"  {k:3d}: {n}")
    return 0


# ---------------------------------------------------------------------------
# train


def _metrics_row(epoch: int, split: str, stats: dict) -> str:
    return (f"{epoch},{split},{stats['loss']:.10g},{stats['reward_rate']:.10g},"
            f"{stats['seq_error']:.10g},{stats['lr']:.10g}")


def cmd_train(args) -> int:
    cfg = parse_config(path=args.config, overrides=args.override, task=args.task)
    mcfg, scfg, tcfg = cfg.model, cfg.sensor, cfg.train
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.resolved_text(), encoding="utf8")

    train_ds = _load_or_generate(args.data, cfg.task, args.train_count, args.data_seed)
    test_ds = None
    if args.test_data or args.test_count > 0:
        test_ds = _load_or_generate(args.test_data, cfg.task, args.test_count,
                                    args.data_seed + 1)

    epochs = args.epochs if args.epochs is not None else tcfg.epochs
    start_epoch = 0
    params = M.init_params(mcfg, scfg, stream(tcfg.seed, "init"))
    opt = OptimizerState(tcfg.lr, tcfg.momentum, tcfg.lr_decay)
    rng = stream(tcfg.seed, "train")
    rows = [METRICS_HEADER, "epoch,split,loss,reward_rate,seq_error,lr"]

    if args.resume:
        ck = load_checkpoint(args.resume, expect_hash=cfg.hash(),
                             allow_mismatch=args.allow_config_mismatch)
        params.load_arrays(ck["params"])
        opt = OptimizerState(ck["learning_rate"], ck["momentum"], ck["lr_decay"])
        opt.velocity = {k: v.copy() for k, v in ck["velocity"].items()}
        if ck["rng_state"] is not None:
            rng = restore_generator(ck["rng_state"])
        start_epoch = ck["epoch"]
        prior = Path(args.resume).parent / "metrics.csv"
        if prior.exists():
            rows = prior.read_text(encoding="utf8").strip().splitlines()

    def write_metrics():
        (run_dir / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="utf8")

    for epoch in range(start_epoch, epochs):
        try:
            stats = TR.train_epoch(params, opt, mcfg, scfg, tcfg, train_ds, epoch, rng)
        except TR.TrainingDiverged as e:
            write_metrics()
            print(f"error: {e}", file=sys.stderr)
            return 2
        rows.append(_metrics_row(epoch, "train", stats))
        if test_ds is not None and (epoch + 1) % args.eval_every == 0:
            met, _ = DEC.evaluate_dataset(params, mcfg, scfg, test_ds, mode="det",
                                          limit=args.eval_limit)
            rows.append(_metrics_row(epoch, "test", {
                "loss": float("nan"), "reward_rate": met["position_accuracy"],
                "seq_error": met["seq_error"], "lr": stats["lr"],
            }))
        write_metrics()
        print(rows[-1], flush=True)
        if args.ckpt_every and (epoch + 1) % args.ckpt_every == 0:
            save_checkpoint(run_dir / f"ckpt_epoch{epoch + 1}.bin", params, opt,
                            epoch=epoch + 1, config_text=cfg.resolved_text(),
                            config_hash=cfg.hash(), rng_state=generator_state(rng))

    save_checkpoint(run_dir / "ckpt_final.bin", params, opt, epoch=epochs,
                    config_text=cfg.resolved_text(), config_hash=cfg.hash(),
                    rng_state=generator_state(rng))
    write_metrics()
    return 0


# ---------------------------------------------------------------------------
# eval


def _model_from_checkpoint(path, overrides=()):
    ck = load_checkpoint(path)
    cfg = parse_config(text=ck["config_text"], overrides=overrides)
    params = M.init_params(cfg.model, cfg.sensor, stream(0, "shape-only"))
    params.load_arrays(ck["params"])
    return cfg, params


def cmd_eval(args) -> int:
    if args.mode not in ("det", "fb", "focus"):
        head, _, m = args.mode.partition(":")
        if head != "mc" or not m.isdigit() or int(m) < 1:
            raise UsageError(f"unknown eval mode {args.mode!r} (want det, mc:M, fb, focus)")
    cfg, params = _model_from_checkpoint(args.checkpoint, args.override)
    ds = _load_or_generate(args.data, args.task or cfg.task, args.count, args.data_seed)

    backward = None
    if args.mode == "fb":
        if not args.backward:
            raise UsageError("mode fb requires --backward CKPT")
        bcfg, bparams = _model_from_checkpoint(args.backward)
        backward = (bparams, bcfg.model, bcfg.sensor)
    crop = None
    if args.mode == "focus":
        if not args.crop:
            raise UsageError("mode focus requires --crop H,W")
        try:
            crop = tuple(int(x) for x in args.crop.split(","))
        except ValueError:
            raise UsageError(f"bad --crop {args.crop!r} (want H,W)") from None

    met, preds = DEC.evaluate_dataset(params, cfg.model, cfg.sensor, ds,
                                      mode=args.mode, seed=args.seed,
                                      backward=backward, crop_hw=crop,
                                      limit=args.limit, sigma=args.sigma)
    print(f"mode={met['mode']} images={met['images']}")
    print(f"whole_sequence_error={met['seq_error']:.6f}")
    print(f"position_accuracy={met['position_accuracy']:.6f}")
    if args.dump_trajectories:
        DEC.dump_trajectories(preds, args.dump_trajectories)
        print(f"trajectories written to {args.dump_trajectories}")
    return 0


def cmd_inspect(args) -> int:
    print(describe_checkpoint(args.checkpoint))
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    p = _Parser(prog="dram", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a task dataset cache")
    g.add_argument("--task", required=True,
                   choices=["pairs", "addition", "sequence", "sequence-large"])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model, writing a run directory")
    t.add_argument("--task", default=None)
    t.add_argument("--config", default=None, help="key=value config file")
    t.add_argument("--override", action="append", default=[], metavar="K=V")
    t.add_argument("--run-dir", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--data", default=None, help="training dataset cache file")
    t.add_argument("--test-data", default=None)
    t.add_argument("--train-count", type=int, default=2000)
    t.add_argument("--test-count", type=int, default=0)
    t.add_argument("--data-seed", type=int, default=100)
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--eval-limit", type=int, default=None)
    t.add_argument("--ckpt-every", type=int, default=0,
                   help="write ckpt_epochK.bin every K epochs (0: final only)")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--allow-config-mismatch", action="store_true")
    t.add_argument("--serial", action="store_true",
                   help="force single-threaded execution (always on; kept for contract)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", default="det", help="det, mc:M, fb, or focus")
    e.add_argument("--data", default=None)
    e.add_argument("--task", default=None)
    e.add_argument("--count", type=int, default=1000)
    e.add_argument("--data-seed", type=int, default=200)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sigma", type=float, default=0.03)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--backward", default=None, help="backward-reader checkpoint for fb")
    e.add_argument("--crop", default=None, help="H,W crop for focus mode")
    e.add_argument("--override", action="append", default=[], metavar="K=V")
    e.add_argument("--dump-trajectories", default=None, metavar="PATH")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect-ckpt", help="summarize a checkpoint file")
    i.add_argument("checkpoint")
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
