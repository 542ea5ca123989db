"""Command-line entry point: ``bnseq <subcommand> ...``.

Exit codes: 0 when every run completed and every config validated, 1 when a
run or config failed, 2 for usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings

import numpy as np
import yaml

from .errors import ConfigError
from .experiments import (ExperimentConfig, cheat_comparison, emit, feature_shift_probe, load_grid,
                          load_model, parse_schedule, probe_batches, run_grid, save_model, score,
                          train_run)
from .toy import ToyConfig, run_toy_experiment
from .workflow import WorkflowConfig, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("bnseq")


def _read_yaml(path) -> dict:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return doc


def _dataset(args, overrides: dict | None = None):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    cfg = dataclasses.replace(WorkflowConfig(), **(overrides or {}))
    if getattr(args, "data_seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.data_seed)
    return generate_dataset(cfg)


def _dump(obj, path=None):
    text = json.dumps(obj, indent=1, sort_keys=True, default=_jsonable)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def cmd_gen_data(args) -> int:
    overrides = _read_yaml(args.config) if args.config else {}
    ds = _dataset(argparse.Namespace(data=None, data_seed=args.seed), overrides)
    save_dataset(ds, args.out)
    print(f"{args.out}: {len(ds.train)}/{len(ds.val)}/{len(ds.test)} videos, sha256 {ds.checksum()[:16]}")
    return 0


def _experiment(args) -> ExperimentConfig:
    doc = _read_yaml(args.config) if args.config else {}
    for key in ("norm", "schedule", "protocol", "task", "epochs", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    return ExperimentConfig.from_dict(doc).validate()


def cmd_train(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(args, dict(cfg.dataset))
    result = train_run(cfg, ds, args.seed, keep_model=True)
    if args.model_out:
        save_model(result.model, args.model_out, cfg)
    if args.out:
        emit(result.rows, args.format, args.out)
    _dump({"config_hash": cfg.hash(), "seed": args.seed, "best_epoch": result.best_epoch,
           "test": result.test.scalars()})
    return 0


def cmd_eval(args) -> int:
    model, exp = load_model(args.model)
    exp = exp or ExperimentConfig(task=model.cfg.task)
    if args.mode:
        exp = dataclasses.replace(exp, protocol="SWE" if args.mode == "SWE" else "CHE")
    if args.window:
        exp = dataclasses.replace(exp, seq_len=args.window)
    ds = _dataset(args, dict(exp.dataset))
    report = score(model, ds.split(args.split), exp)
    _dump(dataclasses.asdict(report), args.out)
    return 0


def cmd_grid(args) -> int:
    configs, seeds = load_grid(args.config)
    if args.seeds:
        seeds = args.seeds
    ds = load_dataset(args.data) if args.data else None
    before = ds.checksum() if ds else None
    rows, failures = run_grid(configs, seeds, ds, workers=args.workers)
    if ds is not None and ds.checksum() != before:
        raise RuntimeError("dataset changed during the grid run")
    emit(rows, args.format, args.out)
    for cfg, msg in failures:
        log.error("skipped invalid config %s: %s", cfg.hash(), msg)
    print(f"{args.out}: {len(rows)} rows from {len(configs) - len(failures)} configs x {len(seeds)} seeds")
    return 1 if failures else 0


def cmd_probe(args) -> int:
    model, exp = load_model(args.model)
    ds = _dataset(args, dict(exp.dataset) if exp else None)
    n_seq, seq_len = parse_schedule(args.schedule) if args.schedule else (exp.n_seq, exp.seq_len)
    res = feature_shift_probe(model, probe_batches(ds.split(args.split), n_seq, seq_len, args.seed))
    _dump({"schedule": f"{n_seq}x{seq_len}", **res}, args.out)
    return 0


def cmd_cheat_eval(args) -> int:
    model, exp = load_model(args.model)
    ds = _dataset(args, dict(exp.dataset) if exp else None)
    seq_len = args.seq_len or (exp.seq_len if exp else None)
    if not seq_len:
        raise ConfigError("--seq-len is required for models saved without an experiment config")
    carry = args.carry_state or bool(exp and exp.protocol == "CHT")
    res = cheat_comparison(model, ds.split(args.split), seq_len, carry)
    out = {k: v for k, v in res.items() if k not in ("honest", "cheat")}
    if args.trace:
        out["trace"] = {"global_stats": res["honest"]["trace"], "batch_stats": res["cheat"]["trace"]}
    _dump(out, args.out)
    return 0


def cmd_toy_cheat(args) -> int:
    cfg = ToyConfig(steps=args.steps, lr=args.lr, eval_batches=args.eval_batches)
    _dump(run_toy_experiment(args.net, seed=args.seed, cfg=cfg), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnseq", description="BatchNorm pitfalls in sequence learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--data", help="dataset text file (default: generate)")
        sp.add_argument("--data-seed", type=int, help="seed for a generated dataset")

    g = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    g.add_argument("--config", help="YAML of dataset settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one config and seed")
    t.add_argument("--config", help="YAML of experiment settings")
    for key in ("norm", "schedule", "protocol", "task"):
        t.add_argument(f"--{key}")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model-out")
    t.add_argument("--out", help="result rows file")
    t.add_argument("--format", choices=("csv", "json"), default="csv")
    data_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--mode", choices=("SWE", "CHE"))
    e.add_argument("--window", type=int)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out")
    data_flags(e)
    e.set_defaults(func=cmd_eval)

    gr = sub.add_parser("grid", help="run a grid file")
    gr.add_argument("--config", required=True)
    gr.add_argument("--seeds", type=int, nargs="+")
    gr.add_argument("--out", required=True)
    gr.add_argument("--format", choices=("csv", "json"), default="csv")
    gr.add_argument("--workers", type=int, default=1)
    gr.add_argument("--data")
    gr.set_defaults(func=cmd_grid)

    pr = sub.add_parser("probe", help="feature-shift probe of a saved model")
    pr.add_argument("--model", required=True)
    pr.add_argument("--schedule", help="batch shape, e.g. 1x64 (default: the model's)")
    pr.add_argument("--split", default="test", choices=("train", "val", "test"))
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")
    data_flags(pr)
    pr.set_defaults(func=cmd_probe)

    c = sub.add_parser("cheat-eval", help="honest vs batch-statistics anticipation evaluation")
    c.add_argument("--model", required=True)
    c.add_argument("--seq-len", type=int)
    c.add_argument("--carry-state", action="store_true")
    c.add_argument("--split", default="test", choices=("train", "val", "test"))
    c.add_argument("--trace", action="store_true", help="include per-frame traces")
    c.add_argument("--out")
    data_flags(c)
    c.set_defaults(func=cmd_cheat_eval)

    toy = sub.add_parser("toy-cheat", help="the two-sample equality task")
    toy.add_argument("--net", choices=("BN", "GN"), default="BN")
    toy.add_argument("--steps", type=int, default=2000)
    toy.add_argument("--lr", type=float, default=0.05)
    toy.add_argument("--eval-batches", type=int, default=10_000)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--out")
    toy.set_defaults(func=cmd_toy_cheat)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
