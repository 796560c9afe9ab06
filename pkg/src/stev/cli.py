"""Command line entry point: ``stev gen | train | eval | ablate | graph``.

Exit codes: 0 success, 1 validation error (bad config, arguments or input
files), 2 runtime failure (divergence or unexpected error).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .data import ConfigError, generate_synthetic, load_dataset, make_windows, normalize, save_dataset
from .flat import flatten
from .model import CheckpointError, StevModel
from .numerics import Rng
from .train import (DivergenceError, MetricsReport, evaluate, forgetting, run_ablation, train,
                    write_curves, write_reports)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "STEV_OUT"
DEFAULT_ALPHAS = "0.05,0.1,0.3,0.5,0.7,1.0"

log = logging.getLogger("stev")


def _out_dir(arg: str | None) -> Path:
    path = arg or os.environ.get(OUT_ENV)
    if not path:
        raise ConfigError(f"--out not given and {OUT_ENV} is unset")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(data_dir: str):
    d = Path(data_dir)
    for name in ("manifest.json", "values.csv"):
        if not (d / name).is_file():
            raise ConfigError(f"missing dataset file {d / name}")
    return load_dataset(d)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    cfg = config_mod.load(args.config, seed=args.seed)
    out = _out_dir(args.out)
    ds = generate_synthetic(rng=Rng(cfg["seed"]), **config_mod.gen_kwargs(cfg))
    save_dataset(ds, out)
    _write_json(out / "config.json", cfg)
    if args.oracle:
        save_dataset(ds.fully_observed(), out / "oracle")
    print(f"T_total={ds.t_total} |V1|={len(ds.v1)} |V2|={ds.n_vars} "
          f"expansion_steps={ds.expansion_steps}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = dict(seed=args.seed, variant=args.variant, strategy=args.strategy,
                     max_epochs=args.max_epochs)
    if args.strategy == "fptm" and args.variant is None:
        overrides["variant"] = "flats"
    cfg = config_mod.load(args.config, **overrides)
    tc = config_mod.train_config(cfg)
    ds = _load_data(args.data)
    out = _out_dir(args.out)
    if args.dump_batch:
        nds = normalize(ds)
        windows = make_windows(nds, nds.splits.train, tc.H, tc.Q)
        order = Rng(tc.seed).stream("shuffle/1").np.permutation(len(windows))
        pad_to = np.arange(ds.n_vars) if tc.strategy == "fptm" else None
        flat = flatten([windows[i] for i in order[:tc.batch_size]], ds.v1, pad_to=pad_to)
        flat.dump_layout(out / "batch_layout.json")
    result = train(ds, tc)
    meta = {"train_config": tc.to_dict(), "variable_ids": ds.variable_names,
            "best_epoch": result.best_epoch, "epochs_run": result.epochs_run}
    result.model.save(out / "checkpoint.json", meta)
    write_curves(result.curves, out / "curves.csv")
    _write_json(out / "config.json", cfg)
    print(f"epochs={result.epochs_run} best_epoch={result.best_epoch} "
          f"best_val_mae={min(c['val_mae'] for c in result.curves):.6f}")
    return EXIT_OK


def _load_checkpoint(path: str, ds):
    if not Path(path).is_file():
        raise ConfigError(f"missing checkpoint {path}")
    try:
        model, meta = StevModel.load(path)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    if model.n_vars != ds.n_vars or model.steps_per_day != ds.steps_per_day:
        raise ConfigError(f"checkpoint expects {model.n_vars} variables at {model.steps_per_day} "
                          f"steps/day; dataset has {ds.n_vars} at {ds.steps_per_day}")
    if meta.get("variable_ids") not in (None, ds.variable_names):
        raise ConfigError("checkpoint variable ids differ from the dataset's")
    return model, meta


def _load_report(path: str) -> MetricsReport:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"unreadable oracle report {path}: {exc}") from exc
    if isinstance(doc, list):
        if len(doc) != 1:
            raise ConfigError(f"oracle report {path} holds {len(doc)} reports; expected one")
        doc = doc[0]
    return MetricsReport.from_dict(doc)


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    model, meta = _load_checkpoint(args.checkpoint, ds)
    tc = meta.get("train_config", {})
    H, Q = model.cfg.H, model.cfg.Q
    report = evaluate(model, ds, args.split, H, Q)
    report = replace(report, strategy=tc.get("strategy", "stev"), variant=tc.get("variant", ""),
                     seed=tc.get("seed", 0), config=tc)
    if args.oracle_report:
        report = report.with_oracle(_load_report(args.oracle_report))
    if args.old_checkpoint:
        old, _ = _load_checkpoint(args.old_checkpoint, ds)
        report = replace(report, afmae=forgetting(model, old, ds, H, Q)[0])
    out = _out_dir(args.out)
    write_reports([report], out)
    for g, m in report.groups.items():
        print(f"{g}: " + ("absent" if m is None else f"MAE={m['mae']:.4f} RMSE={m['rmse']:.4f}"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = config_mod.load(args.config, max_epochs=args.max_epochs)
    # the ladder assigns variant and strategy per cell
    base = config_mod.train_config({**cfg, "variant": "focal", "strategy": "stev"})
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    alphas = None
    if args.sweep_alpha is not None:
        try:
            alphas = [float(a) for a in args.sweep_alpha.split(",") if a.strip()]
        except ValueError as exc:
            raise ConfigError(f"--sweep-alpha: {exc}") from exc
        if not alphas:
            raise ConfigError("--sweep-alpha: empty list")
        for a in alphas:
            if not 0 < a <= 1:
                raise ConfigError(f"--sweep-alpha: values must be in (0, 1], got {a}")
    ds = _load_data(args.data)
    oracle = _load_report(args.oracle_report) if args.oracle_report else None
    seeds = [cfg["seed"] + i for i in range(args.seeds)]
    reports = run_ablation(ds, base, seeds, alphas, oracle)
    out = _out_dir(args.out)
    write_reports(reports, out)
    _write_json(out / "config.json", cfg)
    print(f"{len(reports)} cells written to {out}")
    return EXIT_OK


def cmd_graph(args) -> int:
    ds = _load_data(args.data)
    model, _ = _load_checkpoint(args.checkpoint, ds)
    if args.slot < 0:
        raise ConfigError(f"--slot must be >= 0, got {args.slot}")
    ids = np.arange(ds.n_vars) if args.variables == "all" else ds.active_at(args.slot)
    with torch.no_grad():
        w = model.graph.adjacency(ids, args.slot).numpy()
    out = _out_dir(args.out)
    path = out / f"adjacency_{args.slot}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([""] + [ds.variable_names[i] for i in ids])
        for i, row in zip(ids, w):
            writer.writerow([ds.variable_names[i]] + [repr(float(x)) for x in row])
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stev", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic expanding-variate dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--oracle", action="store_true",
                   help="also write the fully observed counterfactual to OUT/oracle")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write checkpoint + curves")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--variant")
    t.add_argument("--strategy")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--dump-batch", action="store_true",
                   help="write the first training batch layout to OUT/batch_layout.json")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--split", default="test", choices=["valid", "test"])
    e.add_argument("--oracle-report")
    e.add_argument("--old-checkpoint", help="pre-expansion model, enables AFMAE")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="variant ladder or alpha sweep over seeds")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out")
    a.add_argument("--seeds", type=int, default=1)
    a.add_argument("--max-epochs", type=int)
    a.add_argument("--sweep-alpha", nargs="?", const=DEFAULT_ALPHAS, default=None)
    a.add_argument("--oracle-report")
    a.set_defaults(func=cmd_ablate)

    gr = sub.add_parser("graph", help="export the learned adjacency at a time slot")
    gr.add_argument("--checkpoint", required=True)
    gr.add_argument("--data", required=True)
    gr.add_argument("--out")
    gr.add_argument("--slot", type=int, required=True)
    gr.add_argument("--variables", choices=["active", "all"], default="active")
    gr.set_defaults(func=cmd_graph)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
