"""Command-line entry point.

Exit codes:
  0  success
  1  gradcheck found a parameter over tolerance
  2  bad configuration or unreadable input
  3  training diverged (non-finite loss or gradient)
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .ablation import COMPONENT_VARIANTS, parse_variant, run_ablation
from .config import ConfigError, RunConfig
from .contrastive import curve_turning_point, neg_grad_curve
from .data import DataError, Dataset, load_dataset, synth_generate, write_dataset
from .evaluation import EmbeddingScorer, evaluate, make_split
from .autodiff import Tensor
from .gradcheck import run_suite
from .model import Model, ModelConfig
from .trainer import DivergenceError, load_checkpoint, save_checkpoint, train, write_log
from . import plotting

log = logging.getLogger("mbseq")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


# --- argument plumbing -----------------------------------------------------

def _config_flags() -> argparse.ArgumentParser:
    """A parent parser with one override flag per RunConfig key."""
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration overrides (win over --config)")
    g.add_argument("--config", type=Path, help="JSON run configuration")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "topk":
            g.add_argument(flag, type=int, nargs="+", dest=f.name)
        elif isinstance(f.default, bool):
            g.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, dest=f.name)
        else:
            g.add_argument(flag, type=type(f.default), dest=f.name, metavar=f.name.upper())
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_flags()
    parser = argparse.ArgumentParser(prog="mbseq", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a planted-cluster event log")
    s.add_argument("--out", type=Path, default=Path("events.csv"),
                   help="CSV path; the JSON sidecar is written beside it")

    t = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    t.add_argument("--data", type=Path, help="event CSV (synthesized from the config if omitted)")
    t.add_argument("--out-dir", type=Path, default=Path("run"))
    t.add_argument("--no-eval", action="store_true", help="skip per-epoch HR/NDCG")
    t.add_argument("--no-plots", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on the held-out split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help="event CSV (synthesized from the config if omitted)")
    e.add_argument("--out-dir", type=Path)
    e.add_argument("--no-plots", action="store_true")

    a = sub.add_parser("ablate", parents=[common], help="train and compare variants on one split")
    a.add_argument("--data", type=Path)
    a.add_argument("--variant", action="append", dest="variants",
                   help="full, wo_cl, wo_mbg, target_only or drop:<behavior>; repeatable")
    a.add_argument("--out-dir", type=Path, default=Path("ablation"))
    a.add_argument("--no-plots", action="store_true")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite on the minimal model")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)

    lab = sub.add_parser("gradlab", parents=[common], help="negative-sample gradient curves c(x)")
    lab.add_argument("--taus", type=float, nargs="+",
                     default=[0.02, 0.035, 0.05, 0.07, 0.1, 0.3, 0.5, 0.7])
    lab.add_argument("--points", type=int, default=201)
    lab.add_argument("--out-dir", type=Path, default=Path("gradlab"))
    lab.add_argument("--no-plots", action="store_true")
    return parser


def flag_overrides(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(RunConfig)
            if getattr(args, f.name, None) is not None}


def explicit_keys(args: argparse.Namespace) -> set[str]:
    """Keys set by the config file or a flag, as opposed to left at their defaults."""
    keys = set(flag_overrides(args))
    if getattr(args, "config", None) is not None:
        keys |= set(RunConfig.read(args.config))
    return keys


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), flag_overrides(args), base)
    cfg.log_resolved(log)
    return cfg


def _write_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")


def _dataset(cfg: RunConfig, args) -> tuple[Dataset, RunConfig]:
    """Load ``--data`` or synthesize; sidecar slot settings fill keys left at default."""
    if args.data is None:
        log.info("no --data given; synthesizing from the config")
        return synth_generate(cfg.synth()), cfg
    try:
        ds = load_dataset(args.data)
    except OSError as exc:
        raise DataError(f"cannot read {args.data}: {exc}") from exc
    explicit = explicit_keys(args)
    adopt = {k: v for k, v in (("granularity", ds.granularity), ("num_slots", ds.num_slots))
             if v is not None and k not in explicit}
    if adopt:
        cfg = RunConfig.from_mapping({**cfg.to_dict(), **adopt})
        log.info("taking %s from the sidecar", adopt)
    return ds, cfg


def _model_config(cfg: RunConfig, ds: Dataset) -> ModelConfig:
    return cfg.model(ds.num_users, ds.num_items, ds.catalog.size, ds.catalog.target)


def _split(cfg: RunConfig, ds: Dataset):
    return make_split(ds.events, ds.catalog.target, ds.num_items,
                      np.random.default_rng(cfg.split_seed), cfg.eval_negatives,
                      cfg.strict_negatives)


def _write_rows(path: Path, rows: Sequence[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_attention_csv(path: Path, maps: Sequence[np.ndarray], names: Sequence[str]) -> None:
    """Long-format dump: one row per (slot, node, query behavior, key behavior).

    ``slot`` is the 1-based slot holding the queries; keys come from the slot before it.
    """
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "user", "query", "key", "weight"])
        for k, m in enumerate(maps):
            for n in range(m.shape[0]):
                for i in range(m.shape[1]):
                    for j in range(m.shape[2]):
                        w.writerow([k + 2, n, names[i], names[j], repr(float(m[n, i, j]))])


# --- subcommands -----------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    ds = synth_generate(cfg.synth())
    sidecar = write_dataset(ds, args.out)
    args.out.with_suffix(".config.json").write_text(cfg.to_json() + "\n")
    log.info("wrote %d events to %s (sidecar %s)", len(ds.events), args.out, sidecar)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds, cfg = _dataset(cfg, args)
    mcfg = _model_config(cfg, ds)
    split = _split(cfg, ds)
    out = args.out_dir
    _write_config(cfg, out)
    started = time.perf_counter()
    result = train(split.train_events, mcfg, cfg.train(), split=None if args.no_eval else split)
    log.info("trained %d epochs in %.1fs", cfg.epochs, time.perf_counter() - started)
    save_checkpoint(out / "checkpoint.json", result.params, mcfg, {"run_config": cfg.to_dict()})
    write_log(result.log, out / "epochs.csv")
    fwd = result.model.forward({k: Tensor(v) for k, v in result.params.items()})
    if fwd.attention_user:
        write_attention_csv(out / "attention_user.csv", fwd.attention_user, ds.catalog.names)
    report = evaluate(EmbeddingScorer(fwd.fused_user.data, fwd.fused_item.data), split, cfg.topk)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    if not args.no_plots:
        if result.log:
            plotting.plot_loss_curves(result.log, out / "loss.png")
        if fwd.attention_user:
            plotting.plot_attention(fwd.attention_user[-1], ds.catalog.names, out / "attention.png")
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "buckets"}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    """Rebuild the split from the run config stored in the checkpoint, then score."""
    try:
        params, mcfg, extra = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    if "run_config" in extra:
        cfg = resolve_config(args, base=extra["run_config"])
    ds, cfg = _dataset(cfg, args)
    if (ds.num_users, ds.num_items, ds.catalog.size) != (mcfg.num_users, mcfg.num_items, mcfg.num_behaviors):
        raise ConfigError("checkpoint shape does not match the dataset")
    split = _split(cfg, ds)
    model = Model(mcfg, split.train_events)
    report = evaluate(EmbeddingScorer(*model.embeddings(params)), split, cfg.topk)
    print(report.to_json())
    if args.out_dir:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "metrics.json").write_text(report.to_json() + "\n")
        (args.out_dir / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
        if not args.no_plots:
            rows = [{"variant": name, **{m: b.get(m, 0.0) for m in ("HR@10", "NDCG@10")}}
                    for name, b in report.buckets.items() if b["users"]]
            if rows and 10 in cfg.topk:
                plotting.plot_ablation(rows, args.out_dir / "buckets.png")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    ds, cfg = _dataset(cfg, args)
    split = _split(cfg, ds)
    variants = args.variants or list(COMPONENT_VARIANTS)
    for v in variants:
        try:
            parse_variant(v, ds)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    out = args.out_dir
    _write_config(cfg, out)
    topk = tuple(sorted(set(cfg.topk) | {10}))
    rows, reports = [], {}
    for v in variants:
        started = time.perf_counter()
        res = run_ablation(v, ds, split, cfg.model_kwargs(), cfg.train(), topk)
        row = res.row(10)
        row["seconds"] = round(time.perf_counter() - started, 2)
        rows.append(row)
        reports[v] = res.report.to_dict()
        log.info("%-12s HR@10=%.4f NDCG@10=%.4f", v, row["HR@10"], row["NDCG@10"])
    _write_rows(out / "ablation.csv", rows)
    (out / "ablation.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    if not args.no_plots:
        plotting.plot_ablation(rows, out / "ablation.png")
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    reports = run_suite(seed=cfg.seed, eps=args.eps, tol=args.tol)
    ok = True
    for name, rep in reports.items():
        print(f"[{name}] worst={rep.worst:.3e} tol={rep.tol:g} {'PASS' if rep.passed else 'FAIL'}")
        for line in rep.lines():
            print("  " + line)
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_gradlab(args, cfg: RunConfig) -> int:
    if args.points < 2 or any(t <= 0 for t in args.taus):
        raise ConfigError("need at least two points and positive temperatures")
    xs = np.linspace(-1.0, 1.0, args.points)
    rows = [{"x": repr(float(x)), "tau": repr(float(tau)), "c": repr(float(neg_grad_curve(x, tau)))}
            for tau in args.taus for x in xs]
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "grad_curve.csv", rows)
    turning = {float(t): float(curve_turning_point(t)) for t in args.taus}
    _write_rows(out / "turning_points.csv",
                [{"tau": repr(t), "x_star": repr(x), "c_max": repr(float(neg_grad_curve(x, t)))}
                 for t, x in turning.items()])
    if not args.no_plots:
        plotting.plot_grad_curves(rows, out / "grad_curves.png", turning)
    log.info("wrote %d samples to %s", len(rows), out / "grad_curve.csv")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "gradlab": cmd_gradlab}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, DataError) as exc:
        print(f"mbseq: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"mbseq: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
