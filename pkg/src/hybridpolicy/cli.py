"""Command-line entry point: ``hybridpolicy <command> [--config F] [--seed S] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import experiments as X
from .async_runtime import REPORTED_LATENCY_MS, ClockModel, amortized_latency, fit_clock, write_trace
from .config import ExperimentConfig, load_config
from .curriculum import STRATEGIES, write_metrics
from .dataset import write_dataset
from .nn_core import ConfigError, TrainingError
from .plotting import PlotError, plot_csv

log = logging.getLogger("hybridpolicy")

DATASET_FILE = "dataset.bin"
SWEEP_FIELDS = ("success", "ci_low", "ci_high", "episodes", "latency_ms", "seed")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_updates(seed=args.seed)
    return cfg


def _dataset_path(cfg: ExperimentConfig, out: Path) -> Path:
    path = Path(cfg.dataset) if cfg.dataset else out / DATASET_FILE
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run gen-data first")
    return path


def _load_data(cfg, out, force):
    episodes = X.training_episodes(cfg, _dataset_path(cfg, out), force)
    return X.training_set(cfg, episodes)


def _write_rows(path: Path, header, rows, config_hash: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def _progress(every: int = 500):
    def cb(trainer, row):
        if row["step"] % every == 0:
            log.info("step %d l_diff=%.4f l_plan=%.4f acc_ema=%.3f source=%s", row["step"],
                     row["l_diff"], row["l_plan"], row["acc_ema"], row["source"])
    return cb


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = X.generate_training_episodes(cfg)
    path = out / DATASET_FILE
    write_dataset(path, episodes, cfg.seed, cfg.data_hash())
    ok = sum(e.success for e in episodes)
    print(f"wrote {len(episodes)} episodes ({ok} successful) to {path}")


def cmd_train(args):
    cfg = _config(args)
    out = Path(args.out)
    mode = args.mode or "hierarchical"
    data = _load_data(cfg, out, args.force)
    models = X.train(cfg, data, mode, callback=_progress())
    run_dir = out / mode
    X.save_models(run_dir, models, cfg)
    write_metrics(run_dir / "metrics.csv", models.log, cfg.hash())
    print(f"trained {mode} for {cfg.train_steps} steps; switch step: {models.switch_step}; "
          f"checkpoints in {run_dir}")


def cmd_eval(args):
    cfg = _config(args)
    out = Path(args.out)
    mode = args.mode or "hierarchical"
    if mode == "expert":
        models, run_dir = None, out / "expert"
        run_dir.mkdir(parents=True, exist_ok=True)
    else:
        run_dir = out / mode
        models = X.load_models(run_dir, cfg, args.force)
    res = X.evaluate(models, cfg, mode=args.runtime, expert=mode == "expert")
    lo, hi = res.interval
    trace_dir = run_dir / "traces"
    trace_dir.mkdir(exist_ok=True)
    for i, tr in enumerate(res.traces):
        write_trace(trace_dir / f"episode_{i:04d}.csv", tr, cfg.hash())
    _write_rows(run_dir / "eval.csv", ("mode", "runtime", "m_factor") + SWEEP_FIELDS,
                [(mode, args.runtime, cfg.m_factor, _fmt(res.rate), _fmt(lo), _fmt(hi), res.n,
                  _fmt(res.latency_ms), cfg.seed)], cfg.hash())
    print(f"{mode} ({args.runtime}): success {res.rate:.3f} "
          f"[95% CI {lo:.3f}, {hi:.3f}] over {res.n} episodes")


def _values(args, default, kind=int):
    raw = args.values or default
    try:
        return [kind(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --values list {raw!r}") from None


def cmd_sweep_bins(args):
    cfg = _config(args)
    out = Path(args.out)
    values = _values(args, "2,8,32,128")
    data = _load_data(cfg, out, args.force)
    rows = []
    for n in values:
        run_cfg = cfg.with_updates(n_bins=n)
        log.info("training n_bins=%d", n)
        models = X.train(run_cfg, data, "hierarchical", callback=_progress())
        res = X.evaluate(models, run_cfg)
        lo, hi = res.interval
        rows.append((n, _fmt(res.rate), _fmt(lo), _fmt(hi), res.n, _fmt(res.latency_ms), cfg.seed))
        print(f"n_bins={n}: success {res.rate:.3f} [{lo:.3f}, {hi:.3f}]")
    path = out / "sweep_bins.csv"
    _write_rows(path, ("n_bins",) + SWEEP_FIELDS, rows, cfg.hash())
    plot_csv(path, out)
    print(f"wrote {path}")


def cmd_sweep_horizon(args):
    cfg = _config(args)
    out = Path(args.out)
    values = _values(args, "1,2,3,4,5")
    too_long = [m for m in values if m * cfg.h_chunk > cfg.l_macro]
    if too_long:
        raise ConfigError(f"M*h_chunk exceeds l_macro={cfg.l_macro} for M in {too_long}")
    run_dir = out / "hierarchical"
    if (run_dir / "refiner.ckpt").exists():
        models = X.load_models(run_dir, cfg, args.force)
    else:
        models = X.train(cfg, _load_data(cfg, out, args.force), "hierarchical",
                         callback=_progress())
        X.save_models(run_dir, models, cfg)
    clock = ClockModel()
    rows = []
    for m in values:
        res = X.evaluate(models, cfg, m=m, clock=clock)
        lo, hi = res.interval
        rows.append((m, _fmt(res.rate), _fmt(lo), _fmt(hi), res.n, _fmt(res.latency_ms), cfg.seed,
                     _fmt(amortized_latency(clock, m))))
        print(f"M={m}: success {res.rate:.3f} [{lo:.3f}, {hi:.3f}] "
              f"latency {amortized_latency(clock, m):.1f} ms")
    path = out / "sweep_horizon.csv"
    _write_rows(path, ("m_factor",) + SWEEP_FIELDS + ("closed_form_ms",), rows, cfg.hash())
    plot_csv(path, out)
    print(f"wrote {path}")


def cmd_sweep_strategy(args):
    cfg = _config(args)
    out = Path(args.out)
    values = _values(args, ",".join(STRATEGIES), str)
    data = _load_data(cfg, out, args.force)
    rows = []
    for strategy in values:
        models = X.train(cfg, data, "hierarchical", strategy=strategy, callback=_progress())
        res = X.evaluate(models, cfg)
        lo, hi = res.interval
        rows.append((strategy, _fmt(res.rate), _fmt(lo), _fmt(hi), res.n, _fmt(res.latency_ms),
                     cfg.seed, models.switch_step if models.switch_step is not None else ""))
        print(f"{strategy}: success {res.rate:.3f} [{lo:.3f}, {hi:.3f}]")
    path = out / "sweep_strategy.csv"
    _write_rows(path, ("strategy",) + SWEEP_FIELDS + ("switch_step",), rows, cfg.hash())
    plot_csv(path, out)
    print(f"wrote {path}")


def cmd_latency_model(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clock = fit_clock(2, REPORTED_LATENCY_MS[2], 5, REPORTED_LATENCY_MS[5])
    print(f"fitted c_refine={clock.c_refine:.3f} ms, c_plan={clock.c_plan:.3f} ms")
    rows = []
    for m, reported in sorted(REPORTED_LATENCY_MS.items()):
        model = amortized_latency(clock, m)
        rows.append((m, _fmt(reported), _fmt(model), _fmt(model - reported)))
        print(f"M={m}: reported {reported:.1f} ms, model {model:.2f} ms")
    path = out / "latency_model.csv"
    _write_rows(path, ("m_factor", "reported_ms", "model_ms", "residual_ms"), rows, cfg.hash())
    print(f"wrote {path}")


def cmd_plot(args):
    if not args.csv:
        raise ConfigError("plot needs at least one CSV path")
    out = Path(args.out)
    for path in args.csv:
        for svg in plot_csv(path, out):
            print(f"wrote {svg}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "write expert demonstrations"),
    "train": (cmd_train, "train a hierarchical or monolithic policy"),
    "eval": (cmd_eval, "evaluate trained checkpoints"),
    "sweep-bins": (cmd_sweep_bins, "train and evaluate one model per bin count"),
    "sweep-horizon": (cmd_sweep_horizon, "evaluate one model across horizon factors"),
    "sweep-strategy": (cmd_sweep_strategy, "compare curriculum strategies"),
    "latency-model": (cmd_latency_model, "fit the amortized latency model"),
    "plot": (cmd_plot, "render CSV outputs to SVG"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridpolicy", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--force", action="store_true",
                       help="accept checkpoints or datasets whose config hash differs")
        if name == "train":
            p.add_argument("--mode", choices=X.MODES, default="hierarchical")
        elif name == "eval":
            p.add_argument("--mode", choices=X.MODES + ("expert",), default="hierarchical")
            p.add_argument("--runtime", choices=("sync", "async"), default="async")
        if name.startswith("sweep-"):
            p.add_argument("--values", help="comma separated setting values")
        if name == "plot":
            p.add_argument("csv", nargs="*", help="CSV files to plot")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, TrainingError, PlotError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
