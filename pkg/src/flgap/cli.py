"""Command-line entry point: ``flgap <subcommand> [--config F] [--out D] [--seed S] [--threads N]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _accel
from .config import ConfigError, ExperimentConfig, config_hash, load_config, save_config
from .experiments import ExperimentError

RUNNERS = {
    "learning-curve": "run_learning_curve",
    "shuffle-compare": "run_shuffle_compare",
    "gamma-sweep": "run_gamma_sweep",
    "sweep-mstar": "run_width_depth_sweep",
}


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", type=Path, default=d, help="experiment TOML file")
    p.add_argument("--out", type=Path, default=d, help="output directory")
    p.add_argument("--seed", type=int, default=d, help="base seed (overrides the config)")
    p.add_argument("--threads", type=int, default=d, help="worker processes for grid cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flgap", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a train/test dataset pair")
    p.add_argument("--m", type=int, help="training size (default: largest grid size)")
    p.add_argument("--test-size", type=int)
    p.add_argument("--shuffle", action="store_true", help="permute the training labels")
    p.add_argument("--csv", action="store_true", help="also export X/Y as CSV")

    p = sub.add_parser("train", parents=[common], help="train one network")
    p.add_argument("--m", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--data", type=Path, help="dataset directory from gen-data (train split)")
    p.add_argument("--shuffle", action="store_true")

    p = sub.add_parser("ntk", parents=[common], help="empirical NTK predictor of a checkpoint")
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory (default: fresh init)")
    p.add_argument("--data", type=Path, help="dataset directory holding train/ and test/")
    p.add_argument("--m", type=int)
    p.add_argument("--ridge", type=float, help="absolute ridge (default: 1e-6 tr(K)/m)")
    p.add_argument("--centered", action="store_true", help="regress residuals of the initial network")
    p.add_argument("--save-kernel", action="store_true")

    for name, helptext in (("learning-curve", "NN and NTK error versus m"),
                           ("shuffle-compare", "true versus shuffled labels"),
                           ("gamma-sweep", "metric grid per output scale"),
                           ("sweep-mstar", "critical size per width/depth/learning rate")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("fit-beta", parents=[common], help="power-law fit of learning curves")
    p.add_argument("--results", type=Path, help="results.csv (default: <out>/results.csv)")
    p.add_argument("--curve", type=Path, help="two-column CSV of m,error instead of results")

    p = sub.add_parser("plot", parents=[common], help="render SVG figures from results.csv")
    p.add_argument("--results", type=Path)

    sub.add_parser("info", parents=[common], help="print version, backend and config hash")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed), seeds=())
    if args.threads is not None:
        cfg = replace(cfg, threads=int(args.threads))
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    return cfg


def _out(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    from .datasets import make_train_test, save_dataset, shuffle_labels
    from .numerics import child_seed

    m = args.m or cfg.data.m_grid[-1]
    train, test = make_train_test(cfg.data_spec(), m, args.test_size or cfg.data.test_size,
                                  child_seed(cfg.seed, 101))
    if args.shuffle:
        train = shuffle_labels(train, child_seed(cfg.seed, 104, m))
    d = _out(cfg)
    save_dataset(train, d / "train", csv_export=args.csv)
    save_dataset(test, d / "test", csv_export=args.csv)
    print(f"wrote {len(train)} training and {len(test)} test samples to {d}")
    return 0


def _load_or_make(args, cfg: ExperimentConfig, m: int):
    from .datasets import load_dataset, make_train_test, shuffle_labels
    from .numerics import child_seed

    if args.data is not None:
        root = args.data
        if (root / "train").exists():
            train = load_dataset(root / "train")
            test = load_dataset(root / "test") if (root / "test").exists() else None
        else:
            train, test = load_dataset(root), None
        return train, test
    train, test = make_train_test(cfg.data_spec(), m, cfg.data.test_size, child_seed(cfg.seed, 101))
    if getattr(args, "shuffle", False):
        train = shuffle_labels(train, child_seed(cfg.seed, 104, m))
    return train, test


def cmd_train(args, cfg: ExperimentConfig) -> int:
    from .network import init, save_checkpoint
    from .numerics import child_seed
    from .training import save_report, train

    m = args.m or cfg.data.m_grid[-1]
    train_ds, test_ds = _load_or_make(args, cfg, m)
    gamma = args.gamma if args.gamma is not None else cfg.gammas[0]
    state0 = init(cfg.network_config(gamma), child_seed(cfg.seed, 102))
    tcfg = cfg.train_config(len(train_ds), child_seed(cfg.seed, 103, len(train_ds)))
    final, report = train(state0, train_ds, tcfg, test=test_ds)
    d = _out(cfg)
    save_checkpoint(state0, d / "init", {"config_hash": config_hash(cfg)})
    save_checkpoint(final, d / "final", {"config_hash": config_hash(cfg)})
    save_report(report, d / "report")
    msg = f"steps={report.steps} train_loss={report.final_train_loss:.6g}"
    if report.final_test_loss is not None:
        msg += f" test_loss={report.final_test_loss:.6g}"
    print(msg)
    return 0


def cmd_ntk(args, cfg: ExperimentConfig) -> int:
    from .network import init, load_checkpoint, predict
    from .ntk import default_ridge, empirical_ntk, ntk_predict, save_kernel
    from .numerics import child_seed, write_matrix
    from .training import gen_error

    m = args.m or cfg.data.m_grid[-1]
    train_ds, test_ds = _load_or_make(args, cfg, m)
    if args.checkpoint is not None:
        state = load_checkpoint(args.checkpoint)
    else:
        state = init(cfg.network_config(cfg.gammas[0]), child_seed(cfg.seed, 102))
    K = empirical_ntk(state, train_ds.X)
    ridge = default_ridge(K) if args.ridge is None else args.ridge
    d = _out(cfg)
    target = train_ds.Y - predict(state, train_ds.X) if args.centered else train_ds.Y
    if args.save_kernel:
        save_kernel(K, d / "kernel", {"config_hash": config_hash(cfg), "ridge": ridge,
                                      "checkpoint": str(args.checkpoint or "init"),
                                      "order": "W1,b1,...,WL,bL row-major"})
    if test_ds is None:
        print(f"kernel {K.shape[0]}x{K.shape[1]} ridge={ridge:.6g}")
        return 0
    pred = ntk_predict(K, target, empirical_ntk(state, test_ds.X, train_ds.X), ridge)
    if args.centered:
        pred = pred + predict(state, test_ds.X)
    write_matrix(d / "ntk_predictions.bin", pred)
    err = gen_error(pred, test_ds, cfg.train.loss)
    print(f"ntk_error={err!r} ridge={ridge:.6g} m={len(train_ds)}")
    return 0


def cmd_runner(args, cfg: ExperimentConfig) -> int:
    from . import experiments as ex

    d = _out(cfg)
    result = getattr(ex, RUNNERS[args.command])(cfg, d, plots=not args.no_plots)
    ms = ex.critical_sizes(result, cfg.metrics.critical_eps)
    counts: dict = {}
    for r in result.rows:
        counts[r["status"]] = counts.get(r["status"], 0) + 1
    print(f"{len(result.rows)} rows -> {d / 'results.csv'} status={json.dumps(counts, sort_keys=True)}")
    for key, v in ms.items():
        print(f"m* [{ex.curve_label(key)} {ex.arch_label(key)}] = {'none' if v is None else v}")
    return 0


def _results_path(args, cfg) -> Path:
    return args.results if args.results is not None else Path(cfg.out) / "results.csv"


def cmd_fit_beta(args, cfg: ExperimentConfig) -> int:
    from . import experiments as ex

    if args.curve is not None:
        with open(args.curve) as fh:
            recs = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
        if recs and not _is_number(recs[0][0]):
            recs = recs[1:]
        ms = [float(r[0]) for r in recs]
        es = [float(r[1]) for r in recs]
        fit = ex.fit_power_law(ms, es)
        print(f"C={fit.C!r} beta={fit.beta!r} residual={fit.residual!r} n={fit.n_points}")
        return 0
    result = ex.read_results(_results_path(args, cfg))
    fits = ex.power_law_fits(result)
    if not fits:
        print("no curve has three usable points", file=sys.stderr)
        return 1
    for (key, which), f in fits.items():
        print(f"{which} [{ex.curve_label(key)} {ex.arch_label(key)}]: C={f.C:.6g} beta={f.beta:.6g} "
              f"residual={f.residual:.3g} n={f.n_points}")
    return 0


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def cmd_plot(args, cfg: ExperimentConfig) -> int:
    from . import experiments as ex
    from .plots import emit_plots

    path = _results_path(args, cfg)
    result = ex.read_results(path)
    out = Path(args.out) if args.out is not None else path.parent
    for p in emit_plots(result, out, eps=cfg.metrics.critical_eps):
        print(p)
    return 0


def cmd_info(args, cfg: ExperimentConfig) -> int:
    print(f"backend={_accel.BACKEND} numpy={np.__version__} config_hash={config_hash(cfg)}")
    if args.out is not None:
        save_config(cfg, Path(args.out) / "config.toml")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "ntk": cmd_ntk, "fit-beta": cmd_fit_beta,
            "plot": cmd_plot, "info": cmd_info, **{k: cmd_runner for k in RUNNERS}}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, ExperimentError) as exc:
        print(f"flgap {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
