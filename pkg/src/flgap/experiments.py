"""Grid runners over training-set size, output scale, label shuffling and architecture.

Every grid cell trains a fresh network, builds the initialization-NTK predictor on
the same data and evaluates the strength metrics.  Cells are independent pure
computations: they can run in worker processes and are collected in grid order,
so the emitted tables do not depend on the thread count.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w
from threadpoolctl import threadpool_limits

from . import ck as ckm
from . import superposition as sp
from .config import ExperimentConfig, config_hash, save_config
from .datasets import make_train_test, shuffle_labels
from .network import init, predict
from .ntk import cka, critical_m, empirical_ntk, ntk_predict
from .numerics import NumericsError, child_seed, make_rng, sym_eig
from .training import TrainingDiverged, gen_error, train

# stream keys for the per-cell seeds
_DATA, _INIT, _BATCH, _SHUFFLE, _PROBE = 101, 102, 103, 104, 105

BASE_COLUMNS = ["run_id", "m", "gamma", "shuffled", "repeat", "nn_error", "ntk_error", "fl_gap",
                "s_nt", "s_ck"]
TAIL_COLUMNS = ["s_ck_target", "ck_captured", "train_loss", "arm", "width", "hidden_layers",
                "base_lr", "epochs", "steps", "seed", "status"]
_INT_COLUMNS = {"m", "repeat", "s_ck", "s_ck_target", "width", "hidden_layers", "epochs", "steps",
                "seed"}
_STR_COLUMNS = {"run_id", "arm", "status"}
_BOOL_COLUMNS = {"shuffled"}

KINDS = ("learning-curve", "shuffle-compare", "gamma-sweep", "sweep-mstar")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class Cell:
    index: int
    m: int
    gamma: float
    arm: str
    shuffled: bool
    repeat: int
    seed: int
    width: int
    hidden_layers: int
    base_lr: float

    @property
    def run_id(self) -> str:
        s = "s" if self.shuffled else "t"
        return (f"m{self.m}-g{self.gamma:g}-{self.arm}{s}-w{self.width}-h{self.hidden_layers}"
                f"-lr{self.base_lr:g}-r{self.repeat}")


@dataclass(frozen=True)
class PowerLawFit:
    C: float
    beta: float
    residual: float  # root-mean-square residual in log space
    n_points: int


@dataclass
class ExperimentResult:
    kind: str
    config_hash: str
    columns: list
    rows: list
    repeats: int = 1
    artifacts: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for r in self.rows:
            if _finite(r["nn_error"]) and _finite(r["ntk_error"]):
                if r["fl_gap"] != r["ntk_error"] - r["nn_error"]:
                    raise ExperimentError(f"{r['run_id']}: fl_gap disagrees with its components")

    def groups(self) -> dict:
        """Rows keyed by curve identity ``(arm, shuffled, gamma, width, hidden_layers, base_lr)``."""
        out: dict = {}
        for r in self.rows:
            key = (r["arm"], r["shuffled"], r["gamma"], r["width"], r["hidden_layers"], r["base_lr"])
            out.setdefault(key, []).append(r)
        return out


def _finite(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)


# --- power-law fits -----------------------------------------------------------


def fit_power_law(m_values, errors) -> PowerLawFit:
    """Least-squares fit of ``log e = log C - beta log m``."""
    m = np.asarray(m_values, dtype=np.float64).ravel()
    e = np.asarray(errors, dtype=np.float64).ravel()
    if m.shape != e.shape:
        raise ValueError("m_values and errors differ in length")
    if m.size < 3:
        raise ValueError("a power-law fit needs at least 3 points")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(e))):
        raise ValueError("inputs must be finite")
    if np.any(m <= 0) or np.any(e <= 0):
        raise ValueError("inputs must be strictly positive")
    A = np.column_stack([np.ones_like(m), -np.log(m)])
    y = np.log(e)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return PowerLawFit(float(np.exp(coef[0])), float(coef[1]),
                       float(np.sqrt(np.mean(resid ** 2))), int(m.size))


# --- grid construction ----------------------------------------------------------


def _arms(cfg: ExperimentConfig, kind: str) -> list[tuple[float, str, bool]]:
    g0 = cfg.gammas[0]
    if kind == "learning-curve" or kind == "sweep-mstar":
        return [(g0, "true", False)]
    if kind == "shuffle-compare":
        return [(g0, "true", False), (g0, "shuffled", cfg.shuffle)]
    if kind == "gamma-sweep":
        if len(cfg.gammas) < 2:
            raise ExperimentError("a gamma sweep needs at least two gamma values")
        arms = []
        for g in cfg.gammas:
            arms.append((g, "true", False))
            if cfg.shuffle:
                arms.append((g, "shuffled", True))
        return arms
    raise ExperimentError(f"unknown experiment kind {kind!r}")


def _architectures(cfg: ExperimentConfig, kind: str) -> list[tuple[int, int, float]]:
    n, t, s = cfg.network, cfg.train, cfg.sweep
    if kind != "sweep-mstar":
        return [(n.width, n.hidden_layers, t.base_lr)]
    widths = s.widths or (n.width,)
    depths = s.hidden_layers or (n.hidden_layers,)
    lrs = s.base_lrs or (t.base_lr,)
    return [(int(w), int(h), float(lr)) for w in widths for h in depths for lr in lrs]


def build_cells(cfg: ExperimentConfig, kind: str) -> list[Cell]:
    cells = []
    for width, hidden, lr in _architectures(cfg, kind):
        for gamma, arm, shuffled in _arms(cfg, kind):
            for r, seed in enumerate(cfg.repeat_seeds):
                for m in cfg.data.m_grid:
                    cells.append(Cell(len(cells), int(m), float(gamma), arm, bool(shuffled), r,
                                      int(seed), width, hidden, lr))
    return cells


# --- one cell -------------------------------------------------------------------


def _nan_row(cfg: ExperimentConfig, cell: Cell, n_layers: int) -> dict:
    row = {
        "run_id": cell.run_id, "m": cell.m, "gamma": cell.gamma, "shuffled": cell.shuffled,
        "repeat": cell.repeat, "nn_error": math.nan, "ntk_error": math.nan, "fl_gap": math.nan,
        "s_nt": math.nan, "s_ck": math.nan,
    }
    for l in range(1, n_layers + 1):
        row[f"zero_frac_l{l}"] = math.nan
    row.update({
        "s_ck_target": math.nan, "ck_captured": math.nan, "train_loss": math.nan, "arm": cell.arm,
        "width": cell.width, "hidden_layers": cell.hidden_layers, "base_lr": cell.base_lr,
        "epochs": 0, "steps": 0, "seed": cell.seed, "status": "ok",
    })
    return row


def _probe_index(m: int, cap: int, seed: int) -> np.ndarray:
    if m <= cap:
        return np.arange(m)
    return np.sort(make_rng(seed).choice(m, size=cap, replace=False))


def run_cell(cfg: ExperimentConfig, cell: Cell, n_layers: int) -> tuple[dict, dict]:
    """Train and measure one grid point; returns the result row and side artifacts."""
    with threadpool_limits(limits=1):
        return _run_cell(cfg, cell, n_layers)


def _run_cell(cfg: ExperimentConfig, cell: Cell, n_layers: int) -> tuple[dict, dict]:
    mt = cfg.metrics
    row = _nan_row(cfg, cell, n_layers)
    art: dict = {}
    seed = cell.seed
    train_ds, test_ds = make_train_test(cfg.data_spec(), cell.m, cfg.data.test_size,
                                        child_seed(seed, _DATA))
    if cell.shuffled:
        # only the training labels move; the test set keeps the true target
        train_ds = shuffle_labels(train_ds, child_seed(seed, _SHUFFLE, cell.m))
    net = cfg.network_config(cell.gamma, cell.width, cell.hidden_layers)
    state0 = init(net, child_seed(seed, _INIT))
    tcfg = cfg.train_config(cell.m, child_seed(seed, _BATCH, cell.m), cell.base_lr)
    row["epochs"] = tcfg.epochs
    try:
        final, report = train(state0, train_ds, tcfg)
    except TrainingDiverged as exc:
        row["status"] = "diverged"
        row["steps"] = int(exc.record["step"])
        return row, art
    row["steps"] = report.steps
    row["train_loss"] = report.final_train_loss
    row["nn_error"] = gen_error(final, test_ds, cfg.train.loss)
    var_y = float(np.var(train_ds.Y))
    if var_y > 0 and report.final_train_loss > mt.slow_loss_fraction * var_y:
        row["status"] = "slow"

    K0 = None
    if mt.ntk and cell.m <= mt.ntk_max_m:
        try:
            K0 = empirical_ntk(state0, train_ds.X)
            Kx = empirical_ntk(state0, test_ds.X, train_ds.X)
            ridge = mt.ridge_scale * float(np.trace(K0)) / cell.m
            target = train_ds.Y
            if mt.ntk_centered:
                target = target - predict(state0, train_ds.X)
            pred = ntk_predict(K0, target, Kx, ridge)
            if mt.ntk_centered:
                pred = pred + predict(state0, test_ds.X)
            row["ntk_error"] = gen_error(pred, test_ds, cfg.train.loss)
            row["fl_gap"] = row["ntk_error"] - row["nn_error"]
        except (NumericsError, MemoryError) as exc:
            row["status"] = "ntk_failed"
            art["error"] = str(exc)

    if mt.ntk:
        idx = _probe_index(cell.m, mt.probe_cap, child_seed(seed, _PROBE, cell.m))
        Xp = train_ds.X[idx]
        Kp0 = K0[np.ix_(idx, idx)] if K0 is not None else empirical_ntk(state0, Xp)
        row["s_nt"] = 1.0 - cka(Kp0, empirical_ntk(final, Xp))
        if mt.cumulative_power:
            try:
                cp = ckm.cumulative_power(sym_eig(Kp0), train_ds.Y[idx, 0])
                art["cumpower"] = cp
            except ckm.DegenerateProfile:
                pass

    X_eval = test_ds.X[:mt.ck_cap]
    if mt.ck:
        spec = sym_eig(ckm.readout_ck(final, X_eval))
        f = predict(final, X_eval)[:, 0]
        try:
            prof = ckm.feature_utilities(spec, f, n_features=cell.width, eps=mt.ck_eps)
            row["s_ck"] = prof.strength
            row["ck_captured"] = prof.captured_fraction
            art["utilities"] = prof
        except ckm.DegenerateProfile:
            pass
        try:
            tprof = ckm.target_utilities(spec, test_ds.Y[:mt.ck_cap, 0], n_features=cell.width,
                                         eps=mt.ck_eps)
            row["s_ck_target"] = tprof.strength
        except ckm.DegenerateProfile:
            pass
        art["spectrum"] = spec.eigenvalues[:cell.width].copy()

    if mt.superposition:
        reports = []
        for l in range(1, cell.hidden_layers + 1):
            rep = sp.layer_report(final, X_eval, l, n_bins=mt.hist_bins, tol=mt.zero_tol)
            row[f"zero_frac_l{l}"] = rep.zero_fraction
            reports.append(rep)
        art["dims"] = reports
    return row, art


def _cell_task(args):
    cfg, cell, n_layers = args
    return run_cell(cfg, cell, n_layers)


def _execute(cfg: ExperimentConfig, cells: list[Cell], n_layers: int, threads: int) -> list:
    jobs = [(cfg, c, n_layers) for c in cells]
    if threads <= 1 or len(cells) <= 1:
        return [_cell_task(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(cells))) as pool:
        # map preserves submission order, so collection is deterministic
        return list(pool.map(_cell_task, jobs))


# --- runners ----------------------------------------------------------------------


def columns_for(n_layers: int) -> list[str]:
    return BASE_COLUMNS + [f"zero_frac_l{l}" for l in range(1, n_layers + 1)] + TAIL_COLUMNS


def run_experiment(cfg: ExperimentConfig, kind: str, out_dir=None, threads: int | None = None,
                   plots: bool = True) -> ExperimentResult:
    """Run every cell of ``kind`` and (when ``out_dir`` is given) write all outputs there."""
    if kind not in KINDS:
        raise ExperimentError(f"unknown experiment kind {kind!r}")
    cells = build_cells(cfg, kind)
    n_layers = max(c.hidden_layers for c in cells)
    outcomes = _execute(cfg, cells, n_layers, cfg.threads if threads is None else threads)
    rows = [r for r, _ in outcomes]
    result = ExperimentResult(kind, config_hash(cfg), columns_for(n_layers), rows,
                              repeats=len(cfg.repeat_seeds),
                              artifacts={c.run_id: a for c, (_, a) in zip(cells, outcomes)})
    if out_dir is not None:
        write_outputs(result, cfg, out_dir, plots=plots)
    return result


def run_learning_curve(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(cfg, "learning-curve", out_dir, **kw)


def run_shuffle_compare(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(cfg, "shuffle-compare", out_dir, **kw)


def run_gamma_sweep(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(cfg, "gamma-sweep", out_dir, **kw)


def run_width_depth_sweep(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    return run_experiment(cfg, "sweep-mstar", out_dir, **kw)


# --- aggregation ------------------------------------------------------------------


_AGG_FIELDS = ("nn_error", "ntk_error", "fl_gap", "s_nt", "s_ck")


def aggregate(result: ExperimentResult) -> list[dict]:
    """Median with min/max band over repeats, per curve and grid size (status=ok rows only)."""
    out = []
    for key, rows in result.groups().items():
        for m in sorted({r["m"] for r in rows}):
            sel = [r for r in rows if r["m"] == m]
            ok = [r for r in sel if r["status"] == "ok"]
            rec = {"arm": key[0], "shuffled": key[1], "gamma": key[2], "width": key[3],
                   "hidden_layers": key[4], "base_lr": key[5], "m": m, "repeats": len(sel),
                   "n_ok": len(ok)}
            for f in _AGG_FIELDS:
                vals = np.array([float(r[f]) for r in ok], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                if vals.size:
                    rec[f"{f}_median"] = float(np.median(vals))
                    rec[f"{f}_min"] = float(vals.min())
                    rec[f"{f}_max"] = float(vals.max())
                else:
                    rec[f"{f}_median"] = rec[f"{f}_min"] = rec[f"{f}_max"] = math.nan
            out.append(rec)
    return out


def _curve_key(rec: dict) -> tuple:
    return (rec["arm"], rec["shuffled"], rec["gamma"], rec["width"], rec["hidden_layers"],
            rec["base_lr"])


def curves(result: ExperimentResult) -> dict:
    by: dict = {}
    for rec in aggregate(result):
        by.setdefault(_curve_key(rec), []).append(rec)
    return by


def critical_sizes(result: ExperimentResult, eps: float = 0.1) -> dict:
    """m* for each curve from the median errors; ``None`` where the NN never wins by ``eps``."""
    out = {}
    for key, recs in curves(result).items():
        nn = [(r["m"], r["nn_error_median"]) for r in recs]
        kt = [(r["m"], r["ntk_error_median"]) for r in recs]
        out[key] = critical_m(nn, kt, eps)
    return out


def power_law_fits(result: ExperimentResult) -> dict:
    """``{(curve, "nn"|"ntk"): PowerLawFit}`` for curves with at least 3 usable points."""
    out = {}
    for key, recs in curves(result).items():
        for which in ("nn", "ntk"):
            pts = [(r["m"], r[f"{which}_error_median"]) for r in recs
                   if _finite(r[f"{which}_error_median"]) and r[f"{which}_error_median"] > 0]
            if len(pts) >= 3:
                ms, es = zip(*pts)
                out[(key, which)] = fit_power_law(ms, es)
    return out


def curve_label(key: tuple) -> str:
    arm, shuffled, gamma, width, hidden, lr = key
    lab = f"{'shuffled' if shuffled else 'true'} gamma={gamma:g}"
    return lab if arm == "true" or shuffled else f"{lab} ({arm} arm)"


def arch_label(key: tuple) -> str:
    return f"w{key[3]} h{key[4]} lr{key[5]:g}"


# --- results.csv ------------------------------------------------------------------


def _fmt(col: str, v) -> str:
    if col in _BOOL_COLUMNS:
        return "1" if v else "0"
    if col in _STR_COLUMNS:
        return str(v)
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    if col in _INT_COLUMNS:
        return str(int(v))
    return repr(float(v))


def _parse(col: str, s: str):
    if col in _BOOL_COLUMNS:
        return s == "1"
    if col in _STR_COLUMNS:
        return s
    if s == "nan":
        return math.nan
    if col in _INT_COLUMNS:
        return int(s)
    return float(s)


def header_line(kind: str, chash: str, repeats: int) -> str:
    return f"# flgap kind={kind} config_hash={chash} repeats={repeats}\n"


def results_to_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    buf.write(header_line(result.kind, result.config_hash, result.repeats))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(result.columns)
    for r in result.rows:
        w.writerow([_fmt(c, r[c]) for c in result.columns])
    return buf.getvalue()


def results_from_csv(text: str) -> ExperimentResult:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# flgap "):
        raise ExperimentError("missing results header line")
    meta = dict(tok.split("=", 1) for tok in lines[0][2:].split()[1:])
    reader = csv.reader(lines[1:])
    columns = next(reader)
    missing = [c for c in BASE_COLUMNS if c not in columns]
    if missing:
        raise ExperimentError(f"results table lacks columns {missing}")
    rows = [{c: _parse(c, s) for c, s in zip(columns, rec)} for rec in reader if rec]
    return ExperimentResult(meta["kind"], meta["config_hash"], columns, rows,
                            repeats=int(meta.get("repeats", 1)))


def write_results(result: ExperimentResult, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        fh.write(results_to_csv(result))
    return p


def read_results(path) -> ExperimentResult:
    return results_from_csv(Path(path).read_text())


def _write_csv(path: Path, head: str, columns: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(head)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell_text(r[c]) for c in columns])


def _cell_text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_outputs(result: ExperimentResult, cfg: ExperimentConfig, out_dir, plots: bool = True) -> dict:
    """results.csv, summary.csv, mstar.csv, fits.csv, the config and (optionally) SVG plots."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    head = header_line(result.kind, result.config_hash, result.repeats)
    paths = {"results": write_results(result, d / "results.csv")}
    save_config(cfg, d / "config.toml")
    paths["config"] = d / "config.toml"

    agg = aggregate(result)
    if agg:
        cols = list(agg[0].keys())
        _write_csv(d / "summary.csv", head, cols, agg)
        paths["summary"] = d / "summary.csv"

    mstar = critical_sizes(result, cfg.metrics.critical_eps)
    mrows = []
    for key, ms in mstar.items():
        rows = result.groups()[key]
        mrows.append({"arm": key[0], "shuffled": key[1], "gamma": key[2], "width": key[3],
                      "hidden_layers": key[4], "base_lr": key[5], "mstar": ms,
                      "eps": cfg.metrics.critical_eps,
                      "n_slow": sum(r["status"] == "slow" for r in rows),
                      "n_failed": sum(r["status"] not in ("ok", "slow") for r in rows)})
    _write_csv(d / "mstar.csv", head, list(mrows[0].keys()), mrows)
    paths["mstar"] = d / "mstar.csv"

    fits = power_law_fits(result)
    frows = [{"arm": k[0], "shuffled": k[1], "gamma": k[2], "width": k[3], "hidden_layers": k[4],
              "base_lr": k[5], "curve": which, "C": f.C, "beta": f.beta, "residual": f.residual,
              "n_points": f.n_points} for (k, which), f in fits.items()]
    fcols = ["arm", "shuffled", "gamma", "width", "hidden_layers", "base_lr", "curve", "C", "beta",
             "residual", "n_points"]
    _write_csv(d / "fits.csv", head, fcols, frows)
    paths["fits"] = d / "fits.csv"

    if cfg.metrics.save_artifacts:
        _write_artifacts(result, d / "cells")
    if plots:
        from .plots import emit_plots

        paths["plots"] = emit_plots(result, d, eps=cfg.metrics.critical_eps)
    (d / "summary.toml").write_text(tomli_w.dumps({
        "kind": result.kind, "config_hash": result.config_hash, "repeats": result.repeats,
        "rows": len(result.rows),
        "status_counts": _status_counts(result),
        "mstar": {curve_label(k) + " " + arch_label(k): ("none" if v is None else v)
                  for k, v in mstar.items()},
    }))
    paths["summary_toml"] = d / "summary.toml"
    return paths


def _status_counts(result: ExperimentResult) -> dict:
    out: dict = {}
    for r in result.rows:
        out[r["status"]] = out.get(r["status"], 0) + 1
    return dict(sorted(out.items()))


def _write_artifacts(result: ExperimentResult, root: Path) -> None:
    for run_id, art in result.artifacts.items():
        if not art:
            continue
        d = root / run_id
        d.mkdir(parents=True, exist_ok=True)
        if "utilities" in art:
            ckm.write_utilities_csv(d / "utilities.csv", art["utilities"])
        if "spectrum" in art:
            with open(d / "ck_spectrum.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["mode", "eigenvalue"])
                for k, v in enumerate(art["spectrum"], start=1):
                    w.writerow([k, repr(float(v))])
        if "cumpower" in art:
            ckm.write_cumpower_csv(d / "cumpower.csv", art["cumpower"])
        if "dims" in art:
            sp.write_dims_csv(d / "dims.csv", art["dims"])
            sp.write_hist_csv(d / "hist.csv", art["dims"])
        if "error" in art:
            (d / "error.txt").write_text(art["error"] + "\n")
