"""Acceptance criteria 1-8.

Every test prints one ``CRITERION n: PASS|FAIL`` line (also repeated in the
terminal summary).  Criteria 1-3 train the full-size networks from ``configs/`` and
take tens of minutes on one core; deselect them with ``-m "not slow"``.  Set
``FLGAP_ACCEPTANCE_OUT`` to keep their output directories.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from flgap import ck, ntk
from flgap import config as C
from flgap import experiments as ex
from flgap import network as nw
from flgap import superposition as sp
from flgap import training as tr
from flgap.datasets import msp_check
from flgap.numerics import Spectrum, make_rng, sym_eig

from tests.helpers import (backward_fd_error, brute_force_msp, euler_flow_projections, explicit_ntk,
                           linearized_oracle_error, random_msp_instance, random_state)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    env = os.environ.get("FLGAP_ACCEPTANCE_OUT")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance")


def by_m(rows, **match):
    return {r["m"]: r for r in rows if all(r[k] == v for k, v in match.items())}


def sign_flips(values) -> int:
    signs = [int(np.sign(v)) for v in values]
    return sum(a != b for a, b in zip(signs, signs[1:]))


# --- 1-3: experiment reproductions ------------------------------------------------


@pytest.mark.slow
def test_criterion_1_fl_gap(out_root, criterion):
    cfg = C.load_config(CONFIGS / "msp_curve.toml")
    t0 = time.time()
    res = ex.run_learning_curve(cfg, out_root / "c1")
    minutes = (time.time() - t0) / 60
    rows = by_m(res.rows, arm="true")
    m_max = max(rows)
    last = rows[m_max]
    ratio = last["nn_error"] / last["ntk_error"]
    (mstar,) = ex.critical_sizes(res, 0.1).values()
    statuses = sorted({r["status"] for r in res.rows})
    ok = ratio < 0.1 and mstar is not None and mstar <= 4000
    criterion(1, ok, f"NN/NTK MSE at m={m_max}: {last['nn_error']:.3g}/{last['ntk_error']:.3g} = "
                     f"{ratio:.3g} (< 0.1); m* = {mstar} (finite, <= 4000); statuses {statuses}; "
                     f"{minutes:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_2_gamma_decoupling(out_root, criterion):
    cfg = C.load_config(CONFIGS / "gamma_sweep.toml")
    m_max = cfg.data.m_grid[-1]
    # only the largest grid size enters the criterion
    cfg = replace(cfg, data=replace(cfg.data, m_grid=(m_max,)))
    res = ex.run_gamma_sweep(cfg, out_root / "c2")
    g = {r["gamma"]: r for r in res.rows if not r["shuffled"]}
    hi, lo = g[1.0], g[0.01]
    factor = max(hi["nn_error"], lo["nn_error"]) / min(hi["nn_error"], lo["nn_error"])
    strength_ok = hi["s_nt"] > lo["s_nt"] + 0.05
    quality_ok = factor < 3
    criterion(2, strength_ok and quality_ok,
              f"m={m_max}: S_NT(g=1)={hi['s_nt']:.3f} vs S_NT(g=0.01)={lo['s_nt']:.3f} "
              f"(need gap > 0.05: {strength_ok}); NN MSE {hi['nn_error']:.3g} vs {lo['nn_error']:.3g}, "
              f"factor {factor:.3g} (need < 3: {quality_ok})")
    assert strength_ok and quality_ok


@pytest.mark.slow
def test_criterion_3_shuffle(out_root, criterion):
    cfg = C.load_config(CONFIGS / "shuffle_compare.toml")
    res = ex.run_shuffle_compare(cfg, out_root / "c3")
    true, shuf = by_m(res.rows, shuffled=False), by_m(res.rows, shuffled=True)
    mstar = ex.critical_sizes(res, cfg.metrics.critical_eps)[
        ("true", False, cfg.gammas[0], cfg.network.width, cfg.network.hidden_layers, cfg.train.base_lr)]
    below = [m for m in sorted(true) if mstar is None or m < mstar]
    diffs = [true[m]["s_ck"] - shuf[m]["s_ck"] for m in below]
    flips = sign_flips(diffs)
    m_max = max(true)
    gap_t, gap_s = true[m_max]["fl_gap"], shuf[m_max]["fl_gap"]
    sep_ok = gap_t >= 10 * abs(gap_s)
    flip_ok = flips >= 1
    criterion(3, flip_ok and sep_ok,
              f"m*={mstar}; S_CK(true)-S_CK(shuffled) below m* at m={below}: {diffs} "
              f"({flips} sign flips, need >= 1); gap at m={m_max}: true {gap_t:.3g} vs shuffled "
              f"{gap_s:.3g} (need true >= 10*|shuffled|: {sep_ok})")
    assert flip_ok and sep_ok


# --- 4: oracle equivalences --------------------------------------------------------


def test_criterion_4_oracles(criterion):
    results = {}

    t = time.time()
    worst = 0.0
    for dims, seed in [((3, 4, 1), 0), ((4, 10, 10, 3), 1), ((5, 16, 16, 16, 2), 2), ((6, 20, 20, 1), 3)]:
        s = random_state(dims, seed=seed, gamma=0.5)
        assert s.parameter_count <= 1000
        X = make_rng(seed).standard_normal((20, dims[0]))
        ref = explicit_ntk(s, X)
        worst = max(worst, float(np.abs(ntk.empirical_ntk(s, X, block=7) - ref).max() / np.abs(ref).max()))
    results["a"] = (worst <= 1e-10, f"NTK vs Jacobian {worst:.1e}", time.time() - t)

    t = time.time()
    fd = max(backward_fd_error(seed) for seed in range(3))
    results["b"] = (fd <= 1e-5, f"backward vs FD {fd:.1e}", time.time() - t)

    t = time.time()
    lin = linearized_oracle_error(n=50)
    results["c"] = (lin <= 1e-3, f"linearized vs kernel regression {lin:.1e}", time.time() - t)

    t = time.time()
    eul = max(euler_flow_projections(seed) for seed in range(3))
    results["d"] = (eul <= 1e-6, f"flow vs Euler {eul:.1e}", time.time() - t)

    t = time.time()
    rng = make_rng(2024)
    bad = 0
    for _ in range(1000):
        sets = random_msp_instance(rng, max_sets=8, max_dim=8)
        bad += msp_check(sets) != brute_force_msp(sets)
    results["e"] = (bad == 0, f"MSP check disagreements {bad}/1000", time.time() - t)

    ok = all(v[0] and v[2] <= 60 for v in results.values())
    criterion(4, ok, "; ".join(f"{k}) {v[1]} [{v[2]:.1f}s]" for k, v in results.items()))
    assert ok


# --- 5: formula invariants -----------------------------------------------------------


def test_criterion_5_invariants(criterion):
    rng = make_rng(5)
    fails = []
    for trial in range(50):
        A, B = rng.standard_normal((2, 15, 6))
        K1, K2 = A @ A.T, B @ B.T
        c = ntk.cka(K1, K2)
        if not 0.0 <= c <= 1.0:
            fails.append("cka range")
        if abs(ntk.cka(K1, K1) - 1.0) > 1e-12:
            fails.append("cka(K,K)")
        if ntk.cka(2.0 ** (trial % 7 - 3) * K1, K2) != c:
            fails.append("cka scale")

        Q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
        spec = Spectrum(np.sort(rng.uniform(0.1, 5, 12))[::-1], Q)
        prof = ck.feature_utilities(spec, rng.standard_normal(12), n_features=8)
        if np.any(np.diff(prof.cumulative) < 0) or prof.cumulative[-1] != 1.0:
            fails.append("utility cumulative")

        W = rng.standard_normal((7, 10))
        d = sp.feature_dimensionality(W)
        if not np.all((d > 0) & (d <= 1)):
            fails.append("D range")
        cp = ck.cumulative_power(sym_eig(K1), rng.standard_normal(15))
        if np.any(np.diff(cp.curve) < 0) or cp.curve[-1] != 1.0:
            fails.append("C monotone")
    K = rng.standard_normal((10, 10))
    K = K @ K.T
    f = rng.standard_normal(10)
    if not np.array_equal(ck.cumulative_power(sym_eig(8.0 * K), f).curve,
                          ck.cumulative_power(sym_eig(K), f).curve):
        fails.append("C scale")
    Qo, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    if not np.allclose(sp.feature_dimensionality(Qo), 1.0, rtol=1e-12, atol=0):
        fails.append("orthogonal D")
    if not np.array_equal(sp.feature_dimensionality(np.diag([2.0, 3.0, 0.5])), [1.0, 1.0, 1.0]):
        fails.append("axis-aligned D")
    dup = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [0.0, 0.0, 3.0]])
    if not np.array_equal(sp.feature_dimensionality(dup), [0.5, 0.5, 1.0]):
        fails.append("duplicate D")
    ok = not fails
    criterion(5, ok, "CKA range/identity/exact scale, utility monotone to 1, D in (0,1] with orthogonal=1 "
                     "and duplicate=1/2, cumulative power monotone to 1 and scale invariant"
                     + ("" if ok else f"; failures: {sorted(set(fails))}"))
    assert ok


# --- 6: muP statistics ----------------------------------------------------------------


def test_criterion_6_mup(criterion):
    cfg = nw.NetworkConfig(30, 400, 5)
    s = nw.init(cfg, 6)
    worst = 0.0
    for l, W in enumerate(s.weights):
        w = W.ravel()
        if w.size < 1000:
            continue
        w = w[:100_000] if w.size > 100_000 else w
        target = 1.0 / cfg.dims[l]
        se = target * math.sqrt(2.0 / (w.size - 1))
        worst = max(worst, abs(w.var(ddof=1) - target) / se)
    lrs = tr.per_layer_lrs(cfg, tr.TrainConfig(base_lr=0.05))
    lr_ok = lrs == [0.05] + [0.05 / 400] * 4
    ok = worst < 3 and lr_ok and all(np.all(b == 0) for b in s.biases)
    criterion(6, ok, f"init variance deviation {worst:.2f} SE (< 3); per-layer lrs exact: {lr_ok}")
    assert ok


# --- 7: power-law fit ---------------------------------------------------------------------


def test_criterion_7_power_law(criterion):
    m = np.array([250, 500, 1000, 2000, 4000], dtype=float)
    fit = ex.fit_power_law(m, 1.7 * m ** -0.83)
    exact = abs(fit.beta - 0.83) <= 1e-9 and abs(fit.C - 1.7) <= 1e-9 * 1.7
    grid = np.geomspace(100, 10_000, 9)
    betas = []
    for seed in range(20):
        noise = np.exp(0.05 * make_rng(seed).standard_normal(grid.size))
        betas.append(ex.fit_power_law(grid, 1.7 * grid ** -0.83 * noise).beta)
    worst = float(np.max(np.abs(np.array(betas) - 0.83)))
    ok = exact and worst <= 0.05
    criterion(7, ok, f"exact recovery to 1e-9: {exact}; 5% log-normal noise, 20 seeds, "
                     f"max |beta error| {worst:.3f} (<= 0.05)")
    assert ok


# --- 8: determinism -------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path, criterion):
    cfg = C.load_config(CONFIGS / "tiny.toml")
    same = {}
    for kind in ex.KINDS:
        a = ex.run_experiment(cfg, kind, tmp_path / kind / "a", plots=False)
        ex.run_experiment(cfg, kind, tmp_path / kind / "b", threads=2, plots=False)
        pa = (tmp_path / kind / "a" / "results.csv").read_bytes()
        pb = (tmp_path / kind / "b" / "results.csv").read_bytes()
        same[kind] = pa == pb and len(a.rows) > 0
    ok = all(same.values())
    criterion(8, ok, "byte-identical results.csv on rerun (1 vs 2 workers): "
                     + ", ".join(f"{k}={v}" for k, v in same.items()))
    assert ok
