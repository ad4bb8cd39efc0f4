"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see conftest.py). Run with ``pytest tests/test_acceptance.py -v``.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import spearmanr

from oracles import brute_force_isotonic, pav_instance
from shiftcal import autodiff as ad
from shiftcal.backbone import BackboneConfig, build_model, forward, predict_numpy
from shiftcal.data import stack, true_noise_sd
from shiftcal.infer import ALPHA_BY_Z, Predictions, ensemble_predict, mcd_predict
from shiftcal.metrics import (REPORTED_EMD, compare_methods, expected_gaussian_winkler, mae,
                              summary_score, surrogate_emd_table)
from shiftcal.pipeline import DEMO_CONFIG, run_pipeline
from shiftcal.recalib import apply_recalibration, fit_cp, fit_recalibration, pav
from shiftcal.train import gnll_loss

RESULTS = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ----------------------------------------------------------------- criterion 1


def test_c1_surrogate_emd_table():
    start = time.perf_counter()
    rows = surrogate_emd_table(n=10**6, seed=0)
    elapsed = time.perf_counter() - start
    assert len(rows) == 8
    worst_rep = max(abs(emd - rep) for _, _, emd, _, rep in rows)
    worst_ana = max(abs(emd - ana) for _, _, emd, ana, _ in rows)
    for name, target, _, _, rep in rows:
        assert REPORTED_EMD[name][target] == rep
    cells = ", ".join(f"{d} {t} {e:.2f}/{r:.2f}" for d, t, e, _, r in rows)
    record(1, "Gaussian-surrogate EMD table",
           worst_rep <= 0.5 and worst_ana <= 0.1 and elapsed < 30,
           f"max |emd-reported| {worst_rep:.3f} (<=0.5), max |emd-analytic| {worst_ana:.4f} "
           f"(<=0.1), {elapsed:.1f}s (<30s); {cells}")


# ----------------------------------------------------------------- criterion 2


@contextmanager
def frozen_kinks():
    """Record ReLU masks and max-pool choices on the first forward, replay them
    afterwards. Inside a region where no kink is crossed this is the loss
    itself; across a kink it is the smooth piece that contains the centre."""
    relu, max_pool = ad.relu, ad.max_pool1d
    state = {"record": True, "patterns": [], "pos": 0, "crossed": False}

    def pattern(kind, value):
        if state["record"]:
            state["patterns"].append(value)
            return value
        stored = state["patterns"][state["pos"]]
        state["pos"] += 1
        if not np.array_equal(stored, value):
            state["crossed"] = True
        return stored

    def frozen_relu(x):
        mask = pattern("relu", x.data > 0)
        return ad.Tensor(x.data * mask)

    def frozen_pool(x, kernel=3, stride=2, padding=1):
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf)
        win = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
        arg = pattern("pool", win.argmax(axis=3))
        return ad.Tensor(np.take_along_axis(win, arg[..., None], axis=3)[..., 0])

    def replay():
        state["record"], state["pos"] = False, 0

    ad.relu, ad.max_pool1d = frozen_relu, frozen_pool
    try:
        yield state, replay
    finally:
        ad.relu, ad.max_pool1d = relu, max_pool


def test_c2_backbone_gradients_match_finite_differences():
    from test_backbone import randomize
    model = randomize(build_model(BackboneConfig(scale="desk", head="gaussian"), 0), 1)
    assert model.config.block_counts == [3, 4, 6, 3]
    h, n_coords = 1e-4, 2
    worst, n_checks, n_crossed = 0.0, 0, 0

    def loss(x, y):
        saved = {k: v.copy() for k, v in model.buffers.items()}
        mu, log_var = forward(model, x, "train")
        for k, v in saved.items():
            model.buffers[k][:] = v
        return gnll_loss(mu, log_var, ad.Tensor(y))

    start = time.perf_counter()
    for batch in range(3):
        rng = np.random.default_rng([31, batch])
        x, y = rng.normal(size=(4, 64)), rng.normal(size=4)
        with ad.Tape() as tape:
            value = loss(x, y)
        grads = ad.backward(tape, value)
        for name, p in model.params.items():
            g = grads[p]
            d = rng.standard_normal(p.data.shape)
            directions = [d / np.linalg.norm(d)]  # unit vectors: the step is exactly h
            for _ in range(n_coords):
                e = np.zeros(p.data.shape)
                e[tuple(int(rng.integers(s)) for s in p.data.shape)] = 1.0
                directions.append(e)
            for d in directions:
                analytic = float(np.sum(g * d))
                with frozen_kinks() as (state, replay):
                    loss(x, y)
                    replay()
                    p.data += h * d
                    up = float(loss(x, y).data)
                    replay()
                    p.data -= 2 * h * d
                    down = float(loss(x, y).data)
                    p.data += h * d
                numeric = (up - down) / (2 * h)
                # the floor keeps exactly-zero gradients (batch-norm invariances)
                # from turning FD round-off (~1e-12) into a large ratio
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                worst = max(worst, rel)
                n_checks += 1
                n_crossed += state["crossed"]
    elapsed = time.perf_counter() - start
    record(2, "backbone GNLL gradients vs central differences (h=1e-4)", worst < 1e-4,
           f"{len(model.params)} parameter tensors, {model.n_parameters()} scalars, 3 batches "
           f"of 4, {n_checks} checks (random unit direction + {n_coords} coordinates per tensor), "
           f"max rel err {worst:.2e} (<1e-4); {n_crossed} windows straddled a ReLU/max-pool "
           f"kink and were evaluated on the centre's smooth piece; {elapsed:.0f}s")


# ----------------------------------------------------------------- criterion 3


def test_c3_conformal_coverage():
    alpha, cover = 0.0455, []
    for rep in range(200):
        rng = np.random.default_rng([303, rep])
        n = 2500
        mu = rng.normal(size=n)
        var = rng.uniform(0.2, 3.0, n)
        # misspecified noise: heavier tails and scale than the predicted variance
        y = mu + 1.7 * np.sqrt(var) * rng.standard_t(5, n)
        cal, test = slice(0, 500), slice(500, n)
        q = fit_cp([(m, v, t) for m, v, t in zip(mu[cal], var[cal], y[cal])], [alpha]).q_alpha[alpha]
        cover.append(np.mean(np.abs(y[test] - mu[test]) <= q * np.sqrt(var[test])))
    m = float(np.mean(cover))
    record(3, "split-conformal coverage at alpha=0.0455", 0.945 <= m <= 0.975,
           f"mean coverage {m:.4f} over 200 replicates (n_calib=500, n_test=2000), "
           f"target [0.945, 0.975]")


# ----------------------------------------------------------------- criterion 4


@pytest.mark.slow
def test_c4_heteroscedastic_recovery(desk_task):
    ck = desk_task.model("gnll_full")
    assert ck.model.config.scale == "desk" and ck.model.config.block_counts == [3, 4, 6, 3]
    x, y = desk_task.arrays("test")
    mu, var = predict_numpy(ck.model, x)
    sd_true = true_noise_sd(x, desk_task.id_spec)
    rho = spearmanr(var, sd_true ** 2)[0]
    preds = Predictions(np.arange(len(y)), y, mu, var, np.zeros_like(var))
    score = summary_score(preds)
    optimum = np.mean([expected_gaussian_winkler(sd_true, z, ALPHA_BY_Z[z]).mean()
                       for z in (1, 2)])
    record(4, "heteroscedastic recovery (GNLL, desk scale)",
           rho >= 0.8 and score <= 2 * optimum,
           f"Spearman {rho:.3f} (>=0.8) on {len(y)} held-out segments; summary Winkler "
           f"{score:.3f} vs calibrated optimum {optimum:.3f} (ratio {score / optimum:.2f}, <=2)")


# ----------------------------------------------------------------- criterion 5


@pytest.mark.slow
def test_c5_recalibration_direction(desk_task):
    xc, yc = desk_task.arrays("calib")
    xs, ys = stack(desk_task.shifted)
    lines, ok = [], True
    for name, rule in (("mse_mcd", "strict"), ("gnll_mcd", "within5")):
        model = desk_task.model(name).model
        calib = mcd_predict(model, xc, T=20, seed=0, y_true=yc)
        test = mcd_predict(model, xs, T=20, seed=1, y_true=ys)
        bench = summary_score(test)
        parts = []
        for method in ("cp", "ts", "ir"):
            after = summary_score(apply_recalibration(
                method, fit_recalibration(method, calib), test))
            ok &= after < bench if rule == "strict" else after <= 1.05 * bench
            parts.append(f"{method} {after:.3f}")
        label = "MSE+MCD" if name == "mse_mcd" else "GNLL+MCD"
        lines.append(f"{label} benchmark {bench:.3f} -> " + ", ".join(parts))
    record(5, "recalibration on the shifted test set", ok,
           "; ".join(lines) + " (MSE: each must be lower; GNLL: each <= 1.05x benchmark)")


# ----------------------------------------------------------------- criterion 6


@pytest.mark.slow
def test_c6_ensemble(desk_task):
    members = desk_task.ensemble(5)
    x, y = desk_task.arrays("test")
    ens = ensemble_predict([m.model for m in members], x, y_true=y)
    member_maes = [mae(ensemble_predict([m.model], x, y_true=y)) for m in members]
    additive = bool(np.array_equal(ens.var_total, ens.var_ale + ens.var_epi))
    record(6, "K=5 deep ensemble", mae(ens) <= np.median(member_maes) and additive,
           f"ensemble test MAE {mae(ens):.4f} vs median member {np.median(member_maes):.4f} "
           f"(members {', '.join(f'{v:.4f}' for v in member_maes)}); "
           f"var_total == var_ale + var_epi bitwise on all {len(y)}: {additive}")


# ----------------------------------------------------------------- criterion 7


def test_c7_tiering_sanity():
    rng = np.random.default_rng(707)
    n = 600
    y = rng.normal(size=n)
    sigma = rng.uniform(0.5, 1.5, n)
    mu = y + sigma * rng.standard_normal(n)
    base = Predictions(np.arange(n), y, mu, sigma ** 2, np.zeros(n))
    twice = Predictions(np.arange(n), y, y + 2 * (mu - y), sigma ** 2, np.zeros(n))
    methods = {"A": base, "A_copy": base, "B_x2": twice}
    details, ok = [], True
    for metric_name, metric in (("mae", mae), ("summary", summary_score)):
        t = compare_methods(methods, metric, b=1000, seed=5)
        again = compare_methods(methods, metric, b=1000, seed=5)
        _, lo, hi = t.delta["B_x2"]
        this = (set(t.tier1) == {"A", "A_copy"} and t.tier2 == ["B_x2"] and lo > 0
                and t.delta["A_copy"] == (0.0, 0.0, 0.0) and again == t)
        ok &= this
        details.append(f"{metric_name}: tier1 {t.tier1}, tier2 {t.tier2}, "
                       f"delta CI [{lo:.3f}, {hi:.3f}], rerun identical {again == t}")
    record(7, "tiering sanity", ok, "; ".join(details))


# ----------------------------------------------------------------- criterion 8


def test_c8_pav_exact():
    worst, sizes = 0.0, []
    for trial in range(100):
        yv, w = pav_instance(trial)
        sizes.append(len(yv))
        worst = max(worst, float(np.max(np.abs(pav(yv, w) - brute_force_isotonic(yv, w)))))
    record(8, "PAV equals brute-force isotonic fit", worst <= 1e-9,
           f"100 instances, n in [{min(sizes)}, {max(sizes)}], weighted and tied cases, "
           f"max |diff| {worst:.1e} (<=1e-9)")


# ----------------------------------------------------------------- criterion 9


@pytest.mark.slow
def test_c9_pipeline_determinism(tmp_path):
    times = []
    for run in ("a", "b"):
        start = time.perf_counter()
        run_pipeline(DEMO_CONFIG, tmp_path / run, progress=lambda *a, **k: None)
        times.append(time.perf_counter() - start)
    files = ["metrics.csv", "seeds.csv", "tiers.csv", "emd.csv"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in files}
    record(9, "demo pipeline determinism and runtime",
           all(same.values()) and max(times) < 120,
           f"byte-identical {same}; runtimes {times[0]:.0f}s and {times[1]:.0f}s (<120s)")
