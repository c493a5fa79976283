"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict with the measured values; the lines are
printed in the terminal summary. The full-scale runs (criteria 5-8) take
roughly 20 minutes together on one core.
"""
import json
import math
import time

import numpy as np
import pytest

from blockjack import cli
from blockjack.config import from_dict
from blockjack.dataset import SequenceDataset, standard_weights
from blockjack.influence import InverseHvpConfig, neumann_solve
from blockjack.intervals import quantile_lower, quantile_upper
from blockjack.model import RNN, LinearModel, TrainConfig, grad, hvp, loss, train
from blockjack.numerics import RngStream, finite_diff_grad, power_iteration_max_eig, rel_err
from blockjack.pipeline import JackknifeConfig, resample_blocks


def test_criterion_01_gradient_and_hvp_oracles(record):
    start = time.time()
    worst_g = worst_h = worst_sym = 0.0
    max_p = 0
    for k in range(50):
        gen = np.random.default_rng(k)
        hidden, horizon = 2 + k % 4, k % 2
        model = RNN(hidden, 1, horizon)
        max_p = max(max_p, model.n_params)
        data = SequenceDataset(gen.standard_normal((4, 5)), gen.standard_normal((4, 5 + horizon)), horizon)
        w = gen.uniform(0.1, 2.0, (4, 5, horizon + 1))
        theta = gen.normal(0, 0.7, model.n_params)
        g = grad(model, data, theta, w)
        worst_g = max(worst_g, rel_err(g, finite_diff_grad(lambda th: loss(model, data, th, w), theta)))
        u, v = gen.standard_normal(model.n_params), gen.standard_normal(model.n_params)
        h = 1e-5
        fd = (grad(model, data, theta + h * v, w) - grad(model, data, theta - h * v, w)) / (2 * h)
        hv = hvp(model, data, theta, w, v)
        worst_h = max(worst_h, rel_err(hv, fd))
        a, b = u @ hv, v @ hvp(model, data, theta, w, u)
        worst_sym = max(worst_sym, abs(a - b) / max(1.0, abs(a)))
    elapsed = time.time() - start
    ok = max_p <= 50 and worst_g <= 1e-5 and worst_h <= 1e-4 and worst_sym <= 1e-8 and elapsed < 60
    record(1, ok, f"grad rel err {worst_g:.2e}, hvp rel err {worst_h:.2e}, symmetry {worst_sym:.2e}, "
                  f"P<={max_p}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_inverse_hvp_consistency(record):
    cases = [("diag", np.diag(np.linspace(0.1, 3.0, 10)))]
    for seed in range(3):
        gen = np.random.default_rng(seed)
        B = gen.standard_normal((10, 10))
        cases.append((f"spd{seed}", B @ B.T / 10 + 0.1 * np.eye(10)))
    worst = 0.0
    for name, H in cases:
        g = np.random.default_rng(99).standard_normal(10)
        sigma = power_iteration_max_eig(lambda v: H @ v, 10, iters=500).value
        lam = 0.05
        x, steps, _ = neumann_solve(lambda s, v: H @ v, g, depth=500, damping=lam, scale=sigma)
        direct = np.linalg.solve(H + lam * sigma * np.eye(10), g)
        worst = max(worst, rel_err(x, direct))
        assert steps == 500
    ok = worst <= 1e-3
    record(2, ok, f"max rel err vs direct damped solve {worst:.2e} over {len(cases)} Hessians at v=500")
    assert ok


def test_criterion_03_convex_influence_fidelity(record):
    gen = np.random.default_rng(3)
    n, d = 20, 3
    x = gen.standard_normal((n, 1, d))
    y = x[:, 0] @ np.array([1.0, -0.5, 2.0]) + 0.3 + 0.5 * gen.standard_normal(n)
    data = SequenceDataset(x, y[:, None])
    model = LinearModel(d_in=d)
    w = standard_weights(n, 1)
    tcfg = TrainConfig(optimizer="lbfgs", gtol=1e-14, max_iter=10000)
    fit = train(model, data, w, tcfg)
    jk = JackknifeConfig(K=1, ihvp=InverseHvpConfig(depth=20000, damping=0.0, batch_size=None, tol=1e-14,
                                                    hessian="retained"))
    thetas, records, _ = resample_blocks(model, data, fit.params, w, jk, tcfg, seed=0)
    X = np.hstack([x[:, 0], np.ones((n, 1))])
    inv = np.linalg.inv(X.T @ X)
    theta = fit.params.theta
    r = y - X @ theta
    lev = np.einsum("ij,jk,ik->i", X, inv, X)
    errs = [rel_err(thetas[i, 0] - theta, -inv @ X[i] * r[i] / (1 - lev[i])) for i in range(n)]
    ok = len(errs) == 20 and max(errs) <= 1e-3
    record(3, ok, f"max rel err vs Sherman-Morrison {max(errs):.2e} over {len(errs)} deletions")
    assert ok


def test_criterion_04_nonconvex_influence_sanity(tmp_path, record):
    cfg = from_dict({
        "data": {"n": 20, "T": 5, "noise": {"kind": "static", "sigma2": 1.0}, "n_test": 200, "seed": 0},
        "model": {"hidden": 4, "l2": 10.0, "optimizer": "lbfgs", "max_iter": 20000, "gtol": 1e-10},
        "jackknife": {"alpha": 0.1, "ihvp": {"depth": 10000, "damping": 0.001, "batch_size": None,
                                             "tol": 1e-9, "hessian": "full"}},
    })
    start = time.time()
    summary = cli.compare_exact(cfg, tmp_path / "cmp")
    elapsed = time.time() - start
    cos, width = summary["median_cosine"], summary["width_rel_diff"]["0.1"]
    ok = summary["n_blocks"] == 20 and cos >= 0.7 and width <= 0.25 and elapsed < 300
    record(4, ok, f"median cosine {cos:.3f} (>=0.7), median band-width rel diff {width:.3f} (<=0.25), "
                  f"{elapsed:.0f}s")
    assert ok


def _slack(p, m):
    return 3 * math.sqrt(p * (1 - p) / m)


def test_criterion_05_exact_mode_coverage(tmp_path, record):
    cfg = from_dict({
        "data": {"n": 100, "T": 10, "noise": {"kind": "static", "sigma2": 1.0}, "n_test": 500, "seed": 0},
        "jackknife": {"K": 10, "alpha": 0.1, "mode": "exact"},
    })
    start = time.time()
    summary = cli.run_experiment(cfg, tmp_path / "exact")[0.1]
    elapsed = time.time() - start
    per_t = np.array(summary["per_t_coverage"])
    floor = 0.8 - _slack(0.8, 500)
    ok = per_t.min() >= floor and elapsed < 900
    record(5, ok, f"per-t coverage min {per_t.min():.3f} (>= {floor:.3f}), mean {summary['mean_coverage']:.3f}, "
                  f"{elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def static_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    path = out / "config.json"
    path.write_text(json.dumps({
        "data": {"n": 1000, "T": 10, "noise": {"kind": "static", "sigma2": 1.0}, "n_test": 500, "seed": 0},
        "jackknife": {"alpha": 0.1, "mode": "influence"},
        "sweep": {"sigma2": [0, 1, 2, 3, 4]},
    }), encoding="utf-8")
    start = time.time()
    assert cli.main(["run", "--config", str(path), "--out", str(out / "run"), "--jobs", "4"]) == 0
    elapsed = time.time() - start
    reports = {}
    for s2 in (0, 1, 2, 3, 4):
        rep = out / "run" / f"sigma2_{s2}" / "report_alpha0.1.json"
        reports[s2] = json.loads(rep.read_text(encoding="utf-8"))
    return reports, elapsed


def test_criterion_06_influence_coverage_at_scale(static_sweep, record):
    reports, elapsed = static_sweep
    covs = {s2: reports[s2]["mean_coverage"] for s2 in (1, 2, 3, 4)}
    # four of the five sweep points belong to this criterion
    ok = all(0.8 <= c <= 1.0 for c in covs.values()) and elapsed * 4 / 5 < 1800
    record(6, ok, "mean coverage " + ", ".join(f"s2={k}: {v:.3f}" for k, v in covs.items())
           + f" (in [0.80, 1]), ~{elapsed * 4 / 5:.0f}s")
    assert ok


def test_criterion_07_width_monotone_in_noise(static_sweep, record):
    reports, _ = static_sweep
    widths = [reports[s2]["mean_width"] for s2 in (0, 1, 2, 3, 4)]
    increasing = all(b > a for a, b in zip(widths, widths[1:]))
    ok = increasing and widths[0] <= 0.25 * widths[1]
    record(7, ok, "mean width " + ", ".join(f"{w:.4f}" for w in widths)
           + f"; w(0)/w(1) = {widths[0] / widths[1]:.3f} (<= 0.25)")
    assert ok


def test_criterion_08_time_dependent_widening(tmp_path, record):
    cfg = from_dict({
        "data": {"n": 1000, "T": 10, "noise": {"kind": "time_dependent"}, "n_test": 500, "seed": 0},
        "jackknife": {"alpha": [0.4, 0.2, 0.1], "mode": "influence"},
    })
    out = tmp_path / "td"
    cli.run_experiment(cfg, out)
    widths = {}
    for alpha in ("0.1", "0.2", "0.4"):
        rows = np.genfromtxt(out / f"bands_alpha{alpha}.csv", delimiter=",", names=True)
        widths[alpha] = (rows["f_upper"] - rows["f_lower"]).reshape(500, 10)
    per_t = widths["0.1"].mean(axis=0)
    ratio = per_t[-1] / per_t[0]
    nested = bool(np.all(widths["0.1"] >= widths["0.2"]) and np.all(widths["0.2"] >= widths["0.4"]))
    ok = ratio >= 1.5 and nested
    record(8, ok, f"width t=10 / t=1 = {ratio:.2f} (>= 1.5); slot-wise nesting across alpha: {nested}")
    assert ok


def test_criterion_09_determinism(tmp_path, record):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "data": {"n": 60, "T": 10, "n_test": 50, "seed": 5},
        "model": {"hidden": 6, "max_iter": 300},
        "jackknife": {"K": 5, "alpha": [0.1, 0.2]},
    }), encoding="utf-8")

    def files(root):
        return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    runs = []
    for name, jobs in (("a", "1"), ("b", "1"), ("c", "4")):
        assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / name), "--jobs", jobs]) == 0
        runs.append(files(tmp_path / name))
    ok = runs[0] == runs[1] == runs[2] and len(runs[0]) >= 10
    record(9, ok, f"{len(runs[0])} artifacts byte-identical across two runs with --jobs 1 and one with --jobs 4")
    assert ok


def test_criterion_10_quantile_examples(record):
    checks = [
        quantile_upper(range(1, 10), 0.1) == 9,
        quantile_upper([5], 0.1) == math.inf,
        quantile_upper([3, 1, 2], 0.5) == 2,
        quantile_lower(range(1, 10), 0.1) == 1,
        quantile_lower([5], 0.05) == -math.inf,
        quantile_lower([3, 1, 2], 0.5) == 2,
    ]
    for fn in (quantile_upper, quantile_lower):
        try:
            fn([], 0.1)
            checks.append(False)
        except ValueError:
            checks.append(True)
    ok = all(checks)
    record(10, ok, f"{sum(checks)}/{len(checks)} quantile examples exact")
    assert ok
