import csv
import json

import numpy as np
import pytest

from blockjack import cli, config as config_mod
from blockjack.dataset import ConfigurationError, NoiseProfile, generate_synthetic, standard_weights
from blockjack.influence import InverseHvpConfig
from blockjack.intervals import IncompleteError
from blockjack.model import RNN, TrainConfig, TrainingDiverged, train
from blockjack.numerics import RngStream
from blockjack.pipeline import BudgetExceeded, JackknifeConfig, check_budget, run_jackknife

SMALL = {
    "data": {"n": 16, "T": 4, "n_test": 12, "seed": 2},
    "model": {"hidden": 3, "l2": 1.0, "max_iter": 200},
    "jackknife": {"K": 2, "alpha": [0.1, 0.4], "ihvp": {"depth": 15, "batch_size": 5}},
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_run_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", _write(tmp_path, SMALL), "--out", str(out)]) == 0
    names = set(_files(out))
    for alpha in ("0.1", "0.4"):
        assert {f"bands_alpha{alpha}.csv", f"coverage_alpha{alpha}.csv", f"report_alpha{alpha}.json"} <= names
    assert {"config.json", "dataset.json", "dataset.csv", "test_dataset.json", "checkpoint.json",
            "influence.csv"} <= names
    rows = list(csv.DictReader(open(out / "influence.csv", encoding="utf-8")))
    assert len(rows) == 16 * 2
    assert list(rows[0]) == ["i", "j", "K", "delta_norm", "converged", "iterations"]


def test_run_is_deterministic_across_jobs(tmp_path):
    path = _write(tmp_path, SMALL)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "b"), "--jobs", "3"]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_invalid_alpha_exit_code(tmp_path, capsys):
    bad = json.loads(json.dumps(SMALL))
    bad["jackknife"]["alpha"] = 1.5
    assert cli.main(["run", "--config", _write(tmp_path, bad), "--out", str(tmp_path / "o")]) == 1
    assert "jackknife.alpha" in capsys.readouterr().err
    assert cli.main(["run", "--config", _write(tmp_path, SMALL), "--out", str(tmp_path / "o"),
                     "--alpha", "1.5"]) == 1


@pytest.mark.parametrize("patch,message", [
    ({"data": {"T": 4}, "jackknife": {"K": 5}}, "jackknife.K"),
    ({"data": {"n": "many"}}, "data.n"),
    ({"data": {"noise": {"kind": "pink"}}}, "data.noise"),
    ({"model": {"optimizer": "adam"}}, "model"),
    ({"jackknife": {"mode": "bootstrap"}}, "jackknife"),
    ({"jackknife": {"ihvp": {"damping": -1}}}, "jackknife.ihvp"),
    ({"extra": 1}, "unknown keys"),
])
def test_config_errors_name_the_field(tmp_path, capsys, patch, message):
    assert cli.main(["run", "--config", _write(tmp_path, patch), "--out", str(tmp_path / "o")]) == 1
    assert message in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 1


def test_exact_mode_over_budget_is_a_config_error(tmp_path):
    cfg = json.loads(json.dumps(SMALL))
    cfg["jackknife"]["exact_budget"] = 10
    assert cli.main(["run", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o"),
                     "--mode", "exact"]) == 1


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingDiverged(3)

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["run", "--config", _write(tmp_path, SMALL), "--out", str(tmp_path / "o")]) == 2


def test_incomplete_exit_code(tmp_path, monkeypatch):
    def incomplete(*args, **kwargs):
        raise IncompleteError([(0, 1)])

    monkeypatch.setattr(cli, "run_jackknife", incomplete)
    assert cli.main(["run", "--config", _write(tmp_path, SMALL), "--out", str(tmp_path / "o")]) == 3


def test_plotdata_on_run(tmp_path):
    cfg = json.loads(json.dumps(SMALL))
    cfg["data"]["T"] = 10
    cfg["jackknife"]["K"] = 10
    out = tmp_path / "run"
    assert cli.main(["run", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    assert cli.main(["plotdata", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "plot_bands_alpha0.1.csv", encoding="utf-8")))
    assert list(rows[0]) == ["test_id", "t", "t_prime", "f_point", "f_lower", "f_upper", "y_true"]
    assert len(rows) == 12 * 10
    assert all(sum(1 for r in rows if r["test_id"] == str(k)) == 10 for k in range(12))


def test_plotdata_empty_directory(tmp_path):
    assert cli.main(["plotdata", str(tmp_path)]) == 3


def test_sweep_summary(tmp_path):
    cfg = json.loads(json.dumps(SMALL))
    cfg["sweep"] = {"sigma2": [0, 1, 2, 3, 4]}
    cfg["jackknife"]["alpha"] = 0.1
    out = tmp_path / "sweep"
    assert cli.main(["run", "--config", _write(tmp_path, cfg), "--out", str(out)]) == 0
    assert cli.main(["plotdata", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "sweep_summary_alpha0.1.csv", encoding="utf-8")))
    assert [float(r["sigma2"]) for r in rows] == [0, 1, 2, 3, 4]
    assert (out / "sigma2_3" / "bands_alpha0.1.csv").is_file()


COMPARE = {
    "data": {"n": 20, "T": 5, "n_test": 10, "seed": 1},
    "model": {"hidden": 2, "l2": 5.0, "max_iter": 300},
    "jackknife": {"alpha": 0.1, "ihvp": {"depth": 50, "batch_size": None}},
}


def test_compare_exact_table(tmp_path):
    path = _write(tmp_path, COMPARE)
    assert cli.main(["compare-exact", "--config", path, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["compare-exact", "--config", path, "--out", str(tmp_path / "b")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "compare.csv", encoding="utf-8")))
    assert len(rows) == 20
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    summary = json.loads((tmp_path / "a" / "compare_summary.json").read_text(encoding="utf-8"))
    assert summary["n_blocks"] == 20 and "0.1" in summary["width_rel_diff"]


def test_compare_exact_convex_case(tmp_path):
    cfg = {
        "data": {"n": 20, "T": 5, "n_test": 10, "seed": 4},
        "model": {"kind": "linear", "l2": 0.0, "max_iter": 10000, "gtol": 1e-14},
        "jackknife": {"alpha": 0.1, "ihvp": {"depth": 20000, "damping": 0.0, "batch_size": None,
                                             "tol": 1e-14, "hessian": "retained"}},
    }
    assert cli.main(["compare-exact", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "c")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "c" / "compare.csv", encoding="utf-8")))
    assert all(abs(float(r["cosine"]) - 1.0) <= 1e-3 for r in rows)


def test_compare_exact_budget(tmp_path, capsys):
    cfg = {"data": {"n": 600, "T": 10}}
    assert cli.main(["compare-exact", "--config", _write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 4
    assert "600" in capsys.readouterr().err


def test_log_level_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("BLOCKJACK_LOG", "loud")
    assert cli.main(["plotdata", str(tmp_path)]) == 1


def test_config_round_trip(tmp_path):
    cfg = config_mod.from_dict(SMALL)
    cfg.save(tmp_path / "c.json")
    again = config_mod.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()
    assert again.K == 2 and again.alphas == (0.1, 0.4)
    assert cfg.with_overrides(seed=9).model.train.seed == 9


def test_config_defaults():
    cfg = config_mod.from_dict({})
    assert cfg.K == cfg.data.T == 10
    assert cfg.data.n_test == 500 and cfg.jackknife.mode == "influence"


def test_budget_check():
    assert check_budget(20, 5, 5, 500) == 20
    with pytest.raises(BudgetExceeded) as err:
        check_budget(100, 10, 2, 400)
    assert err.value.required == 500


def _fitted(n=12, T=4):
    data = generate_synthetic(n, T, 0.9, NoiseProfile("static", 0.5), RngStream(3))
    model = RNN(3, l2=1.0)
    w = standard_weights(n, T)
    fit = train(model, data, w, TrainConfig(optimizer="lbfgs", max_iter=300))
    return model, data, w, fit.params


def test_skip_policy_drops_unconverged_blocks():
    model, data, w, theta = _fitted()
    jk = JackknifeConfig(K=2, ihvp=InverseHvpConfig(depth=1, batch_size=None, tol=1e-12), unconverged="skip")
    res = run_jackknife(model, data, theta, w, jk, seed=0)
    skipped = [(r.i, r.j) for r in res.records if not r.converged]
    assert skipped
    for i, j in skipped:
        assert not res.perturbed.present[i, j]
        assert np.isnan(res.residuals.values[i, 2 * j:2 * j + 2]).all()


def test_use_policy_keeps_everything():
    model, data, w, theta = _fitted()
    jk = JackknifeConfig(K=2, ihvp=InverseHvpConfig(depth=1, batch_size=None, tol=1e-12))
    res = run_jackknife(model, data, theta, w, jk, seed=0)
    assert res.perturbed.present.all()
    assert not np.isnan(res.residuals.values).any()


def test_jackknife_config_validation():
    with pytest.raises(ConfigurationError):
        JackknifeConfig(mode="bootstrap")
    with pytest.raises(ConfigurationError):
        JackknifeConfig(unconverged="drop")
    with pytest.raises(ConfigurationError):
        JackknifeConfig(K=11).interval(10)
