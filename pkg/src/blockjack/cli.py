"""Command-line driver: generate data, train, resample blocks, build bands, evaluate.

Subcommands::

    blockjack run --config exp.json --out runs/a [--seed N] [--mode influence|exact] [--alpha F] [--jobs N]
    blockjack compare-exact --config exp.json --out runs/cmp [--seed N] [--jobs N]
    blockjack plotdata runs/a

Exit codes: 1 configuration error, 2 training or inverse-HVP divergence,
3 incomplete pipeline or missing artifacts, 4 exact-resampling budget exceeded.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig
from .dataset import ConfigurationError, SequenceDataset, generate_synthetic, standard_weights
from .evaluation import coverage
from .influence import InverseHvpDiverged
from .intervals import (IncompleteError, PerturbedParams, build_bands, collect_lobo_residuals,
                        perturbed_predictions)
from .model import TrainingDiverged, save_checkpoint, train
from .numerics import RngStream
from .pipeline import BudgetExceeded, JackknifeConfig, check_budget, cosine, resample_blocks, run_jackknife

log = logging.getLogger("blockjack")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPLETE, EXIT_BUDGET = 1, 2, 3, 4


class MissingArtifacts(RuntimeError):
    pass


def _tag(alpha: float) -> str:
    return f"{alpha:g}"


def make_datasets(cfg: ExperimentConfig) -> tuple[SequenceDataset, SequenceDataset]:
    """Training set and a disjoint test set drawn from an offset stream."""
    d = cfg.data
    root = RngStream(d.seed)
    train_set = generate_synthetic(d.n, d.T, d.a, d.noise, root.spawn(10), d.horizon)
    test_set = generate_synthetic(d.n_test, d.T, d.a, d.noise, root.spawn(11), d.horizon)
    return train_set, test_set


def _fit(cfg: ExperimentConfig, data: SequenceDataset):
    model = cfg.model.build(cfg.data.horizon)
    w = standard_weights(data.n, data.T, data.horizon, cfg.model.architecture)
    fit = train(model, data, w, cfg.model.train)
    log.info("trained %d iterations, loss %.6g", fit.iterations, fit.final_loss)
    return model, w, fit


def run_single(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    """One complete experiment; returns ``{alpha: report summary}``."""
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    data, test = make_datasets(cfg)
    data.save_json(out / "dataset.json")
    data.save_csv(out / "dataset.csv")
    test.save_json(out / "test_dataset.json")

    model, w, fit = _fit(cfg, data)
    save_checkpoint(out / "checkpoint.json", model, fit.params, cfg.model.train, fit.final_loss)

    jk = run_jackknife(model, data, fit.params, w, cfg.jackknife, cfg.model.train, cfg.seed, jobs)
    jk.write_diagnostics(out / "influence.csv")

    preds = perturbed_predictions(model, test.x, jk.perturbed)
    summaries = {}
    for alpha in cfg.alphas:
        bands = build_bands(model, test.x, fit.params, jk.perturbed, jk.residuals, alpha, preds)
        bands.write_csv(out / f"bands_alpha{_tag(alpha)}.csv")
        report = coverage(bands, test)
        report.write_csv(out / f"coverage_alpha{_tag(alpha)}.csv")
        report.write_json(out / f"report_alpha{_tag(alpha)}.json")
        summaries[alpha] = report.summary()
        log.info("alpha %g: coverage %.3f, width %.4g", alpha, report.mean_coverage, report.overall_width)
    return summaries


def run_experiment(cfg: ExperimentConfig, out, jobs: int = 1) -> dict:
    """Run one experiment, or one per noise level when a sweep is configured.

    Sweep points go to ``out/sigma2_<value>``; the return value maps each
    variance to its per-alpha summaries.
    """
    out = Path(out)
    if cfg.sweep_sigma2 is None:
        return run_single(cfg, out, jobs)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    results = {}
    dirs = []
    for s2 in cfg.sweep_sigma2:
        name = f"sigma2_{s2:g}"
        log.info("sweep point sigma2=%g", s2)
        results[s2] = run_single(cfg.at_sigma2(s2), out / name, jobs)
        dirs.append(name)
    (out / "sweep.json").write_text(
        json.dumps({"sigma2": list(cfg.sweep_sigma2), "dirs": dirs}, indent=2) + "\n", encoding="utf-8")
    return results


def compare_exact(cfg: ExperimentConfig, out, jobs: int = 1) -> dict:
    """Resample every block both exactly and by influence and compare."""
    out = Path(out)
    K = cfg.K
    check_budget(cfg.data.n, cfg.data.T, K, cfg.jackknife.exact_budget)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    data, test = make_datasets(cfg)
    model, w, fit = _fit(cfg, data)
    theta = fit.params.theta

    runs = {}
    for mode in ("exact", "influence"):
        jk = JackknifeConfig(K, mode, cfg.jackknife.ihvp, "use", cfg.jackknife.exact_budget)
        thetas, records, _ = resample_blocks(model, data, fit.params, w, jk, cfg.model.train, cfg.seed, jobs)
        perturbed = PerturbedParams(thetas, np.ones(thetas.shape[:2], dtype=bool), K)
        runs[mode] = (perturbed, records)

    cosines = []
    with open(out / "compare.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j", "K", "cosine", "exact_delta_norm", "influence_delta_norm", "influence_converged"])
        for ex, inf in zip(runs["exact"][1], runs["influence"][1]):
            d_ex = runs["exact"][0].thetas[ex.i, ex.j] - theta
            d_in = runs["influence"][0].thetas[inf.i, inf.j] - theta
            c = cosine(d_in, d_ex)
            cosines.append(c)
            wr.writerow([ex.i, ex.j, K, repr(c), repr(ex.delta_norm), repr(inf.delta_norm), int(inf.converged)])

    summary = {"n_blocks": len(cosines), "median_cosine": float(np.median(cosines)), "width_rel_diff": {}}
    bands = {}
    for mode, (perturbed, _) in runs.items():
        res = collect_lobo_residuals(model, data, perturbed)
        preds = perturbed_predictions(model, test.x, perturbed)
        bands[mode] = {a: build_bands(model, test.x, fit.params, perturbed, res, a, preds) for a in cfg.alphas}
    for alpha in cfg.alphas:
        be, bi = bands["exact"][alpha], bands["influence"][alpha]
        we, wi = be.width, bi.width
        finite = np.isfinite(we) & np.isfinite(wi) & (we > 0)
        rel = np.full(we.shape, np.nan)
        rel[finite] = np.abs(wi[finite] - we[finite]) / we[finite]
        with open(out / f"band_diff_alpha{_tag(alpha)}.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "t_prime", "mean_lower_diff", "mean_upper_diff", "median_width_rel_diff"])
            for t in range(we.shape[1]):
                for tp in range(we.shape[2]):
                    lo = bi.lower[:, t, tp] - be.lower[:, t, tp]
                    up = bi.upper[:, t, tp] - be.upper[:, t, tp]
                    col = rel[:, t, tp]
                    med = float(np.median(col[~np.isnan(col)])) if (~np.isnan(col)).any() else float("nan")
                    wr.writerow([t, tp, repr(float(np.mean(lo))), repr(float(np.mean(up))), repr(med)])
        ok = ~np.isnan(rel)
        summary["width_rel_diff"][_tag(alpha)] = float(np.median(rel[ok])) if ok.any() else float("nan")
    (out / "compare_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _plot_single(run: Path) -> list[Path]:
    band_files = sorted(run.glob("bands_alpha*.csv"))
    if not (run / "test_dataset.json").is_file() or not band_files:
        raise MissingArtifacts(f"{run} has no completed run (bands and test_dataset.json are required)")
    test = SequenceDataset.load_json(run / "test_dataset.json")
    Y = test.targets()
    written = []
    for path in band_files:
        tag = path.stem[len("bands_alpha"):]
        target = run / f"plot_bands_alpha{tag}.csv"
        with open(target, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["test_id", "t", "t_prime", "f_point", "f_lower", "f_upper", "y_true"])
            for row in _read_rows(path):
                k, t, tp = int(row["test_id"]), int(row["t"]), int(row["t_prime"])
                wr.writerow([k, t, tp, row["f_point"], row["f_lower"], row["f_upper"], repr(float(Y[k, t, tp]))])
        written.append(target)
    return written


def plotdata(run_dir) -> list[Path]:
    """Tidy CSVs for plotting a completed run or sweep directory."""
    run = Path(run_dir)
    sweep_file = run / "sweep.json"
    if not sweep_file.is_file():
        return _plot_single(run)
    sweep = json.loads(sweep_file.read_text(encoding="utf-8"))
    written = []
    by_alpha: dict[str, list] = {}
    for s2, name in zip(sweep["sigma2"], sweep["dirs"]):
        point = run / name
        written += _plot_single(point)
        for rep in sorted(point.glob("report_alpha*.json")):
            summary = json.loads(rep.read_text(encoding="utf-8"))
            by_alpha.setdefault(rep.stem[len("report_alpha"):], []).append(
                (s2, summary["mean_width"], summary["mean_coverage"]))
    if not by_alpha:
        raise MissingArtifacts(f"{run} has no coverage reports")
    for tag, rows in by_alpha.items():
        target = run / f"sweep_summary_alpha{tag}.csv"
        with open(target, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sigma2", "mean_width", "coverage"])
            for s2, width, cov in rows:
                wr.writerow([repr(float(s2)), repr(float(width)), repr(float(cov))])
        written.append(target)
    return written


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockjack", description="Blockwise jackknife confidence bands for RNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override data.seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for the block loop")

    run = sub.add_parser("run", help="full pipeline: data, training, resampling, bands, coverage")
    common(run)
    run.add_argument("--mode", choices=("influence", "exact"), help="override jackknife.mode")
    run.add_argument("--alpha", type=float, help="override jackknife.alpha with a single level")

    cmp_ = sub.add_parser("compare-exact", help="influence vs exact retraining, block by block")
    common(cmp_)
    cmp_.add_argument("--alpha", type=float, help="override jackknife.alpha with a single level")

    plot = sub.add_parser("plotdata", help="tidy plot tables from a completed run directory")
    plot.add_argument("run_dir")
    return p


def _setup_logging() -> None:
    name = os.environ.get("BLOCKJACK_LOG", "warning").lower()
    level = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if name not in level:
        raise ConfigurationError(f"BLOCKJACK_LOG: expected error, warning, info or debug, got {name!r}")
    logging.basicConfig(level=level[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _setup_logging()
        if args.command == "plotdata":
            for path in plotdata(args.run_dir):
                print(path)
            return 0
        if args.jobs < 1:
            raise ConfigurationError(f"--jobs: must be >= 1, got {args.jobs}")
        cfg = config_mod.load(args.config).with_overrides(
            seed=args.seed, mode=getattr(args, "mode", None), alpha=args.alpha)
        if args.command == "run":
            results = run_experiment(cfg, args.out, args.jobs)
        else:
            results = compare_exact(cfg, args.out, args.jobs)
        print(json.dumps(results, indent=2, default=str))
        return 0
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.command == "compare-exact":
            print(f"required budget: {exc.required}", file=sys.stderr)
            return EXIT_BUDGET
        return EXIT_CONFIG
    except (TrainingDiverged, InverseHvpDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IncompleteError, MissingArtifacts) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
