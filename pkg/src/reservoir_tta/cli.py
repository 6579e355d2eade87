"""Command-line front end.

Subcommands: ``calibrate`` (threshold from source styles), ``run`` (episodes
over seeds, metrics CSV + summary JSON per seed plus a cross-seed
aggregate), ``theory`` (the verification suite with per-check CSVs), and
``export-styles`` (source style vectors in the text format).

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 verification
failure. All emitted files are byte-reproducible for a fixed config.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import clustering, stream, theory
from .config import (
    RunConfig,
    build_context,
    calibration_styles,
    default_config,
    load_config,
    resolve_method,
)
from .errors import ConfigurationError, ReservoirTTAError
from .style import FeatureExtractor, calibrate_threshold, export_styles

THEORY_CHECKS = ("sgd_var", "ensemble_var", "recursion", "fisher_equiv", "chebyshev")
_CSV_COLUMNS = ("t", "empirical_var", "closed_form_var", "bound", "empirical_rate", "discrepancy")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        out_dir = _output_dir(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, out_dir)
        if args.command == "run":
            seeds = _parse_seeds(args.seeds) if args.seeds else cfg.seeds
            return cmd_run(cfg, out_dir, seeds)
        if args.command == "theory":
            checks = _parse_checks(args.checks)
            return cmd_theory(cfg, out_dir, checks)
        if args.command == "export-styles":
            return cmd_export_styles(cfg, Path(args.out), args.count)
        parser.error(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except ReservoirTTAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtta",
        description="Domain-aware test-time adaptation simulator and theory checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_cal = sub.add_parser("calibrate", help="calibrate the new-domain threshold")
    p_cal.add_argument("--config", help="YAML config path (defaults if omitted)")

    p_run = sub.add_parser("run", help="run adaptation episodes over seeds")
    p_run.add_argument("--config")
    p_run.add_argument("--seeds", help="comma-separated seed list override")

    p_th = sub.add_parser("theory", help="run the theory verification suite")
    p_th.add_argument("--config")
    p_th.add_argument(
        "--checks",
        default="all",
        help=f"'all', '', or comma-separated subset of {','.join(THEORY_CHECKS)}",
    )

    p_exp = sub.add_parser("export-styles", help="write source style vectors")
    p_exp.add_argument("--config")
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--count", type=int, default=None)
    return parser


def _output_dir(cfg: RunConfig) -> Path:
    out = os.environ.get("RTTA_OUTPUT_DIR", cfg.output_dir)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ConfigurationError(f"unparseable seed list {text!r}")
    if not seeds:
        raise ConfigurationError("seed list is empty")
    return seeds


def _parse_checks(text: str) -> tuple[str, ...]:
    if text.strip() == "":
        return ()
    if text.strip() == "all":
        return THEORY_CHECKS
    names = tuple(tok.strip() for tok in text.split(",") if tok.strip())
    for name in names:
        if name not in THEORY_CHECKS:
            raise ConfigurationError(
                f"unknown theory check {name!r} (choose from {THEORY_CHECKS})"
            )
    return names


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# calibrate


def cmd_calibrate(cfg: RunConfig, out_dir: Path) -> int:
    blob = stream.make_blob(
        cfg.source.classes, cfg.source.input_dim, cfg.source.seed, cfg.source.separation
    )
    extractor = FeatureExtractor(
        cfg.source.input_dim,
        layer_channels=cfg.style.channels,
        seed=cfg.style.seed,
        nonlinearity=cfg.style.nonlinearity,
    )
    styles = calibration_styles(cfg, blob, extractor)
    cal = calibrate_threshold(styles, cfg.clustering.quantile)
    payload = {
        "tau": cal.tau,
        "quantile": cal.quantile,
        "d": cal.dim,
        "source_count": cal.source_sample_count,
    }
    _write_json(out_dir / "calibration.json", payload)
    print(f"tau = {cal.tau:.6g} (q = {cal.quantile}, n = {cal.source_sample_count})")
    return 0


# ---------------------------------------------------------------------------
# run


def cmd_run(cfg: RunConfig, out_dir: Path, seeds: tuple[int, ...]) -> int:
    context = build_context(cfg)
    methods = [resolve_method(m) for m in cfg.methods]

    def one_seed(seed: int):
        results = {}
        for method in methods:
            metrics = stream.run_episode(context, method, seed)
            _write_metrics_csv(out_dir / f"metrics_{method.name}_seed{seed}.csv", metrics)
            summary = {
                "method": method.name,
                "seed": seed,
                "mean_error": _clean(metrics.per_batch_error.mean()) if metrics.step_count else None,
                "per_visit_error": [_clean(v) for v in metrics.per_visit_error()],
                "per_visit_domain_error": _nested(metrics.per_visit_domain_error()),
                "final_detected_domains": int(metrics.detected_domains[-1]) if metrics.step_count else 0,
            }
            _write_json(out_dir / f"summary_{method.name}_seed{seed}.json", summary)
            if cfg.emit_trace:
                clustering.write_trace(
                    out_dir / f"trace_{method.name}_seed{seed}.jsonl",
                    metrics.assignment_trace,
                )
            results[method.name] = metrics
        return seed, results

    with ThreadPoolExecutor(max_workers=min(len(seeds), os.cpu_count() or 1)) as pool:
        all_results = dict(pool.map(one_seed, seeds))

    aggregate = {"seeds": list(seeds), "methods": {}}
    for method in methods:
        visit_tables = [all_results[s][method.name].per_visit_error() for s in seeds]
        stacked = np.stack(visit_tables) if visit_tables and visit_tables[0].size else np.empty((len(seeds), 0))
        aggregate["methods"][method.name] = {
            "per_visit_mean": [_clean(v) for v in stacked.mean(axis=0)] if stacked.size else [],
            "per_visit_std": [_clean(v) for v in stacked.std(axis=0)] if stacked.size else [],
            "per_seed_mean_error": [
                _clean(all_results[s][method.name].per_batch_error.mean())
                if all_results[s][method.name].step_count
                else None
                for s in seeds
            ],
        }
    _write_json(out_dir / "aggregate.json", aggregate)
    print(f"wrote {len(seeds)} seed(s) x {len(methods)} method(s) to {out_dir}")
    return 0


def _write_metrics_csv(path: Path, metrics: stream.EpisodeMetrics) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "visit", "true_domain", "assigned_model", "error",
             "detected_domains", "drift_norm"]
        )
        for i in range(metrics.step_count):
            writer.writerow(
                [
                    int(metrics.steps[i]),
                    int(metrics.visits[i]),
                    int(metrics.true_domains[i]),
                    int(metrics.assigned_models[i]),
                    f"{metrics.per_batch_error[i]:.17g}",
                    int(metrics.detected_domains[i]),
                    f"{metrics.drift_norm[i]:.17g}",
                ]
            )


def _clean(value) -> float | None:
    v = float(value)
    return None if math.isnan(v) else v


def _nested(table: np.ndarray) -> list:
    return [[_clean(v) for v in row] for row in table]


# ---------------------------------------------------------------------------
# theory


def cmd_theory(cfg: RunConfig, out_dir: Path, checks: tuple[str, ...]) -> int:
    failures = []
    for name in checks:
        passed, detail, rows = _run_check(name, cfg)
        _write_theory_csv(out_dir / f"{name}.csv", rows)
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        if not passed:
            failures.append((name, detail))
    if failures:
        for name, detail in failures:
            print(f"verification failure in {name}: {detail}", file=sys.stderr)
        return 3
    return 0


def _write_theory_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in _CSV_COLUMNS})


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def _run_check(name: str, cfg: RunConfig):
    t = cfg.theory
    if name == "sgd_var":
        task = theory.pure_noise_task(t.dim, t.noise_std)
        curve = theory.simulate_sgd(task, t.eta, t.steps, t.trials, t.seed)
        slope, r2 = theory.fit_slope(curve)
        target = t.eta**2 * task.total_noise_variance
        closed = theory.linear_variance_closed_form(t.eta, task.total_noise_variance, curve.steps)
        passed = abs(slope - target) <= 0.1 * target and r2 > 0.99
        detail = (
            f"slope {slope:.6g} vs eta^2*vbar {target:.6g} "
            f"(tolerance 10%), R^2 {r2:.6f} (> 0.99 required)"
        )
        rows = [
            {"t": int(ti), "empirical_var": curve.variance[i], "closed_form_var": closed[i]}
            for i, ti in enumerate(curve.steps)
        ]
        return passed, detail, rows

    if name == "ensemble_var":
        task = theory.pure_noise_task(t.dim, t.noise_std)
        vbar = task.total_noise_variance
        rows: list[dict] = []
        worst_rel = 0.0
        bound_ok = True
        for alpha in t.ensemble_alphas:
            curve = theory.simulate_weight_ensemble(
                task, t.eta, alpha, t.steps, t.ensemble_trials, t.seed
            )
            closed = theory.ensemble_variance_closed_form(t.eta, alpha, vbar, curve.steps)
            bound = t.eta**2 * vbar * alpha**2 / (1.0 - alpha**2)
            rel = np.abs(curve.variance[1:] - closed[1:]) / closed[1:]
            worst_rel = max(worst_rel, float(rel.max()))
            # The true curve sits strictly below the asymptote; the empirical
            # one gets 3-sigma sampling slack on the variance estimate.
            slack = 3.0 * curve.variance * np.sqrt(2.0 / (t.ensemble_trials - 1))
            if np.any(closed[1:] >= bound) or np.any(curve.variance > bound + slack):
                bound_ok = False
            rows.extend(
                {
                    "t": int(ti),
                    "empirical_var": curve.variance[i],
                    "closed_form_var": closed[i],
                    "bound": bound,
                }
                for i, ti in enumerate(curve.steps)
            )
        passed = worst_rel <= 0.05 and bound_ok
        detail = (
            f"max relative deviation {worst_rel:.4%} (<= 5% required), "
            f"asymptotic bound {'respected' if bound_ok else 'violated'}"
        )
        return passed, detail, rows

    if name == "recursion":
        rng = np.random.default_rng((t.seed, 3))
        grads = rng.standard_normal((t.recursion_steps, t.recursion_dim))
        theta0 = np.random.default_rng((t.seed, 4)).standard_normal(t.recursion_dim)
        disc = theory.check_recursion(grads, t.eta, t.recursion_alpha, theta0)
        passed = disc < 1e-10
        detail = f"max discrepancy {disc:.3e} (< 1e-10 required)"
        rows = [{"t": t.recursion_steps, "discrepancy": disc}]
        return passed, detail, rows

    if name == "fisher_equiv":
        rows = []
        worst = 0.0
        for lam, omega, eta in t.fisher_cases:
            task = theory.NoisyQuadraticTask(
                optimum=np.zeros(t.fisher_dim),
                curvature=np.full(t.fisher_dim, 0.3),
                noise_std=np.ones(t.fisher_dim),
            )
            disc = theory.check_fisher_trajectory(
                task, lam, omega, eta, t.fisher_steps, t.seed
            )
            worst = max(worst, disc)
            rows.append({"t": t.fisher_steps, "discrepancy": disc})
        passed = worst < 1e-10
        detail = f"max trajectory discrepancy {worst:.3e} (< 1e-10 required)"
        return passed, detail, rows

    if name == "chebyshev":
        dim = t.chebyshev_dim
        task = theory.NoisyQuadraticTask(
            optimum=np.zeros(dim),
            curvature=np.full(dim, t.chebyshev_curvature),
            noise_std=np.full(dim, t.noise_std),
        )
        theta0 = np.full(dim, 1.0 / np.sqrt(dim))
        spec = theory.StabilitySpec(beta=t.chebyshev_beta_factor, theta0=theta0)
        report = theory.check_chebyshev(
            task, spec, t.eta, t.chebyshev_steps, t.chebyshev_trials, t.seed
        )
        closed = theory.contractive_variance_closed_form(task, t.eta, report.steps)
        passed = report.holds
        detail = (
            f"max (rate - bound - slack) {report.max_violation:.3e} "
            f"(<= 0 required at 3-sigma slack)"
        )
        rows = [
            {
                "t": int(ti),
                "empirical_var": report.empirical_var[i],
                "closed_form_var": closed[i],
                "bound": report.bound[i],
                "empirical_rate": report.empirical_rate[i],
            }
            for i, ti in enumerate(report.steps)
        ]
        return passed, detail, rows

    raise ConfigurationError(f"unknown theory check {name!r}")


# ---------------------------------------------------------------------------
# export-styles


def cmd_export_styles(cfg: RunConfig, out_path: Path, count: int | None) -> int:
    blob = stream.make_blob(
        cfg.source.classes, cfg.source.input_dim, cfg.source.seed, cfg.source.separation
    )
    extractor = FeatureExtractor(
        cfg.source.input_dim,
        layer_channels=cfg.style.channels,
        seed=cfg.style.seed,
        nonlinearity=cfg.style.nonlinearity,
    )
    if count is not None and count < 1:
        raise ConfigurationError(f"count must be positive, got {count}")
    if count is None:
        styles = calibration_styles(cfg, blob, extractor)
    else:
        from dataclasses import replace as _replace

        trimmed = _replace(cfg, style=_replace(cfg.style, calibration_styles=count))
        styles = calibration_styles(trimmed, blob, extractor)
    written = export_styles(out_path, styles)
    print(f"wrote {written} style vectors ({extractor.style_dim} dims) to {out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
