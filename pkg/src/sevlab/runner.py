"""Config-driven orchestration: compile a validated config into sweep
runs, write per-experiment reports under unique subdirectories, and
record a manifest binding the outputs to the config hash and seed.

Exit-code contract: 0 when every experiment passes, 1 when any
experiment fails or errors (reports for the completed ones are still
written), 2 for invalid configs (raised as ConfigInvalid before any
output is produced).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .audits import audit_corollary_utile, audit_lemma_estimates
from .config import (
    ConfigInvalid,
    ExperimentConfig,
    ExperimentEntry,
    build_family,
    build_perturbation,
    build_template,
    config_sha256,
)
from .convergence import (
    REGISTRY,
    ConvergenceReport,
    SweepPoint,
    run_additive_sweep,
    run_resolvent_sweep,
    run_semilinear_sweep,
    run_trotter_kato,
    run_yosida_sweep,
)

__all__ = ["ExperimentFailed", "RunOutcome", "run_config", "run_config_file"]

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2


class ExperimentFailed(RuntimeError):
    """At least one experiment failed; reports were still written."""


@dataclass
class RunOutcome:
    exit_code: int
    all_passed: bool
    manifest: dict
    reports: list = field(default_factory=list)

    def raise_for_status(self) -> None:
        if not self.all_passed:
            failed = [
                e["label"] for e in self.manifest["experiments"] if not e["passed"]
            ]
            raise ExperimentFailed(f"experiments failed: {', '.join(failed)}")


def _unique_labels(entries: list[ExperimentEntry]) -> list[str]:
    labels: list[str] = []
    for entry in entries:
        base = entry.label or entry.theorem
        label = base
        k = 2
        while label in labels:
            label = f"{base}_{k}"
            k += 1
        labels.append(label)
    return labels


def _check_driver_kind(config: ExperimentConfig, entry: ExperimentEntry) -> None:
    spec = REGISTRY[entry.theorem]
    if not spec.driver_kinds:
        return
    if config.driver is None:
        raise ConfigInvalid(f"experiment {entry.theorem} needs a noise driver")
    if config.driver.kind not in spec.driver_kinds:
        raise ConfigInvalid(
            f"experiment {entry.theorem} expects driver kind in "
            f"{spec.driver_kinds}, config declares {config.driver.kind!r}"
        )


def _closed_form_reference(template, forcing):
    operator = template.operator
    if not operator.is_diagonal:
        raise ConfigInvalid("closed-form reference needs a diagonal operator")
    evals = operator.eigenvalues
    u0 = template.initial.mean
    g = (
        np.zeros_like(evals)
        if forcing is None
        else np.asarray(forcing, dtype=float)
    )

    def reference(t: float) -> np.ndarray:
        decay = np.exp(-evals * t)
        drift = np.where(
            evals != 0.0,
            g * (1.0 - decay) / np.where(evals != 0.0, evals, 1.0),
            g * t,
        )
        return decay * u0 + drift

    return reference


def _corollary_report(entry: ExperimentEntry, audit_report) -> ConvergenceReport:
    points = []
    seen = set()
    for row in audit_report.rows:
        if row.lam in seen:
            continue
        seen.add(row.lam)
        error = float(np.sqrt(row.lhs))
        stderr = float(row.lhs_se / (2.0 * error)) if error > 0 else 0.0
        points.append(
            SweepPoint(
                param=row.lam,
                error=error,
                stderr=stderr,
                extras={"envelope": row.rhs, "ratio": row.ratio},
            )
        )
    report = ConvergenceReport(
        theorem_id=entry.theorem,
        param_name="lambda",
        p=2.0,
        points=points,
        meta={
            "constant": audit_report.constant,
            "smooth_constant": audit_report.smooth_constant,
        },
    )
    report.finalize(entry.rule.to_rule())
    if not audit_report.ok:
        report.fail_reasons.append("envelope audit inconsistent")
        report.passed = False
    return report


def _write_envelope_csv(path: Path, audit_report) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "eps", "lhs", "rhs_data", "rhs_reg", "ratio"])
        for r in audit_report.rows:
            writer.writerow(
                [f"{r.lam:.12g}", f"{r.eps:.12g}", f"{r.lhs:.12g}",
                 f"{r.rhs_data:.12g}", f"{r.rhs_reg:.12g}", f"{r.ratio:.12g}"]
            )


def _run_entry(config: ExperimentConfig, entry: ExperimentEntry, workers: int,
               sweep_cache: dict, out_sub: Path):
    """Returns (report, extra_writer_or_None)."""
    _check_driver_kind(config, entry)
    template = build_template(config, entry.p)
    theorem = entry.theorem
    rule = entry.rule.to_rule()
    n_paths = config.paths
    seed = config.base_seed

    if theorem in ("yo2sc", "yopsc", "trippona_lambda"):
        return run_yosida_sweep(
            template, entry.values, n_paths=n_paths, base_seed=seed,
            theorem_id=theorem, rule=rule, workers=workers,
        ), None

    if theorem in ("nyo2sc", "nyotta", "trippona"):
        family = build_family(entry.family, template.operator)
        ns = [int(v) for v in entry.values]
        return run_resolvent_sweep(
            template, family, ns, n_paths=n_paths, base_seed=seed,
            theorem_id=theorem, rule=rule, workers=workers,
        ), None

    if theorem in ("nyo2", "nyop", "additive_p") or theorem.startswith("lemma_"):
        perturbation = build_perturbation(config, template)
        ns = tuple(int(v) for v in entry.values)
        cache_key = (entry.p, ns)
        if cache_key not in sweep_cache:
            runner = run_additive_sweep if theorem == "additive_p" else run_semilinear_sweep
            sweep_cache[cache_key] = runner(
                template, perturbation, list(ns), n_paths=n_paths,
                base_seed=seed,
                theorem_id=theorem if not theorem.startswith("lemma_") else "nyo2",
                rule=rule, workers=workers,
            )
        result = sweep_cache[cache_key]
        if theorem.startswith("lemma_"):
            audit = audit_lemma_estimates(result)
            if theorem not in audit.lemma_ids():
                raise ConfigInvalid(
                    f"{theorem} does not apply to a {result.coupling_kind} coupling"
                )
            return audit.report_for(theorem), None
        report = result.report
        report.theorem_id = theorem
        report.finalize(rule)
        return report, None

    if theorem == "titikaka":
        family = build_family(entry.family, template.operator)
        ns = [int(v) for v in entry.values]
        forcing = (
            np.asarray(entry.forcing, dtype=float)
            if entry.forcing is not None
            else None
        )
        reference = (
            _closed_form_reference(template, forcing) if entry.closed_form else None
        )
        return run_trotter_kato(
            family, template.grid, template.initial.mean, forcing, ns,
            rule=rule, reference=reference,
        ), None

    if theorem == "cor_utile":
        audit = audit_corollary_utile(
            template, entry.values, n_paths=n_paths, base_seed=seed
        )
        report = _corollary_report(entry, audit)
        return report, lambda: _write_envelope_csv(out_sub / "envelope.csv", audit)

    raise ConfigInvalid(f"no runner for theorem {theorem!r}")


def run_config(
    config: ExperimentConfig,
    config_bytes: bytes,
    out_dir,
    *,
    workers: int = 1,
    seed_override: int | None = None,
) -> RunOutcome:
    if seed_override is not None:
        config = config.model_copy(update={"base_seed": int(seed_override)})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = _unique_labels(config.experiments)

    entries_manifest = []
    reports = []
    all_passed = True
    sweep_cache: dict = {}
    for label, entry in zip(labels, config.experiments):
        sub = out / label
        sub.mkdir(parents=True, exist_ok=True)
        record = {"label": label, "theorem": entry.theorem}
        try:
            report, extra = _run_entry(config, entry, workers, sweep_cache, sub)
        except ConfigInvalid:
            raise
        except Exception as exc:
            # a broken experiment must not abort its siblings
            record.update({"passed": False, "error": str(exc)})
            (sub / "error.txt").write_text(str(exc) + "\n")
            all_passed = False
            entries_manifest.append(record)
            continue
        report.write_csv(sub / "report.csv")
        report.write_plot_csv(sub / "plot.csv")
        if extra is not None:
            extra()
        record.update(
            {
                "passed": bool(report.passed),
                "report": f"{label}/report.csv",
                "plot": f"{label}/plot.csv",
                "slope": report.slope,
                "final_error": float(report.errors[-1]),
            }
        )
        if report.fail_reasons:
            record["fail_reasons"] = list(report.fail_reasons)
        all_passed = all_passed and report.passed
        entries_manifest.append(record)
        reports.append((label, report))

    manifest = {
        "name": config.name,
        "version": __version__,
        "config_sha256": config_sha256(config_bytes),
        "base_seed": config.base_seed,
        "paths": config.paths,
        "all_passed": all_passed,
        "experiments": entries_manifest,
    }
    if seed_override is not None:
        manifest["seed_override"] = int(seed_override)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return RunOutcome(
        exit_code=EXIT_OK if all_passed else EXIT_FAILED,
        all_passed=all_passed,
        manifest=manifest,
        reports=reports,
    )


def run_config_file(
    path,
    out_dir=None,
    *,
    workers: int = 1,
    seed_override: int | None = None,
) -> RunOutcome:
    from .config import load_config

    config, data = load_config(path)
    if out_dir is None:
        out_dir = config.output or (Path(path).stem + "_reports")
    return run_config(
        config, data, out_dir, workers=workers, seed_override=seed_override
    )
