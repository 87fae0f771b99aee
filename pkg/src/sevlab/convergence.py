"""Convergence sweeps: regularized, compressed and perturbed problems
against their limits, with Monte Carlo error estimates and log-log rate
fits.

Every sweep couples the perturbed and limiting equations through shared
noise: at sweep point j, path i of both equations consumes the stream
(base_seed, j, i), so measured H_p gaps are free of independent-sampling
noise.  The reference solution is the unperturbed equation solved on the
same grid with the same scheme, which isolates the perturbation being
studied from discretization bias.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coefficients import CoefficientSequence, probe_states
from .noise import NoiseEnsemble, TimeGrid, sample_noise_ensemble
from .operators import OperatorFamily, shift_operator, strong_resolvent_distance
from .solver import (
    EvolutionProblem,
    InitialCondition,
    JumpCoupling,
    MartingaleCoupling,
    PathEnsemble,
    difference_ensemble,
    hp_norm_estimate,
    moment_curve,
    solve_deterministic,
    solve_ensemble,
)

__all__ = [
    "ConvergenceError",
    "FamilyNotConvergent",
    "HypothesisViolated",
    "TheoremSpec",
    "REGISTRY",
    "list_registry",
    "SweepPoint",
    "ConvergenceReport",
    "PassRule",
    "fit_loglog",
    "ProblemTemplate",
    "PerturbationSpec",
    "PointAudit",
    "SemilinearSweepResult",
    "run_yosida_sweep",
    "run_resolvent_sweep",
    "run_semilinear_sweep",
    "run_additive_sweep",
    "run_trotter_kato",
    "shift_equivalence_gap",
]

NOISE_FLOOR_FACTOR = 5.0


class ConvergenceError(ValueError):
    """Invalid sweep description."""


class FamilyNotConvergent(ConvergenceError):
    """Resolvent distances fail to decrease along the declared family."""


class HypothesisViolated(ConvergenceError):
    """A sweep ingredient breaks the standing stability hypotheses."""


# ---------------------------------------------------------------------------
# Experiment registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TheoremSpec:
    """One verifiable convergence statement exposed by the laboratory."""

    theorem_id: str
    description: str
    runner: str
    driver_kinds: tuple[str, ...]
    p_note: str


def _spec(tid, desc, runner, kinds, p_note) -> tuple[str, TheoremSpec]:
    return tid, TheoremSpec(tid, desc, runner, kinds, p_note)


REGISTRY: dict[str, TheoremSpec] = dict(
    [
        _spec(
            "yo2sc",
            "H_2 convergence of linear mild solutions under Yosida "
            "regularization of the generator (martingale noise)",
            "run_yosida_sweep",
            ("wiener", "cpoisson"),
            "p = 2",
        ),
        _spec(
            "yopsc",
            "H_p convergence under Yosida regularization with additive "
            "martingale noise",
            "run_yosida_sweep",
            ("wiener", "cpoisson"),
            "p > 2, additive",
        ),
        _spec(
            "nyo2sc",
            "H_2 stability of linear convolutions under strong-resolvent "
            "perturbation of the generator",
            "run_resolvent_sweep",
            ("wiener", "cpoisson"),
            "p = 2",
        ),
        _spec(
            "nyotta",
            "H_p stability of plain martingale convolutions under "
            "strong-resolvent generator perturbation",
            "run_resolvent_sweep",
            ("wiener", "cpoisson"),
            "p > 2, additive",
        ),
        _spec(
            "trippona_lambda",
            "H_p convergence under generator regularization for "
            "Poisson-random-measure noise",
            "run_yosida_sweep",
            ("prm",),
            "p >= 2",
        ),
        _spec(
            "trippona",
            "H_p stability of Poisson-random-measure convolutions under "
            "strong-resolvent generator perturbation",
            "run_resolvent_sweep",
            ("prm",),
            "p >= 2",
        ),
        _spec(
            "nyo2",
            "H_2 continuous dependence of semilinear martingale equations on "
            "generator, coefficients and initial datum",
            "run_semilinear_sweep",
            ("wiener", "cpoisson"),
            "p = 2",
        ),
        _spec(
            "nyop",
            "H_p continuous dependence of semilinear Poisson-random-measure "
            "equations on the full problem quadruple",
            "run_semilinear_sweep",
            ("prm",),
            "p >= 2",
        ),
        _spec(
            "additive_p",
            "H_p continuous dependence with additive martingale noise and "
            "Lipschitz drift",
            "run_additive_sweep",
            ("wiener", "cpoisson"),
            "p > 2, additive",
        ),
        _spec(
            "titikaka",
            "Deterministic convolution stability under semigroup and forcing "
            "perturbations (regularized-semigroup limit included)",
            "run_trotter_kato",
            (),
            "deterministic",
        ),
        _spec(
            "cor_utile",
            "Quantitative regularization envelope: squared H_2 gap bounded by "
            "resolvent-smoothed data terms with an explicit small factor",
            "audit_corollary_utile",
            ("wiener", "cpoisson"),
            "p = 2",
        ),
        _spec(
            "lemma_uno",
            "Audit: propagated initial-datum gap vanishes along the "
            "approximating sequence",
            "audit_lemma_estimates",
            ("wiener", "cpoisson", "prm"),
            "p >= 2",
        ),
        _spec(
            "lemma_due",
            "Audit: drift-convolution gap admits a vanishing offset plus a "
            "Gronwall term in the solution gap",
            "audit_lemma_estimates",
            ("wiener", "cpoisson", "prm"),
            "p >= 2",
        ),
        _spec(
            "lemma_tre",
            "Audit: martingale-convolution gap admits a vanishing offset plus "
            "a Gronwall term in the solution gap",
            "audit_lemma_estimates",
            ("wiener", "cpoisson"),
            "p = 2",
        ),
        _spec(
            "lemma_treppe",
            "Audit: Poisson-convolution gap admits a vanishing offset plus a "
            "Gronwall term in the solution gap",
            "audit_lemma_estimates",
            ("prm",),
            "p >= 2",
        ),
    ]
)


def list_registry(pattern: str | None = None) -> list[TheoremSpec]:
    """Registry entries whose id or description contains ``pattern``."""
    specs = list(REGISTRY.values())
    if pattern:
        needle = pattern.lower()
        specs = [
            s
            for s in specs
            if needle in s.theorem_id.lower() or needle in s.description.lower()
        ]
    return specs


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    param: float
    error: float
    stderr: float
    extras: dict = field(default_factory=dict)


def fit_loglog(
    params: np.ndarray,
    errors: np.ndarray,
    stderrs: np.ndarray,
    noise_factor: float = NOISE_FLOOR_FACTOR,
) -> tuple[float | None, float | None, list[int]]:
    """Least-squares slope of log10(error) vs log10(param) on the window
    where the error is resolved (positive and above noise_factor * stderr)."""
    params = np.asarray(params, dtype=float)
    errors = np.asarray(errors, dtype=float)
    stderrs = np.asarray(stderrs, dtype=float)
    mask = (errors > 0) & (errors > noise_factor * stderrs)
    idx = [int(i) for i in np.flatnonzero(mask)]
    if len(idx) < 2:
        return None, None, idx
    slope, intercept = np.polyfit(np.log10(params[idx]), np.log10(errors[idx]), 1)
    return float(slope), float(intercept), idx


@dataclass(frozen=True)
class PassRule:
    """Declarative pass/fail policy for one sweep.

    ``final_error`` bounds the last resolved error absolutely and
    ``final_ratio`` bounds it relative to the first; ``combine`` chooses
    whether both or either must hold.  ``monotone_slack`` tolerates this
    multiplicative wiggle between consecutive resolved errors
    (strict decrease when ``strict_decrease`` is set), and
    ``slope_range`` constrains the fitted rate.
    """

    final_error: float | None = None
    final_ratio: float | None = None
    combine: str = "all"
    monotone_slack: float | None = 1.2
    strict_decrease: bool = False
    slope_range: tuple[float, float] | None = None


@dataclass
class ConvergenceReport:
    theorem_id: str
    param_name: str
    p: float
    points: list[SweepPoint]
    slope: float | None = None
    intercept: float | None = None
    slope_window: list[int] = field(default_factory=list)
    passed: bool = False
    fail_reasons: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def params(self) -> np.ndarray:
        return np.array([pt.param for pt in self.points], dtype=float)

    @property
    def errors(self) -> np.ndarray:
        return np.array([pt.error for pt in self.points], dtype=float)

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([pt.stderr for pt in self.points], dtype=float)

    def resolved_indices(self, noise_factor: float = NOISE_FLOOR_FACTOR) -> list[int]:
        e, s = self.errors, self.stderrs
        return [int(i) for i in np.flatnonzero((e > 0) & (e > noise_factor * s))]

    def finalize(self, rule: PassRule) -> None:
        """Fit the rate and evaluate the pass rule in place."""
        self.slope, self.intercept, self.slope_window = fit_loglog(
            self.params, self.errors, self.stderrs
        )
        reasons: list[str] = []
        idx = self.resolved_indices()
        errors = self.errors
        if rule.monotone_slack is not None:
            for a, b in zip(idx, idx[1:]):
                if errors[b] > rule.monotone_slack * errors[a]:
                    reasons.append(
                        f"error rose beyond slack between points {a} and {b}"
                    )
                    break
        if rule.strict_decrease:
            for a, b in zip(idx, idx[1:]):
                if not errors[b] < errors[a]:
                    reasons.append(f"error not strictly decreasing at point {b}")
                    break
        final = errors[-1]
        initial = errors[0]
        checks: list[bool] = []
        if rule.final_error is not None:
            checks.append(final < rule.final_error)
        if rule.final_ratio is not None:
            checks.append(final < rule.final_ratio * initial)
        if checks:
            ok = all(checks) if rule.combine == "all" else any(checks)
            if not ok:
                reasons.append(
                    f"final error {final:.6g} misses the declared bound "
                    f"(initial {initial:.6g})"
                )
        if rule.slope_range is not None:
            lo, hi = rule.slope_range
            if self.slope is None or not lo <= self.slope <= hi:
                reasons.append(
                    f"fitted slope {self.slope} outside [{lo:g}, {hi:g}]"
                )
        self.fail_reasons = reasons
        self.passed = not reasons

    # -- serialization ----------------------------------------------

    def write_csv(self, path) -> None:
        window = ";".join(str(i) for i in self.slope_window)
        slope = "" if self.slope is None else f"{self.slope:.12g}"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["theorem_id", "sweep_param", "error", "stderr", "slope",
                 "slope_window", "pass"]
            )
            for pt in self.points:
                writer.writerow(
                    [
                        self.theorem_id,
                        f"{pt.param:.12g}",
                        f"{pt.error:.12g}",
                        f"{pt.stderr:.12g}",
                        slope,
                        window,
                        str(self.passed).lower(),
                    ]
                )

    def write_plot_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.param_name, "error", "stderr"])
            for pt in self.points:
                writer.writerow(
                    [f"{pt.param:.12g}", f"{pt.error:.12g}", f"{pt.stderr:.12g}"]
                )


# ---------------------------------------------------------------------------
# Sweep descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemTemplate:
    """Limit problem of a sweep; perturbed members override its pieces."""

    operator: object
    grid: TimeGrid
    initial: InitialCondition
    coupling: MartingaleCoupling | JumpCoupling | None = None
    drift: object | None = None
    p: float = 2.0

    def problem(self, operator=None, drift="same", coupling="same",
                initial=None) -> EvolutionProblem:
        return EvolutionProblem(
            operator=operator if operator is not None else self.operator,
            grid=self.grid,
            initial=initial if initial is not None else self.initial,
            drift=self.drift if drift == "same" else drift,
            coupling=self.coupling if coupling == "same" else coupling,
            p=self.p,
        )

    @property
    def driver(self):
        return None if self.coupling is None else self.coupling.driver


@dataclass(frozen=True)
class PerturbationSpec:
    """Approximating quadruple: generator family, coefficient sequences,
    initial-datum offsets.  Members are indexed by the sweep parameter n."""

    operator_family: OperatorFamily | None = None
    drift_seq: CoefficientSequence | None = None
    coupling_seq: CoefficientSequence | None = None
    initial_offset: Callable[[int], np.ndarray] | None = None

    def member_problem(self, template: ProblemTemplate, n: int) -> EvolutionProblem:
        operator = (
            self.operator_family.member(n)
            if self.operator_family is not None
            else template.operator
        )
        drift = (
            self.drift_seq.member(n) if self.drift_seq is not None else template.drift
        )
        coupling = template.coupling
        if self.coupling_seq is not None:
            member = self.coupling_seq.member(n)
            if isinstance(coupling, JumpCoupling):
                coupling = JumpCoupling(driver=coupling.driver, jump=member)
            else:
                coupling = MartingaleCoupling(driver=coupling.driver, diffusion=member)
        initial = template.initial
        if self.initial_offset is not None:
            initial = initial.shifted(self.initial_offset(n))
        return EvolutionProblem(
            operator=operator,
            grid=template.grid,
            initial=initial,
            drift=drift,
            coupling=coupling,
            p=template.p,
        )

    def validate(self, template: ProblemTemplate, ns: Sequence[int]) -> None:
        """Standing hypotheses: uniform Lipschitz bounds, no constant blowup."""
        for seq in (self.drift_seq, self.coupling_seq):
            if seq is None:
                continue
            if not np.isfinite(seq.uniform_bound):
                raise HypothesisViolated("coefficient sequence lacks a uniform bound")
            for n in ns:
                member = seq.member(int(n))
                if member.lipschitz_bound > seq.uniform_bound * (1 + 1e-12) + 1e-12:
                    raise HypothesisViolated(
                        f"member {n} of a coefficient sequence exceeds the "
                        f"declared uniform bound"
                    )
        if self.operator_family is not None:
            limit = self.operator_family.limit
            for n in ns:
                try:
                    member = self.operator_family.member(int(n))
                except Exception as exc:
                    raise HypothesisViolated(
                        f"operator member {n} is inadmissible: {exc}"
                    ) from exc
                if member.eta > limit.eta + 1e-12:
                    raise HypothesisViolated(
                        f"operator member {n} has a larger quasi-monotonicity "
                        "constant than the limit"
                    )


# ---------------------------------------------------------------------------
# Audit payloads collected during semilinear sweeps
# ---------------------------------------------------------------------------


@dataclass
class PointAudit:
    """Gronwall raw material for one sweep point.

    ``gap_curve`` is t -> E sup_{s<=t} ||u_n - u||^p on the grid;
    ``component_curves`` are the analogous curves for the initial, drift
    and noise convolution differences; ``gap_integral`` is the running
    time integral of ``gap_curve``.
    """

    param: float
    times: np.ndarray
    gap_curve: np.ndarray
    gap_se: np.ndarray
    component_curves: dict
    gap_integral: np.ndarray
    component_errors: dict
    error: float
    stderr: float


@dataclass
class SemilinearSweepResult:
    report: ConvergenceReport
    audits: list[PointAudit]
    p: float
    horizon: float
    coupling_kind: str


def _cumtrapz(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


# ---------------------------------------------------------------------------
# Core sweep engine
# ---------------------------------------------------------------------------


def _run_point(
    template: ProblemTemplate,
    perturbed: EvolutionProblem,
    base_seed: int,
    sweep_index: int,
    n_paths: int,
    collect_audit: bool,
    param: float,
):
    key = (int(base_seed), int(sweep_index))
    noise = (
        sample_noise_ensemble(
            template.driver, template.grid, base_seed, sweep_index, n_paths
        )
        if template.driver is not None
        else None
    )
    base_states = template.initial.sample(key, n_paths)
    offset = perturbed.initial.mean - template.initial.mean
    pert_states = base_states + offset

    if noise is None:
        ref = solve_ensemble(
            template.problem(), None, n_paths=n_paths, coupling_key=key,
            initial_states=base_states,
        )
        per = solve_ensemble(
            perturbed, None, n_paths=n_paths, coupling_key=key,
            initial_states=pert_states,
        )
        ref_comp = per_comp = None
    elif collect_audit:
        ref, ref_comp = solve_ensemble(
            template.problem(), noise, initial_states=base_states,
            track_components=True,
        )
        per, per_comp = solve_ensemble(
            perturbed, noise, initial_states=pert_states, track_components=True
        )
    else:
        ref = solve_ensemble(template.problem(), noise, initial_states=base_states)
        per = solve_ensemble(perturbed, noise, initial_states=pert_states)
        ref_comp = per_comp = None

    p = template.p
    diff = difference_ensemble(per, ref)
    error, stderr = hp_norm_estimate(diff, p)
    audit = None
    if collect_audit and ref_comp is not None:
        times = template.grid.points
        gap_curve, gap_se = moment_curve(diff.states, p)
        comps = {}
        comp_errors = {}
        for name, a, b in (
            ("initial", per_comp.initial, ref_comp.initial),
            ("drift", per_comp.drift, ref_comp.drift),
            ("noise", per_comp.noise, ref_comp.noise),
        ):
            curve, _ = moment_curve(a - b, p)
            comps[name] = curve
            comp_errors[name] = float(curve[-1] ** (1.0 / p))
        audit = PointAudit(
            param=param,
            times=times,
            gap_curve=gap_curve,
            gap_se=gap_se,
            component_curves=comps,
            gap_integral=_cumtrapz(gap_curve, times),
            component_errors=comp_errors,
            error=error,
            stderr=stderr,
        )
    return error, stderr, audit


def _perturbation_sweep(
    template: ProblemTemplate,
    params: Sequence[float],
    member_problem: Callable[[int, float], EvolutionProblem],
    *,
    n_paths: int,
    base_seed: int,
    theorem_id: str,
    param_name: str,
    rule: PassRule,
    collect_audits: bool = False,
    extras_fn: Callable[[int, float], dict] | None = None,
    workers: int = 1,
    meta: dict | None = None,
):
    if len(params) < 2:
        raise ConvergenceError("a sweep needs at least two parameter values")
    if n_paths < 2:
        raise ConvergenceError("a sweep needs at least two paths per point")

    def job(j_param):
        j, param = j_param
        perturbed = member_problem(j, param)
        return _run_point(
            template, perturbed, base_seed, j, n_paths, collect_audits, float(param)
        )

    items = list(enumerate(params))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, items))
    else:
        results = [job(it) for it in items]

    points = []
    audits = []
    for (j, param), (error, stderr, audit) in zip(items, results):
        extras = extras_fn(j, float(param)) if extras_fn is not None else {}
        if audit is not None:
            extras = {**extras, **{
                f"component_{k}": v for k, v in audit.component_errors.items()
            }}
            audits.append(audit)
        points.append(SweepPoint(param=float(param), error=error, stderr=stderr,
                                 extras=extras))
    report = ConvergenceReport(
        theorem_id=theorem_id,
        param_name=param_name,
        p=template.p,
        points=points,
        meta={"n_paths": n_paths, "base_seed": base_seed, **(meta or {})},
    )
    report.finalize(rule)
    return report, audits


# ---------------------------------------------------------------------------
# Public runners
# ---------------------------------------------------------------------------


def run_yosida_sweep(
    template: ProblemTemplate,
    lambdas: Sequence[float],
    *,
    n_paths: int,
    base_seed: int,
    theorem_id: str = "yo2sc",
    rule: PassRule | None = None,
    workers: int = 1,
) -> ConvergenceReport:
    """Solve with the regularized generator A_lam for each lam and compare
    against the unregularized equation on the same grid and noise."""
    lambdas = [float(v) for v in lambdas]
    if any(v <= 0 for v in lambdas):
        raise ConvergenceError("regularization parameters must be positive")

    def member_problem(j: int, lam: float) -> EvolutionProblem:
        return template.problem(operator=template.operator.yosida_operator(lam))

    report, _ = _perturbation_sweep(
        template,
        lambdas,
        member_problem,
        n_paths=n_paths,
        base_seed=base_seed,
        theorem_id=theorem_id,
        param_name="lambda",
        rule=rule or PassRule(),
        workers=workers,
    )
    return report


def run_resolvent_sweep(
    template: ProblemTemplate,
    family: OperatorFamily,
    ns: Sequence[int],
    *,
    n_paths: int,
    base_seed: int,
    theorem_id: str = "nyo2sc",
    rule: PassRule | None = None,
    workers: int = 1,
    resolvent_lambda: float | None = None,
    test_vectors: np.ndarray | None = None,
) -> ConvergenceReport:
    """Linear stability sweep along a strong-resolvent-convergent family.

    Raises FamilyNotConvergent when the measured resolvent distances on
    the test set fail to decrease along the declared sequence.
    """
    ns = [int(n) for n in ns]
    lam = resolvent_lambda or min(1.0, family.lambda_0 / 2.0)
    if test_vectors is None:
        test_vectors = probe_states(family.limit.dim, 8, rng_seed=base_seed)
    distances = [
        strong_resolvent_distance(family, n, lam, test_vectors) for n in ns
    ]
    for a, b, na, nb in zip(distances, distances[1:], ns, ns[1:]):
        if b > a * 1.05 + 1e-14:
            raise FamilyNotConvergent(
                f"resolvent distance rose from {a:.3e} (n={na}) to {b:.3e} (n={nb})"
            )

    def member_problem(j: int, param: float) -> EvolutionProblem:
        return template.problem(operator=family.member(int(param)))

    report, _ = _perturbation_sweep(
        template,
        ns,
        member_problem,
        n_paths=n_paths,
        base_seed=base_seed,
        theorem_id=theorem_id,
        param_name="n",
        rule=rule or PassRule(),
        extras_fn=lambda j, param: {"resolvent_distance": distances[j]},
        workers=workers,
        meta={"family": family.construction, "resolvent_lambda": lam},
    )
    return report


def run_semilinear_sweep(
    template: ProblemTemplate,
    perturbation: PerturbationSpec,
    ns: Sequence[int],
    *,
    n_paths: int,
    base_seed: int,
    theorem_id: str = "nyo2",
    rule: PassRule | None = None,
    workers: int = 1,
) -> SemilinearSweepResult:
    """Full continuous-dependence sweep: generator, coefficients and
    initial datum perturbed together.

    Both solves track their variation-of-constants components, so each
    point also reports the three error contributions (initial
    propagation, drift convolution, noise convolution); the triangle
    bound  full <= 3 * (e_init + e_drift + e_noise)  is checked per point
    and recorded in the extras.
    """
    ns = [int(n) for n in ns]
    perturbation.validate(template, ns)
    if template.coupling is None:
        raise ConvergenceError("semilinear sweeps need a noise coupling")

    def member_problem(j: int, param: float) -> EvolutionProblem:
        return perturbation.member_problem(template, int(param))

    report, audits = _perturbation_sweep(
        template,
        ns,
        member_problem,
        n_paths=n_paths,
        base_seed=base_seed,
        theorem_id=theorem_id,
        param_name="n",
        rule=rule or PassRule(),
        collect_audits=True,
        workers=workers,
    )
    for pt, audit in zip(report.points, audits):
        triangle = 3.0 * sum(audit.component_errors.values())
        pt.extras["triangle_bound"] = triangle
        pt.extras["triangle_ok"] = bool(pt.error <= triangle * (1 + 1e-9) + 1e-300)
    kind = "jump" if isinstance(template.coupling, JumpCoupling) else "martingale"
    return SemilinearSweepResult(
        report=report,
        audits=audits,
        p=template.p,
        horizon=template.grid.horizon,
        coupling_kind=kind,
    )


def run_additive_sweep(
    template: ProblemTemplate,
    perturbation: PerturbationSpec,
    ns: Sequence[int],
    *,
    n_paths: int,
    base_seed: int,
    theorem_id: str = "additive_p",
    rule: PassRule | None = None,
    workers: int = 1,
) -> SemilinearSweepResult:
    """Continuous dependence with additive martingale noise, p >= 2 free.

    The coupling (and any coupling sequence members) must be
    state-independent; the drift may be a genuine Lipschitz nonlinearity.
    """
    if not isinstance(template.coupling, MartingaleCoupling) or not (
        template.coupling.is_additive
    ):
        raise HypothesisViolated(
            "additive sweeps need a state-independent martingale coupling"
        )
    if perturbation.coupling_seq is not None:
        for n in ns:
            member = perturbation.coupling_seq.member(int(n))
            if not member.is_additive:
                raise HypothesisViolated(
                    "additive sweeps need state-independent coupling members"
                )
    return run_semilinear_sweep(
        template,
        perturbation,
        ns,
        n_paths=n_paths,
        base_seed=base_seed,
        theorem_id=theorem_id,
        rule=rule,
        workers=workers,
    )


def run_trotter_kato(
    family: OperatorFamily,
    grid: TimeGrid,
    initial: np.ndarray,
    forcing,
    ns: Sequence[int],
    *,
    theorem_id: str = "titikaka",
    rule: PassRule | None = None,
    forcing_seq: Callable[[int], object] | None = None,
    initial_seq: Callable[[int], np.ndarray] | None = None,
    reference: Callable[[np.ndarray], np.ndarray] | None = None,
) -> ConvergenceReport:
    """Deterministic limit u_n -> u for u' + A_n u = g_n, measured in the
    sup norm over the grid.

    The reference is the limit equation solved with the same scheme; when
    a closed-form ``reference`` map t -> u(t) is supplied it is used
    instead (the two agree to machine precision for cellwise-constant
    forcing).
    """
    ns = [int(n) for n in ns]
    initial = np.atleast_1d(np.asarray(initial, dtype=float))

    def as_forcing(g):
        # allow a constant vector alongside the solver's callable/array forms
        if g is None or callable(g):
            return g
        arr = np.atleast_1d(np.asarray(g, dtype=float))
        return (lambda t: arr) if arr.ndim == 1 else arr

    forcing = as_forcing(forcing)
    if reference is not None:
        ref = np.stack([np.atleast_1d(reference(t)) for t in grid.points])
    else:
        ref = solve_deterministic(family.limit, forcing, initial, grid)
    points = []
    for n in ns:
        g = as_forcing(forcing_seq(n)) if forcing_seq is not None else forcing
        u0 = initial_seq(n) if initial_seq is not None else initial
        sol = solve_deterministic(family.member(n), g, u0, grid)
        err = float(np.max(np.linalg.norm(sol - ref, axis=-1)))
        points.append(SweepPoint(param=float(n), error=err, stderr=0.0))
    report = ConvergenceReport(
        theorem_id=theorem_id,
        param_name="n",
        p=2.0,
        points=points,
        meta={"deterministic": True, "family": family.construction},
    )
    report.finalize(rule or PassRule())
    return report


def shift_equivalence_gap(
    template: ProblemTemplate,
    *,
    n_paths: int,
    base_seed: int,
) -> float:
    """Pathwise gap between the direct quasi-monotone run and the
    equivalent monotone-shifted run.

    A problem with constant eta > 0 can be rewritten against the shifted
    generator A + eta I by damping the noise integrand with exp(-eta t)
    and reweighting the output by exp(+eta t); in exact arithmetic the
    two runs coincide step by step, so the returned sup-norm gap measures
    pure floating-point drift.  Restricted to linear problems with
    state-independent martingale noise, where the rewrite is closed-form.
    """
    if template.drift is not None:
        raise ConvergenceError("shift equivalence needs a linear problem")
    coupling = template.coupling
    if not isinstance(coupling, MartingaleCoupling) or not coupling.is_additive:
        raise ConvergenceError(
            "shift equivalence needs state-independent martingale noise"
        )
    shifted_op, eta = shift_operator(template.operator)

    if coupling.time_integrand is not None:
        base_integrand = coupling.time_integrand
    else:
        b_mat = coupling.diffusion.constant_matrix
        base_integrand = lambda t: b_mat
    damped = MartingaleCoupling(
        driver=coupling.driver,
        time_integrand=lambda t: np.exp(-eta * t) * np.asarray(base_integrand(t)),
    )

    key = (int(base_seed), 0)
    noise = sample_noise_ensemble(
        coupling.driver, template.grid, base_seed, 0, n_paths
    )
    states = template.initial.sample(key, n_paths)
    direct = solve_ensemble(template.problem(), noise, initial_states=states)
    shifted = solve_ensemble(
        template.problem(operator=shifted_op, coupling=damped),
        noise,
        initial_states=states,
    )
    weights = np.exp(eta * template.grid.points)
    recovered = shifted.states * weights[None, :, None]
    return float(np.max(np.linalg.norm(direct.states - recovered, axis=-1)))
