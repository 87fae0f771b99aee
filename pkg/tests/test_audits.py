"""Estimate audits: Gronwall component fits, the regularization envelope,
and the convolution maximal inequalities.
"""
import numpy as np
import pytest

from sevlab.audits import (
    audit_corollary_utile,
    audit_lemma_estimates,
    audit_maximal_inequalities,
)
from sevlab.coefficients import builtin_family, jump_family, make_convergent_sequence
from sevlab.convergence import (
    ConvergenceError,
    PerturbationSpec,
    ProblemTemplate,
    SemilinearSweepResult,
    run_semilinear_sweep,
)
from sevlab.noise import (
    PoissonRandomMeasureDriver,
    QWienerDriver,
    TimeGrid,
)
from sevlab.operators import (
    SpectralOperator,
    heat_eigenvalues,
    spectral_shift_family,
)
from sevlab.solver import InitialCondition, JumpCoupling, MartingaleCoupling


def martingale_template(*, drift=True):
    op = SpectralOperator(np.array([0.5, 1.5]))
    driver = QWienerDriver(q=np.array([0.3, 0.2]))
    return ProblemTemplate(
        operator=op,
        grid=TimeGrid(1.0, 25),
        initial=InitialCondition(np.array([0.5, 0.5])),
        drift=builtin_family("saturating_sigmoid", scale=1.0) if drift else None,
        coupling=MartingaleCoupling(
            driver=driver,
            diffusion=builtin_family("diagonal_multiplicative",
                                     gains=[0.3, 0.2],
                                     sqrt_q=np.sqrt([0.3, 0.2])),
        ),
    )


def jump_template():
    op = SpectralOperator(np.array([0.5, 1.5]))
    marks = np.array([[0.4, 0.0], [0.0, -0.3]])
    weights = np.array([4.0, 3.0])
    driver = PoissonRandomMeasureDriver(marks=marks, weights=weights)
    return ProblemTemplate(
        operator=op,
        grid=TimeGrid(1.0, 20),
        initial=InitialCondition(np.array([0.5, 0.5])),
        drift=builtin_family("saturating_sigmoid", scale=1.0),
        coupling=JumpCoupling(
            driver=driver,
            jump=jump_family("mark_scaled_sigmoid", marks=marks, weights=weights,
                             p=2.0, coupling=0.5, scale=1.0),
        ),
    )


def envelope_template(grid_steps=50):
    op = SpectralOperator(heat_eigenvalues(3, scale=1.0))
    driver = QWienerDriver(q=np.array([0.5, 0.25]))
    b = builtin_family("additive_constant", value=0.2 * np.eye(3, 2),
                      sqrt_q=np.sqrt(driver.q))
    return ProblemTemplate(
        operator=op,
        grid=TimeGrid(1.0, grid_steps),
        initial=InitialCondition(np.array([1.0, 0.5, 0.25])),
        coupling=MartingaleCoupling(driver=driver, diffusion=b),
    )


# -- Gronwall lemma audits ----------------------------------------------------


def test_lemma_audit_full_martingale_sweep():
    template = martingale_template()
    perturbation = PerturbationSpec(
        operator_family=spectral_shift_family(template.operator, scale=1.0),
        drift_seq=make_convergent_sequence(template.drift, "scale"),
        coupling_seq=make_convergent_sequence(template.coupling.diffusion,
                                              "scale"),
        initial_offset=lambda n: np.array([0.1, 0.0]) / n,
    )
    result = run_semilinear_sweep(template, perturbation, [1, 2, 4, 8],
                                  n_paths=60, base_seed=11)
    audit = audit_lemma_estimates(result)
    assert audit.ok
    assert audit.margins_ok and audit.closure_ok
    assert audit.lemma_ids() == ["lemma_uno", "lemma_due", "lemma_tre"]
    assert audit.gammas["lemma_uno"] == 0.0
    assert audit.gammas["lemma_due"] >= 0.0
    assert all(audit.deltas_decreasing.values())
    for row in audit.closure:
        assert row.ok and row.gap_final <= row.bound * (1 + 1e-9)
    # every margin respects the inflated offset
    assert min(r.min_margin for r in audit.rows) >= -1e-12

    report = audit.report_for("lemma_uno")
    assert report.passed, report.fail_reasons
    assert report.theorem_id == "lemma_uno"
    assert report.points[0].extras["gamma"] == 0.0
    _, deltas = audit.delta_series("lemma_uno")
    assert deltas[0] > 0.0 and deltas[-1] < deltas[0]


def test_lemma_audit_zero_perturbation_degenerates():
    template = martingale_template()
    result = run_semilinear_sweep(template, PerturbationSpec(), [1, 2, 4],
                                  n_paths=20, base_seed=12)
    audit = audit_lemma_estimates(result)
    assert audit.ok
    assert all(r.delta == 0.0 for r in audit.rows)
    assert audit.gammas == {"lemma_uno": 0.0, "lemma_due": 0.0, "lemma_tre": 0.0}
    for lemma_id in audit.lemma_ids():
        assert audit.report_for(lemma_id).passed


def test_lemma_audit_initial_only_perturbation():
    template = martingale_template(drift=False)
    perturbation = PerturbationSpec(
        initial_offset=lambda n: np.array([0.2, -0.1]) / n)
    result = run_semilinear_sweep(template, perturbation, [1, 2, 4, 8],
                                  n_paths=20, base_seed=13)
    audit = audit_lemma_estimates(result)
    assert audit.ok
    _, uno = audit.delta_series("lemma_uno")
    assert np.all(uno > 0.0) and np.all(np.diff(uno) < 0.0)
    _, due = audit.delta_series("lemma_due")
    assert np.all(due == 0.0)  # no drift anywhere


def test_lemma_audit_jump_sweep_uses_treppe():
    template = jump_template()
    perturbation = PerturbationSpec(
        coupling_seq=make_convergent_sequence(template.coupling.jump, "scale"),
        initial_offset=lambda n: np.array([0.1, 0.0]) / n,
    )
    result = run_semilinear_sweep(template, perturbation, [1, 2, 4, 8],
                                  n_paths=40, base_seed=14, theorem_id="nyop")
    assert result.coupling_kind == "jump"
    audit = audit_lemma_estimates(result)
    assert audit.ok
    assert "lemma_treppe" in audit.lemma_ids()
    assert "lemma_tre" not in audit.lemma_ids()
    assert audit.report_for("lemma_treppe").passed


def test_lemma_audit_requires_audit_curves():
    template = martingale_template()
    result = run_semilinear_sweep(template, PerturbationSpec(), [1, 2],
                                  n_paths=8, base_seed=0)
    empty = SemilinearSweepResult(report=result.report, audits=[],
                                  p=result.p, horizon=result.horizon,
                                  coupling_kind=result.coupling_kind)
    with pytest.raises(ConvergenceError, match="no audit curves"):
        audit_lemma_estimates(empty)


# -- regularization envelope --------------------------------------------------


def test_envelope_audit_bounds_with_small_constant():
    template = envelope_template()
    report = audit_corollary_utile(template, [0.1, 0.03, 0.01, 0.003],
                                   n_paths=400, base_seed=77)
    assert report.ok
    assert 0.0 < report.constant < 1.0
    assert np.isfinite(report.smooth_constant)
    for row in report.rows:
        assert row.lhs <= report.constant * row.rhs * (1 + 1e-12)
        assert row.eps == pytest.approx(row.lam ** 0.25)
    # finite truncation with domain data: the measured gap decays at least
    # as fast as the conservative envelope
    assert 0.4 < report.error_slope < 1.2
    assert 0.05 < report.envelope_slope < 0.5
    assert report.error_slope > report.envelope_slope


def test_envelope_audit_fixed_epsilon_grid():
    template = envelope_template()
    report = audit_corollary_utile(template, [0.1, 0.01], n_paths=200,
                                   base_seed=78, epsilons=[0.05])
    data_terms = {row.rhs_data for row in report.rows}
    assert len(data_terms) == 1  # data term depends only on eps
    lhs = [row.lhs for row in report.rows]
    assert lhs[1] < lhs[0]
    assert report.meta["eps_rule"] == "grid"


def test_envelope_audit_zero_operator_is_degenerate():
    op = SpectralOperator(np.zeros(2))
    driver = QWienerDriver(q=np.array([0.5, 0.25]))
    template = ProblemTemplate(
        operator=op, grid=TimeGrid(1.0, 20),
        initial=InitialCondition(np.array([1.0, -1.0])),
        coupling=MartingaleCoupling(
            driver=driver,
            diffusion=builtin_family("additive_constant", value=np.eye(2),
                                     sqrt_q=np.sqrt(driver.q)),
        ),
    )
    report = audit_corollary_utile(template, [0.1, 0.01], n_paths=50,
                                   base_seed=1)
    assert report.constant == 0.0  # gap and envelope both vanish
    assert not report.ok  # no smooth-data information to fit


def test_envelope_audit_guards():
    with_drift = ProblemTemplate(
        operator=envelope_template().operator,
        grid=TimeGrid(1.0, 10),
        initial=InitialCondition(np.zeros(3)),
        drift=builtin_family("linear", gains=[1.0, 1.0, 1.0]),
        coupling=envelope_template().coupling,
    )
    with pytest.raises(ConvergenceError, match="linear"):
        audit_corollary_utile(with_drift, [0.1, 0.01], n_paths=4, base_seed=0)

    op = SpectralOperator(np.ones(2))
    driver = QWienerDriver(q=np.ones(2))
    multiplicative = ProblemTemplate(
        operator=op, grid=TimeGrid(1.0, 10),
        initial=InitialCondition(np.zeros(2)),
        coupling=MartingaleCoupling(
            driver=driver,
            diffusion=builtin_family("diagonal_multiplicative",
                                     gains=[0.5, 0.5]),
        ),
    )
    with pytest.raises(ConvergenceError, match="additive"):
        audit_corollary_utile(multiplicative, [0.1, 0.01], n_paths=4,
                              base_seed=0)

    time_dep = ProblemTemplate(
        operator=op, grid=TimeGrid(1.0, 10),
        initial=InitialCondition(np.zeros(2)),
        coupling=MartingaleCoupling(driver=driver,
                                    time_integrand=lambda t: np.eye(2)),
    )
    with pytest.raises(ConvergenceError, match="constant integrand"):
        audit_corollary_utile(time_dep, [0.1, 0.01], n_paths=4, base_seed=0)

    random_initial = ProblemTemplate(
        operator=op, grid=TimeGrid(1.0, 10),
        initial=InitialCondition(np.zeros(2), gaussian_scale=0.5),
        coupling=MartingaleCoupling(
            driver=driver,
            diffusion=builtin_family("additive_constant", value=np.eye(2),
                                     sqrt_q=np.ones(2)),
        ),
    )
    with pytest.raises(ConvergenceError, match="deterministic"):
        audit_corollary_utile(random_initial, [0.1, 0.01], n_paths=4,
                              base_seed=0)


# -- maximal inequalities -----------------------------------------------------


def test_maximal_audit_constant_matrix_rhs_hand_value():
    op = SpectralOperator(np.array([1.0, 2.0]))
    driver = QWienerDriver(q=np.array([0.5, 0.25]))
    b = builtin_family("additive_constant",
                       value=np.array([[0.3, 0.0], [0.0, 0.2]]),
                       sqrt_q=np.sqrt(driver.q))
    template = ProblemTemplate(
        operator=op, grid=TimeGrid(1.0, 40),
        initial=InitialCondition(np.zeros(2)),
        coupling=MartingaleCoupling(driver=driver, diffusion=b),
    )
    report = audit_maximal_inequalities({"const": template}, n_paths=300,
                                        base_seed=31)
    row = report.rows[0]
    # tr(B Q B^T) = 0.09 * 0.5 + 0.04 * 0.25 = 0.055, integrated over [0, 1]
    assert row.inequality == "maxi2"
    assert row.rhs == pytest.approx(0.055, rel=1e-12)
    assert row.bound_ok
    assert report.violations == 0
    assert report.ok
    assert report.constants["maxi2"] <= 4.0 * np.exp(0.0) * 1.05


def test_maximal_audit_mixed_batch():
    wiener_op = SpectralOperator(np.array([1.0, 2.0]))
    driver = QWienerDriver(q=np.array([0.5, 0.25]))
    const_case = ProblemTemplate(
        operator=wiener_op, grid=TimeGrid(0.5, 25),
        initial=InitialCondition(np.zeros(2)),
        coupling=MartingaleCoupling(
            driver=driver,
            diffusion=builtin_family("additive_constant",
                                     value=np.array([[0.3, 0.0], [0.0, 0.2]]),
                                     sqrt_q=np.sqrt(driver.q)),
        ),
    )
    mult_case = ProblemTemplate(
        operator=wiener_op, grid=TimeGrid(0.5, 25),
        initial=InitialCondition(np.array([1.0, 0.5])),
        coupling=MartingaleCoupling(
            driver=driver,
            diffusion=builtin_family("diagonal_multiplicative",
                                     gains=[0.3, 0.2],
                                     sqrt_q=np.sqrt(driver.q)),
        ),
    )
    shifted_op = SpectralOperator(np.array([-0.5, 1.0]), eta=0.5)
    quasi_case = ProblemTemplate(
        operator=shifted_op, grid=TimeGrid(0.5, 25),
        initial=InitialCondition(np.zeros(2)),
        coupling=MartingaleCoupling(
            driver=driver,
            diffusion=builtin_family("additive_constant",
                                     value=np.array([[0.3, 0.0], [0.0, 0.2]]),
                                     sqrt_q=np.sqrt(driver.q)),
        ),
    )
    marks = np.array([[0.4, 0.0], [0.0, -0.3]])
    weights = np.array([4.0, 3.0])
    prm_driver = PoissonRandomMeasureDriver(marks=marks, weights=weights)
    jump_case = ProblemTemplate(
        operator=wiener_op, grid=TimeGrid(0.5, 25),
        initial=InitialCondition(np.zeros(2)),
        coupling=JumpCoupling(
            driver=prm_driver,
            jump=jump_family("additive_mark", marks=marks, weights=weights,
                             p=4.0, amplitude=0.3),
        ),
        p=4.0,
    )
    report = audit_maximal_inequalities(
        {"const": const_case, "mult": mult_case, "quasi": quasi_case,
         "jump": jump_case},
        n_paths=300, base_seed=32,
    )
    assert report.ok and report.violations == 0
    kinds = {r.name: r.inequality for r in report.rows}
    assert kinds == {"const": "maxi2", "mult": "maxi2", "quasi": "maxi2",
                     "jump": "star"}
    star_rows = [r for r in report.rows if r.inequality == "star"]
    assert star_rows[0].lhs > 0.0 and star_rows[0].rhs > 0.0
    assert set(report.constants) == {"maxi2", "star"}
    assert all(np.isfinite(c) and c > 0 for c in report.constants.values())
    quasi_row = next(r for r in report.rows if r.name == "quasi")
    assert quasi_row.bound_ok  # dilated Doob ceiling 4 e^{2 eta T}


def test_maximal_audit_requires_coupling():
    plain = ProblemTemplate(
        operator=SpectralOperator(np.ones(1)), grid=TimeGrid(1.0, 10),
        initial=InitialCondition(np.zeros(1)),
    )
    with pytest.raises(ConvergenceError, match="no noise coupling"):
        audit_maximal_inequalities({"plain": plain}, n_paths=4, base_seed=0)
