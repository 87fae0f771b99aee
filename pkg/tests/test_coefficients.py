"""Coefficient maps: declared bounds, seminorms, convergent sequences,
and the sampled Lipschitz cross-check.
"""
import numpy as np
import pytest

from sevlab.coefficients import (
    BoundViolated,
    CoefficientError,
    DiffusionMap,
    DriftMap,
    JumpMap,
    UnknownFamily,
    builtin_family,
    estimate_lipschitz,
    jump_family,
    make_convergent_sequence,
    probe_states,
)
from sevlab.noise import PoissonRandomMeasureDriver


def sign_jump_map(p=2.0):
    # G(z, u) = z_0 u over marks +-1 with weights (2, 3)
    return JumpMap(
        fn=lambda z, u: z[0] * u,
        mark_values=np.array([1.0, -1.0]),
        weights=np.array([2.0, 3.0]),
        p=p,
        lipschitz_bound=np.sqrt(5.0),
    )


# -- builtin drift families ---------------------------------------------------


def test_linear_family_bound_and_values():
    f = builtin_family("linear", gains=[2.0, -1.0])
    assert f.lipschitz_bound == 2.0
    assert f.anchor_norm == 0.0
    assert np.allclose(f(np.array([1.0, 3.0])), [2.0, -3.0])
    assert f.pair_distance(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 2.0


def test_sigmoid_family_saturates():
    f = builtin_family("saturating_sigmoid", scale=0.5)
    assert f.lipschitz_bound == 1.0
    assert np.all(np.abs(f(np.array([100.0, -100.0]))) <= 0.5)
    with pytest.raises(CoefficientError):
        builtin_family("saturating_sigmoid", scale=0.0)


def test_clipped_quadratic_family():
    f = builtin_family("clipped_quadratic", cap=3.0)
    assert f.lipschitz_bound == 6.0
    # x|x| below the cap, cap * x beyond it
    assert f(np.array([2.0]))[0] == 4.0
    assert f(np.array([10.0]))[0] == 30.0


def test_additive_constant_drift():
    f = builtin_family("additive_constant", value=np.array([3.0, 4.0]))
    assert f.lipschitz_bound == 0.0
    assert f.anchor_norm == 5.0
    assert f.linear_growth == 5.0
    out = f(np.zeros((7, 2)))
    assert out.shape == (7, 2)
    assert np.all(out == [3.0, 4.0])


def test_unknown_family_names_raise():
    with pytest.raises(UnknownFamily):
        builtin_family("nope")
    with pytest.raises(UnknownFamily):
        jump_family("nope", marks=[1.0], weights=[1.0], p=2.0)


# -- diffusion maps -----------------------------------------------------------


def test_hs_q_norm_hand_value():
    b = builtin_family(
        "additive_constant",
        value=np.array([[1.0, 2.0], [3.0, 4.0]]),
        sqrt_q=np.array([1.0, 0.5]),
    )
    assert b.is_additive
    # B diag(sqrt_q) = [[1, 1], [3, 2]], squared sum 15
    assert np.allclose(b.hs_q_norm(np.zeros(2)), np.sqrt(15.0))
    assert b.pair_distance(np.zeros(2), np.ones(2)) == 0.0


def test_additive_apply_is_matrix_product():
    b = builtin_family(
        "additive_constant",
        value=np.array([[1.0, 2.0], [3.0, 4.0]]),
        sqrt_q=np.array([1.0, 1.0]),
    )
    dm = np.array([0.5, -1.0])
    assert np.allclose(b.apply(np.zeros(2), dm), b.constant_matrix @ dm)


def test_diagonal_multiplicative_consistency():
    b = builtin_family("diagonal_multiplicative", gains=[0.5, 2.0])
    u = np.array([1.0, -1.0])
    dm = np.array([0.2, 0.3])
    assert np.allclose(b.matrix(u), np.diag([0.5, -2.0]))
    assert np.allclose(b.apply(u, dm), b.matrix(u) @ dm)
    assert b.lipschitz_bound == 2.0
    with pytest.raises(CoefficientError):
        builtin_family("diagonal_multiplicative", gains=[1.0, 1.0],
                       sqrt_q=[1.0, 1.0, 1.0])


def test_diffusion_map_guards():
    with pytest.raises(CoefficientError):
        DiffusionMap(lipschitz_bound=0.0, sqrt_q=np.ones(2))
    with pytest.raises(CoefficientError):
        DiffusionMap(
            lipschitz_bound=0.0,
            sqrt_q=np.ones(3),
            constant_matrix=np.ones((2, 2)),
        )


# -- jump maps ----------------------------------------------------------------


def test_jump_compensator_hand_value():
    g = sign_jump_map()
    u = np.array([1.0, 2.0])
    # sum_i w_i G(z_i, u) = 2u - 3u = -u
    assert np.allclose(g.compensator(u), -u)


def test_jump_l2lp_norm_hand_value():
    g = sign_jump_map(p=4.0)
    u = np.array([0.6, 0.8])
    # per-mark norms both 1: L2 part sqrt(5), L4 part 5^(1/4)
    assert np.allclose(g.l2lp_norm(u), np.sqrt(5.0))
    assert np.allclose(g.pair_distance(2.0 * u, u), np.sqrt(5.0))


def test_jump_map_guards():
    with pytest.raises(CoefficientError):
        sign_jump_map(p=1.5)
    with pytest.raises(CoefficientError):
        JumpMap(
            fn=lambda z, u: u,
            mark_values=np.array([1.0, -1.0]),
            weights=np.array([1.0]),
            p=2.0,
            lipschitz_bound=1.0,
        )


def test_jump_map_matches_driver():
    g = sign_jump_map()
    same = PoissonRandomMeasureDriver(marks=np.array([1.0, -1.0]),
                                      weights=np.array([2.0, 3.0]))
    other = PoissonRandomMeasureDriver(marks=np.array([1.0, -1.0]),
                                       weights=np.array([2.0, 4.0]))
    assert g.matches_driver(same)
    assert not g.matches_driver(other)


def test_jump_family_bounds():
    g = jump_family(
        "mark_scaled_linear",
        marks=[2.0, -1.0],
        weights=[1.0, 1.0],
        p=2.0,
        coupling=0.5,
    )
    # weighted mark scales (1, 0.5): bound sqrt(1.25) at p = 2
    assert g.lipschitz_bound == pytest.approx(np.sqrt(1.25))
    add = jump_family(
        "additive_mark", marks=[2.0, -1.0], weights=[1.0, 1.0], p=2.0,
        amplitude=0.3,
    )
    assert add.lipschitz_bound == 0.0
    assert np.allclose(add.apply_mark(0, np.zeros(1)), [0.6])


# -- convergent sequences -----------------------------------------------------


def test_scale_sequence_gap_is_relative():
    limit = builtin_family("linear", gains=[2.0])
    seq = make_convergent_sequence(limit, "scale")
    u = np.array([3.0])
    for n in (1, 2, 5, 10):
        assert seq.pointwise_gap(n, u) == pytest.approx(6.0 / n)
        assert seq.member(n).lipschitz_bound == pytest.approx(2.0 * (1 + 1.0 / n))
    assert seq.uniform_bound == pytest.approx(4.0)
    assert seq.kind == "drift"


def test_offset_sequence_gap_is_exact():
    limit = builtin_family("additive_constant", value=np.array([1.0, 2.0]))
    seq = make_convergent_sequence(limit, "offset", offset=np.array([3.0, 4.0]))
    u = np.zeros(2)
    for n in (1, 4, 16):
        assert seq.pointwise_gap(n, u) == pytest.approx(5.0 / n, rel=1e-12)
    assert seq.uniform_bound == limit.lipschitz_bound


def test_zero_rate_sequence_is_constant():
    limit = builtin_family("linear", gains=[1.0, 1.0])
    seq = make_convergent_sequence(limit, "scale", rate=lambda n: 0.0)
    u = np.array([1.0, -2.0])
    assert np.all(seq.pointwise_gap(3, u) == 0.0)
    assert np.allclose(seq.member(3)(u), limit(u))


def test_jump_sequence_gap():
    limit = sign_jump_map()
    seq = make_convergent_sequence(limit, "scale")
    u = np.array([0.6, 0.8])
    assert seq.kind == "jump"
    assert seq.pointwise_gap(4, u) == pytest.approx(np.sqrt(5.0) / 4.0)


def test_sequence_guards():
    limit = builtin_family("linear", gains=[1.0])
    with pytest.raises(CoefficientError):
        make_convergent_sequence(limit, "wiggle")
    with pytest.raises(CoefficientError):
        make_convergent_sequence(limit, "offset")
    seq = make_convergent_sequence(limit, "scale")
    with pytest.raises(CoefficientError):
        seq.member(0)
    with pytest.raises(CoefficientError):
        seq.member(1.5)
    mult = builtin_family("diagonal_multiplicative", gains=[1.0])
    bad = make_convergent_sequence(mult, "offset", offset=np.array([[1.0]]))
    with pytest.raises(CoefficientError):
        bad.member(1)


# -- sampled Lipschitz verification -------------------------------------------


def test_probe_states_structure():
    cloud = probe_states(4, 10)
    assert cloud.shape == (21, 4)
    assert np.all(cloud[0] == 0.0)
    assert np.allclose(np.linalg.norm(cloud[1:11], axis=-1), 1.0)
    assert np.allclose(np.linalg.norm(cloud[11:], axis=-1), 10.0)


def test_estimate_lipschitz_linear_is_tight():
    f = builtin_family("linear", gains=[2.0])
    est = estimate_lipschitz(f, dim=1)
    assert abs(est - 2.0) < 1e-9


def test_estimate_lipschitz_constant_is_zero():
    f = builtin_family("additive_constant", value=np.array([1.0, 1.0]))
    assert estimate_lipschitz(f, dim=2) == 0.0


def test_estimate_lipschitz_sigmoid_below_one():
    f = builtin_family("saturating_sigmoid", scale=1.0)
    est = estimate_lipschitz(f, dim=3)
    assert 0.0 < est <= 1.0 + 1e-8


def test_estimate_lipschitz_detects_lying_bound():
    liar = DriftMap(fn=lambda x: 2.0 * x, lipschitz_bound=1.0, anchor_norm=0.0,
                    label="liar")
    with pytest.raises(BoundViolated):
        estimate_lipschitz(liar, dim=2)
