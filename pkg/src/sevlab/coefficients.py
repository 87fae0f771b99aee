"""Coefficient maps with declared Lipschitz structure.

Three kinds of coefficients enter the equations:

    drift      f : H -> H, Lipschitz with constant L_f
    diffusion  B : H -> L(K, H), Lipschitz in the Hilbert-Schmidt
               seminorm || . diag(sqrt_q) ||_HS induced by the driver
               covariance
    jump       G : Z x H -> H, Lipschitz in the L_2(Z) cap L_p(Z) norm
               max( (sum_i w_i ||.||^2)^{1/2}, (sum_i w_i ||.||^p)^{1/p} )

Each map carries its declared bound; a sampled estimator cross-checks the
declaration and raises when a quotient exceeds it.  All evaluation
callables are vectorized over leading axes: states have shape (..., d).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CoefficientError",
    "BoundViolated",
    "UnknownFamily",
    "DriftMap",
    "DiffusionMap",
    "JumpMap",
    "CoefficientSequence",
    "builtin_family",
    "jump_family",
    "make_convergent_sequence",
    "estimate_lipschitz",
    "probe_states",
]

BOUND_SLACK = 1e-8


class CoefficientError(ValueError):
    """Invalid coefficient data."""


class BoundViolated(CoefficientError):
    """A sampled Lipschitz quotient exceeded the declared bound."""


class UnknownFamily(CoefficientError):
    """Requested builtin family name is not registered."""


# ---------------------------------------------------------------------------
# Map kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftMap:
    """Nonlinearity f : H -> H with Lipschitz constant and anchor ||f(0)||."""

    fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    lipschitz_bound: float
    anchor_norm: float
    label: str = ""

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.fn(np.asarray(u, dtype=float))

    @property
    def linear_growth(self) -> float:
        """N with ||f(x)|| <= N (1 + ||x||)."""
        return max(self.lipschitz_bound, self.anchor_norm)

    def pair_distance(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self(u) - self(v), axis=-1)


@dataclass(frozen=True)
class DiffusionMap:
    """Coefficient B : H -> L(K, H) acting on martingale increments.

    ``matrix_fn`` returns the (..., d, K) matrix of B at a batch of
    states; ``constant_matrix`` short-circuits the state-independent
    case.  The declared bound lives in the || . diag(sqrt_q) ||_HS
    seminorm tied to the driver covariance.
    """

    lipschitz_bound: float
    sqrt_q: np.ndarray
    matrix_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    apply_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = field(
        default=None, repr=False
    )
    constant_matrix: np.ndarray | None = None
    label: str = ""

    def __post_init__(self) -> None:
        sq = np.atleast_1d(np.asarray(self.sqrt_q, dtype=float)).copy()
        sq.setflags(write=False)
        object.__setattr__(self, "sqrt_q", sq)
        if self.constant_matrix is not None:
            cm = np.asarray(self.constant_matrix, dtype=float).copy()
            if cm.ndim != 2 or cm.shape[1] != sq.size:
                raise CoefficientError(
                    f"constant matrix shape {cm.shape} incompatible with K = {sq.size}"
                )
            cm.setflags(write=False)
            object.__setattr__(self, "constant_matrix", cm)
        elif self.matrix_fn is None:
            raise CoefficientError("need either matrix_fn or constant_matrix")

    @property
    def is_additive(self) -> bool:
        return self.constant_matrix is not None

    @property
    def dim_k(self) -> int:
        return int(self.sqrt_q.size)

    def matrix(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.constant_matrix is not None:
            return np.broadcast_to(
                self.constant_matrix, u.shape[:-1] + self.constant_matrix.shape
            )
        return self.matrix_fn(u)

    def apply(self, u: np.ndarray, dm: np.ndarray) -> np.ndarray:
        """B(u) dm for a batch of states and increments."""
        if self.apply_fn is not None:
            return self.apply_fn(np.asarray(u, dtype=float), np.asarray(dm, dtype=float))
        if self.constant_matrix is not None:
            return np.asarray(dm, dtype=float) @ self.constant_matrix.T
        return np.einsum("...dk,...k->...d", self.matrix(u), dm)

    def hs_q_norm(self, u: np.ndarray) -> np.ndarray:
        """|| B(u) diag(sqrt_q) ||_HS per batch element."""
        m = self.matrix(u) * self.sqrt_q
        return np.sqrt(np.sum(m * m, axis=(-2, -1)))

    def pair_distance(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        m = (self.matrix(u) - self.matrix(v)) * self.sqrt_q
        return np.sqrt(np.sum(m * m, axis=(-2, -1)))


@dataclass(frozen=True)
class JumpMap:
    """Coefficient G : Z x H -> H over a finite mark set.

    ``fn(z, u)`` evaluates one mark value z against a batch of states.
    Mark values and intensity weights mirror the driving Poisson measure;
    p fixes the L_2 cap L_p norm in which the bound is declared.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    mark_values: np.ndarray
    weights: np.ndarray
    p: float
    lipschitz_bound: float
    label: str = ""

    def __post_init__(self) -> None:
        marks = np.asarray(self.mark_values, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        marks = marks.copy()
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if marks.shape[0] != weights.size:
            raise CoefficientError("mark values and weights must align")
        if self.p < 2:
            raise CoefficientError(f"p must be >= 2, got {self.p}")
        marks.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "mark_values", marks)
        object.__setattr__(self, "weights", weights)

    @property
    def n_marks(self) -> int:
        return int(self.weights.size)

    def apply_mark(self, i: int, u: np.ndarray) -> np.ndarray:
        return self.fn(self.mark_values[i], np.asarray(u, dtype=float))

    def compensator(self, u: np.ndarray) -> np.ndarray:
        """int_Z G(z, u) m(dz) = sum_i w_i G(z_i, u)."""
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        for i, w in enumerate(self.weights):
            out = out + w * self.apply_mark(i, u)
        return out

    def _l2lp(self, values: np.ndarray) -> np.ndarray:
        # values: (m, ..., d) stack of per-mark outputs
        norms = np.linalg.norm(values, axis=-1)  # (m, ...)
        w = self.weights.reshape((-1,) + (1,) * (norms.ndim - 1))
        l2 = np.sqrt(np.sum(w * norms**2, axis=0))
        lp = np.sum(w * norms**self.p, axis=0) ** (1.0 / self.p)
        return np.maximum(l2, lp)

    def l2lp_norm(self, u: np.ndarray) -> np.ndarray:
        stack = np.stack([self.apply_mark(i, u) for i in range(self.n_marks)])
        return self._l2lp(stack)

    def pair_distance(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        stack = np.stack(
            [self.apply_mark(i, u) - self.apply_mark(i, v) for i in range(self.n_marks)]
        )
        return self._l2lp(stack)

    def matches_driver(self, driver) -> bool:
        return (
            self.mark_values.shape == driver.marks.shape
            and np.array_equal(self.mark_values, driver.marks)
            and np.array_equal(self.weights, driver.weights)
        )


# ---------------------------------------------------------------------------
# Builtin families
# ---------------------------------------------------------------------------


def builtin_family(name: str, **params):
    """Construct a builtin coefficient map by name.

    Drift names: ``linear`` (gains), ``saturating_sigmoid`` (scale),
    ``clipped_quadratic`` (cap), ``additive_constant`` (1-d value).
    Diffusion names: ``diagonal_multiplicative`` (gains, sqrt_q),
    ``additive_constant`` (2-d value, sqrt_q).
    """
    if name == "linear":
        gains = np.atleast_1d(np.asarray(params["gains"], dtype=float))
        return DriftMap(
            fn=lambda x: gains * x,
            lipschitz_bound=float(np.max(np.abs(gains))),
            anchor_norm=0.0,
            label=f"linear({gains.tolist()})",
        )
    if name == "saturating_sigmoid":
        s = float(params["scale"])
        if s <= 0:
            raise CoefficientError("sigmoid scale must be positive")
        return DriftMap(
            fn=lambda x: s * np.tanh(x / s),
            lipschitz_bound=1.0,
            anchor_norm=0.0,
            label=f"saturating_sigmoid({s:g})",
        )
    if name == "clipped_quadratic":
        cap = float(params["cap"])
        if cap <= 0:
            raise CoefficientError("quadratic cap must be positive")
        return DriftMap(
            fn=lambda x: x * np.minimum(np.abs(x), cap),
            lipschitz_bound=2.0 * cap,
            anchor_norm=0.0,
            label=f"clipped_quadratic({cap:g})",
        )
    if name == "diagonal_multiplicative":
        gains = np.atleast_1d(np.asarray(params["gains"], dtype=float))
        sqrt_q = np.atleast_1d(np.asarray(params.get("sqrt_q", np.ones_like(gains)), dtype=float))
        if sqrt_q.size != gains.size:
            raise CoefficientError("diagonal coupling needs K = d")
        d = gains.size

        def matrix_fn(u):
            u = np.asarray(u, dtype=float)
            out = np.zeros(u.shape + (d,))
            idx = np.arange(d)
            out[..., idx, idx] = gains * u
            return out

        return DiffusionMap(
            matrix_fn=matrix_fn,
            apply_fn=lambda u, dm: gains * u * dm,
            lipschitz_bound=float(np.max(np.abs(gains) * sqrt_q)),
            sqrt_q=sqrt_q,
            label=f"diagonal_multiplicative({gains.tolist()})",
        )
    if name == "additive_constant":
        value = np.asarray(params["value"], dtype=float)
        if value.ndim == 1:
            return DriftMap(
                fn=lambda x, v=value: np.broadcast_to(v, np.shape(x)).copy(),
                lipschitz_bound=0.0,
                anchor_norm=float(np.linalg.norm(value)),
                label="additive_constant",
            )
        if value.ndim == 2:
            sqrt_q = np.atleast_1d(
                np.asarray(params.get("sqrt_q", np.ones(value.shape[1])), dtype=float)
            )
            return DiffusionMap(
                constant_matrix=value,
                lipschitz_bound=0.0,
                sqrt_q=sqrt_q,
                label="additive_constant",
            )
        raise CoefficientError("additive_constant value must be 1-d or 2-d")
    raise UnknownFamily(f"no builtin coefficient family named {name!r}")


def jump_family(name: str, marks, weights, p: float, **params) -> JumpMap:
    """Construct a jump coefficient over a finite mark set.

    ``mark_scaled_linear``: G(z, u) = coupling * z_0 * u.
    ``mark_scaled_sigmoid``: G(z, u) = coupling * z_0 * s tanh(u / s).
    ``additive_mark``: G(z, u) = amplitude * z (marks live in H).
    """
    marks = np.asarray(marks, dtype=float)
    if marks.ndim == 1:
        marks = marks[:, None]
    weights = np.atleast_1d(np.asarray(weights, dtype=float))

    def _scalar_weight_bound(c: float) -> float:
        # Lipschitz constant of u -> c z_0 phi(u), phi 1-Lipschitz, in the
        # L_2 cap L_p norm over the mark measure.
        zw = np.abs(marks[:, 0]) * abs(c)
        l2 = float(np.sqrt(np.sum(weights * zw**2)))
        lp = float(np.sum(weights * zw**p) ** (1.0 / p))
        return max(l2, lp)

    if name == "mark_scaled_linear":
        c = float(params["coupling"])
        return JumpMap(
            fn=lambda z, u: c * z[0] * u,
            mark_values=marks,
            weights=weights,
            p=p,
            lipschitz_bound=_scalar_weight_bound(c),
            label=f"mark_scaled_linear({c:g})",
        )
    if name == "mark_scaled_sigmoid":
        c = float(params["coupling"])
        s = float(params["scale"])
        return JumpMap(
            fn=lambda z, u: c * z[0] * s * np.tanh(u / s),
            mark_values=marks,
            weights=weights,
            p=p,
            lipschitz_bound=_scalar_weight_bound(c),
            label=f"mark_scaled_sigmoid({c:g},{s:g})",
        )
    if name == "additive_mark":
        amp = float(params.get("amplitude", 1.0))
        return JumpMap(
            fn=lambda z, u: np.broadcast_to(amp * z, np.shape(u)).copy(),
            mark_values=marks,
            weights=weights,
            p=p,
            lipschitz_bound=0.0,
            label=f"additive_mark({amp:g})",
        )
    raise UnknownFamily(f"no jump family named {name!r}")


# ---------------------------------------------------------------------------
# Convergent sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoefficientSequence:
    """Sequence of coefficient maps converging pointwise to a limit.

    The uniform bound dominates every member's Lipschitz constant as
    well as the limit's, which is what the stability estimates consume.
    """

    limit: object
    member_fn: Callable[[int], object] = field(repr=False)
    uniform_bound: float
    kind: str

    def member(self, n: int):
        if n < 1 or int(n) != n:
            raise CoefficientError(f"sequence index must be an integer >= 1, got {n}")
        return self.member_fn(int(n))

    def pointwise_gap(self, n: int, u: np.ndarray) -> np.ndarray:
        """||member_n(u) - limit(u)|| in the map's own output seminorm."""
        member = self.member(n)
        if self.kind == "drift":
            return np.linalg.norm(member(u) - self.limit(u), axis=-1)
        if self.kind == "diffusion":
            m = (member.matrix(u) - self.limit.matrix(u)) * self.limit.sqrt_q
            return np.sqrt(np.sum(m * m, axis=(-2, -1)))
        stack = np.stack(
            [
                member.apply_mark(i, u) - self.limit.apply_mark(i, u)
                for i in range(self.limit.n_marks)
            ]
        )
        return self.limit._l2lp(stack)


def _scaled_member(limit, factor: float):
    if isinstance(limit, DriftMap):
        return DriftMap(
            fn=lambda x: factor * limit.fn(x),
            lipschitz_bound=abs(factor) * limit.lipschitz_bound,
            anchor_norm=abs(factor) * limit.anchor_norm,
            label=f"{limit.label}*{factor:g}",
        )
    if isinstance(limit, DiffusionMap):
        if limit.is_additive:
            return DiffusionMap(
                constant_matrix=factor * limit.constant_matrix,
                lipschitz_bound=abs(factor) * limit.lipschitz_bound,
                sqrt_q=limit.sqrt_q,
                label=f"{limit.label}*{factor:g}",
            )
        return DiffusionMap(
            matrix_fn=lambda u: factor * limit.matrix_fn(u),
            apply_fn=(
                (lambda u, dm: factor * limit.apply_fn(u, dm))
                if limit.apply_fn is not None
                else None
            ),
            lipschitz_bound=abs(factor) * limit.lipschitz_bound,
            sqrt_q=limit.sqrt_q,
            label=f"{limit.label}*{factor:g}",
        )
    if isinstance(limit, JumpMap):
        return JumpMap(
            fn=lambda z, u: factor * limit.fn(z, u),
            mark_values=limit.mark_values,
            weights=limit.weights,
            p=limit.p,
            lipschitz_bound=abs(factor) * limit.lipschitz_bound,
            label=f"{limit.label}*{factor:g}",
        )
    raise CoefficientError(f"cannot scale {type(limit).__name__}")


def _offset_member(limit, offset: np.ndarray, r: float):
    if isinstance(limit, DriftMap):
        return DriftMap(
            fn=lambda x: limit.fn(x) + r * offset,
            lipschitz_bound=limit.lipschitz_bound,
            anchor_norm=limit.anchor_norm + abs(r) * float(np.linalg.norm(offset)),
            label=f"{limit.label}+offset",
        )
    if isinstance(limit, DiffusionMap) and limit.is_additive:
        return DiffusionMap(
            constant_matrix=limit.constant_matrix + r * offset,
            lipschitz_bound=limit.lipschitz_bound,
            sqrt_q=limit.sqrt_q,
            label=f"{limit.label}+offset",
        )
    raise CoefficientError("offset perturbations apply to drifts and additive diffusions")


def make_convergent_sequence(
    limit,
    mode: str,
    rate: Callable[[int], float] | None = None,
    offset=None,
) -> CoefficientSequence:
    """Sequence member_n = limit perturbed by r_n = rate(n) -> 0.

    ``scale`` mode multiplies the map by (1 + r_n); ``offset`` mode adds
    r_n * offset (drifts and additive diffusions).  The uniform bound is
    taken at n = 1, where |r_n| is assumed largest.
    """
    rate = rate or (lambda n: 1.0 / n)
    if isinstance(limit, DriftMap):
        kind = "drift"
    elif isinstance(limit, DiffusionMap):
        kind = "diffusion"
    elif isinstance(limit, JumpMap):
        kind = "jump"
    else:
        raise CoefficientError(f"unsupported limit {type(limit).__name__}")

    if mode == "scale":
        member_fn = lambda n: _scaled_member(limit, 1.0 + rate(n))
        uniform = (1.0 + abs(rate(1))) * limit.lipschitz_bound
    elif mode == "offset":
        if offset is None:
            raise CoefficientError("offset mode needs an offset value")
        off = np.asarray(offset, dtype=float)
        member_fn = lambda n: _offset_member(limit, off, rate(n))
        uniform = limit.lipschitz_bound
    else:
        raise CoefficientError(f"unknown perturbation mode {mode!r}")
    return CoefficientSequence(
        limit=limit, member_fn=member_fn, uniform_bound=uniform, kind=kind
    )


# ---------------------------------------------------------------------------
# Sampled Lipschitz verification
# ---------------------------------------------------------------------------


def probe_states(dim: int, count: int, rng_seed: int = 0) -> np.ndarray:
    """Probe cloud: the origin, seeded unit vectors and norm-10 vectors."""
    rng = np.random.default_rng(rng_seed)
    raw = rng.standard_normal((count, dim))
    unit = raw / np.linalg.norm(raw, axis=-1, keepdims=True)
    return np.concatenate([np.zeros((1, dim)), unit, 10.0 * unit])


def estimate_lipschitz(
    map_obj, dim: int, pairs: int = 400, rng_seed: int = 0
) -> float:
    """Sampled max difference quotient in the map's declared seminorm.

    Raises BoundViolated when the estimate exceeds the declared bound
    beyond roundoff slack; the estimate is a lower bound, so passing is
    necessary but not sufficient.
    """
    rng = np.random.default_rng(rng_seed)
    cloud = probe_states(dim, max(8, pairs // 4), rng_seed=rng_seed + 1)
    iu = rng.integers(0, cloud.shape[0], size=pairs)
    iv = rng.integers(0, cloud.shape[0], size=pairs)
    u, v = cloud[iu], cloud[iv]
    gaps = np.linalg.norm(u - v, axis=-1)
    # distinct indices can still collide (e.g. the 1-d cloud is {0, +-1, +-10})
    keep = gaps > 0
    quotients = map_obj.pair_distance(u[keep], v[keep]) / gaps[keep]
    estimate = float(np.max(quotients)) if quotients.size else 0.0
    if estimate > map_obj.lipschitz_bound * (1.0 + BOUND_SLACK) + BOUND_SLACK:
        raise BoundViolated(
            f"sampled Lipschitz quotient {estimate:.6g} exceeds declared bound "
            f"{map_obj.lipschitz_bound:.6g} for {getattr(map_obj, 'label', map_obj)}"
        )
    return estimate
