"""Driving noises: Q-Wiener, compensated compound Poisson, Poisson random measure.

All drivers live on a uniform time grid and satisfy the trace-class
bracket bound <<M, M>>(t) - <<M, M>>(s) <= (t - s) Q: the operator
angle bracket has density Q with respect to dt, and the scalar bracket
is normalized to d<M, M> = dt.  Sampling is driven by counter-derived
generator streams so that a path is a pure function of
(base_seed, sweep_index, path_index).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "NoiseError",
    "TimeGrid",
    "JumpLaw",
    "QWienerDriver",
    "CompensatedCompoundPoissonDriver",
    "PoissonRandomMeasureDriver",
    "NoisePath",
    "NoiseEnsemble",
    "derive_rng",
    "sample_wiener_path",
    "sample_compound_poisson_path",
    "sample_prm_path",
    "sample_noise_ensemble",
    "verify_hypothesis_q",
    "HypothesisQReport",
]

# Stream roles hung off one (base_seed, sweep, path) key.
ROLE_NOISE = 0
ROLE_INITIAL = 1

MEAN_ZERO_TOL = 1e-12


class NoiseError(ValueError):
    """Invalid driver data or sampling arguments."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_steps = horizon."""

    horizon: float
    steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise NoiseError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise NoiseError(f"need at least one step, got {self.steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def points(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def derive_rng(base_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (base_seed, *key).

    Distinct keys give statistically independent streams, and the mapping
    is stable across runs and platforms.
    """
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=tuple(key)))


def _resolve_rng(rng_seed) -> tuple[np.random.Generator, tuple]:
    if isinstance(rng_seed, (int, np.integer)):
        return derive_rng(int(rng_seed)), (int(rng_seed),)
    key = tuple(int(k) for k in rng_seed)
    return derive_rng(key[0], *key[1:]), key


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QWienerDriver:
    """Wiener process on R^K with diagonal covariance diag(q)."""

    q: np.ndarray

    def __post_init__(self) -> None:
        q = np.atleast_1d(np.asarray(self.q, dtype=float)).copy()
        if q.ndim != 1 or q.size == 0:
            raise NoiseError("q must be a non-empty 1-d sequence")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise NoiseError("covariance eigenvalues must be finite and >= 0")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def dim_k(self) -> int:
        return int(self.q.size)

    @property
    def covariance_rate(self) -> np.ndarray:
        """Density Q of the operator bracket with respect to dt."""
        return np.diag(self.q)

    @property
    def trace_rate(self) -> float:
        """Density of the scalar quadratic variation [M, M] (= tr Q)."""
        return float(np.sum(self.q))


@dataclass(frozen=True)
class JumpLaw:
    """Mean-zero jump distribution on R^K.

    Either a finite atom list (values with probabilities) or a centered
    Gaussian with diagonal covariance.
    """

    kind: str  # "atoms" | "gaussian"
    values: np.ndarray | None = None
    probs: np.ndarray | None = None
    gaussian_cov: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind == "atoms":
            values = np.atleast_2d(np.asarray(self.values, dtype=float)).copy()
            probs = np.atleast_1d(np.asarray(self.probs, dtype=float)).copy()
            if values.shape[0] != probs.size:
                raise NoiseError("atom values and probabilities must align")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise NoiseError("atom probabilities must be >= 0 and sum to 1")
            mean = probs @ values
            if np.linalg.norm(mean) > MEAN_ZERO_TOL:
                raise NoiseError(
                    f"jump law must be mean-zero, got mean norm {np.linalg.norm(mean):.3e}"
                )
            values.setflags(write=False)
            probs.setflags(write=False)
            object.__setattr__(self, "values", values)
            object.__setattr__(self, "probs", probs)
        elif self.kind == "gaussian":
            cov = np.atleast_1d(np.asarray(self.gaussian_cov, dtype=float)).copy()
            if np.any(cov < 0):
                raise NoiseError("gaussian jump covariance must be >= 0")
            cov.setflags(write=False)
            object.__setattr__(self, "gaussian_cov", cov)
        else:
            raise NoiseError(f"unknown jump law kind {self.kind!r}")

    @property
    def dim_k(self) -> int:
        if self.kind == "atoms":
            return int(self.values.shape[1])
        return int(self.gaussian_cov.size)

    def covariance(self) -> np.ndarray:
        """E[J J^T] of one jump."""
        if self.kind == "atoms":
            return np.einsum("m,mi,mj->ij", self.probs, self.values, self.values)
        return np.diag(self.gaussian_cov)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "atoms":
            idx = rng.choice(self.probs.size, size=size, p=self.probs)
            return self.values[idx]
        return rng.standard_normal((size, self.dim_k)) * np.sqrt(self.gaussian_cov)


@dataclass(frozen=True)
class CompensatedCompoundPoissonDriver:
    """Compound Poisson martingale: rate * Cov(jumps) plays the role of Q.

    With a mean-zero jump law the process is already a martingale; no
    extra drift compensation is needed at sampling time.
    """

    rate: float
    jump_law: JumpLaw

    def __post_init__(self) -> None:
        # rate 0 is allowed and degenerates to the zero martingale
        if not self.rate >= 0 or not np.isfinite(self.rate):
            raise NoiseError(f"jump rate must be finite and >= 0, got {self.rate}")

    @property
    def dim_k(self) -> int:
        return self.jump_law.dim_k

    @property
    def covariance_rate(self) -> np.ndarray:
        return self.rate * self.jump_law.covariance()

    @property
    def trace_rate(self) -> float:
        return float(np.trace(self.covariance_rate))


@dataclass(frozen=True)
class PoissonRandomMeasureDriver:
    """Poisson random measure with a finite mark set and finite intensity.

    ``marks`` is an (m, z_dim) array of mark values and ``weights`` the
    intensity m({z_i}) per unit time.  The compensator is
    weights x Lebesgue, and the finite total intensity allows direct
    simulation of event times.
    """

    marks: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        marks = np.asarray(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        marks = marks.copy()
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if marks.shape[0] != weights.size or weights.size == 0:
            raise NoiseError("marks and weights must align and be non-empty")
        # the zero measure (all weights 0) is allowed and produces no events
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise NoiseError("mark intensities must be finite and >= 0")
        marks.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @property
    def n_marks(self) -> int:
        return int(self.weights.size)

    @property
    def total_intensity(self) -> float:
        return float(np.sum(self.weights))


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoisePath:
    """One sampled realization of a driver on a grid.

    Martingale kinds carry per-cell increments and the realized scalar
    quadratic variation per cell; the Poisson-measure kind carries the
    exact event times with their mark indices.
    """

    kind: str  # "wiener" | "cpoisson" | "prm"
    grid: TimeGrid
    stream_id: tuple
    increments: np.ndarray | None = None  # (steps, K)
    realized_qv: np.ndarray | None = None  # (steps,)
    event_times: np.ndarray | None = None
    event_marks: np.ndarray | None = None


def sample_wiener_path(driver: QWienerDriver, grid: TimeGrid, rng_seed) -> NoisePath:
    """Increments Delta M_k ~ N(0, dt * diag(q)), independent across cells."""
    rng, key = _resolve_rng(rng_seed)
    scale = np.sqrt(grid.dt * driver.q)
    inc = rng.standard_normal((grid.steps, driver.dim_k)) * scale
    # The continuous-time quadratic variation of a Wiener integral is
    # deterministic: tr(Q) dt per cell.
    qv = np.full(grid.steps, driver.trace_rate * grid.dt)
    return NoisePath(
        kind="wiener", grid=grid, stream_id=key, increments=inc, realized_qv=qv
    )


def sample_compound_poisson_path(
    driver: CompensatedCompoundPoissonDriver, grid: TimeGrid, rng_seed
) -> NoisePath:
    """Per-cell Poisson(rate * dt) jump counts with i.i.d. mean-zero jumps."""
    rng, key = _resolve_rng(rng_seed)
    counts = rng.poisson(driver.rate * grid.dt, size=grid.steps)
    total = int(counts.sum())
    inc = np.zeros((grid.steps, driver.dim_k))
    qv = np.zeros(grid.steps)
    if total:
        jumps = driver.jump_law.sample(rng, total)
        cells = np.repeat(np.arange(grid.steps), counts)
        np.add.at(inc, cells, jumps)
        np.add.at(qv, cells, np.einsum("ij,ij->i", jumps, jumps))
    return NoisePath(
        kind="cpoisson", grid=grid, stream_id=key, increments=inc, realized_qv=qv
    )


def sample_prm_path(
    driver: PoissonRandomMeasureDriver, grid: TimeGrid, rng_seed
) -> NoisePath:
    """Exact event times in (0, T] with categorical marks.

    Event times are kept rather than binned so that jump-adapted solvers
    can place jumps exactly.
    """
    rng, key = _resolve_rng(rng_seed)
    total = int(rng.poisson(driver.total_intensity * grid.horizon))
    # 1 - U keeps times inside the half-open interval (0, T].
    times = np.sort(grid.horizon * (1.0 - rng.random(total)))
    if total:
        marks = rng.choice(
            driver.n_marks, size=total, p=driver.weights / driver.total_intensity
        )
    else:
        marks = np.empty(0, dtype=int)
    return NoisePath(
        kind="prm",
        grid=grid,
        stream_id=key,
        event_times=times,
        event_marks=marks,
    )


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseEnsemble:
    """Stacked paths sharing one coupling key (base_seed, sweep_index).

    Path i is sampled from the stream (base_seed, sweep_index, i, role),
    so an ensemble is reproducible path by path and two equations driven
    by the same ensemble see identical noise.
    """

    kind: str
    driver: object
    grid: TimeGrid
    coupling_key: tuple
    n_paths: int
    increments: np.ndarray | None = None  # (N, steps, K)
    realized_qv: np.ndarray | None = None  # (N, steps)
    events: tuple | None = None  # tuple of (times, marks) pairs

    def path(self, i: int) -> NoisePath:
        stream = (*self.coupling_key, i)
        if self.kind == "prm":
            times, marks = self.events[i]
            return NoisePath(
                kind=self.kind,
                grid=self.grid,
                stream_id=stream,
                event_times=times,
                event_marks=marks,
            )
        return NoisePath(
            kind=self.kind,
            grid=self.grid,
            stream_id=stream,
            increments=self.increments[i],
            realized_qv=self.realized_qv[i],
        )


def _driver_kind(driver) -> str:
    if isinstance(driver, QWienerDriver):
        return "wiener"
    if isinstance(driver, CompensatedCompoundPoissonDriver):
        return "cpoisson"
    if isinstance(driver, PoissonRandomMeasureDriver):
        return "prm"
    raise NoiseError(f"unrecognized driver {type(driver).__name__}")


def sample_noise_ensemble(
    driver, grid: TimeGrid, base_seed: int, sweep_index: int, n_paths: int
) -> NoiseEnsemble:
    """Sample n_paths independent paths under one coupling key."""
    if n_paths < 1:
        raise NoiseError("need at least one path")
    kind = _driver_kind(driver)
    key = (int(base_seed), int(sweep_index))
    samplers = {
        "wiener": sample_wiener_path,
        "cpoisson": sample_compound_poisson_path,
        "prm": sample_prm_path,
    }
    paths = [
        samplers[kind](driver, grid, (*key, i, ROLE_NOISE)) for i in range(n_paths)
    ]
    if kind == "prm":
        return NoiseEnsemble(
            kind=kind,
            driver=driver,
            grid=grid,
            coupling_key=key,
            n_paths=n_paths,
            events=tuple((p.event_times, p.event_marks) for p in paths),
        )
    return NoiseEnsemble(
        kind=kind,
        driver=driver,
        grid=grid,
        coupling_key=key,
        n_paths=n_paths,
        increments=np.stack([p.increments for p in paths]),
        realized_qv=np.stack([p.realized_qv for p in paths]),
    )


# ---------------------------------------------------------------------------
# Hypothesis (Q) verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HypothesisQReport:
    """Per-cell comparison of empirical increment covariance against dt * Q."""

    n_paths: int
    n_cells: int
    max_abs_z: float
    max_mean_z: float
    cells_ok: np.ndarray
    ok: bool


def verify_hypothesis_q(
    ensemble: NoiseEnsemble, z_crit: float = 4.0
) -> HypothesisQReport:
    """Check the bracket bound on a sampled martingale ensemble.

    For the drivers in this module the bracket density is exactly Q, so
    the per-cell increment covariance must equal dt * Q within sampling
    error; the increment mean must vanish within sampling error as well.
    """
    if ensemble.kind == "prm":
        raise NoiseError(
            "bracket verification applies to martingale drivers; "
            "Poisson-measure compensation is checked at the solver level"
        )
    if ensemble.n_paths < 2:
        raise NoiseError("need at least two paths to estimate covariances")
    inc = ensemble.increments  # (N, steps, K)
    n = ensemble.n_paths
    target = ensemble.grid.dt * ensemble.driver.covariance_rate
    prods = np.einsum("nsi,nsj->nsij", inc, inc)
    emp = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.abs(emp - target) / np.where(se > 0, se, np.inf)
    cells_ok = np.all(z <= z_crit, axis=(1, 2))
    mean_se = inc.std(axis=0, ddof=1) / np.sqrt(n)
    mean_z = np.abs(inc.mean(axis=0)) / np.where(mean_se > 0, mean_se, np.inf)
    return HypothesisQReport(
        n_paths=n,
        n_cells=ensemble.grid.steps,
        max_abs_z=float(np.max(z)),
        max_mean_z=float(np.max(mean_z)),
        cells_ok=cells_ok,
        ok=bool(np.all(cells_ok) and np.max(mean_z) <= z_crit),
    )
