"""Mild-solution solvers on spectral truncations.

Martingale-driven equations use an exponential Euler step

    u_{k+1} = S(dt) u_k - Phi1(dt) f(u_k) + S(dt) B(u_k) dM_k,

where S(dt) = exp(-dt A) acts exactly on the truncation and Phi1(dt) is
the cell-exact semigroup weight of a forcing frozen at the left cell
endpoint (mode-wise (1 - exp(-a dt))/a, so the zero-noise scheme and the
deterministic solver agree to machine precision).  Poisson-measure
equations use a jump-adapted variant: between events the compensator
acts as a frozen drift on sub-cells, and at an event time tau the state
jumps by G(z, u(tau-)); recorded grid states follow the right-continuous
convention.

Solves can track the three linear components of the
variation-of-constants form (initial propagation, drift convolution,
noise convolution).  The component recursions share the solver's own
weights, so

    u_k = initial_k - drift_k + noise_k

holds exactly at every step; downstream error decompositions rely on
this identity.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coefficients import DiffusionMap, DriftMap, JumpMap
from .noise import (
    ROLE_INITIAL,
    CompensatedCompoundPoissonDriver,
    NoiseEnsemble,
    NoisePath,
    PoissonRandomMeasureDriver,
    QWienerDriver,
    TimeGrid,
    derive_rng,
)

__all__ = [
    "SolverError",
    "DriverMismatch",
    "CouplingMismatch",
    "InitialCondition",
    "MartingaleCoupling",
    "JumpCoupling",
    "EvolutionProblem",
    "PathEnsemble",
    "MildComponents",
    "solve_ensemble",
    "solve_mild_martingale",
    "solve_mild_poisson",
    "solve_deterministic",
    "stochastic_convolution",
    "sup_norm_curves",
    "moment_curve",
    "hp_norm_estimate",
    "difference_ensemble",
    "difference_hp",
]


class SolverError(ValueError):
    """Invalid problem data or solver arguments."""


class DriverMismatch(SolverError):
    """Noise kind does not match the problem coupling."""


class CouplingMismatch(SolverError):
    """Ensembles were not produced under a shared noise coupling."""


# ---------------------------------------------------------------------------
# Problem description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialCondition:
    """Deterministic vector or isotropic Gaussian initial datum.

    Sampling path i under coupling key (seed, sweep) uses the stream
    (seed, sweep, i, ROLE_INITIAL), so two problems sharing a coupling
    key draw identical initial states.
    """

    mean: np.ndarray
    gaussian_scale: float = 0.0

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        if self.gaussian_scale < 0:
            raise SolverError("gaussian scale must be >= 0")

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def shifted(self, offset) -> "InitialCondition":
        """Same random part, mean moved by ``offset``."""
        return InitialCondition(self.mean + np.asarray(offset, dtype=float),
                                self.gaussian_scale)

    def sample(self, coupling_key: tuple, n_paths: int) -> np.ndarray:
        if self.gaussian_scale == 0.0:
            return np.tile(self.mean, (n_paths, 1))
        rows = [
            self.mean
            + self.gaussian_scale
            * derive_rng(coupling_key[0], *coupling_key[1:], i, ROLE_INITIAL
                         ).standard_normal(self.dim)
            for i in range(n_paths)
        ]
        return np.stack(rows)


@dataclass(frozen=True)
class MartingaleCoupling:
    """Noise term B(u) dM with a martingale driver.

    Exactly one of ``diffusion`` (state-dependent or constant DiffusionMap)
    and ``time_integrand`` (t -> (d, K) matrix, deterministic) is given.
    """

    driver: object
    diffusion: DiffusionMap | None = None
    time_integrand: Callable[[float], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not isinstance(
            self.driver, (QWienerDriver, CompensatedCompoundPoissonDriver)
        ):
            raise DriverMismatch(
                f"martingale coupling needs a martingale driver, got {type(self.driver).__name__}"
            )
        if (self.diffusion is None) == (self.time_integrand is None):
            raise SolverError("give exactly one of diffusion and time_integrand")

    @property
    def is_additive(self) -> bool:
        return self.time_integrand is not None or self.diffusion.is_additive

    def cell_matrices(self, grid: TimeGrid) -> np.ndarray | None:
        """Per-cell (steps, d, K) matrices for deterministic integrands."""
        if self.time_integrand is not None:
            return np.stack(
                [np.asarray(self.time_integrand(t), dtype=float)
                 for t in grid.points[:-1]]
            )
        if self.diffusion.is_additive:
            return None  # constant matrix handled directly
        return None


@dataclass(frozen=True)
class JumpCoupling:
    """Noise term int_Z G(z, u(t-)) against a compensated Poisson measure."""

    driver: PoissonRandomMeasureDriver
    jump: JumpMap

    def __post_init__(self) -> None:
        if not isinstance(self.driver, PoissonRandomMeasureDriver):
            raise DriverMismatch(
                f"jump coupling needs a Poisson-measure driver, got {type(self.driver).__name__}"
            )
        if not self.jump.matches_driver(self.driver):
            raise DriverMismatch(
                "jump map marks/weights do not match the driving measure"
            )


@dataclass(frozen=True)
class EvolutionProblem:
    """du + A u dt + f(u) dt = noise, with declared integrability order p."""

    operator: object
    grid: TimeGrid
    initial: InitialCondition
    drift: DriftMap | None = None
    coupling: MartingaleCoupling | JumpCoupling | None = None
    p: float = 2.0

    def __post_init__(self) -> None:
        if self.p < 2:
            raise SolverError(f"integrability order p must be >= 2, got {self.p}")
        if self.initial.dim != self.operator.dim:
            raise SolverError(
                f"initial dimension {self.initial.dim} does not match operator "
                f"dimension {self.operator.dim}"
            )
        if (
            isinstance(self.coupling, MartingaleCoupling)
            and self.p > 2
            and not self.coupling.is_additive
        ):
            raise SolverError(
                "martingale noise with p > 2 is only supported for additive "
                "(state-independent) coefficients"
            )


# ---------------------------------------------------------------------------
# Ensembles of paths
# ---------------------------------------------------------------------------


@dataclass
class PathEnsemble:
    """States (n_paths, steps + 1, dim) over a grid, with coupling metadata."""

    states: np.ndarray
    grid: TimeGrid
    coupling_key: tuple
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.states.shape[0])

    @property
    def dim(self) -> int:
        return int(self.states.shape[2])

    def write_csv(self, path) -> None:
        """Stream the full ensemble: one row per (path, time)."""
        points = self.grid.points
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["path_id", "t"] + [f"coord_{j}" for j in range(self.dim)]
            )
            for i in range(self.n_paths):
                for k, t in enumerate(points):
                    writer.writerow(
                        [i, f"{t:.12g}"]
                        + [f"{x:.17g}" for x in self.states[i, k]]
                    )

    def write_summary_csv(self, path, stats: Sequence[tuple]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["statistic", "value", "stderr"])
            for name, value, stderr in stats:
                writer.writerow([name, f"{value:.17g}", f"{stderr:.17g}"])


@dataclass
class MildComponents:
    """Exact linear split of a solve: states = initial - drift + noise."""

    initial: np.ndarray
    drift: np.ndarray
    noise: np.ndarray


# ---------------------------------------------------------------------------
# Core steppers
# ---------------------------------------------------------------------------


def _step_factors(eigenvalues: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Semigroup factor exp(-a dt) and forcing weight (1 - exp(-a dt))/a."""
    sdiag = np.exp(-dt * eigenvalues)
    phi1 = np.full_like(eigenvalues, dt)
    nz = eigenvalues != 0
    phi1[nz] = -np.expm1(-dt * eigenvalues[nz]) / eigenvalues[nz]
    return sdiag, phi1


def _check_noise(problem: EvolutionProblem, noise: NoiseEnsemble) -> None:
    if problem.coupling is None:
        raise DriverMismatch("problem declares no noise coupling")
    expected = "prm" if isinstance(problem.coupling, JumpCoupling) else (
        "wiener"
        if isinstance(problem.coupling.driver, QWienerDriver)
        else "cpoisson"
    )
    if noise.kind != expected:
        raise DriverMismatch(
            f"problem coupling expects {expected!r} noise, ensemble holds {noise.kind!r}"
        )
    if noise.driver is not problem.coupling.driver and not _same_driver(
        noise.driver, problem.coupling.driver
    ):
        raise DriverMismatch("noise ensemble was sampled under a different driver")
    if (noise.grid.horizon, noise.grid.steps) != (
        problem.grid.horizon,
        problem.grid.steps,
    ):
        raise DriverMismatch("noise grid does not match the problem grid")


def _same_driver(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, QWienerDriver):
        return np.array_equal(a.q, b.q)
    if isinstance(a, CompensatedCompoundPoissonDriver):
        return a.rate == b.rate and a.jump_law == b.jump_law
    if isinstance(a, PoissonRandomMeasureDriver):
        return np.array_equal(a.marks, b.marks) and np.array_equal(a.weights, b.weights)
    return False


def _solve_martingale_ensemble(
    problem: EvolutionProblem,
    noise: NoiseEnsemble | None,
    u0: np.ndarray,
    track: bool,
) -> tuple[np.ndarray, MildComponents | None]:
    op, grid = problem.operator, problem.grid
    n, d = u0.shape
    sdiag, phi1 = _step_factors(op.eigenvalues, grid.dt)
    diagonal = op.is_diagonal
    to_s = (lambda x: x) if diagonal else op.to_spectral
    from_s = (lambda x: x) if diagonal else op.from_spectral

    coupling = problem.coupling
    increments = noise.increments if noise is not None else None
    cell_mats = coupling.cell_matrices(grid) if coupling is not None else None
    const_mat = (
        coupling.diffusion.constant_matrix
        if coupling is not None
        and coupling.diffusion is not None
        and coupling.diffusion.is_additive
        else None
    )

    states = np.empty((n, grid.steps + 1, d))
    states[:, 0] = u0
    cur = u0
    cur_s = to_s(u0)
    if track:
        comp = MildComponents(
            initial=np.empty_like(states),
            drift=np.zeros_like(states),
            noise=np.zeros_like(states),
        )
        comp.initial[:, 0] = u0
        init_s = cur_s.copy()
        drift_s = np.zeros_like(cur_s)
        noise_s = np.zeros_like(cur_s)
    else:
        comp = None

    for k in range(grid.steps):
        if problem.drift is not None:
            drift_term = phi1 * to_s(problem.drift(cur))
        else:
            drift_term = 0.0
        if coupling is not None:
            dm = increments[:, k]
            if cell_mats is not None:
                bdm = dm @ cell_mats[k].T
            elif const_mat is not None:
                bdm = dm @ const_mat.T
            else:
                bdm = coupling.diffusion.apply(cur, dm)
            noise_term = to_s(bdm)
        else:
            noise_term = 0.0
        cur_s = sdiag * cur_s - drift_term + sdiag * noise_term
        cur = from_s(cur_s)
        states[:, k + 1] = cur
        if track:
            init_s = sdiag * init_s
            drift_s = sdiag * drift_s + drift_term
            noise_s = sdiag * (noise_s + noise_term)
            comp.initial[:, k + 1] = from_s(init_s)
            comp.drift[:, k + 1] = from_s(drift_s)
            comp.noise[:, k + 1] = from_s(noise_s)
    return states, comp


def _group_events_by_cell(noise: NoiseEnsemble, grid: TimeGrid):
    """Flatten all events into arrays sorted by (cell, path, time)."""
    paths, times, marks = [], [], []
    for i, (t, m) in enumerate(noise.events):
        if t.size:
            if np.min(t) <= 0 or np.max(t) > grid.horizon + 1e-12:
                raise SolverError("event times must lie in (0, horizon]")
            paths.append(np.full(t.size, i))
            times.append(t)
            marks.append(m)
    if not paths:
        empty = np.empty(0, dtype=int)
        return empty, empty, np.empty(0), empty
    paths = np.concatenate(paths)
    times = np.concatenate(times)
    marks = np.concatenate(marks)
    # A time exactly at a grid point belongs to the cell ending there, so
    # the recorded grid state is the post-jump value.
    cells = np.searchsorted(grid.points, times, side="left") - 1
    order = np.lexsort((times, paths, cells))
    return cells[order], paths[order], times[order], marks[order]


def _solve_poisson_ensemble(
    problem: EvolutionProblem,
    noise: NoiseEnsemble,
    u0: np.ndarray,
    track: bool,
) -> tuple[np.ndarray, MildComponents | None]:
    op, grid = problem.operator, problem.grid
    jump = problem.coupling.jump
    n, d = u0.shape
    sdiag, phi1 = _step_factors(op.eigenvalues, grid.dt)
    diagonal = op.is_diagonal
    to_s = (lambda x: x) if diagonal else op.to_spectral
    from_s = (lambda x: x) if diagonal else op.from_spectral
    evals = op.eigenvalues

    cells, epaths, etimes, emarks = _group_events_by_cell(noise, grid)
    cell_starts = np.searchsorted(cells, np.arange(grid.steps), side="left")
    cell_stops = np.searchsorted(cells, np.arange(grid.steps), side="right")

    states = np.empty((n, grid.steps + 1, d))
    states[:, 0] = u0
    cur = u0.copy()
    cur_s = to_s(u0).copy()
    if track:
        comp = MildComponents(
            initial=np.empty_like(states),
            drift=np.zeros_like(states),
            noise=np.zeros_like(states),
        )
        comp.initial[:, 0] = u0
        init_s = cur_s.copy()
        drift_s = np.zeros_like(cur_s)
        noise_s = np.zeros_like(cur_s)
    else:
        comp = None

    for k in range(grid.steps):
        prev = cur
        prev_s = cur_s
        comp_prev = (init_s, drift_s, noise_s) if track else None

        # Base step for every path: frozen drift + compensator, no events.
        f_u = problem.drift(prev) if problem.drift is not None else None
        comp_u = jump.compensator(prev)
        f_term = phi1 * to_s(f_u) if f_u is not None else 0.0
        c_term = phi1 * to_s(comp_u)
        cur_s = sdiag * prev_s - f_term - c_term
        if track:
            init_s = sdiag * init_s
            drift_s = sdiag * drift_s + f_term
            noise_s = sdiag * noise_s - c_term

        # Redo paths with events inside this cell, jump-adapted.
        lo, hi = cell_starts[k], cell_stops[k]
        if hi > lo:
            seg_paths = epaths[lo:hi]
            for i in np.unique(seg_paths):
                sel = slice(lo + np.searchsorted(seg_paths, i, side="left"),
                            lo + np.searchsorted(seg_paths, i, side="right"))
                t_cursor = grid.points[k]
                u_i = prev[i].copy()
                u_is = prev_s[i].copy()
                if track:
                    p_is = comp_prev[0][i].copy()
                    f_is = comp_prev[1][i].copy()
                    g_is = comp_prev[2][i].copy()
                for tau, mark in zip(etimes[sel], emarks[sel]):
                    delta = tau - t_cursor
                    sd, ph = _step_factors(evals, delta) if delta > 0 else (
                        np.ones_like(evals), np.zeros_like(evals))
                    fi = problem.drift(u_i) if problem.drift is not None else None
                    ci = jump.compensator(u_i)
                    fi_term = ph * to_s(fi) if fi is not None else 0.0
                    ci_term = ph * to_s(ci)
                    u_is = sd * u_is - fi_term - ci_term
                    u_i = from_s(u_is)
                    if track:
                        p_is = sd * p_is
                        f_is = sd * f_is + fi_term
                        g_is = sd * g_is - ci_term
                    jump_vec = jump.fn(jump.mark_values[int(mark)], u_i)
                    u_is = u_is + to_s(jump_vec)
                    u_i = from_s(u_is)
                    if track:
                        g_is = g_is + to_s(jump_vec)
                    t_cursor = tau
                delta = grid.points[k + 1] - t_cursor
                sd, ph = _step_factors(evals, delta) if delta > 0 else (
                    np.ones_like(evals), np.zeros_like(evals))
                fi = problem.drift(u_i) if problem.drift is not None else None
                ci = jump.compensator(u_i)
                fi_term = ph * to_s(fi) if fi is not None else 0.0
                ci_term = ph * to_s(ci)
                cur_s[i] = sd * u_is - fi_term - ci_term
                if track:
                    init_s[i] = sd * p_is
                    drift_s[i] = sd * f_is + fi_term
                    noise_s[i] = sd * g_is - ci_term

        cur = from_s(cur_s)
        states[:, k + 1] = cur
        if track:
            comp.initial[:, k + 1] = from_s(init_s)
            comp.drift[:, k + 1] = from_s(drift_s)
            comp.noise[:, k + 1] = from_s(noise_s)
    return states, comp


# ---------------------------------------------------------------------------
# Public solver surface
# ---------------------------------------------------------------------------


def solve_ensemble(
    problem: EvolutionProblem,
    noise: NoiseEnsemble | None = None,
    *,
    n_paths: int | None = None,
    coupling_key: tuple | None = None,
    initial_states: np.ndarray | None = None,
    track_components: bool = False,
):
    """Solve the problem along an ensemble of noise paths.

    Returns a PathEnsemble, or (PathEnsemble, MildComponents) when
    ``track_components`` is set.  With ``noise=None`` the problem must be
    noiseless (coupling None); pass ``n_paths``/``coupling_key``
    explicitly in that case.
    """
    if noise is not None:
        _check_noise(problem, noise)
        n_paths = noise.n_paths
        coupling_key = noise.coupling_key
    else:
        if problem.coupling is not None:
            raise DriverMismatch("problem declares a coupling but no noise was given")
        n_paths = n_paths or 1
        coupling_key = coupling_key or (0, 0)
    if initial_states is None:
        initial_states = problem.initial.sample(coupling_key, n_paths)
    u0 = np.asarray(initial_states, dtype=float)
    if u0.shape != (n_paths, problem.operator.dim):
        raise SolverError(
            f"initial states have shape {u0.shape}, expected {(n_paths, problem.operator.dim)}"
        )

    if isinstance(problem.coupling, JumpCoupling):
        states, comp = _solve_poisson_ensemble(problem, noise, u0, track_components)
        scheme = "jump_adapted"
    else:
        states, comp = _solve_martingale_ensemble(problem, noise, u0, track_components)
        scheme = "exponential_euler"
    ensemble = PathEnsemble(
        states=states,
        grid=problem.grid,
        coupling_key=tuple(coupling_key),
        meta={"scheme": scheme, "p": problem.p},
    )
    if track_components:
        return ensemble, comp
    return ensemble


def _single_path_ensemble(path: NoisePath, driver) -> NoiseEnsemble:
    key = tuple(path.stream_id[:2]) if len(path.stream_id) >= 2 else (0, 0)
    if path.kind == "prm":
        return NoiseEnsemble(
            kind=path.kind, driver=driver, grid=path.grid, coupling_key=key,
            n_paths=1, events=((path.event_times, path.event_marks),),
        )
    return NoiseEnsemble(
        kind=path.kind, driver=driver, grid=path.grid, coupling_key=key,
        n_paths=1,
        increments=path.increments[None, :, :],
        realized_qv=path.realized_qv[None, :],
    )


def solve_mild_martingale(
    problem: EvolutionProblem, path: NoisePath, initial_state=None
) -> np.ndarray:
    """One path of the martingale equation; returns (steps + 1, dim) states."""
    if not isinstance(problem.coupling, MartingaleCoupling):
        raise DriverMismatch("problem does not carry a martingale coupling")
    if path.kind == "prm":
        raise DriverMismatch("martingale solver fed a Poisson-measure path")
    noise = _single_path_ensemble(path, problem.coupling.driver)
    init = None if initial_state is None else np.asarray(initial_state, float)[None, :]
    return solve_ensemble(problem, noise, initial_states=init).states[0]


def solve_mild_poisson(
    problem: EvolutionProblem, path: NoisePath, initial_state=None
) -> np.ndarray:
    """One path of the Poisson-measure equation, jump-adapted."""
    if not isinstance(problem.coupling, JumpCoupling):
        raise DriverMismatch("problem does not carry a jump coupling")
    if path.kind != "prm":
        raise DriverMismatch("jump-adapted solver fed a martingale path")
    noise = _single_path_ensemble(path, problem.coupling.driver)
    init = None if initial_state is None else np.asarray(initial_state, float)[None, :]
    return solve_ensemble(problem, noise, initial_states=init).states[0]


def solve_deterministic(op, forcing, u0, grid: TimeGrid) -> np.ndarray:
    """u' + A u = g(t) with g frozen per cell at the left endpoint.

    The per-cell integral of the semigroup against a constant forcing is
    taken in closed form ((1 - exp(-a dt))/a per mode), so for globally
    constant forcing the grid values are exact.
    """
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    sdiag, phi1 = _step_factors(op.eigenvalues, grid.dt)
    if forcing is None:
        cells = np.zeros((grid.steps, op.dim))
    elif callable(forcing):
        cells = np.stack(
            [np.broadcast_to(np.asarray(forcing(t), dtype=float), (op.dim,))
             for t in grid.points[:-1]]
        )
    else:
        cells = np.asarray(forcing, dtype=float)
        if cells.shape != (grid.steps, op.dim):
            raise SolverError(
                f"forcing array must have shape {(grid.steps, op.dim)}, got {cells.shape}"
            )
    out = np.empty((grid.steps + 1, op.dim))
    out[0] = u0
    cur = op.to_spectral(u0)
    for k in range(grid.steps):
        cur = sdiag * cur + phi1 * op.to_spectral(cells[k])
        out[k + 1] = op.from_spectral(cur)
    return out


def stochastic_convolution(op, path: NoisePath, integrand=None, jump_map=None) -> np.ndarray:
    """Convolution of the semigroup against the noise, zero initial state.

    For martingale paths ``integrand`` is a constant (d, K) matrix or a
    map t -> (d, K); the convolution is computed by the solver recursion
    Y_{k+1} = S(dt)(Y_k + B_k dM_k), i.e. Y_n = sum_{j<n} S(t_n - t_j) B_j dM_j.
    For Poisson paths ``jump_map`` gives the (state-independent values
    are typical) integrand and the jump-adapted recursion is used.
    """
    grid = path.grid
    if path.kind == "prm":
        if jump_map is None:
            raise SolverError("Poisson convolution needs a jump_map")
        problem = EvolutionProblem(
            operator=op,
            grid=grid,
            initial=InitialCondition(np.zeros(op.dim)),
            coupling=JumpCoupling(
                driver=PoissonRandomMeasureDriver(jump_map.mark_values, jump_map.weights),
                jump=jump_map,
            ),
        )
        return solve_mild_poisson(problem, path)
    if integrand is None:
        raise SolverError("martingale convolution needs an integrand")
    if callable(integrand):
        mats = [np.asarray(integrand(t), dtype=float) for t in grid.points[:-1]]
    else:
        mats = [np.asarray(integrand, dtype=float)] * grid.steps
    sdiag = np.exp(-grid.dt * op.eigenvalues)
    out = np.zeros((grid.steps + 1, op.dim))
    cur = np.zeros(op.dim)
    for k in range(grid.steps):
        bdm = mats[k] @ path.increments[k]
        cur = sdiag * (cur + op.to_spectral(bdm))
        out[k + 1] = op.from_spectral(cur)
    return out


# ---------------------------------------------------------------------------
# Pathwise norms and Monte Carlo estimates
# ---------------------------------------------------------------------------


def sup_norm_curves(states: np.ndarray) -> np.ndarray:
    """Running sup_{s <= t} ||u(s)|| per path; shape (n_paths, steps + 1)."""
    return np.maximum.accumulate(np.linalg.norm(states, axis=-1), axis=1)


def moment_curve(states: np.ndarray, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Curve t -> E sup_{s <= t} ||u(s)||^p with pointwise standard errors."""
    sup_p = sup_norm_curves(states) ** p
    n = sup_p.shape[0]
    mean = sup_p.mean(axis=0)
    se = sup_p.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


def hp_norm_estimate(ensemble: PathEnsemble | np.ndarray, p: float) -> tuple[float, float]:
    """Monte Carlo estimate of (E sup_t ||u||^p)^{1/p} with delta-method stderr."""
    states = ensemble.states if isinstance(ensemble, PathEnsemble) else ensemble
    sup_p = sup_norm_curves(states)[:, -1] ** p
    n = sup_p.shape[0]
    m = float(sup_p.mean())
    se_m = float(sup_p.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    if m <= 0.0:
        return 0.0, 0.0
    est = m ** (1.0 / p)
    return est, se_m * est / (p * m)


def difference_ensemble(a: PathEnsemble, b: PathEnsemble) -> PathEnsemble:
    """Pathwise difference a - b of two solves under a shared coupling."""
    if a.coupling_key != b.coupling_key:
        raise CouplingMismatch(
            f"coupling keys differ: {a.coupling_key} vs {b.coupling_key}"
        )
    if (a.grid.horizon, a.grid.steps) != (b.grid.horizon, b.grid.steps):
        raise CouplingMismatch("grids differ between the two ensembles")
    if a.states.shape != b.states.shape:
        raise CouplingMismatch("ensemble shapes differ")
    return PathEnsemble(
        states=a.states - b.states,
        grid=a.grid,
        coupling_key=a.coupling_key,
        meta={"difference": True},
    )


def difference_hp(a: PathEnsemble, b: PathEnsemble, p: float) -> tuple[float, float]:
    """H_p distance between two coupled solves (estimate, stderr)."""
    return hp_norm_estimate(difference_ensemble(a, b), p)
