"""Declarative experiment configuration.

Configs are YAML key-value trees validated by pydantic models, then
compiled into the concrete objects the sweep runners consume (operator,
driver, coefficient maps, perturbation quadruple).  Every run is fully
determined by the config plus its base seed, which is why the runner
records the config's SHA-256 next to the reports.
"""
from __future__ import annotations

import hashlib
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .coefficients import builtin_family, jump_family, make_convergent_sequence
from .convergence import REGISTRY, PassRule, PerturbationSpec, ProblemTemplate
from .noise import (
    CompensatedCompoundPoissonDriver,
    JumpLaw,
    PoissonRandomMeasureDriver,
    QWienerDriver,
    TimeGrid,
)
from .operators import (
    SpectralOperator,
    galerkin_family,
    heat_eigenvalues,
    random_orthogonal_basis,
    spectral_shift_family,
    yosida_family,
)
from .solver import InitialCondition, JumpCoupling, MartingaleCoupling

__all__ = [
    "ConfigInvalid",
    "SpaceConfig",
    "GridConfig",
    "DriverConfig",
    "InitialConfig",
    "CoefficientConfig",
    "FamilyConfig",
    "PerturbationConfig",
    "RuleConfig",
    "ExperimentEntry",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "config_sha256",
    "build_operator",
    "build_driver",
    "build_template",
    "build_family",
    "build_perturbation",
]


class ConfigInvalid(ValueError):
    """Config failed to parse or validate."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpaceConfig(_Model):
    dim: int = Field(ge=1)
    eigenvalues: list[float] | None = None
    family: Literal["heat"] | None = None
    scale: float | None = None
    eta: float = Field(default=0.0, ge=0.0)
    basis_seed: int | None = None

    @model_validator(mode="after")
    def _one_source(self) -> "SpaceConfig":
        if (self.eigenvalues is None) == (self.family is None):
            raise ValueError("give either explicit eigenvalues or a family")
        if self.eigenvalues is not None and len(self.eigenvalues) != self.dim:
            raise ValueError("eigenvalue count must equal dim")
        return self


class GridConfig(_Model):
    horizon: float = Field(gt=0.0)
    steps: int = Field(ge=1)


class DriverConfig(_Model):
    kind: Literal["wiener", "cpoisson", "prm"]
    q: list[float] | None = None
    rate: float | None = None
    jump_values: list[list[float]] | None = None
    jump_probs: list[float] | None = None
    gaussian_cov: list[list[float]] | None = None
    marks: list[list[float]] | None = None
    weights: list[float] | None = None

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "DriverConfig":
        if self.kind == "wiener" and self.q is None:
            raise ValueError("wiener driver needs q")
        if self.kind == "cpoisson":
            if self.rate is None:
                raise ValueError("cpoisson driver needs rate")
            has_atoms = self.jump_values is not None and self.jump_probs is not None
            if not has_atoms and self.gaussian_cov is None:
                raise ValueError("cpoisson driver needs jump atoms or gaussian_cov")
        if self.kind == "prm" and (self.marks is None or self.weights is None):
            raise ValueError("prm driver needs marks and weights")
        return self


class InitialConfig(_Model):
    mean: list[float]
    gaussian_scale: float = Field(default=0.0, ge=0.0)


class CoefficientConfig(_Model):
    family: str
    params: dict[str, Any] = Field(default_factory=dict)


class FamilyConfig(_Model):
    kind: Literal["yosida", "galerkin", "spectral_shift"] = "yosida"
    scale: float = 1.0


class _SequenceConfig(_Model):
    mode: Literal["scale", "offset"]
    offset: list[float] | None = None

    @model_validator(mode="after")
    def _offset_given(self) -> "_SequenceConfig":
        if self.mode == "offset" and self.offset is None:
            raise ValueError("offset mode needs an offset vector")
        return self


class PerturbationConfig(_Model):
    operator: FamilyConfig | None = None
    drift: _SequenceConfig | None = None
    coupling: _SequenceConfig | None = None
    initial_offset: list[float] | None = None

    @model_validator(mode="after")
    def _non_empty(self) -> "PerturbationConfig":
        if not any((self.operator, self.drift, self.coupling, self.initial_offset)):
            raise ValueError("perturbation must perturb at least one ingredient")
        return self


class RuleConfig(_Model):
    final_error: float | None = None
    final_ratio: float | None = None
    combine: Literal["all", "any"] = "all"
    monotone_slack: float | None = 1.2
    strict_decrease: bool = False
    slope_range: tuple[float, float] | None = None

    def to_rule(self) -> PassRule:
        return PassRule(
            final_error=self.final_error,
            final_ratio=self.final_ratio,
            combine=self.combine,
            monotone_slack=self.monotone_slack,
            strict_decrease=self.strict_decrease,
            slope_range=self.slope_range,
        )


class ExperimentEntry(_Model):
    theorem: str
    values: list[float]
    p: float = Field(default=2.0, ge=2.0)
    rule: RuleConfig = Field(default_factory=RuleConfig)
    family: FamilyConfig = Field(default_factory=FamilyConfig)
    forcing: list[float] | None = None
    closed_form: bool = False
    label: str | None = None

    @field_validator("theorem")
    @classmethod
    def _known_theorem(cls, v: str) -> str:
        if v not in REGISTRY:
            raise ValueError(f"unknown theorem id {v!r}")
        return v

    @field_validator("values")
    @classmethod
    def _enough_values(cls, v: list[float]) -> list[float]:
        if len(v) < 2:
            raise ValueError("a sweep needs at least two parameter values")
        return v


class ExperimentConfig(_Model):
    name: str = "experiment"
    base_seed: int = 0
    paths: int = Field(ge=2)
    output: str | None = None
    space: SpaceConfig
    grid: GridConfig
    driver: DriverConfig | None = None
    initial: InitialConfig
    drift: CoefficientConfig | None = None
    diffusion: CoefficientConfig | None = None
    jump: CoefficientConfig | None = None
    perturbation: PerturbationConfig | None = None
    experiments: list[ExperimentEntry] = Field(min_length=1)

    @model_validator(mode="after")
    def _coupling_shape(self) -> "ExperimentConfig":
        if len(self.initial.mean) != self.space.dim:
            raise ValueError("initial mean dimension must equal space dim")
        if self.diffusion is not None and self.jump is not None:
            raise ValueError("declare either a diffusion or a jump coefficient")
        if self.driver is not None:
            if self.driver.kind == "prm" and self.jump is None:
                raise ValueError("prm driver needs a jump coefficient")
            if self.driver.kind != "prm" and self.jump is not None:
                raise ValueError("jump coefficients need a prm driver")
        elif self.diffusion is not None or self.jump is not None:
            raise ValueError("coefficient declared without a driver")
        return self


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid("config root must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except Exception as exc:
        raise ConfigInvalid(str(exc)) from exc


def load_config(path) -> tuple[ExperimentConfig, bytes]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return parse_config(data.decode("utf-8")), data


def config_sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Builders: config models -> laboratory objects
# ---------------------------------------------------------------------------


def build_operator(space: SpaceConfig) -> SpectralOperator:
    if space.eigenvalues is not None:
        evals = np.asarray(space.eigenvalues, dtype=float)
    else:
        kwargs = {} if space.scale is None else {"scale": space.scale}
        evals = heat_eigenvalues(space.dim, **kwargs)
    basis = (
        random_orthogonal_basis(space.dim, space.basis_seed)
        if space.basis_seed is not None
        else None
    )
    try:
        return SpectralOperator(evals, eta=space.eta, basis=basis)
    except Exception as exc:
        raise ConfigInvalid(f"space does not define a valid operator: {exc}") from exc


def build_driver(cfg: DriverConfig):
    try:
        if cfg.kind == "wiener":
            return QWienerDriver(q=np.asarray(cfg.q, dtype=float))
        if cfg.kind == "cpoisson":
            if cfg.jump_values is not None:
                law = JumpLaw(
                    kind="atoms",
                    values=np.asarray(cfg.jump_values, dtype=float),
                    probs=np.asarray(cfg.jump_probs, dtype=float),
                )
            else:
                law = JumpLaw(
                    kind="gaussian",
                    gaussian_cov=np.asarray(cfg.gaussian_cov, dtype=float),
                )
            return CompensatedCompoundPoissonDriver(rate=cfg.rate, jump_law=law)
        return PoissonRandomMeasureDriver(
            marks=np.asarray(cfg.marks, dtype=float),
            weights=np.asarray(cfg.weights, dtype=float),
        )
    except Exception as exc:
        raise ConfigInvalid(f"invalid driver: {exc}") from exc


def _coerce_arrays(params: dict) -> dict:
    out = {}
    for key, value in params.items():
        out[key] = np.asarray(value, dtype=float) if isinstance(value, list) else value
    return out


def _build_drift(cfg: CoefficientConfig):
    try:
        return builtin_family(cfg.family, **_coerce_arrays(cfg.params))
    except Exception as exc:
        raise ConfigInvalid(f"invalid drift coefficient: {exc}") from exc


def _build_diffusion(cfg: CoefficientConfig, driver, dim: int):
    params = _coerce_arrays(cfg.params)
    try:
        if cfg.family == "diagonal_multiplicative" and "sqrt_q" not in params:
            params["sqrt_q"] = np.sqrt(np.diag(driver.covariance_rate))
        if cfg.family == "additive_constant":
            value = np.asarray(params["value"], dtype=float)
            if value.ndim == 0:
                value = float(value) * np.eye(dim)
            elif value.ndim == 1:
                value = np.diag(value)
            params["value"] = value
        return builtin_family(cfg.family, **params)
    except ConfigInvalid:
        raise
    except Exception as exc:
        raise ConfigInvalid(f"invalid diffusion coefficient: {exc}") from exc


def _build_jump(cfg: CoefficientConfig, driver, p: float):
    try:
        return jump_family(
            cfg.family, driver.marks, driver.weights, p, **_coerce_arrays(cfg.params)
        )
    except Exception as exc:
        raise ConfigInvalid(f"invalid jump coefficient: {exc}") from exc


def build_template(config: ExperimentConfig, p: float) -> ProblemTemplate:
    operator = build_operator(config.space)
    grid = TimeGrid(config.grid.horizon, config.grid.steps)
    initial = InitialCondition(
        mean=np.asarray(config.initial.mean, dtype=float),
        gaussian_scale=config.initial.gaussian_scale,
    )
    coupling = None
    if config.driver is not None:
        driver = build_driver(config.driver)
        if config.driver.kind == "prm":
            jump = _build_jump(config.jump, driver, p)
            coupling = JumpCoupling(driver=driver, jump=jump)
        elif config.diffusion is not None:
            diffusion = _build_diffusion(
                config.diffusion, driver, config.space.dim
            )
            coupling = MartingaleCoupling(driver=driver, diffusion=diffusion)
        else:
            raise ConfigInvalid("martingale driver declared without a diffusion")
    drift = _build_drift(config.drift) if config.drift is not None else None
    try:
        return ProblemTemplate(
            operator=operator,
            grid=grid,
            initial=initial,
            coupling=coupling,
            drift=drift,
            p=p,
        )
    except Exception as exc:
        raise ConfigInvalid(f"inconsistent problem template: {exc}") from exc


def build_family(cfg: FamilyConfig, operator: SpectralOperator):
    try:
        if cfg.kind == "yosida":
            return yosida_family(operator)
        if cfg.kind == "galerkin":
            return galerkin_family(operator)
        return spectral_shift_family(operator, scale=cfg.scale)
    except Exception as exc:
        raise ConfigInvalid(f"invalid operator family: {exc}") from exc


def build_perturbation(
    config: ExperimentConfig,
    template: ProblemTemplate,
) -> PerturbationSpec:
    cfg = config.perturbation
    if cfg is None:
        raise ConfigInvalid("this experiment needs a perturbation section")
    operator_family = (
        build_family(cfg.operator, template.operator) if cfg.operator else None
    )

    def sequence(seq_cfg, limit):
        kwargs = {"mode": seq_cfg.mode}
        if seq_cfg.offset is not None:
            kwargs["offset"] = np.asarray(seq_cfg.offset, dtype=float)
        try:
            return make_convergent_sequence(limit, **kwargs)
        except Exception as exc:
            raise ConfigInvalid(f"invalid coefficient sequence: {exc}") from exc

    drift_seq = None
    if cfg.drift is not None:
        if template.drift is None:
            raise ConfigInvalid("drift perturbation declared without a drift")
        drift_seq = sequence(cfg.drift, template.drift)
    coupling_seq = None
    if cfg.coupling is not None:
        if template.coupling is None:
            raise ConfigInvalid("coupling perturbation declared without a coupling")
        limit = (
            template.coupling.jump
            if isinstance(template.coupling, JumpCoupling)
            else template.coupling.diffusion
        )
        coupling_seq = sequence(cfg.coupling, limit)
    initial_offset = None
    if cfg.initial_offset is not None:
        base = np.asarray(cfg.initial_offset, dtype=float)
        if base.shape != (template.operator.dim,):
            raise ConfigInvalid("initial offset dimension must equal space dim")
        initial_offset = lambda n: base / n
    return PerturbationSpec(
        operator_family=operator_family,
        drift_seq=drift_seq,
        coupling_seq=coupling_seq,
        initial_offset=initial_offset,
    )
