"""Parameter container and validation for the subcritical branching model"""

import math
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np

import config
from errors import (
    DivisionByZeroRate,
    InvalidStepDistribution,
    NotSubcritical,
    TailViolation,
    ValidationError,
)
from kernels import EffectiveWalk, StepDistribution


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of the branching random walk with immigration.

    `beta` lists the splitting rates (beta_2, beta_3, ..., beta_Lmax); the
    offspring count l has rate beta[l - 2].
    """
    d: int
    kappa: float
    dist_a: StepDistribution
    mu: float
    beta: Tuple[float, ...]
    dist_b: StepDistribution
    gamma: float
    tail_beta: float
    tail_delta: float
    beta_exhaustive: bool = True

    @property
    def l_max(self) -> int:
        return len(self.beta) + 1

    def offspring_counts(self) -> np.ndarray:
        return np.arange(2, len(self.beta) + 2)


@dataclass(frozen=True)
class ValidatedModel:
    """ModelParams with every invariant checked and derived quantities attached"""
    params: ModelParams
    delta: float
    branch_total: float
    spread_weight: float
    walk: EffectiveWalk = field(repr=False)

    # convenience passthroughs
    @property
    def d(self) -> int:
        return self.params.d

    @property
    def kappa(self) -> float:
        return self.params.kappa

    @property
    def mu(self) -> float:
        return self.params.mu

    @property
    def gamma(self) -> float:
        return self.params.gamma

    @property
    def beta(self) -> Tuple[float, ...]:
        return self.params.beta

    @property
    def l_max(self) -> int:
        return self.params.l_max

    @property
    def per_particle_rate(self) -> float:
        return self.params.kappa + self.params.mu + self.branch_total


ModelLike = Union[ModelParams, ValidatedModel]


def _params(model: ModelLike) -> ModelParams:
    return model.params if isinstance(model, ValidatedModel) else model


def _spread_weight(params: ModelParams) -> float:
    return math.fsum((l - 1) * b for l, b in zip(params.offspring_counts(), params.beta))


def compute_delta(params: ModelLike) -> float:
    """Subcriticality gap mu - sum((l-1)*beta_l)"""
    params = _params(params)
    return params.mu - _spread_weight(params)


def branch_total_rate(params: ModelLike) -> float:
    """Total splitting rate sum(beta_l)"""
    return math.fsum(_params(params).beta)


def offspring_mean(params: ModelLike) -> float:
    """Mean number of extra offspring per split, sum((l-1)*beta_l) / sum(beta_l)"""
    params = _params(params)
    total = branch_total_rate(params)
    if total <= 0:
        raise DivisionByZeroRate("offspring mean is undefined when no splitting rate is positive")
    return _spread_weight(params) / total


def neglected_tail_mass(params: ModelLike) -> float:
    """Certified bound beta*delta^(Lmax+1)/(1-delta) on the rates beyond the listed ones"""
    params = _params(params)
    return params.tail_beta * params.tail_delta ** (params.l_max + 1) / (1.0 - params.tail_delta)


def validate(params: ModelLike) -> ValidatedModel:
    """
    Verify every model invariant and assemble the effective walk.

    Args:
        params: raw parameters (an already validated model is returned unchanged)

    Returns:
        ValidatedModel carrying Delta, sum(beta_l) and the effective walk
    """
    if isinstance(params, ValidatedModel):
        return params

    if params.d < 1:
        raise ValidationError(f"dimension must be positive, got {params.d}")
    for name, dist in (('a', params.dist_a), ('b', params.dist_b)):
        if not isinstance(dist, StepDistribution):
            raise InvalidStepDistribution(f"distribution {name} is not a validated StepDistribution")
        if dist.dimension != params.d:
            raise InvalidStepDistribution(
                f"distribution {name} is {dist.dimension}-dimensional, model is {params.d}-dimensional"
            )
    if params.kappa < 0:
        raise ValidationError(f"jump rate kappa must be nonnegative, got {params.kappa}")
    if not params.mu > 0:
        raise ValidationError(f"death rate mu must be positive, got {params.mu}")
    if params.gamma < 0:
        raise ValidationError(f"immigration rate gamma must be nonnegative, got {params.gamma}")
    if any(b < 0 for b in params.beta):
        raise ValidationError(f"splitting rates must be nonnegative, got {params.beta}")

    delta = compute_delta(params)
    if not delta > 0:
        raise NotSubcritical(f"Delta = {delta:.6g} must be strictly positive")

    if not params.tail_beta > 0 or not 0 < params.tail_delta < 1:
        raise TailViolation(
            f"tail certificate needs beta > 0 and 0 < delta < 1, got ({params.tail_beta}, {params.tail_delta})"
        )
    for l, rate in zip(params.offspring_counts(), params.beta):
        ceiling = params.tail_beta * params.tail_delta ** int(l)
        if rate > ceiling * (1 + 1e-12):
            raise TailViolation(f"beta_{l} = {rate} exceeds beta*delta^{l} = {ceiling:.6g}")
    if not params.beta_exhaustive:
        tail = neglected_tail_mass(params)
        if tail >= config.TAIL_NEGLIGIBLE_FRACTION * params.mu:
            raise TailViolation(
                f"truncating at L_max={params.l_max} neglects up to {tail:.3e} of splitting rate; "
                f"list more beta_l values"
            )

    branch_total = branch_total_rate(params)
    assert branch_total < params.mu, "Delta > 0 implies sum(beta_l) < mu"

    spread = _spread_weight(params)
    walk = EffectiveWalk(
        jump_rate_a=params.kappa,
        branch_spread_weight=spread,
        dist_a=params.dist_a,
        dist_b=params.dist_b,
    )
    return ValidatedModel(params=params, delta=delta, branch_total=branch_total,
                          spread_weight=spread, walk=walk)
