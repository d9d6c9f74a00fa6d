"""
Relaxation priors for bias coefficients.

Each prior doubles as a penalty (-2 ln density, shifted so its minimum is 0)
added to the loglikelihood, and as a sampling distribution for Monte Carlo
sensitivity analysis. Penalties drop additive constants, so objective values
are comparable only within one fixed panel.
"""

import logging
import math
from typing import Dict, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import stats
from scipy.special import expit, logit

from errors import ConfigError, SamplingError

logger = logging.getLogger(__name__)

DESIGN_COEFS = ("beta_0", "beta_Y")
PROBABILITY_COEFS = ("beta_T", "beta_X", "beta_S")

Scale = Literal["identity", "exp", "expit"]
ArrayLike = Union[float, np.ndarray]


class PriorSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    target: str
    dist: Literal["flat", "normal", "laplace", "logf"] = "flat"
    mean: Optional[float] = None
    variance: Optional[float] = None
    scale: Optional[float] = None
    # log-F parameters: mode m, scale s, skew r, weight n
    m: Optional[float] = None
    s: Optional[float] = None
    r: Optional[float] = None
    n: Optional[float] = None

    @model_validator(mode="after")
    def _check_params(self):
        needed = {
            "flat": (),
            "normal": ("mean", "variance"),
            "laplace": ("mean", "scale"),
            "logf": ("m", "s", "r", "n"),
        }[self.dist]
        allowed = set(needed)
        for name in ("mean", "variance", "scale", "m", "s", "r", "n"):
            value = getattr(self, name)
            if name in allowed:
                if value is None or not math.isfinite(value):
                    raise ConfigError(f"Prior on {self.target}: {self.dist} needs a finite '{name}'")
            elif value is not None:
                raise ConfigError(f"Prior on {self.target}: '{name}' does not apply to a {self.dist} prior")
        if self.dist == "normal" and self.variance <= 0:
            raise ConfigError(f"Prior on {self.target}: variance must be > 0")
        if self.dist == "laplace" and self.scale <= 0:
            raise ConfigError(f"Prior on {self.target}: scale must be > 0")
        if self.dist == "logf":
            if not 0 < self.r < 1:
                raise ConfigError(f"Prior on {self.target}: skew r must lie in (0, 1)")
            if self.n <= 0 or self.s <= 0:
                raise ConfigError(f"Prior on {self.target}: n and s must be > 0")
        return self

    @classmethod
    def flat(cls, target: str) -> "PriorSpec":
        return cls(target=target)

    @classmethod
    def normal(cls, target: str, mean: float, variance: float) -> "PriorSpec":
        return cls(target=target, dist="normal", mean=mean, variance=variance)

    @classmethod
    def laplace(cls, target: str, mean: float, scale: float) -> "PriorSpec":
        return cls(target=target, dist="laplace", mean=mean, scale=scale)

    @classmethod
    def logf(cls, target: str, m: float, s: float, r: float, n: float) -> "PriorSpec":
        return cls(target=target, dist="logf", m=m, s=s, r=r, n=n)

    @property
    def is_flat(self) -> bool:
        return self.dist == "flat"

    @property
    def mode(self) -> Optional[float]:
        if self.dist in ("normal", "laplace"):
            return self.mean
        if self.dist == "logf":
            return self.m + (self.s - 1.0) * logit(self.r)
        return None

    def params(self) -> Dict[str, float]:
        names = {"flat": (), "normal": ("mean", "variance"), "laplace": ("mean", "scale"), "logf": ("m", "s", "r", "n")}
        return {name: getattr(self, name) for name in names[self.dist]}


class DataPriorRecord(BaseModel):
    model_config = ConfigDict(frozen=True)
    target: str
    b: float
    n: float
    offset: float

    @model_validator(mode="after")
    def _check(self):
        if not 0 < self.b < self.n:
            raise ConfigError(f"Data prior for {self.target} needs 0 < b < n, got b={self.b}, n={self.n}")
        return self


class PriorPanel(BaseModel):
    model_config = ConfigDict(frozen=True)
    specs: Tuple[PriorSpec, ...] = ()
    design: Literal["case-control", "cohort"] = "case-control"

    @model_validator(mode="after")
    def _check_panel(self):
        targets = [p.target for p in self.specs]
        duplicates = {t for t in targets if targets.count(t) > 1}
        if duplicates:
            raise ConfigError(f"More than one prior for {sorted(duplicates)}")
        if self.design == "case-control":
            for p in self.specs:
                if p.target in DESIGN_COEFS and not p.is_flat:
                    raise ConfigError(
                        f"{p.target} is fixed by the case-control design (intercept and outcome coefficient "
                        f"are functions of the sampling ratios) and should receive no prior"
                    )
        return self

    @classmethod
    def of(cls, *specs: PriorSpec, design: str = "case-control") -> "PriorPanel":
        return cls(specs=tuple(specs), design=design)

    def get(self, target: str) -> PriorSpec:
        for p in self.specs:
            if p.target == target:
                return p
        return PriorSpec.flat(target)

    def restricted(self, targets: Sequence[str]) -> "PriorPanel":
        """One spec per listed coefficient, Flat where the panel is silent"""
        outside = [p.target for p in self.specs if p.target not in targets and not p.is_flat]
        if outside:
            raise ConfigError(f"Priors given for coefficients not in the model: {outside}")
        return PriorPanel(specs=tuple(self.get(t) for t in targets), design=self.design)

    @property
    def proper(self) -> Tuple[PriorSpec, ...]:
        return tuple(p for p in self.specs if not p.is_flat)

    def with_spec(self, spec: PriorSpec) -> "PriorPanel":
        others = tuple(p for p in self.specs if p.target != spec.target)
        return PriorPanel(specs=others + (spec,), design=self.design)


class PriorGauge(BaseModel):
    target: str
    dist: str
    params: Dict[str, float]
    scale: str
    level: float
    limits: Tuple[float, float]
    data_prior: Optional[DataPriorRecord] = None
    n_trials: Optional[float] = None
    note: Optional[str] = None


def _logf_z(p: PriorSpec, theta: ArrayLike) -> ArrayLike:
    return (np.asarray(theta, dtype=float) + logit(p.r) - p.m) / p.s


def penalty_term(p: PriorSpec, x: ArrayLike) -> ArrayLike:
    """-2 ln density of one prior, zero at its mode"""
    x = np.asarray(x, dtype=float)
    if p.dist == "flat":
        return np.zeros_like(x)
    if p.dist == "normal":
        return (x - p.mean) ** 2 / p.variance
    if p.dist == "laplace":
        return 2.0 * np.abs(x - p.mean) / p.scale
    z = _logf_z(p, x)
    floor = p.r * math.log(p.r) + (1.0 - p.r) * math.log1p(-p.r)
    return -2.0 * p.n * (p.r * z - np.logaddexp(0.0, z) - floor)


def penalty_slope(p: PriorSpec, x: ArrayLike) -> ArrayLike:
    """Derivative of penalty_term; the Laplace kink gets slope 0"""
    x = np.asarray(x, dtype=float)
    if p.dist == "flat":
        return np.zeros_like(x)
    if p.dist == "normal":
        return 2.0 * (x - p.mean) / p.variance
    if p.dist == "laplace":
        return 2.0 * np.sign(x - p.mean) / p.scale
    z = _logf_z(p, x)
    return -2.0 * p.n * (p.r - expit(z)) / p.s


def _values(beta) -> Dict[str, float]:
    return beta.as_dict() if hasattr(beta, "as_dict") else dict(beta)


def penalty(panel: PriorPanel, beta) -> float:
    values = _values(beta)
    total = 0.0
    for p in panel.proper:
        if p.target not in values:
            raise ConfigError(f"Coefficient {p.target} has a prior but is missing from the coefficient vector")
        total += float(penalty_term(p, values[p.target]))
    return total


def to_data_prior(p: PriorSpec) -> DataPriorRecord:
    """Binomial record (b successes of n trials, offset -mu) reproducing a Normal prior's curvature"""
    if p.dist != "normal":
        raise ConfigError(f"Data-prior translation covers Normal priors only; {p.target} is {p.dist}")
    return DataPriorRecord(target=p.target, b=2.0 / p.variance, n=4.0 / p.variance, offset=-p.mean)


def data_prior_loglik(rec: DataPriorRecord, beta_i: ArrayLike) -> ArrayLike:
    u = np.asarray(beta_i, dtype=float) + rec.offset
    return rec.b * u - rec.n * np.logaddexp(0.0, u)


def logf_density(p: PriorSpec, theta: ArrayLike) -> ArrayLike:
    """Unnormalized generalized log-F density e^{znr} / (1 + e^z)^n"""
    if p.dist != "logf":
        raise ConfigError(f"logf_density needs a logf prior, got {p.dist}")
    z = _logf_z(p, theta)
    return np.exp(p.n * p.r * z - p.n * np.logaddexp(0.0, z))


def _transform(x: ArrayLike, scale: Scale) -> ArrayLike:
    if scale == "exp":
        return np.exp(x)
    if scale == "expit":
        return expit(x)
    return x


def _inverse_transform(x: float, scale: Scale) -> float:
    if scale == "exp":
        return math.log(x)
    if scale == "expit":
        return float(logit(x))
    return x


def quantile(p: PriorSpec, q: ArrayLike) -> ArrayLike:
    q = np.asarray(q, dtype=float)
    if p.dist == "flat":
        raise ConfigError(f"Flat prior on {p.target} has no quantiles")
    if p.dist == "normal":
        return p.mean + math.sqrt(p.variance) * stats.norm.ppf(q)
    if p.dist == "laplace":
        return stats.laplace.ppf(q, loc=p.mean, scale=p.scale)
    u = stats.f.ppf(q, 2.0 * p.n * p.r, 2.0 * p.n * (1.0 - p.r))
    return p.m - logit(p.r) + p.s * np.log(p.r * u / (1.0 - p.r))


def prior_interval(p: PriorSpec, level: float = 0.95, scale: Scale = "identity") -> Tuple[float, float]:
    """Equal-tailed prior interval, mapped to the requested scale"""
    if not 0 < level < 1:
        raise ConfigError(f"Interval level must lie in (0, 1), got {level}")
    tail = (1.0 - level) / 2.0
    lo, hi = quantile(p, [tail, 1.0 - tail])
    return float(_transform(lo, scale)), float(_transform(hi, scale))


def sample_prior(p: PriorSpec, rng: np.random.Generator, size=None) -> ArrayLike:
    if p.dist == "flat":
        raise SamplingError(f"Cannot draw from the flat prior on {p.target}")
    if p.dist == "normal":
        return rng.normal(p.mean, math.sqrt(p.variance), size)
    if p.dist == "laplace":
        return rng.laplace(p.mean, p.scale, size)
    # Beta(nr, n(1-r)) on the expit scale, written through F(2nr, 2n(1-r))
    u = rng.f(2.0 * p.n * p.r, 2.0 * p.n * (1.0 - p.r), size)
    return p.m - logit(p.r) + p.s * (np.log(u) + math.log(p.r / (1.0 - p.r)))


def normal_from_limits(
    target: str, lo: float, hi: float, scale: Scale = "exp", level: float = 0.95
) -> PriorSpec:
    """Normal prior whose equal-tailed limits on the given scale are (lo, hi)"""
    if not lo < hi:
        raise ConfigError(f"Prior limits for {target} must satisfy lo < hi, got ({lo}, {hi})")
    a, b = _inverse_transform(lo, scale), _inverse_transform(hi, scale)
    z = stats.norm.ppf(1.0 - (1.0 - level) / 2.0)
    return PriorSpec.normal(target, mean=(a + b) / 2.0, variance=((b - a) / (2.0 * z)) ** 2)


def sum_prior(target: str, specs: Sequence[PriorSpec]) -> PriorSpec:
    """Induced prior of a sum of independent Normal coefficients"""
    if not specs or any(p.dist != "normal" for p in specs):
        raise ConfigError("Induced sum priors need independent Normal components")
    return PriorSpec.normal(target, mean=sum(p.mean for p in specs), variance=sum(p.variance for p in specs))


def default_scale(target: str) -> Scale:
    if target in PROBABILITY_COEFS:
        return "expit"
    if target == "beta_0":
        return "identity"
    return "exp"


def gauge(p: PriorSpec, level: float = 0.95, scale: Optional[Scale] = None, note: Optional[str] = None) -> PriorGauge:
    """Implied limits plus, for Normal priors, the equivalent binomial record"""
    scale = scale or default_scale(p.target)
    record = to_data_prior(p) if p.dist == "normal" else None
    return PriorGauge(
        target=p.target,
        dist=p.dist,
        params=p.params(),
        scale=scale,
        level=level,
        limits=prior_interval(p, level, scale),
        data_prior=record,
        n_trials=record.n if record else None,
        note=note,
    )


def sids_misclassification_panel(design: str = "case-control") -> PriorPanel:
    """Normal priors for the T|XY regression used in the SIDS misclassification analysis"""
    return PriorPanel.of(
        PriorSpec.normal("beta_T", float(logit(0.1)), 0.16),
        PriorSpec.normal("beta_TX", math.log(13.5), 0.25),
        PriorSpec.normal("beta_TY", 0.0, 0.50),
        PriorSpec.normal("beta_TXY", 0.0, 0.125),
        design=design,
    )
