"""
Penalized maximum likelihood for binary count tables.

The data may observe T for every record, for none (T latent) or for a
validation subsample. All groups pool into the XY margins; records with T
observed add their T|XY log predictive probabilities, which is the
observed-data likelihood under ignorable validation sampling.
"""

import logging
import math
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator
from scipy import optimize, stats

from errors import ConfigError, ConvergenceError, DataError, ModelOverflowError
from model import (
    MODEL_AXES,
    T_BLOCK,
    CoefVector,
    check_eta,
    design_matrix,
    expected_counts,
    log_cross_ratio,
    model_coefs,
    transparent_array,
)
from priors import PriorPanel, penalty, penalty_slope
from tables import StratifiedCountTable, TwoByTwo, odds_ratio, table_from_two_by_two, wald_log_or_se

logger = logging.getLogger(__name__)

Frame = Literal["poisson", "multinomial"]
DESIGN_FIXED = ("beta_0", "beta_Y")
SINGULAR_RTOL = 1e-7


class FitOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")
    gtol: float = Field(1e-8, gt=0)
    xtol: float = Field(1e-10, gt=0)
    max_iter: int = Field(200, ge=1)
    hessian_step: float = Field(1e-5, gt=0)


class _Kernel:
    """Observed-data loglikelihood of one table as a function of the linear predictor"""

    def __init__(self, data: StratifiedCountTable):
        extra = set(data.axes) - set(MODEL_AXES)
        if extra:
            raise DataError(f"Axes {sorted(extra)} are outside the (T, X, Y) model; rename or collapse them first")
        if "X" not in data.axes or "Y" not in data.axes:
            raise DataError(f"The model needs both X and Y axes, table has {data.axes}")
        self.axes = data.axes
        self.names = model_coefs(self.axes)
        self.Z = design_matrix(self.axes)
        self.has_t = "T" in self.axes
        self.shape = (2,) * len(self.axes)

        self.observed = np.zeros(self.shape)
        for group in data.groups:
            if not group.latent:
                self.observed = group.array()
            elif group.latent != ("T",):
                raise DataError(f"Only T may be latent, found a cell group with {group.latent} latent")
        pooled = data.margin(("X", "Y"))
        self.observed_xy = self.observed.sum(axis=0) if self.has_t else self.observed
        self.latent_xy = pooled - self.observed_xy
        self.stratum_totals = pooled.sum(axis=0)

    def _cells(self, eta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        E = np.exp(eta).reshape(self.shape)
        return E, (E.sum(axis=0) if self.has_t else E)

    def loglik(self, eta: np.ndarray, frame: Frame) -> float:
        E, E_xy = self._cells(eta)
        ll = float(np.sum(self.latent_xy * np.log(E_xy)) + np.sum(self.observed * eta.reshape(self.shape)))
        if frame == "poisson":
            return ll - float(E_xy.sum())
        return ll - float(np.sum(self.stratum_totals * np.log(E_xy.sum(axis=0))))

    def eta_gradient(self, eta: np.ndarray, frame: Frame) -> np.ndarray:
        E, E_xy = self._cells(eta)
        w = self.observed.copy()
        if self.has_t:
            w += self.latent_xy * E / E_xy
        if frame == "poisson":
            w -= E
        else:
            w -= E * (self.stratum_totals / E_xy.sum(axis=0))
        return w.ravel()

    def start(self, panel: PriorPanel, constraints: Dict[str, float]) -> np.ndarray:
        """Saturated solve of ln C = Z beta for imputed counts C"""
        if self.has_t:
            if self.observed_xy.sum() > 0:
                with np.errstate(divide="ignore", invalid="ignore"):
                    p = np.where(self.observed_xy > 0, self.observed[1] / self.observed_xy, 0.5)
                p = np.clip(p, 0.01, 0.99)
                C = np.stack([self.latent_xy * (1.0 - p), self.latent_xy * p]) + self.observed
            else:
                block = [constraints.get(n, panel.get(n).mode or 0.0) for n in T_BLOCK]
                C = transparent_array(self.latent_xy, block)
        else:
            C = self.observed.copy()
        if np.any(C <= 0):
            C = C + 0.5
        beta = np.linalg.solve(self.Z, np.log(C.ravel()))
        for i, name in enumerate(self.names):
            if name in constraints:
                beta[i] = constraints[name]
        return beta

    def match_totals(self, beta: np.ndarray) -> np.ndarray:
        """Shift the design coefficients so expected Y totals equal the observed ones"""
        eta = self.Z @ beta
        _, E_xy = self._cells(eta)
        shift = np.log(self.stratum_totals / E_xy.sum(axis=0))
        out = beta.copy()
        out[self.names.index("beta_0")] += shift[0]
        out[self.names.index("beta_Y")] += shift[1] - shift[0]
        return out


class FitProblem(BaseModel):
    model_config = ConfigDict(frozen=True)
    data: StratifiedCountTable
    panel: PriorPanel = PriorPanel()
    constraints: Dict[str, float] = Field(default_factory=dict)
    frame: Frame = "poisson"
    _kernel: Optional[_Kernel] = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check_problem(self):
        names = _Kernel(self.data).names
        unknown = set(self.constraints) - set(names)
        if unknown:
            raise ConfigError(f"Constraints on coefficients outside the model: {sorted(unknown)}")
        for name, value in self.constraints.items():
            if not math.isfinite(value):
                raise ConfigError(f"Constraint on {name} must be finite")
        self.panel.restricted(names)
        return self

    @property
    def kernel(self) -> _Kernel:
        if self._kernel is None:
            self._kernel = _Kernel(self.data)
        return self._kernel

    @property
    def names(self) -> Tuple[str, ...]:
        return model_coefs(self.data.axes)

    @property
    def free(self) -> Tuple[str, ...]:
        held = set(self.constraints)
        if self.frame == "multinomial":
            held.update(DESIGN_FIXED)
        return tuple(n for n in self.names if n not in held)

    def with_constraint(self, name: str, value: float) -> "FitProblem":
        return FitProblem(
            data=self.data, panel=self.panel, constraints={**self.constraints, name: value}, frame=self.frame
        )


class FunctionalEstimate(BaseModel):
    """An odds-ratio scale estimate with its interval; log_estimate and se are on the log scale"""

    model_config = ConfigDict(frozen=True)
    name: str
    estimate: float
    lo: Optional[float] = None
    hi: Optional[float] = None
    level: float = 0.95
    log_estimate: float
    se: Optional[float] = None
    method: Literal["wald", "profile", "closed-form"] = "wald"


class FitResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)
    beta_hat: CoefVector
    axes: Tuple[str, ...]
    names: Tuple[str, ...]
    free: Tuple[str, ...]
    covariance: Optional[np.ndarray] = None
    objective: float
    loglik: float
    gradient_norm: float
    iterations: int
    frame: Frame = "poisson"
    pinned: Tuple[str, ...] = ()
    functionals: Dict[str, FunctionalEstimate] = Field(default_factory=dict)

    def se(self, name: str) -> float:
        if self.covariance is None:
            raise ConvergenceError("Covariance is unavailable at a Laplace kink")
        return math.sqrt(self.covariance[self.free.index(name), self.free.index(name)])

    def with_functional(self, est: FunctionalEstimate) -> "FitResult":
        return self.model_copy(update={"functionals": {**self.functionals, est.name: est}})


def log_or_ty(beta: CoefVector) -> float:
    return float(log_cross_ratio(expected_counts(beta).ty_margin))


def log_or_xy(beta: CoefVector) -> float:
    return float(log_cross_ratio(expected_counts(beta).xy_margin))


FUNCTIONALS: Dict[str, Callable[[CoefVector], float]] = {"OR_TY": log_or_ty, "OR_XY": log_or_xy}

Functional = Union[str, Callable[[CoefVector], float]]


def _resolve(functional: Functional, axes: Sequence[str]) -> Tuple[str, Callable[[CoefVector], float], Optional[str]]:
    """(name, log-scale function, coefficient it equals or None)"""
    if callable(functional):
        return getattr(functional, "__name__", "functional"), functional, None
    if functional in FUNCTIONALS:
        coef = "beta_XY" if functional == "OR_XY" and "T" not in axes else None
        return functional, FUNCTIONALS[functional], coef
    if functional in model_coefs(MODEL_AXES):
        return functional, (lambda b: getattr(b, functional)), functional
    raise ConfigError(f"Unknown functional {functional}; use one of {sorted(FUNCTIONALS)} or a coefficient name")


class _Objective:
    """Penalized loglikelihood over the free coordinates of one problem"""

    def __init__(self, problem: FitProblem, base: Optional[np.ndarray] = None):
        self.problem = problem
        self.kernel = problem.kernel
        self.names = self.kernel.names
        self.panel = problem.panel.restricted(self.names)
        self.base = self.kernel.start(self.panel, problem.constraints) if base is None else np.array(base, dtype=float)
        self.free = problem.free
        self.idx = [self.names.index(n) for n in self.free]
        priors = [self.panel.get(n) for n in self.free]
        self.smooth_priors = [(i, p) for i, p in enumerate(priors) if p.dist in ("normal", "logf")]
        self.laplace = [(i, p.mean, p.scale) for i, p in enumerate(priors) if p.dist == "laplace"]

    def full(self, theta: np.ndarray) -> np.ndarray:
        beta = self.base.copy()
        beta[self.idx] = theta
        return beta

    def coefs(self, theta: np.ndarray) -> CoefVector:
        return CoefVector.from_array(self.full(theta), self.names)

    def eta(self, theta: np.ndarray) -> np.ndarray:
        beta = self.full(theta)
        eta = self.kernel.Z @ beta
        check_eta(eta, self.names, beta)
        return eta

    def loglik(self, theta: np.ndarray) -> float:
        return self.kernel.loglik(self.eta(theta), self.problem.frame)

    def value(self, theta: np.ndarray) -> float:
        return self.loglik(theta) - 0.5 * penalty(self.panel, dict(zip(self.names, self.full(theta))))

    def smooth_gradient(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of everything except the Laplace terms"""
        g = self.kernel.Z.T @ self.kernel.eta_gradient(self.eta(theta), self.problem.frame)
        g = g[self.idx]
        for i, p in self.smooth_priors:
            g[i] -= 0.5 * float(penalty_slope(p, theta[i]))
        return g

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        """Steepest-ascent subgradient; zero on a Laplace coordinate pinned at its kink"""
        g = self.smooth_gradient(theta)
        for i, mu, b in self.laplace:
            d = theta[i] - mu
            if d != 0:
                g[i] -= math.copysign(1.0 / b, d)
            elif abs(g[i]) <= 1.0 / b:
                g[i] = 0.0
            else:
                g[i] -= math.copysign(1.0 / b, g[i])
        return g

    def pinned(self, theta: np.ndarray, g: np.ndarray) -> List[int]:
        return [i for i, mu, _ in self.laplace if theta[i] == mu and g[i] == 0.0]

    def hessian(self, theta: np.ndarray, active: Sequence[int], step: float) -> np.ndarray:
        """Central differences of the smooth gradient with one Richardson step, symmetrized"""

        def column(i: int, h: float) -> np.ndarray:
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            return (self.smooth_gradient(up)[active] - self.smooth_gradient(down)[active]) / (2.0 * h)

        H = np.zeros((len(active), len(active)))
        for j, i in enumerate(active):
            h = step * max(1.0, abs(theta[i]))
            # cancel the h^2 truncation term
            H[:, j] = (4.0 * column(i, h) - column(i, 2.0 * h)) / 3.0
        return 0.5 * (H + H.T)

    def advance(self, theta: np.ndarray, direction: np.ndarray, t: float) -> np.ndarray:
        """theta + t*direction, stopped at the first Laplace kink it would cross"""
        new = theta + t * direction
        cut, kink = 1.0, None
        for i, mu, _ in self.laplace:
            if (theta[i] - mu) * (new[i] - mu) < 0:
                frac = (mu - theta[i]) / (new[i] - theta[i])
                if frac < cut:
                    cut, kink = frac, (i, mu)
        if kink is None:
            return new
        new = theta + cut * t * direction
        new[kink[0]] = kink[1]
        return new


def _newton_direction(neg_h: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(neg_h), g)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(neg_h)
        damping = -eig.min() + 1e-6 * max(1.0, abs(eig.max()))
        logger.debug(f"Negative Hessian not positive definite, damping by {damping:.3g}")
        return np.linalg.solve(neg_h + damping * np.eye(len(g)), g)


def backtracking_line_search(
    obj: _Objective,
    theta: np.ndarray,
    direction: np.ndarray,
    f0: float,
    alpha: float = 0.5,
    t_threshold: float = 1e-12,
) -> Optional[Tuple[np.ndarray, float]]:
    """First point along t = 1, alpha, alpha^2, ... that does not lower the objective"""
    slack = 1e-12 * max(1.0, abs(f0))
    t = 1.0
    while t > t_threshold:
        candidate = obj.advance(theta, direction, t)
        try:
            f1 = obj.value(candidate)
        except ModelOverflowError:
            f1 = -math.inf
        if f1 >= f0 - slack:
            return candidate, f1
        t *= alpha
    return None


def _check_information(neg_h: np.ndarray, names: Sequence[str]) -> None:
    eig, vec = np.linalg.eigh(neg_h)
    if eig[0] <= SINGULAR_RTOL * max(1.0, eig[-1]):
        loading = np.abs(vec[:, 0])
        culprits = [names[i] for i in np.argsort(-loading) if loading[i] > 0.3]
        raise ConvergenceError(
            f"Observed penalized information is singular or indefinite (smallest eigenvalue {eig[0]:.3g}); "
            f"direction loads on {culprits}, likely a nonidentified coefficient without a proper prior"
        )


def maximize(problem: FitProblem, options: Optional[FitOptions] = None) -> FitResult:
    """Newton ascent with step halving on the penalized observed-data loglikelihood"""
    options = options or FitOptions()
    if not problem.free:
        raise ConfigError("Fit problem has no free coefficient")
    # start from the saturated solve of the imputed counts
    obj = _Objective(problem)
    theta = obj.base[obj.idx].copy()
    f = obj.value(theta)
    free = obj.free
    iterations = 0
    while True:
        g = obj.gradient(theta)
        gnorm = float(np.max(np.abs(g)))
        logger.debug(f"iter {iterations}: objective {f:.12g}, gradient max-norm {gnorm:.3g}")
        if gnorm < options.gtol:
            break
        if iterations >= options.max_iter:
            raise ConvergenceError(
                f"No convergence after {options.max_iter} iterations (gradient max-norm {gnorm:.3g})"
            )
        iterations += 1
        # coordinates held at a Laplace kink drop out of the Newton step
        pinned = set(obj.pinned(theta, g))
        active = [i for i in range(len(free)) if i not in pinned]
        neg_h = -obj.hessian(theta, active, options.hessian_step)
        direction = np.zeros_like(theta)
        direction[active] = _newton_direction(neg_h, g[active])
        # halve the step until the objective does not drop
        found = backtracking_line_search(obj, theta, direction, f)
        if found is None:
            raise ConvergenceError(f"Line search failed at iteration {iterations} (gradient max-norm {gnorm:.3g})")
        new, f = found
        moved = float(np.max(np.abs(new - theta)))
        theta = new
        if moved < options.xtol:
            # stalled: take the gradient where we stopped
            g = obj.gradient(theta)
            gnorm = float(np.max(np.abs(g)))
            logger.debug(f"Step {moved:.3g} below xtol, stopping with gradient max-norm {gnorm:.3g}")
            break

    # information over the unpinned coordinates; none is reported at a kink
    pinned = set(obj.pinned(theta, g))
    active = [i for i in range(len(free)) if i not in pinned]
    covariance = None
    if active:
        neg_h = -obj.hessian(theta, active, options.hessian_step)
        _check_information(neg_h, [free[i] for i in active])
        if not pinned:
            covariance = np.linalg.inv(neg_h)
            covariance = 0.5 * (covariance + covariance.T)

    beta = obj.full(theta)
    # design coefficients follow from the Y totals in the multinomial frame
    if problem.frame == "multinomial":
        beta = problem.kernel.match_totals(beta)
    result = FitResult(
        beta_hat=CoefVector.from_array(beta, obj.names),
        axes=problem.data.axes,
        names=obj.names,
        free=free,
        covariance=covariance,
        objective=f,
        loglik=obj.loglik(theta),
        gradient_norm=gnorm,
        iterations=iterations,
        frame=problem.frame,
        pinned=tuple(free[i] for i in sorted(pinned)),
    )
    logger.info(f"Converged in {iterations} iteration(s): objective {f:.10g}, gradient max-norm {gnorm:.3g}")
    return result


def observed_data_loglik(beta: CoefVector, data: StratifiedCountTable, frame: Frame = "poisson") -> float:
    kernel = _Kernel(data)
    b = beta.as_array(kernel.names)
    eta = kernel.Z @ b
    check_eta(eta, kernel.names, b)
    return kernel.loglik(eta, frame)


def penalized_loglik(beta: CoefVector, problem: FitProblem) -> float:
    return observed_data_loglik(beta, problem.data, problem.frame) - 0.5 * penalty(
        problem.panel.restricted(problem.names), beta
    )


def penalized_gradient(beta: CoefVector, problem: FitProblem) -> np.ndarray:
    """Gradient over problem.free; Laplace terms use their one-sided slope"""
    obj = _Objective(problem, base=beta.as_array(problem.names))
    return obj.gradient(beta.as_array(problem.free))


def _z(level: float) -> float:
    if not 0 < level < 1:
        raise ConfigError(f"Interval level must lie in (0, 1), got {level}")
    return float(stats.norm.ppf(1.0 - (1.0 - level) / 2.0))


def wald_functional_interval(fit: FitResult, functional: Functional, level: float = 0.95) -> FunctionalEstimate:
    """
    Delta-method interval for a log-scale functional, reported on the exp scale.
    At a Laplace kink the covariance is unavailable: the point estimate comes
    back with se and limits set to None.
    """
    name, fn, _ = _resolve(functional, fit.axes)
    theta = fit.beta_hat.as_array(fit.free)

    def at(th):
        return fn(fit.beta_hat.replace(**dict(zip(fit.free, th))))

    g0 = at(theta)
    if not math.isfinite(g0):
        raise DataError(f"Functional {name} is not finite at the estimate")
    if fit.covariance is None:
        logger.warning(f"No covariance for {name}: {list(fit.pinned)} pinned at a Laplace kink")
        return FunctionalEstimate(name=name, estimate=math.exp(g0), level=level, log_estimate=g0, method="wald")
    # gradient of the functional by central differences
    grad = np.zeros(len(theta))
    for i in range(len(theta)):
        h = 1e-5 * max(1.0, abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (at(up) - at(down)) / (2.0 * h)
    se = math.sqrt(max(0.0, float(grad @ fit.covariance @ grad)))
    z = _z(level)
    return FunctionalEstimate(
        name=name,
        estimate=math.exp(g0),
        lo=math.exp(g0 - z * se),
        hi=math.exp(g0 + z * se),
        level=level,
        log_estimate=g0,
        se=se,
        method="wald",
    )


def _profile_objective(problem: FitProblem, fit: FitResult, fn, coef: Optional[str], value: float, options) -> float:
    """Largest penalized loglikelihood with the functional held at value"""
    if coef is not None:
        sub = problem.with_constraint(coef, value)
        if not sub.free:
            return penalized_loglik(fit.beta_hat.replace(**{coef: value}), sub)
        return maximize(sub, options).objective
    obj = _Objective(problem, base=fit.beta_hat.as_array(fit.names))
    res = optimize.minimize(
        lambda th: -obj.value(th),
        fit.beta_hat.as_array(fit.free),
        jac=lambda th: -obj.gradient(th),
        method="SLSQP",
        constraints=[{"type": "eq", "fun": lambda th: fn(obj.coefs(th)) - value}],
        options={"ftol": 1e-13, "maxiter": 500},
    )
    if not res.success:
        raise ConvergenceError(f"Constrained refit failed at functional value {value:.6g}: {res.message}")
    return -float(res.fun)


def profile_interval(
    problem: FitProblem,
    functional: Functional,
    level: float = 0.95,
    fit: Optional[FitResult] = None,
    options: Optional[FitOptions] = None,
) -> Tuple[float, float]:
    """Endpoints where the signed root of the penalized deviance drop reaches -z and +z"""
    fit = fit or maximize(problem, options)
    name, fn, coef = _resolve(functional, fit.axes)
    if coef is not None and coef not in problem.free:
        raise ConfigError(f"{coef} is not a free coefficient of this problem")
    wald = wald_functional_interval(fit, functional, level)
    est, z = wald.log_estimate, _z(level)
    if wald.se == 0:
        return wald.estimate, wald.estimate
    # unit log-scale bracket when the kink leaves no Wald se
    se = wald.se if wald.se is not None else 1.0

    def signed_root(value: float) -> float:
        drop = 2.0 * (fit.objective - _profile_objective(problem, fit, fn, coef, value, options))
        return math.copysign(math.sqrt(max(drop, 0.0)), value - est)

    def endpoint(side: int) -> float:
        inner, outer = est, est + side * 10.0 * se
        if side * signed_root(outer) < z:
            raise ConvergenceError(f"Profile endpoint for {name} lies outside estimate +/- 10 Wald se")
        while abs(outer - inner) > 1e-9 * max(1.0, abs(est)):
            mid = 0.5 * (inner + outer)
            if side * signed_root(mid) < z:
                inner = mid
            else:
                outer = mid
        return 0.5 * (inner + outer)

    lo, hi = endpoint(-1), endpoint(+1)
    logger.info(f"Profile interval for {name}: ({math.exp(lo):.4g}, {math.exp(hi):.4g})")
    return math.exp(lo), math.exp(hi)


def conventional_mle(table: TwoByTwo, level: float = 0.95) -> FitResult:
    """Closed-form saturated fit of a 2x2 with Y as rows and X as columns"""
    or_hat = odds_ratio(table)
    se = wald_log_or_se(table)
    kernel = _Kernel(table_from_two_by_two(table))
    counts = kernel.observed.ravel()
    Zinv = np.linalg.inv(kernel.Z)
    beta = Zinv @ np.log(counts)
    covariance = Zinv @ np.diag(1.0 / counts) @ Zinv.T
    loglik = float(np.sum(counts * np.log(counts) - counts))
    z = _z(level)
    est = FunctionalEstimate(
        name="OR_XY",
        estimate=or_hat,
        lo=math.exp(math.log(or_hat) - z * se),
        hi=math.exp(math.log(or_hat) + z * se),
        level=level,
        log_estimate=math.log(or_hat),
        se=se,
        method="closed-form",
    )
    return FitResult(
        beta_hat=CoefVector.from_array(beta, kernel.names),
        axes=kernel.axes,
        names=kernel.names,
        free=kernel.names,
        covariance=covariance,
        objective=loglik,
        loglik=loglik,
        gradient_norm=0.0,
        iterations=0,
        functionals={"OR_XY": est},
    )
