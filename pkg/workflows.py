"""
End-to-end bias analyses producing AnalysisReport objects:
misclassification, validation data, unmeasured confounder, selection bias,
conventional 2x2 and prior checks.
"""

import logging
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, model_validator

from errors import ConfigError, DataError
from fit import (
    FitOptions,
    FitProblem,
    FitResult,
    FunctionalEstimate,
    conventional_mle,
    maximize,
    profile_interval,
    wald_functional_interval,
)
from mc import (
    KINDS,
    DrawSet,
    DrawSummary,
    IgnoranceInterval,
    SamplerConfig,
    ignorance_interval,
    run_sampler,
    summarize,
)
from model import T_BLOCK, X_BLOCK, CoefVector, PredictiveValues, roc_odds_ratios
from priors import PriorGauge, PriorPanel, PriorSpec, gauge, prior_interval, sum_prior
from tables import StratifiedCountTable, collapse, impute, odds_ratio, table_from_two_by_two

logger = logging.getLogger(__name__)

NEAR_FLAT_VARIANCE = 25.0
AGREEMENT_RTOL = 1e-6


class Estimate(BaseModel):
    """One reported quantity on the odds-ratio scale"""

    model_config = ConfigDict(frozen=True)
    label: str
    name: str
    estimate: float
    lo: Optional[float] = None
    hi: Optional[float] = None
    level: float = 0.95
    se: Optional[float] = None
    method: str = "wald"
    profile: Optional[Tuple[float, float]] = None

    @model_validator(mode="after")
    def _check_order(self):
        slack = 1e-9 * max(1.0, abs(self.estimate))
        for lo, hi in ((self.lo, self.hi), self.profile or (None, None)):
            if lo is not None and lo > self.estimate + slack:
                raise DataError(f"{self.label}: lower limit {lo} exceeds estimate {self.estimate}")
            if hi is not None and hi < self.estimate - slack:
                raise DataError(f"{self.label}: upper limit {hi} is below estimate {self.estimate}")
        return self

    @classmethod
    def from_functional(cls, label: str, est: FunctionalEstimate, profile=None) -> "Estimate":
        return cls(
            label=label,
            name=est.name,
            estimate=est.estimate,
            lo=est.lo,
            hi=est.hi,
            level=est.level,
            se=est.se,
            method=est.method,
            profile=profile,
        )


class SamplerBlock(BaseModel):
    model_config = ConfigDict(frozen=True)
    kind: str
    target: str
    identified_mode: str
    dirichlet_prior: Optional[float] = None
    summary: DrawSummary


class FitDiagnostic(BaseModel):
    model_config = ConfigDict(frozen=True)
    label: str
    iterations: int
    gradient_norm: float
    objective: float
    frame: str


class Diagnostics(BaseModel):
    fits: List[FitDiagnostic] = Field(default_factory=list)
    variance_ratio: Optional[float] = None
    dropped_draws: int = 0
    closed_form_gap: Optional[float] = None


class Provenance(BaseModel):
    seed: Optional[int] = None
    draws: Optional[int] = None
    chunk: Optional[int] = None
    identified_mode: Optional[str] = None
    config_digest: Optional[str] = None


class AnalysisReport(BaseModel):
    analysis: str
    estimates: List[Estimate] = Field(default_factory=list)
    coefficients: Optional[Dict[str, float]] = None
    sampler: Optional[SamplerBlock] = None
    ignorance: Optional[IgnoranceInterval] = None
    priors: List[PriorGauge] = Field(default_factory=list)
    predictive_values: Optional[Dict[str, float]] = None
    roc_odds_ratios: Optional[Tuple[float, float]] = None
    diagnostics: Diagnostics = Field(default_factory=Diagnostics)
    provenance: Provenance = Field(default_factory=Provenance)
    warnings: List[str] = Field(default_factory=list)
    _draws: Optional[DrawSet] = PrivateAttr(default=None)

    @property
    def draws(self) -> Optional[DrawSet]:
        return self._draws

    def estimate(self, label: str) -> Estimate:
        for est in self.estimates:
            if est.label == label:
                return est
        raise KeyError(label)


def _fit_diagnostic(label: str, fit: FitResult) -> FitDiagnostic:
    return FitDiagnostic(
        label=label, iterations=fit.iterations, gradient_norm=fit.gradient_norm, objective=fit.objective, frame=fit.frame
    )


def _xy_table(table: StratifiedCountTable) -> StratifiedCountTable:
    return table_from_two_by_two(table.to_two_by_two("Y", "X"))


def _provenance(cfg: Optional[SamplerConfig]) -> Provenance:
    if cfg is None:
        return Provenance()
    return Provenance(seed=cfg.seed, draws=cfg.draws, chunk=cfg.chunk, identified_mode=cfg.identified_mode)


def _check_bias_panel(panel: PriorPanel, allowed: Sequence[str], analysis: str) -> None:
    outside = [p.target for p in panel.proper if p.target not in allowed]
    if outside:
        raise ConfigError(f"{analysis} analysis takes priors on {list(allowed)} only; got priors on {outside}")
    if not panel.proper:
        raise ConfigError(f"{analysis} analysis needs proper priors on {list(allowed)}")


def _prior_warnings(panel: PriorPanel) -> List[str]:
    out = []
    for p in panel.proper:
        if p.dist == "normal" and p.variance >= NEAR_FLAT_VARIANCE:
            out.append(
                f"Prior on {p.target} (variance {p.variance:g}) is near-noninformative; "
                f"the target is close to nonidentified"
            )
    return out


def _gauges(panel: PriorPanel, level: float = 0.95) -> List[PriorGauge]:
    gauges = [gauge(p, level) for p in panel.proper]
    tx, txy = panel.get("beta_TX"), panel.get("beta_TXY")
    if tx.dist == "normal" and txy.dist == "normal":
        gauges.append(
            gauge(
                sum_prior("beta_TX+beta_TXY", [tx, txy]),
                level,
                scale="exp",
                note="induced ROC odds ratio at Y=1; not used",
            )
        )
    return gauges


def _sampler_block(kind: str, target: str, cfg: SamplerConfig, summary: DrawSummary) -> SamplerBlock:
    return SamplerBlock(
        kind=kind,
        target=target,
        identified_mode=cfg.identified_mode,
        dirichlet_prior=cfg.dirichlet_prior if cfg.identified_mode == "dirichlet" else None,
        summary=summary,
    )


def _pinned_note(label: str, fit: FitResult) -> List[str]:
    if not fit.pinned:
        return []
    return [f"{label}: {list(fit.pinned)} pinned at a Laplace kink; covariance and Wald limits unavailable"]


def _identified_note(cfg: SamplerConfig) -> List[str]:
    if cfg.identified_mode == "dirichlet":
        return [f"Identified cells drawn with Dirichlet prior mass {cfg.dirichlet_prior:g} per cell (a convention)"]
    return []


def _conventional_blocks(
    xy: StratifiedCountTable,
    crude_prior: Optional[PriorSpec],
    level: float,
    options: Optional[FitOptions],
    design: str,
) -> Tuple[List[Estimate], List[FitDiagnostic], List[PriorGauge], List[str]]:
    """Conventional MLE and, given a prior on the crude log odds ratio, the semi-Bayes fit"""
    tt = xy.to_two_by_two("Y", "X")
    conv = conventional_mle(tt, level)
    flat_problem = FitProblem(data=xy, panel=PriorPanel(design=design))
    flat_fit = maximize(flat_problem, options)
    blocks = [
        Estimate.from_functional(
            "conventional",
            conv.functionals["OR_XY"],
            profile=profile_interval(flat_problem, "OR_XY", level, fit=flat_fit, options=options),
        )
    ]
    fits = [_fit_diagnostic("conventional", flat_fit)]
    gauges: List[PriorGauge] = []
    notes: List[str] = []
    if crude_prior is not None and not crude_prior.is_flat:
        prior = crude_prior.model_copy(update={"target": "beta_XY"})
        problem = FitProblem(data=xy, panel=PriorPanel.of(prior, design=design))
        fit = maximize(problem, options)
        blocks.append(
            Estimate.from_functional(
                "semi-Bayes",
                wald_functional_interval(fit, "OR_XY", level),
                profile=profile_interval(problem, "OR_XY", level, fit=fit, options=options),
            )
        )
        fits.append(_fit_diagnostic("semi-Bayes", fit))
        notes.extend(_pinned_note("semi-Bayes", fit))
        gauges.append(gauge(prior, level, scale="exp"))
    return blocks, fits, gauges, notes


def run_conventional(
    table: StratifiedCountTable,
    crude_prior: Optional[PriorSpec] = None,
    level: float = 0.95,
    options: Optional[FitOptions] = None,
    design: str = "case-control",
) -> AnalysisReport:
    xy = _xy_table(table)
    blocks, fits, gauges, notes = _conventional_blocks(xy, crude_prior, level, options, design)
    return AnalysisReport(
        analysis="conventional", estimates=blocks, priors=gauges, diagnostics=Diagnostics(fits=fits), warnings=notes
    )


def prior_box(panel: PriorPanel, names: Sequence[str], level: float = 0.95) -> Dict[str, Tuple[float, float]]:
    """Equal-tailed prior limits per coefficient on the coefficient scale"""
    return {n: prior_interval(panel.get(n), level, "identity") for n in names}


def run_misclassification(
    table: StratifiedCountTable,
    panel: PriorPanel,
    cfg: SamplerConfig,
    level: float = 0.95,
    levels: Sequence[float] = (0.025, 0.975),
    crude_prior: Optional[PriorSpec] = None,
    options: Optional[FitOptions] = None,
) -> AnalysisReport:
    """Exposure misclassification with a partial prior on the T|XY regression"""
    _check_bias_panel(panel, T_BLOCK, "Misclassification")
    xy = _xy_table(table)
    blocks, fits, gauges, notes = _conventional_blocks(xy, crude_prior, level, options, panel.design)

    # penalized fit with T latent
    problem = FitProblem(data=xy.with_latent_axis("T"), panel=panel)
    fit = maximize(problem, options)
    blocks.append(Estimate.from_functional("penalized", wald_functional_interval(fit, "OR_TY", level)))
    fits.append(_fit_diagnostic("penalized", fit))
    notes.extend(_pinned_note("penalized", fit))

    # exact sampler: identified draw times independent prior draw
    draws = run_sampler("misclassification", xy, panel, cfg)
    crude_se = blocks[0].se
    summary = summarize(draws, levels, crude_se ** 2)
    logger.info(
        f"OR_TY draws: median {summary.median:.3f}, percentiles {summary.percentiles}, "
        f"variance ratio {summary.variance_ratio:.3f}"
    )

    # only a fully proper T block gives a box
    region = None
    if all(not panel.get(n).is_flat for n in T_BLOCK):
        region = ignorance_interval(xy.margin(("X", "Y")), prior_box(panel, T_BLOCK, level), "misclassification")

    modes = [panel.get(n).mode for n in T_BLOCK]
    roc = roc_odds_ratios(modes) if all(m is not None for m in modes) else None
    report = AnalysisReport(
        analysis="misclassification",
        estimates=blocks,
        coefficients=fit.beta_hat.as_dict(),
        sampler=_sampler_block("misclassification", "OR_TY", cfg, summary),
        ignorance=region,
        priors=gauges + _gauges(panel, level),
        roc_odds_ratios=roc,
        diagnostics=Diagnostics(fits=fits, variance_ratio=summary.variance_ratio, dropped_draws=draws.dropped),
        provenance=_provenance(cfg),
        warnings=_prior_warnings(panel) + _identified_note(cfg) + notes,
    )
    report._draws = draws
    return report


def _record_axis(mixed: StratifiedCountTable) -> str:
    for axis in ("W", "T"):
        if axis in mixed.axes:
            return axis
    raise DataError(f"Validation data need a W (or T) axis, table has {mixed.axes}")


def closed_form_validation_or(
    mixed: StratifiedCountTable,
) -> Tuple[PredictiveValues, StratifiedCountTable, float]:
    """
    Stratum-specific predictive values from the validated records, used to
    impute the record where it is missing, then collapsed over X.
    """
    axis = _record_axis(mixed)
    validated = mixed.group(())
    if validated is None:
        raise DataError("Validation data have no records with the validation measurement observed")
    arr = validated.array()
    known = arr.sum(axis=0)
    if np.any(known <= 0):
        raise DataError(f"Empty validation cell among X, Y strata: {known.tolist()}")
    pi_hat = PredictiveValues(values=arr[1] / known)
    imputed = impute(mixed, axis, pi_hat.values)
    ty = collapse(imputed, "X")
    or_hat = odds_ratio(ty.to_two_by_two(axis, "Y"))
    logger.info(f"Closed-form validation OR {or_hat:.4f} with predictive values {pi_hat.as_tuple()}")
    return pi_hat, ty, or_hat


def run_validation(
    mixed: StratifiedCountTable,
    panel: PriorPanel,
    cfg: Optional[SamplerConfig] = None,
    level: float = 0.95,
    options: Optional[FitOptions] = None,
) -> AnalysisReport:
    """Validation subsample with the record W standing in for true exposure T"""
    pi_hat, _, closed = closed_form_validation_or(mixed)
    axis = _record_axis(mixed)
    data = mixed.rename_axis(axis, "T") if axis != "T" else mixed
    if panel.proper:
        _check_bias_panel(panel, T_BLOCK, "Validation")

    blocks = [
        Estimate(label="closed-form", name="OR_TY", estimate=closed, level=level, method="closed-form"),
    ]
    # unpenalized ML as a check on the closed form
    ml_fit = maximize(FitProblem(data=data, panel=PriorPanel(design=panel.design)), options)
    ml = wald_functional_interval(ml_fit, "OR_TY", level)
    blocks.append(Estimate.from_functional("maximum-likelihood", ml))
    fits = [_fit_diagnostic("maximum-likelihood", ml_fit)]

    gap = abs(ml.estimate - closed) / closed
    warnings = []
    if gap > AGREEMENT_RTOL:
        logger.warning(f"Closed-form ({closed:.8g}) and ML ({ml.estimate:.8g}) validation estimates disagree")
        warnings.append(f"Closed-form and maximum-likelihood estimates differ by {gap:.3g} (relative)")

    coefficients = ml_fit.beta_hat.as_dict()
    if panel.proper:
        fit = maximize(FitProblem(data=data, panel=panel), options)
        blocks.append(Estimate.from_functional("penalized", wald_functional_interval(fit, "OR_TY", level)))
        fits.append(_fit_diagnostic("penalized", fit))
        warnings.extend(_pinned_note("penalized", fit))
        coefficients = fit.beta_hat.as_dict()

    v = pi_hat.values
    return AnalysisReport(
        analysis="validation",
        estimates=blocks,
        coefficients=coefficients,
        priors=_gauges(panel, level),
        predictive_values={"pi_111": v[1, 1], "pi_110": v[1, 0], "pi_101": v[0, 1], "pi_100": v[0, 0]},
        diagnostics=Diagnostics(fits=fits, closed_form_gap=gap),
        provenance=_provenance(cfg),
        warnings=_prior_warnings(panel) + warnings,
    )


def run_confounder(
    table: StratifiedCountTable,
    panel: PriorPanel,
    cfg: SamplerConfig,
    level: float = 0.95,
    levels: Sequence[float] = (0.025, 0.975),
    options: Optional[FitOptions] = None,
) -> AnalysisReport:
    """Unmeasured binary confounder T with priors on (b_T, b_TX, b_TY) and b_TXY = 0"""
    bias = KINDS["confounder"].bias
    _check_bias_panel(panel, bias, "Confounder")
    xy = _xy_table(table)
    blocks, fits, gauges, _ = _conventional_blocks(xy, None, level, options, panel.design)
    draws = run_sampler("confounder", xy, panel, cfg)
    summary = summarize(draws, levels, blocks[0].se ** 2)
    report = AnalysisReport(
        analysis="confounder",
        estimates=blocks,
        sampler=_sampler_block("confounder", "OR_XY adjusted for T", cfg, summary),
        priors=gauges + [gauge(p, level) for p in panel.proper],
        diagnostics=Diagnostics(fits=fits, variance_ratio=summary.variance_ratio, dropped_draws=draws.dropped),
        provenance=_provenance(cfg),
        warnings=_prior_warnings(panel) + _identified_note(cfg),
    )
    report._draws = draws
    return report


def run_selection(
    stratum0: StratifiedCountTable,
    panel: PriorPanel,
    mode: Literal["density", "stratum"],
    cfg: SamplerConfig,
    level: float = 0.95,
    levels: Sequence[float] = (0.025, 0.975),
) -> AnalysisReport:
    """Selection bias from the X=0 (selected) stratum's TY table"""
    kind = f"selection-{mode}"
    if kind not in KINDS:
        raise ConfigError(f"Unknown selection mode {mode}")
    bias = KINDS[kind].bias
    _check_bias_panel(panel, bias, "Selection")
    tt = stratum0.to_two_by_two("T", "Y")
    stratum = conventional_mle(tt, level).functionals["OR_XY"].model_copy(update={"name": "OR_TY | X=0"})
    draws = run_sampler(kind, stratum0, panel, cfg)
    summary = summarize(draws, levels, stratum.se ** 2)

    warnings = _prior_warnings(panel) + _identified_note(cfg)
    if mode == "stratum":
        modes = {n: panel.get(n).mode for n in X_BLOCK}
        if all(m is not None for m in modes.values()):
            phi = CoefVector(**modes).classification_probs()
            warnings.append(
                "Classification probabilities at prior modes: "
                + ", ".join(f"phi_1{t}{y}={phi[t, y]:.3f}" for t in (1, 0) for y in (1, 0))
            )
    report = AnalysisReport(
        analysis="selection",
        estimates=[Estimate.from_functional("stratum", stratum)],
        sampler=_sampler_block(kind, "OR_TY", cfg, summary),
        priors=[gauge(p, level) for p in panel.proper],
        diagnostics=Diagnostics(variance_ratio=summary.variance_ratio, dropped_draws=draws.dropped),
        provenance=_provenance(cfg),
        warnings=warnings,
    )
    report._draws = draws
    return report


def prior_check(panel: PriorPanel, level: float = 0.95) -> AnalysisReport:
    """Prior gauges only: implied limits, binomial data records and trial counts"""
    if not panel.proper:
        raise ConfigError("Prior check needs at least one proper prior")
    modes = [panel.get(n).mode for n in T_BLOCK]
    roc = roc_odds_ratios(modes) if all(m is not None for m in modes) else None
    return AnalysisReport(
        analysis="prior-check",
        priors=_gauges(panel, level),
        roc_odds_ratios=roc,
        warnings=_prior_warnings(panel),
    )
