"""
Command-line entry point.

    python cli.py run configs/sids_misclassification.json --seed 1
    python cli.py prior-check configs/sids_prior_check.json
    python cli.py schema --report
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import typer
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import AnalysisError, ConfigError
from fit import FitOptions
from mc import SamplerConfig
from model import COEF_NAMES, SELECTION_NAMES
from priors import PriorPanel, PriorSpec, default_scale, normal_from_limits
from report_export import render_text, to_json, write_draws_csv, write_report
from tables import RawCell, load_table
from workflows import (
    AnalysisReport,
    prior_check,
    run_confounder,
    run_conventional,
    run_misclassification,
    run_selection,
    run_validation,
)

ROOT_DIR = Path(__file__).parent
load_dotenv(ROOT_DIR / '.env')

logger = logging.getLogger(__name__)

DEFAULT_THREADS = int(os.environ.get('PBA_THREADS', '1'))
DEFAULT_CHUNK = int(os.environ.get('PBA_CHUNK', '4096'))

Analysis = Literal["misclassification", "validation", "confounder", "selection", "conventional", "prior-check"]


class PriorConfig(BaseModel):
    """One prior as written in the config; `limits` builds a Normal from stated limits"""

    model_config = ConfigDict(extra="forbid")
    dist: Literal["flat", "normal", "laplace", "logf"]
    mean: Optional[float] = None
    variance: Optional[float] = None
    scale: Optional[float] = None
    m: Optional[float] = None
    s: Optional[float] = None
    r: Optional[float] = None
    n: Optional[float] = None
    limits: Optional[Tuple[float, float]] = None
    limit_scale: Optional[Literal["identity", "exp", "expit"]] = None
    level: float = Field(0.95, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_limits(self):
        if self.limits is not None:
            if self.dist != "normal":
                raise ValueError("limits apply to normal priors only")
            if self.mean is not None or self.variance is not None:
                raise ValueError("give either limits or mean/variance, not both")
        return self

    def to_spec(self, target: str) -> PriorSpec:
        if self.limits is not None:
            scale = self.limit_scale or default_scale(target)
            return normal_from_limits(target, self.limits[0], self.limits[1], scale, self.level)
        params = self.model_dump(include={"mean", "variance", "scale", "m", "s", "r", "n"}, exclude_none=True)
        return PriorSpec(target=target, dist=self.dist, **params)


class SamplingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    draws: int = Field(250_000, ge=1)
    seed: int = Field(20090101, ge=0, lt=2**64)
    identified_mode: Literal["dirichlet", "bootstrap"] = "dirichlet"
    dirichlet_prior: float = Field(1.0, ge=0)
    chunk: Optional[int] = Field(None, ge=1)
    threads: Optional[int] = Field(None, ge=1)

    def to_sampler(self) -> SamplerConfig:
        return SamplerConfig(
            draws=self.draws,
            seed=self.seed,
            identified_mode=self.identified_mode,
            dirichlet_prior=self.dirichlet_prior,
            chunk=self.chunk or DEFAULT_CHUNK,
            threads=self.threads or DEFAULT_THREADS,
        )


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    levels: List[float] = Field(default_factory=lambda: [0.025, 0.975])
    interval_level: float = Field(0.95, gt=0, lt=1)
    report_path: Optional[str] = None
    draws_csv_path: Optional[str] = None

    @field_validator("levels")
    @classmethod
    def _check_levels(cls, v):
        if not v or any(not 0 < q < 1 for q in v):
            raise ValueError("levels must lie in (0, 1)")
        if list(v) != sorted(v):
            raise ValueError("levels must be sorted")
        return v


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    analysis: Analysis
    design: Literal["case-control", "cohort"] = "case-control"
    table: List[RawCell] = Field(default_factory=list)
    priors: Dict[str, PriorConfig] = Field(default_factory=dict)
    crude_prior: Optional[PriorConfig] = None
    selection_mode: Literal["density", "stratum"] = "density"
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    fit: FitOptions = Field(default_factory=FitOptions)

    @field_validator("priors")
    @classmethod
    def _check_names(cls, v):
        unknown = sorted(set(v) - set(COEF_NAMES) - set(SELECTION_NAMES))
        if unknown:
            raise ValueError(f"unknown coefficient name(s) {unknown}")
        return v

    @model_validator(mode="after")
    def _check_required(self):
        if self.analysis != "prior-check" and not self.table:
            raise ValueError(f"analysis '{self.analysis}' needs a table")
        if self.analysis == "conventional" and self.priors:
            raise ValueError(
                f"analysis 'conventional' takes no priors map (got {sorted(self.priors)}); "
                f"put a prior on the crude log odds ratio in crude_prior"
            )
        needs_priors = self.analysis not in ("conventional", "validation")
        if needs_priors and not any(p.dist != "flat" for p in self.priors.values()):
            raise ValueError(f"analysis '{self.analysis}' needs at least one proper prior")
        return self

    def panel(self) -> PriorPanel:
        return PriorPanel(specs=tuple(p.to_spec(name) for name, p in self.priors.items()), design=self.design)


def _format_validation_error(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
    )


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config is not valid JSON: {e}")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e))
    cfg.panel()
    if cfg.crude_prior is not None:
        cfg.crude_prior.to_spec("beta_XY")
    return cfg


def with_overrides(cfg: RunConfig, **sampling) -> RunConfig:
    """Apply command-line overrides to the sampling block and re-validate"""
    updates = {k: v for k, v in sampling.items() if v is not None}
    if not updates:
        return cfg
    raw = cfg.model_dump()
    raw["sampling"].update(updates)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e))


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.model_dump_json().encode("utf-8")).hexdigest()


def execute(cfg: RunConfig) -> AnalysisReport:
    panel = cfg.panel()
    level = cfg.output.interval_level
    levels = cfg.output.levels
    if cfg.analysis == "prior-check":
        report = prior_check(panel, level)
    else:
        table = load_table(cfg.table)
        sampler = cfg.sampling.to_sampler()
        crude = cfg.crude_prior.to_spec("beta_XY") if cfg.crude_prior else None
        if cfg.analysis == "conventional":
            report = run_conventional(table, crude, level, cfg.fit, cfg.design)
        elif cfg.analysis == "misclassification":
            report = run_misclassification(table, panel, sampler, level, levels, crude, cfg.fit)
        elif cfg.analysis == "validation":
            report = run_validation(table, panel, sampler, level, cfg.fit)
        elif cfg.analysis == "confounder":
            report = run_confounder(table, panel, sampler, level, levels, cfg.fit)
        else:
            report = run_selection(table, panel, cfg.selection_mode, sampler, level, levels)
    report.provenance = report.provenance.model_copy(update={"config_digest": config_digest(cfg)})
    return report


def _fail(exc: AnalysisError) -> None:
    logger.error(f"{exc.category} error: {exc.detail}")
    typer.echo(json.dumps({"error": exc.to_dict()}), err=True)
    raise typer.Exit(code=exc.exit_code)


app = typer.Typer(help="Plausible-bias analysis of binary count tables", no_args_is_help=True)


@app.command()
def run(
    config: Path = typer.Argument(..., help="JSON run configuration"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override sampling.seed"),
    draws: Optional[int] = typer.Option(None, "--draws", help="Override sampling.draws"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Override sampling.threads"),
    draws_csv: Optional[Path] = typer.Option(None, "--draws-csv", help="Write per-draw CSV here"),
    text: bool = typer.Option(False, "--text", help="Print the aligned text rendering instead of JSON"),
):
    """Run the configured analysis and emit its report."""
    try:
        if not config.exists():
            raise ConfigError(f"Config file {config} not found")
        cfg = with_overrides(parse_config(config.read_text(encoding="utf-8")), seed=seed, draws=draws, threads=threads)
        report = execute(cfg)
        if cfg.output.report_path:
            write_report(report, cfg.output.report_path)
        csv_path = draws_csv or cfg.output.draws_csv_path
        if csv_path and report.draws is not None:
            write_draws_csv(report.draws, csv_path)
        typer.echo(render_text(report) if text else to_json(report), nl=False)
    except AnalysisError as e:
        _fail(e)


@app.command("prior-check")
def prior_check_command(
    config: Path = typer.Argument(..., help="JSON configuration holding a priors block"),
    text: bool = typer.Option(False, "--text", help="Print the aligned text rendering instead of JSON"),
):
    """Report implied limits and data-prior records without touching data."""
    try:
        if not config.exists():
            raise ConfigError(f"Config file {config} not found")
        cfg = parse_config(config.read_text(encoding="utf-8"))
        report = prior_check(cfg.panel(), cfg.output.interval_level)
        typer.echo(render_text(report) if text else to_json(report), nl=False)
    except AnalysisError as e:
        _fail(e)


@app.command()
def schema(report: bool = typer.Option(False, "--report", help="Print the report schema instead")):
    """Print the JSON schema of the run configuration (or of the report)."""
    model = AnalysisReport if report else RunConfig
    typer.echo(json.dumps(model.model_json_schema(), indent=2))


def main():
    logging.basicConfig(
        level=os.environ.get('PBA_LOG_LEVEL', 'INFO').upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    app()


if __name__ == "__main__":
    main()
