"""
Report serialization: JSON with 17 significant digits, an aligned text
rendering at display precision, and the per-draw CSV.
"""

import io
import json
import logging
import math
from pathlib import Path
from typing import Any, Union

import pandas as pd
from rich.console import Console
from rich.table import Table

from mc import DrawSet
from workflows import AnalysisReport

logger = logging.getLogger(__name__)


def _encode(value: Any, indent: int, level: int) -> str:
    pad, inner = " " * (indent * level), " " * (indent * (level + 1))
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, float):
        return format(value, ".17g") if math.isfinite(value) else "null"
    if isinstance(value, (int, str)):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{inner}{_encode(v, indent, level + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if hasattr(value, "item"):
        return _encode(value.item(), indent, level)
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def to_json(data: Any, indent: int = 2) -> str:
    """Deterministic JSON: floats at 17 significant digits, non-finite floats as null"""
    if hasattr(data, "model_dump"):
        data = data.model_dump(mode="python")
    return _encode(data, indent, 0) + "\n"


def _fmt(value, digits: int = 2) -> str:
    if value is None:
        return "-"
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.{digits}f}"


def render_text(report: AnalysisReport) -> str:
    console = Console(record=True, width=110, file=io.StringIO(), color_system=None)
    console.print(f"Analysis: {report.analysis}")

    if report.estimates:
        table = Table(title="Estimates")
        for col in ("block", "quantity", "estimate", "lower", "upper", "se(log)", "method", "profile"):
            table.add_column(col)
        for est in report.estimates:
            profile = f"({_fmt(est.profile[0])}, {_fmt(est.profile[1])})" if est.profile else "-"
            table.add_row(
                est.label, est.name, _fmt(est.estimate), _fmt(est.lo), _fmt(est.hi), _fmt(est.se, 3), est.method, profile
            )
        console.print(table)

    if report.sampler:
        s = report.sampler.summary
        table = Table(title=f"Draws of {report.sampler.target} ({report.sampler.kind}, {report.sampler.identified_mode})")
        table.add_column("statistic")
        table.add_column("value")
        table.add_row("draws kept", str(s.n))
        table.add_row("median", _fmt(s.median))
        for key, value in s.percentiles.items():
            table.add_row(f"{key}th percentile", _fmt(value))
        if s.variance_ratio is not None:
            table.add_row("variance ratio", f"{100 * s.variance_ratio:.1f}%")
        console.print(table)

    if report.ignorance:
        ig = report.ignorance
        suffix = "" if ig.bounded else " (unbounded)"
        hi = _fmt(ig.hi) if ig.hi is not None else "inf"
        console.print(f"Ignorance interval: ({_fmt(ig.lo)}, {hi}){suffix}")

    if report.priors:
        table = Table(title="Priors")
        for col in ("coefficient", "prior", "parameters", "scale", "limits", "n"):
            table.add_column(col)
        for g in report.priors:
            params = ", ".join(f"{k}={v:.4g}" for k, v in g.params.items())
            limits = f"({g.limits[0]:.3g}, {g.limits[1]:.3g})"
            n = f"{g.n_trials:.4g}" if g.n_trials is not None else "-"
            table.add_row(g.target, g.dist, params, g.scale, limits, n + (f"  {g.note}" if g.note else ""))
        console.print(table)

    if report.predictive_values:
        console.print(
            "Predictive values: " + ", ".join(f"{k}={v:.3f}" for k, v in report.predictive_values.items())
        )
    if report.roc_odds_ratios:
        console.print(f"ROC odds ratios at prior modes: {report.roc_odds_ratios[0]:.3g}, {report.roc_odds_ratios[1]:.3g}")
    for warning in report.warnings:
        console.print(f"warning: {warning}")
    return console.export_text()


def write_report(report: AnalysisReport, path: Union[str, Path]) -> None:
    """JSON report at path, text rendering next to it with a .txt suffix"""
    path = Path(path)
    path.write_text(to_json(report), encoding="utf-8")
    path.with_suffix(".txt").write_text(render_text(report), encoding="utf-8")
    logger.info(f"Report written to {path}")


def draws_frame(draws: DrawSet) -> pd.DataFrame:
    df = pd.DataFrame({"draw_index": draws.index, "target": draws.target})
    for j, name in enumerate(draws.bias_names):
        df[name] = draws.bias[:, j]
    return df


def write_draws_csv(draws: DrawSet, path: Union[str, Path]) -> None:
    draws_frame(draws).to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(draws)} draws to {path}")
