import json
import math

import numpy as np
import pandas as pd
import pytest

from mc import DrawSet
from report_export import draws_frame, render_text, to_json, write_draws_csv, write_report
from workflows import AnalysisReport, Estimate, prior_check, run_conventional


def _draws() -> DrawSet:
    bias = np.array([[0.1, 2.5], [0.2, 2.6], [0.3, 2.7]])
    log_target = np.log([1.1, 1.2, 1.3])
    return DrawSet(
        kind="misclassification",
        bias_names=("beta_T", "beta_TX"),
        index=np.array([0, 2, 3]),
        log_target=log_target,
        identified=log_target,
        log_factor=np.zeros(3),
        bias=bias,
        requested=4,
        dropped=1,
    )


def test_to_json_precision_and_nan():
    text = to_json({"a": 0.1, "b": math.nan, "c": [1, 2.5], "d": None, "e": True, "f": np.float64(1 / 3)})
    assert '"a": 0.10000000000000001' in text
    data = json.loads(text)
    assert data["b"] is None
    assert data["c"] == [1, 2.5]
    assert data["f"] == 1 / 3
    assert text.endswith("}\n")


def test_to_json_is_deterministic(recall_table):
    report = run_conventional(recall_table)
    assert to_json(report) == to_json(report)
    again = AnalysisReport.model_validate_json(to_json(report))
    assert again.estimate("conventional").estimate == report.estimate("conventional").estimate


def test_render_text(recall_table, crude_prior, misclassification_panel):
    text = render_text(run_conventional(recall_table, crude_prior))
    assert "Analysis: conventional" in text
    assert "Estimates" in text and "1.42" in text
    assert "Priors" in text
    gauges = render_text(prior_check(misclassification_panel))
    assert "beta_TX+beta_TXY" in gauges
    assert "ROC odds ratios" in gauges


def test_render_text_missing_limits():
    report = AnalysisReport(
        analysis="validation",
        estimates=[Estimate(label="closed-form", name="OR_TY", estimate=1.21, method="closed-form")],
    )
    assert "closed-form" in render_text(report)


def test_write_report(tmp_path, recall_table):
    path = tmp_path / "out.json"
    write_report(run_conventional(recall_table), path)
    assert json.loads(path.read_text(encoding="utf-8"))["analysis"] == "conventional"
    assert "Estimates" in (tmp_path / "out.txt").read_text(encoding="utf-8")


def test_draws_frame():
    df = draws_frame(_draws())
    assert list(df.columns) == ["draw_index", "target", "beta_T", "beta_TX"]
    assert df["draw_index"].tolist() == [0, 2, 3]
    assert df["target"].to_numpy() == pytest.approx([1.1, 1.2, 1.3])


def test_write_draws_csv(tmp_path):
    path = tmp_path / "draws.csv"
    write_draws_csv(_draws(), path)
    df = pd.read_csv(path)
    assert len(df) == 3
    assert df["beta_TX"].tolist() == [2.5, 2.6, 2.7]
