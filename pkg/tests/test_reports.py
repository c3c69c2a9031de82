"""Report writers produce parseable CSV and render figures to files."""

import csv

import pytest

from glauberdiff import reports


def test_write_csv_roundtrip(tmp_path):
    rows = [{"step": 1, "loss": 0.5, "lr": 1e-3}, {"step": 2, "loss": 0.4, "lr": 9e-4}]
    path = tmp_path / "metrics.csv"
    reports.write_csv(path, rows)
    with open(path) as f:
        back = list(csv.DictReader(f))
    assert len(back) == 2
    assert back[0]["step"] == "1"
    assert float(back[1]["loss"]) == 0.4


def test_write_csv_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        reports.write_csv(tmp_path / "x.csv", [])


def test_loss_curve_figure(tmp_path):
    metrics = [{"step": i, "loss": 1.0 / (i + 1), "lr": 1e-3} for i in range(20)]
    out = tmp_path / "loss.png"
    reports.fig_loss_curve(metrics, out)
    assert out.stat().st_size > 0


def test_trend_bars_figure(tmp_path):
    out = tmp_path / "trend.png"
    reports.fig_trend_bars(["causal", "N=1", "N=3"], [3.0, 2.5, 2.0],
                           [0.1, 0.1, 0.1], "mean NLL", out)
    assert out.stat().st_size > 0


def test_gap_curve_figure(tmp_path):
    rows = [{"step": t, "coordinate": t % 3, "gap_kl": 0.1 * t} for t in range(1, 7)]
    out = tmp_path / "gap.png"
    reports.fig_gap_curve(rows, out)
    assert out.stat().st_size > 0


def test_residual_bars_figure(tmp_path):
    checks = [
        {"name": "detailed_balance", "value": 1e-15, "threshold": 1e-12, "pass": True},
        {"name": "negative_control", "value": 0.01, "threshold": 1e-3, "pass": True},
    ]
    out = tmp_path / "residuals.png"
    reports.fig_residual_bars(checks, out)
    assert out.stat().st_size > 0
