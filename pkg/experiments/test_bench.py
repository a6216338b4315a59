"""
Benchmark orderings. The reduced configs run in the default suite; the full-size
ones train every cell at d_h=64 for 20 epochs and only run with GRFU_RUN_BENCH=1.
"""

import os
import sys

import pandas as pd
import pytest

# Add parent directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from grfu.cli import bench_checks, bench_comparisons, main
from grfu.config import load_config
from grfu.utils import format_bench_medians

HERE = os.path.dirname(os.path.abspath(__file__))

needs_bench = pytest.mark.skipif(os.getenv("GRFU_RUN_BENCH") != "1", reason="set GRFU_RUN_BENCH=1 to run")

NAN = float("nan")


def _run_bench(config, tmp_path):
    code = main(["bench", "--config", os.path.join(HERE, config), "--out", str(tmp_path)])
    frame = pd.read_csv(tmp_path / "bench.csv")
    task = "classify" if config.startswith("classify") else "regress"
    failed = [name for name, ok in bench_checks(frame, task) if not ok]
    return code, frame, failed


@pytest.mark.parametrize("config", ["classify.env", "regress.env"])
def test_bench_orderings_hold(config, tmp_path):
    code, frame, failed = _run_bench(config, tmp_path)
    assert code == 0, failed
    assert len(frame) == 5 * frame["cell"].nunique()


@needs_bench
@pytest.mark.parametrize("config", ["classify_full.env", "regress_full.env"])
def test_full_size_bench_orderings_hold(config, tmp_path):
    code, _, failed = _run_bench(config, tmp_path)
    assert code == 0, failed


def test_bench_grids_cover_every_fusion_baseline():
    classify = load_config(os.path.join(HERE, "classify.env"))
    regress = load_config(os.path.join(HERE, "regress.env"))
    assert {"late_concat", "late_add", "early_concat", "early_add", "lrs", "egrf", "lgrf"} <= set(classify.bench_cells)
    assert {"early_concat", "lrs", "egrf", "lgrf"} <= set(regress.bench_cells)
    assert load_config(os.path.join(HERE, "classify_full.env")).bench_cells == classify.bench_cells


def test_bench_checks_on_fixed_frame():
    frame = pd.DataFrame([
        {"cell": "lstm_single_sensor[0]", "seed": 0, "metric": 0.5, "gate_clean": NAN, "gate_corrupted": NAN},
        {"cell": "early_add", "seed": 0, "metric": 0.6, "gate_clean": NAN, "gate_corrupted": NAN},
        {"cell": "lgrf", "seed": 0, "metric": 0.7, "gate_clean": 0.6, "gate_corrupted": 0.3},
    ])
    assert all(ok for _, ok in bench_checks(frame, "classify"))


def test_comparisons_report_every_cell_against_lgrf():
    frame = pd.DataFrame([
        {"cell": "late_concat", "seed": 0, "metric": 0.5},
        {"cell": "late_add", "seed": 0, "metric": 0.8},
        {"cell": "lgrf", "seed": 0, "metric": 0.7},
    ])
    assert bench_comparisons(frame, "classify") == [("lgrf >= late_concat", True), ("lgrf >= late_add", False)]
    # lower MSE is better
    assert bench_comparisons(frame, "regress") == [("lgrf <= late_concat", False), ("lgrf <= late_add", True)]
    assert bench_comparisons(frame[frame["cell"] != "lgrf"], "classify") == []


def test_comparisons_leave_the_exit_checks_alone():
    frame = pd.DataFrame([
        {"cell": "lrs", "seed": 0, "metric": 0.1, "gate_clean": NAN, "gate_corrupted": NAN},
        {"cell": "egrf", "seed": 0, "metric": 0.1, "gate_clean": NAN, "gate_corrupted": NAN},
        {"cell": "early_concat", "seed": 0, "metric": 0.5, "gate_clean": NAN, "gate_corrupted": NAN},
        {"cell": "lgrf", "seed": 0, "metric": 0.4, "gate_clean": 0.6, "gate_corrupted": 0.3},
    ])
    assert not all(ok for _, ok in bench_comparisons(frame, "regress"))
    assert all(ok for _, ok in bench_checks(frame, "regress"))


def test_median_table_shows_difference_to_lgrf():
    table = format_bench_medians({"early_add": 0.25, "lgrf": 0.5}, "mAP")
    assert "vs lgrf" in table
    assert "-0.2500" in table and "+0.0000" in table
    assert "vs lgrf" not in format_bench_medians({"early_add": 0.25}, "mAP")
