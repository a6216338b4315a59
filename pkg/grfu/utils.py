"""
Formatting helpers for metric, gate and parameter reports
"""

from typing import Dict, List, Sequence

import numpy as np
from tabulate import tabulate


def interpret_gate_weight(weight: float, num_sensors: int = 2) -> Dict[str, str]:
    """Interpret a pooled gate weight relative to an even split across sensors."""
    even = 1.0 / num_sensors
    if weight >= even + 0.2:
        return {"reliance": "dominant", "emoji": "🟢"}
    elif weight >= even + 0.05:
        return {"reliance": "favoured", "emoji": "🟢"}
    elif weight > even - 0.05:
        return {"reliance": "balanced", "emoji": "🟡"}
    elif weight > even - 0.2:
        return {"reliance": "discounted", "emoji": "🟠"}
    else:
        return {"reliance": "suppressed", "emoji": "🔴"}


def format_metric_report(report, title: str = "") -> str:
    """Per-class AP table (classification) or loss/MSE line (regression)."""
    header = f"{title}: " if title else ""
    if report.task == "classify":
        rows = [[k, f"{ap:.4f}"] for k, ap in sorted(report.per_class.items())]
        rows.extend([k, "no positives"] for k in report.skipped)
        table = tabulate(rows, headers=["class", "AP"], tablefmt="simple")
        return f"{header}loss {report.loss:.6f}, mAP {report.mean_ap:.4f}\n{table}"
    return f"{header}loss {report.loss:.6f}, MSE {report.mse:.6f}"


def format_gate_summary(pooled: Sequence[float], breakdown: Dict[int, Dict[str, float]]) -> str:
    """Overall pooled weight per sensor with its clean/corrupted split."""
    rows = []
    for i, weight in enumerate(pooled):
        info = interpret_gate_weight(weight, len(pooled))
        split = breakdown.get(i, {})
        rows.append([i, f"{weight:.4f}", _fmt(split.get("clean")), _fmt(split.get("corrupted")),
                     f"{info['emoji']} {info['reliance']}"])
    return tabulate(rows, headers=["sensor", "pooled", "clean", "corrupted", "reliance"], tablefmt="simple")


def format_parameter_breakdown(breakdown: Dict[str, int]) -> str:
    rows = [[block, count] for block, count in breakdown.items()]
    rows.append(["total", sum(breakdown.values())])
    return tabulate(rows, headers=["block", "parameters"], tablefmt="simple")


def format_grad_check(per_parameter: Dict[str, float], tolerance: float) -> str:
    rows = [[name, f"{err:.3e}", "✅" if err < tolerance else "❌"]
            for name, err in sorted(per_parameter.items())]
    return tabulate(rows, headers=["parameter", "max rel. error", ""], tablefmt="simple")


def format_bench_medians(medians: Dict[str, float], metric_name: str, reference: str = "lgrf") -> str:
    headers = ["cell", f"median {metric_name}"]
    if reference not in medians:
        rows = [[cell, f"{value:.4f}"] for cell, value in medians.items()]
        return tabulate(rows, headers=headers, tablefmt="simple", disable_numparse=True)
    base = medians[reference]
    rows = [[cell, f"{value:.4f}", f"{value - base:+.4f}"] for cell, value in medians.items()]
    return tabulate(rows, headers=headers + [f"vs {reference}"], tablefmt="simple", disable_numparse=True)


def median(values: List[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def _fmt(value) -> str:
    if value is None or not np.isfinite(value):
        return "-"
    return f"{value:.4f}"
