"""
Run Comparer Module

Compares groups of training runs (one group per variant or decay rate)
against a baseline group and ranks them by final validation accuracy.
"""

from typing import Any, Dict, List, Mapping, Sequence

import numpy as np

from .models import TrainReport


def final_accuracy(report: TrainReport) -> float:
    """Final val accuracy of a run; diverged or empty runs count as NaN."""
    if report.diverged or not report.epochs:
        return float("nan")
    return float(report.final_val_acc)


def compare_reports(
    groups: Mapping[str, Sequence[TrainReport]],
    baseline: str,
) -> Dict[str, Any]:
    """
    Compare run groups against the baseline group.

    Args:
        groups: Label -> runs of that label (typically one run per seed)
        baseline: Label whose mean accuracy the other groups are measured against

    Returns:
        Dict containing:
            - baseline: The baseline label
            - groups: Per label summary (runs, diverged, mean_acc, std_acc,
              gap_to_baseline, rank), ordered by rank. Diverged runs are
              left out of mean_acc, but a group ranks below every group
              with a smaller share of diverged runs.
            - best: Top-ranked label
    """
    if baseline not in groups:
        raise KeyError(f"baseline '{baseline}' is not among the compared groups")

    summaries: Dict[str, Dict[str, Any]] = {}
    for label, runs in groups.items():
        accs = np.array([final_accuracy(r) for r in runs], dtype=np.float64)
        finite = accs[np.isfinite(accs)]
        summaries[label] = {
            "label": label,
            "runs": len(runs),
            "diverged": int(sum(1 for r in runs if r.diverged)),
            "mean_acc": float(finite.mean()) if finite.size else float("nan"),
            "std_acc": float(finite.std()) if finite.size else float("nan"),
        }

    base_mean = summaries[baseline]["mean_acc"]
    for summary in summaries.values():
        summary["gap_to_baseline"] = summary["mean_acc"] - base_mean

    # fewer diverged runs first, then higher mean; groups with no finite run rank last
    ordered: List[Dict[str, Any]] = sorted(
        summaries.values(),
        key=lambda s: (
            not np.isfinite(s["mean_acc"]),
            s["diverged"] / max(s["runs"], 1),
            -np.nan_to_num(s["mean_acc"], nan=0.0),
        ),
    )
    for rank, summary in enumerate(ordered, start=1):
        summary["rank"] = rank

    return {
        "baseline": baseline,
        "groups": ordered,
        "best": ordered[0]["label"] if ordered else None,
    }


def within_points(summary: Dict[str, Any], label: str, points: float) -> bool:
    """True if ``label`` is within ``points`` accuracy points (0-100 scale) of the baseline."""
    for group in summary["groups"]:
        if group["label"] == label:
            return bool(abs(group["gap_to_baseline"]) * 100.0 <= points)
    raise KeyError(f"unknown label '{label}'")


__all__ = ["final_accuracy", "compare_reports", "within_points"]
