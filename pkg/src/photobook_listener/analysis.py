"""Post-hoc diagnostics: relevance-gap statistics and error concentration.

For every evaluated round we take the 3 relevance rows with the largest gap
between their top two scores, then compare gap means between rounds the model
got entirely right and rounds with at least one mistake (unequal-variance
t-test). Error concentration groups wrong predictions by game theme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class RoundPrediction:
    """Per-instance evaluation slice joined with its relevance matrix."""

    instance_id: str
    theme: tuple[str, str]
    correct: tuple[bool, ...]  # per target
    relevance: np.ndarray      # (K, 6)

    @property
    def all_correct(self) -> bool:
        return all(self.correct)

    @property
    def all_wrong(self) -> bool:
        return not any(self.correct)


def top2_gap(row: np.ndarray) -> float:
    """Difference between the highest and second-highest score in one row."""
    row = np.asarray(row, dtype=np.float64)
    if row.size < 2:
        raise ValueError("a relevance row needs at least 2 entries")
    top2 = np.partition(row, -2)[-2:]
    return float(top2[1] - top2[0])


def round_top_gaps(relevance: np.ndarray, count: int = 3
                   ) -> tuple[list[float], bool]:
    """The ``count`` largest per-row gaps of a round; flags short rounds that
    contribute fewer rows than requested."""
    relevance = np.asarray(relevance, dtype=np.float64)
    gaps = sorted((top2_gap(row) for row in relevance), reverse=True)
    flagged = len(gaps) < count
    return gaps[:count], flagged


@dataclass
class GroupStats:
    mean: float
    std: float
    n: int


@dataclass
class GapStatsReport:
    all_correct: GroupStats
    with_mistakes: GroupStats
    t_statistic: float
    p_value: float
    flagged_rounds: int  # rounds with fewer than 3 utterances


def welch_t_test(a, b) -> tuple[float, float]:
    """Two-sample unequal-variance t-test with a degenerate-input guard."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t, p = stats.ttest_ind(a, b, equal_var=False)
    if np.isnan(p):
        p = 1.0 if np.isclose(a.mean(), b.mean()) else 0.0
        t = 0.0 if p == 1.0 else float("inf")
    return float(t), float(p)


def top2_gap_stats(predictions: list[RoundPrediction]) -> GapStatsReport:
    correct_gaps: list[float] = []
    mistake_gaps: list[float] = []
    flagged = 0
    for pred in predictions:
        gaps, short = round_top_gaps(pred.relevance)
        flagged += int(short)
        (correct_gaps if pred.all_correct else mistake_gaps).extend(gaps)
    if not correct_gaps or not mistake_gaps:
        raise ValueError("both groups must be non-empty for the gap contrast")
    t, p = welch_t_test(correct_gaps, mistake_gaps)

    def group(values):
        arr = np.asarray(values)
        return GroupStats(mean=float(arr.mean()),
                          std=float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                          n=len(arr))

    return GapStatsReport(all_correct=group(correct_gaps),
                          with_mistakes=group(mistake_gaps),
                          t_statistic=t, p_value=p, flagged_rounds=flagged)


@dataclass
class ThemeErrorReport:
    per_theme_accuracy: dict[tuple[str, str], float]
    per_theme_counts: dict[tuple[str, str], int]
    all_wrong_instances: list[str]

    def worst_themes(self, count: int = 2) -> list[tuple[str, str]]:
        return sorted(self.per_theme_accuracy,
                      key=lambda th: self.per_theme_accuracy[th])[:count]


def error_by_theme(predictions: list[RoundPrediction]) -> ThemeErrorReport:
    totals: dict[tuple[str, str], int] = {}
    hits: dict[tuple[str, str], int] = {}
    all_wrong = []
    for pred in predictions:
        totals[pred.theme] = totals.get(pred.theme, 0) + len(pred.correct)
        hits[pred.theme] = hits.get(pred.theme, 0) + sum(pred.correct)
        if pred.all_wrong:
            all_wrong.append(pred.instance_id)
    accuracy = {th: hits[th] / totals[th] for th in totals}
    return ThemeErrorReport(per_theme_accuracy=accuracy,
                            per_theme_counts=totals,
                            all_wrong_instances=all_wrong)


def format_gap_report(report: GapStatsReport) -> str:
    return "\n".join([
        "group\tmean\tstd\tn",
        f"all-correct\t{report.all_correct.mean:.4f}\t"
        f"{report.all_correct.std:.4f}\t{report.all_correct.n}",
        f"with-mistakes\t{report.with_mistakes.mean:.4f}\t"
        f"{report.with_mistakes.std:.4f}\t{report.with_mistakes.n}",
        f"t={report.t_statistic:.3f}\tp={report.p_value:.2g}\t"
        f"flagged={report.flagged_rounds}",
    ])


def plot_gap_distributions(predictions: list[RoundPrediction], path) -> None:
    """Histogram of top-gap values per group, written as a static image."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    correct, mistakes = [], []
    for pred in predictions:
        gaps, _ = round_top_gaps(pred.relevance)
        (correct if pred.all_correct else mistakes).extend(gaps)
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0, max(correct + mistakes + [0.1]), 30)
    ax.hist(correct, bins=bins, alpha=0.6, label="all-correct rounds")
    ax.hist(mistakes, bins=bins, alpha=0.6, label="rounds with mistakes")
    ax.set_xlabel("top-1 minus top-2 relevance")
    ax.set_ylabel("rows")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
