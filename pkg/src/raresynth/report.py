"""Summary table of a ratio sweep, one row per (dataset, condition)."""

from __future__ import annotations

import statistics
from typing import Iterable, Mapping

from .sweep import MODES

HEADER = ("Dataset", "Synth Ratio", "F1", "PR-AUC", "Recall")


def ratio_label(mode: str, ratio: float) -> str:
    r = f"{ratio:g}×"
    return f"synth-only ({r})" if mode == "synth_only" else r


def summarize(rows: Iterable[Mapping]) -> list[tuple[str, str, float, float, float]]:
    """Mean F1, PR-AUC and recall per (domain, mode, ratio) over folds x seeds.

    Rows are ordered by domain, then mixed conditions by ratio, then synth-only.
    """
    groups: dict[tuple, list[Mapping]] = {}
    for r in rows:
        groups.setdefault((r["domain"], MODES.index(r["mode"]), float(r["ratio"])), []).append(r)
    out = []
    for domain, mi, ratio in sorted(groups):
        g = groups[(domain, mi, ratio)]
        out.append(
            (
                domain,
                ratio_label(MODES[mi], ratio),
                statistics.fmean(float(r["f1"]) for r in g),
                statistics.fmean(float(r["pr_auc"]) for r in g),
                statistics.fmean(float(r["recall"]) for r in g),
            )
        )
    return out


def format_table(rows: Iterable[Mapping]) -> str:
    """Fixed-width text table; metrics to three decimals, dataset name on its first row only."""
    body = []
    last = None
    for domain, label, f1, ap, rec in summarize(rows):
        body.append((domain if domain != last else "", label, f"{f1:.3f}", f"{ap:.3f}", f"{rec:.3f}"))
        last = domain
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(HEADER)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(HEADER, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(b, widths)).rstrip())
    return "\n".join(lines) + "\n"


def format_markdown(rows: Iterable[Mapping]) -> str:
    lines = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
    for domain, label, f1, ap, rec in summarize(rows):
        lines.append(f"| {domain} | {label} | {f1:.3f} | {ap:.3f} | {rec:.3f} |")
    return "\n".join(lines) + "\n"
