"""Rank-statistic evaluation: AUC, partial AUC, and the harmonic-mean score.

The AUC of a cell is the fraction of (normal, anomaly) score pairs where the
anomaly scores strictly higher; ties count as zero. The partial AUC keeps
only the floor(p * n_normal) highest-scoring normals (the low
false-positive-rate regime) with the normalizer shrunk accordingly. The
official score is the harmonic mean of every cell's AUC and pAUC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import ClipMeta, DatasetIndex, format_clip_path

DEFAULT_PAUC_P = 0.1


class UndefinedMetricError(ValueError):
    """The metric is not defined for these inputs (empty side, floor(p*N) = 0)."""


class ScoreValidationError(ValueError):
    """Scores do not line up one-to-one with labeled test clips."""

    def __init__(self, message: str, offenders: list[str]):
        super().__init__(message)
        self.offenders = offenders


@dataclass(frozen=True)
class Decision:
    label: str  # "anomaly" or "normal"
    threshold: float


@dataclass(frozen=True)
class ScoreRecord:
    meta: ClipMeta
    score: float


@dataclass(frozen=True)
class MetricCell:
    machine: str
    section: int
    domain: str
    auc: float
    pauc: float
    n_normal: int
    n_anomaly: int


@dataclass
class MetricsReport:
    cells: list[MetricCell]
    official: float
    p: float

    def to_csv(self) -> str:
        """CSV rows per cell plus a final official_score summary line."""
        lines = ["machine,section,domain,auc,pauc,n_neg,n_pos"]
        for c in self.cells:
            lines.append(
                f"{c.machine},{c.section},{c.domain},{c.auc!r},{c.pauc!r},"
                f"{c.n_normal},{c.n_anomaly}"
            )
        lines.append(f"official_score,{self.official!r}")
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        cells = {(c.machine, c.section, c.domain): c for c in self.cells}
        rows = sorted({(c.machine, c.section) for c in self.cells})
        lines = [
            "| machine | section | AUC source | AUC target | pAUC source | pAUC target |",
            "| --- | --- | --- | --- | --- | --- |",
        ]
        for machine, section in rows:
            values = []
            for metric in ("auc", "pauc"):
                for domain in ("source", "target"):
                    cell = cells.get((machine, section, domain))
                    values.append(f"{getattr(cell, metric):.4f}" if cell else "-")
            lines.append(f"| {machine} | {section:02d} | " + " | ".join(values) + " |")
        lines.append("")
        lines.append(f"official score: {self.official:.4f}")
        return "\n".join(lines) + "\n"


def decide(score: float, threshold: float) -> Decision:
    """Anomaly if and only if the score strictly exceeds the threshold."""
    if not (math.isfinite(score) and math.isfinite(threshold)):
        raise ValueError("score and threshold must be finite")
    return Decision("anomaly" if score > threshold else "normal", threshold)


def _checked(scores, side: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.size == 0:
        raise UndefinedMetricError(f"no {side} scores; metric undefined")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{side} scores contain non-finite values")
    return arr


def auc(normal_scores, anomaly_scores) -> float:
    """Fraction of (normal, anomaly) pairs with anomaly strictly higher."""
    normal = _checked(normal_scores, "normal")
    anomaly = _checked(anomaly_scores, "anomaly")
    ascending = np.sort(normal)
    wins = int(np.searchsorted(ascending, anomaly, side="left").sum())
    return wins / (normal.size * anomaly.size)


def pauc(normal_scores, anomaly_scores, p: float = DEFAULT_PAUC_P) -> float:
    """AUC restricted to the floor(p * n_normal) highest-scoring normals.

    Raises UndefinedMetricError when floor(p * n_normal) is zero rather than
    silently clamping.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    normal = _checked(normal_scores, "normal")
    anomaly = _checked(anomaly_scores, "anomaly")
    top_count = math.floor(p * normal.size)
    if top_count < 1:
        raise UndefinedMetricError(
            f"floor(p * n_normal) = floor({p} * {normal.size}) = 0; pAUC undefined"
        )
    descending = np.sort(normal)[::-1]
    top = np.sort(descending[:top_count])
    wins = int(np.searchsorted(top, anomaly, side="left").sum())
    return wins / (top_count * anomaly.size)


def brute_force_auc(normal_scores, anomaly_scores, p: float | None = None) -> float:
    """Direct double-loop AUC/pAUC with no sorting shortcuts; the test oracle.

    With p given, the retained normals are picked by repeated maximum
    extraction and the pair loop runs over those only.
    """
    normal = [float(x) for x in np.asarray(normal_scores).ravel()]
    anomaly = [float(x) for x in np.asarray(anomaly_scores).ravel()]
    if not normal or not anomaly:
        raise UndefinedMetricError("empty score list; metric undefined")
    if p is None:
        retained = normal
    else:
        top_count = math.floor(p * len(normal))
        if top_count < 1:
            raise UndefinedMetricError("floor(p * n_normal) = 0; pAUC undefined")
        pool = list(normal)
        retained = []
        for _ in range(top_count):
            best = 0
            for i in range(1, len(pool)):
                if pool[i] > pool[best]:
                    best = i
            retained.append(pool.pop(best))
    hits = 0
    for x_neg in retained:
        for x_pos in anomaly:
            if x_pos - x_neg > 0.0:
                hits += 1
    return hits / (len(retained) * len(anomaly))


def harmonic_mean(values) -> float:
    """Harmonic mean with the zero-pole convention: any zero value gives 0."""
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ValueError("harmonic mean of no values")
    if vals[0] < 0.0:
        raise ValueError("harmonic mean requires nonnegative values")
    if vals[0] == 0.0:
        return 0.0
    return len(vals) / math.fsum(1.0 / v for v in vals)


def official_score(cells) -> float:
    """Harmonic mean of every cell's AUC and pAUC."""
    cells = list(cells)
    if not cells:
        raise ValueError("official score of no cells")
    values = [c.auc for c in cells] + [c.pauc for c in cells]
    return harmonic_mean(values)


def evaluate(index: DatasetIndex, records, p: float = DEFAULT_PAUC_P) -> MetricsReport:
    """Score report per (machine, section, domain) cell plus the official score.

    Every labeled test clip in the index must have exactly one finite score;
    violations raise ScoreValidationError listing the offending clips.
    """
    test_entries = index.clips(split="test")
    if not test_entries:
        raise ScoreValidationError("index contains no test clips", [])
    unlabeled = [rel for rel, meta in test_entries if meta.condition == "unknown"]
    if unlabeled:
        raise ScoreValidationError(
            f"{len(unlabeled)} test clips have no condition label "
            f"(e.g. {unlabeled[0]}); evaluation needs labels",
            unlabeled,
        )

    expected = {rel for rel, _ in test_entries}
    seen: dict[str, float] = {}
    duplicates, unknown, non_finite = [], [], []
    for record in records:
        rel = format_clip_path(record.meta)
        if rel not in expected:
            unknown.append(rel)
            continue
        if rel in seen:
            duplicates.append(rel)
            continue
        if not math.isfinite(record.score):
            non_finite.append(rel)
            continue
        seen[rel] = float(record.score)
    missing = sorted(expected - set(seen) - set(non_finite))
    if duplicates or unknown or non_finite or missing:
        problems = []
        for label, items in (
            ("duplicate", duplicates),
            ("unexpected", unknown),
            ("non-finite", non_finite),
            ("missing", missing),
        ):
            if items:
                sample = ", ".join(sorted(items)[:5])
                problems.append(f"{len(items)} {label} (e.g. {sample})")
        raise ScoreValidationError(
            "scores do not match the labeled test clips: " + "; ".join(problems),
            sorted(duplicates + unknown + non_finite + missing),
        )

    grouped: dict[tuple[str, int, str], dict[str, list[float]]] = {}
    for rel, meta in test_entries:
        key = (meta.machine_type, meta.section, meta.domain)
        grouped.setdefault(key, {"normal": [], "anomaly": []})[meta.condition].append(seen[rel])

    cells = []
    for (machine, section, domain), sides in sorted(grouped.items()):
        normals, anomalies = sides["normal"], sides["anomaly"]
        if not normals or not anomalies:
            raise UndefinedMetricError(
                f"cell ({machine}, {section:02d}, {domain}) lacks "
                f"{'normal' if not normals else 'anomalous'} test clips"
            )
        cells.append(
            MetricCell(
                machine=machine,
                section=section,
                domain=domain,
                auc=auc(normals, anomalies),
                pauc=pauc(normals, anomalies, p),
                n_normal=len(normals),
                n_anomaly=len(anomalies),
            )
        )
    return MetricsReport(cells=cells, official=official_score(cells), p=p)
