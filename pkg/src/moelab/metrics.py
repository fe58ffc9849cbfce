"""Calibration, OoD-detection, and stability metrics over prediction logs.

All functions here are pure over immutable inputs. Binning for ECE/MCE
uses M equal-width confidence bins on (0, 1] with a lower-exclusive /
upper-inclusive boundary convention; logarithms are natural throughout.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .exceptions import UsageError

__all__ = [
    "PredictionRecord",
    "BinStat",
    "CalibrationReport",
    "ScoredSample",
    "UncertaintySignal",
    "InputEvidence",
    "accuracy",
    "nll",
    "ece",
    "mce",
    "calibration_report",
    "auroc",
    "auprc",
    "jaccard",
    "entropy",
    "uncertainty_score",
    "records_to_jsonl",
    "records_from_jsonl",
    "samples_to_jsonl",
    "report_to_json",
    "reliability_csv",
]


@dataclass(frozen=True)
class PredictionRecord:
    """One classified example: choice probabilities, truth, argmax and its mass."""

    probs: tuple[float, ...]
    label: int
    predicted: int
    confidence: float

    @classmethod
    def from_probs(cls, probs, label: int) -> "PredictionRecord":
        p = np.asarray(probs, dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-9:
            raise UsageError(f"probabilities sum to {p.sum():.12f}, not 1")
        pred = int(np.argmax(p))  # argmax takes the lowest index on ties
        return cls(tuple(float(x) for x in p), int(label), pred, float(p[pred]))


@dataclass(frozen=True)
class BinStat:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass(frozen=True)
class CalibrationReport:
    accuracy: float
    nll: float
    ece: float
    mce: float
    bins: tuple[BinStat, ...]
    n: int


@dataclass(frozen=True)
class ScoredSample:
    score: float
    is_ood: bool


class UncertaintySignal(Enum):
    OUTPUT_ENTROPY = "output_entropy"
    SELECTION_ENTROPY = "selection_entropy"
    MC_LOGIT_VARIANCE = "mc_logit_variance"
    INFERRED_LOGIT_VARIANCE = "inferred_logit_variance"
    INFERRED_TEMPERATURE = "inferred_temperature"


@dataclass
class InputEvidence:
    """Everything one input contributes to uncertainty scoring.

    `records` holds the per-(layer, token) routing evidence of the
    modified layers; `final_probs` is the predictive class distribution.
    """

    final_probs: np.ndarray | None = None
    records: list = field(default_factory=list)


def accuracy(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise UsageError("accuracy requires a nonempty record list")
    return sum(1.0 for r in records if r.predicted == r.label) / len(records)


def nll(records: Sequence[PredictionRecord]) -> float:
    """Mean negative log probability of the true label (clamped at 1e-12)."""
    if not records:
        raise UsageError("nll requires a nonempty record list")
    total = 0.0
    clamped = 0
    for r in records:
        p = r.probs[r.label]
        if p < 1e-12:
            p = 1e-12
            clamped += 1
        total += -math.log(p)
    if clamped:
        warnings.warn(f"nll clamped {clamped} zero-probability labels at 1e-12")
    return total / len(records)


def _bin_index(confidence: float, m: int) -> int:
    # bins are ((k-1)/m, k/m]; round guards float noise at the boundaries
    scaled = confidence * m
    nearest = round(scaled)
    idx = (nearest if abs(scaled - nearest) < 1e-9 else math.ceil(scaled)) - 1
    return min(max(idx, 0), m - 1)


def _bin_stats(records: Sequence[PredictionRecord], m: int) -> list[BinStat]:
    if m < 1:
        raise UsageError("at least one confidence bin is required")
    conf_sum = np.zeros(m)
    hit_sum = np.zeros(m)
    count = np.zeros(m, dtype=int)
    for r in records:
        b = _bin_index(r.confidence, m)
        conf_sum[b] += r.confidence
        hit_sum[b] += 1.0 if r.predicted == r.label else 0.0
        count[b] += 1
    stats = []
    for b in range(m):
        c = int(count[b])
        stats.append(BinStat(
            lower=b / m,
            upper=(b + 1) / m,
            count=c,
            mean_confidence=conf_sum[b] / c if c else 0.0,
            accuracy=hit_sum[b] / c if c else 0.0,
        ))
    return stats


def ece(records: Sequence[PredictionRecord], m: int = 10) -> float:
    """Expected calibration error: count-weighted |accuracy - confidence| over bins."""
    if not records:
        raise UsageError("ece requires a nonempty record list")
    n = len(records)
    return sum(b.count / n * abs(b.accuracy - b.mean_confidence) for b in _bin_stats(records, m))


def mce(records: Sequence[PredictionRecord], m: int = 10) -> float:
    """Maximum calibration error over nonempty bins."""
    if not records:
        raise UsageError("mce requires a nonempty record list")
    gaps = [abs(b.accuracy - b.mean_confidence) for b in _bin_stats(records, m) if b.count]
    return max(gaps) if gaps else 0.0


def calibration_report(records: Sequence[PredictionRecord], m: int = 10) -> CalibrationReport:
    return CalibrationReport(
        accuracy=accuracy(records),
        nll=nll(records),
        ece=ece(records, m),
        mce=mce(records, m),
        bins=tuple(_bin_stats(records, m)),
        n=len(records),
    )


def _ranks_with_midranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0])
    i = 0
    n = scores.shape[0]
    s = scores[order]
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def auroc(samples: Sequence[ScoredSample]) -> float:
    """Rank-based (Mann-Whitney) AUROC with midrank tie handling; OoD is positive."""
    scores = np.array([s.score for s in samples], dtype=np.float64)
    pos = np.array([s.is_ood for s in samples], dtype=bool)
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UsageError("auroc requires both classes present")
    ranks = _ranks_with_midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(samples: Sequence[ScoredSample]) -> float:
    """Area under precision-recall via step interpolation over descending thresholds."""
    scores = np.array([s.score for s in samples], dtype=np.float64)
    pos = np.array([s.is_ood for s in samples], dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise UsageError("auprc requires at least one positive (OoD) sample")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_pos = pos[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    # thresholds sit at the last sample of each distinct score value
    last_of_value = np.nonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))[0]
    area = 0.0
    prev_recall = 0.0
    for i in last_of_value:
        recall = tp[i] / n_pos
        precision = tp[i] / (tp[i] + fp[i])
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    """|a & b| / |a | b| with empty-vs-empty defined as 1."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def entropy(p) -> float:
    """Shannon entropy (nats) of a probability vector; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise UsageError("entropy requires a probability vector")
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def uncertainty_score(signal: UncertaintySignal, evidence: InputEvidence) -> float:
    """Aggregate a router-level or output-level signal into one scalar per input.

    Router-level signals average over all recorded (layer, token) decisions.
    Raises UsageError when the evidence lacks what the signal needs.
    """
    if signal is UncertaintySignal.OUTPUT_ENTROPY:
        if evidence.final_probs is None:
            raise UsageError("output entropy needs the final predictive distribution")
        return entropy(evidence.final_probs)
    if not evidence.records:
        raise UsageError(f"signal {signal.value} needs routing evidence records")
    values = []
    for rec in evidence.records:
        if signal is UncertaintySignal.SELECTION_ENTROPY:
            values.append(entropy(rec.probs))
        elif signal is UncertaintySignal.MC_LOGIT_VARIANCE:
            if rec.logit_samples is None:
                raise UsageError("mc_logit_variance needs logit samples; "
                                 "use a weight-space sampling method")
            samples = np.asarray(rec.logit_samples)
            values.append(float(samples.var(axis=0, ddof=1).sum()))
        elif signal is UncertaintySignal.INFERRED_LOGIT_VARIANCE:
            if rec.sigma is not None:
                values.append(float((np.asarray(rec.sigma) ** 2).sum()))
            elif rec.chol is not None:
                values.append(float((np.asarray(rec.chol) ** 2).sum()))
            else:
                raise UsageError("inferred_logit_variance needs a variational posterior")
        elif signal is UncertaintySignal.INFERRED_TEMPERATURE:
            if rec.temperature is None:
                raise UsageError("inferred_temperature is only defined for VTSR")
            values.append(float(rec.temperature))
        else:
            raise UsageError(f"unknown signal {signal!r}")
    out = float(np.mean(values))
    if not math.isfinite(out):
        raise UsageError(f"signal {signal.value} produced a non-finite score")
    return out


# serialisation -------------------------------------------------------------


def records_to_jsonl(records: Sequence[PredictionRecord]) -> str:
    lines = []
    for r in records:
        lines.append(json.dumps({
            "probs": list(r.probs),
            "label": r.label,
            "predicted": r.predicted,
            "confidence": r.confidence,
        }, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def records_from_jsonl(text: str) -> list[PredictionRecord]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(PredictionRecord(tuple(d["probs"]), d["label"], d["predicted"], d["confidence"]))
    return out


def samples_to_jsonl(samples: Sequence[ScoredSample]) -> str:
    lines = [json.dumps({"score": s.score, "is_ood": s.is_ood}, sort_keys=True) for s in samples]
    return "\n".join(lines) + ("\n" if lines else "")


def report_to_json(report: CalibrationReport) -> str:
    return json.dumps({
        "accuracy": report.accuracy,
        "nll": report.nll,
        "ece": report.ece,
        "mce": report.mce,
        "n": report.n,
        "bins": [
            {"lower": b.lower, "upper": b.upper, "count": b.count,
             "mean_confidence": b.mean_confidence, "accuracy": b.accuracy}
            for b in report.bins
        ],
    }, sort_keys=True)


def reliability_csv(report: CalibrationReport) -> str:
    """Reliability-diagram table: bin bounds, count, confidence, accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lower", "upper", "count", "mean_confidence", "accuracy"])
    for b in report.bins:
        w.writerow([f"{b.lower:.6f}", f"{b.upper:.6f}", b.count,
                    f"{b.mean_confidence:.10f}", f"{b.accuracy:.10f}"])
    return buf.getvalue()
