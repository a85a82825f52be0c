"""Anti-spoofing evaluation metrics.

Scores are live-probabilities. A record is accepted as live when
``score >= threshold``; spoof is the attack (negative) class. All rates are
returned as percentages at full precision.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .errors import EvaluationError, FormatError

DEFAULT_FPR_TARGETS = (0.01, 0.005, 0.001)


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    score: float
    liveness: int
    domain_id: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise EvaluationError(f"{self.sample_id}: score {self.score!r} outside [0, 1]")
        if self.liveness not in (0, 1):
            raise EvaluationError(f"{self.sample_id}: liveness must be 0 or 1")


def records_from_arrays(scores, liveness, domain_ids=None, sample_ids=None) -> list:
    n = len(scores)
    domain_ids = [0] * n if domain_ids is None else domain_ids
    sample_ids = [f"r{i}" for i in range(n)] if sample_ids is None else sample_ids
    return [ScoreRecord(str(i), float(s), int(y), int(d))
            for i, s, y, d in zip(sample_ids, scores, liveness, domain_ids)]


def _split(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.liveness for r in records], dtype=np.int64)
    live, spoof = scores[labels == 1], scores[labels == 0]
    if len(live) == 0 or len(spoof) == 0:
        raise EvaluationError("need at least one live and one spoof record")
    return np.sort(live), np.sort(spoof)


def _accepted(sorted_scores, thresholds):
    """How many of ``sorted_scores`` are >= each threshold."""
    return len(sorted_scores) - np.searchsorted(sorted_scores, thresholds, side="left")


def roc(records):
    """ROC points ``(fpr, tpr, thresholds)`` sweeping every distinct score.

    The first point is (0, 0) at threshold +inf; the last is (1, 1) at the
    smallest score.
    """
    live, spoof = _split(records)
    thr = np.unique(np.concatenate([live, spoof]))[::-1]
    tpr = _accepted(live, thr) / len(live)
    fpr = _accepted(spoof, thr) / len(spoof)
    return (np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr]),
            np.concatenate([[np.inf], thr]))


def auc(records) -> float:
    fpr, tpr, _ = roc(records)
    return 100.0 * float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def error_rates(records, threshold: float) -> tuple:
    """(FAR, FRR) as fractions at ``threshold``."""
    live, spoof = _split(records)
    far = _accepted(spoof, [threshold])[0] / len(spoof)
    frr = (len(live) - _accepted(live, [threshold])[0]) / len(live)
    return far, frr


def candidate_thresholds(records) -> np.ndarray:
    """Midpoints between adjacent distinct scores, plus both extremes."""
    s = np.unique([r.score for r in records])
    mids = (s[1:] + s[:-1]) / 2.0
    return np.concatenate([[s[0]], mids, [np.nextafter(s[-1], np.inf)]])


def eer_threshold(records) -> tuple:
    """Candidate threshold minimising |FAR - FRR|; ties go to the lower threshold.

    Returns ``(threshold, far, frr)`` with rates as fractions.
    """
    live, spoof = _split(records)
    cand = candidate_thresholds(records)
    false_acc = _accepted(spoof, cand)
    false_rej = len(live) - _accepted(live, cand)
    # compare |fa/ns - fr/nl| exactly in integers
    gap = np.abs(false_acc * len(live) - false_rej * len(spoof))
    i = int(np.argmin(gap))
    return float(cand[i]), false_acc[i] / len(spoof), false_rej[i] / len(live)


def hter(records, threshold: float) -> float:
    far, frr = error_rates(records, threshold)
    return 100.0 * (far + frr) / 2.0


def acer(apcer: float, bpcer: float) -> float:
    return (apcer + bpcer) / 2.0


def apcer_bpcer_acer(records, threshold: float) -> tuple:
    far, frr = error_rates(records, threshold)
    apcer, bpcer = 100.0 * far, 100.0 * frr
    return apcer, bpcer, acer(apcer, bpcer)


def recall_at_fpr(records, fpr_targets=DEFAULT_FPR_TARGETS) -> dict:
    """Best recall (%) among thresholds whose FPR does not exceed each target.

    A target is unresolvable when there are fewer than ``1 / target`` spoof
    records; it maps to ``None`` and a warning is issued.
    """
    live, spoof = _split(records)
    thr = np.concatenate([[np.inf], np.unique(np.concatenate([live, spoof]))])
    false_acc = _accepted(spoof, thr)
    true_acc = _accepted(live, thr)
    out = {}
    for target in fpr_targets:
        if len(spoof) * target < 1.0:
            warnings.warn(f"FPR={target} not resolvable with {len(spoof)} spoof records",
                          stacklevel=2)
            out[target] = None
            continue
        # percent from integer counts, so the value is a single correctly rounded division
        ok = false_acc / len(spoof) <= target
        out[target] = 100.0 * int(true_acc[ok].max()) / len(live)
    return out


def format_rate(value, places: int = 2) -> str:
    """Round half-up on the shortest decimal repr, e.g. 2.415 -> '2.42'."""
    if value is None:
        return "-"
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class MetricsReport:
    hter: float
    auc: float
    apcer: float
    bpcer: float
    acer: float
    recall_at_fpr: dict
    threshold_used: float
    threshold_source: str
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at_fpr"] = {repr(k): v for k, v in self.recall_at_fpr.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        d = dict(d)
        d["recall_at_fpr"] = {float(k): v for k, v in d["recall_at_fpr"].items()}
        return cls(**d)


def evaluate(records, threshold: float = None, fpr_targets=DEFAULT_FPR_TARGETS) -> MetricsReport:
    """Full report. Without an explicit threshold, the EER point of ``records`` is used."""
    if threshold is None:
        threshold, source = eer_threshold(records)[0], "eer"
    else:
        threshold, source = float(threshold), "fixed"
    apcer, bpcer, acer_ = apcer_bpcer_acer(records, threshold)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        recall = recall_at_fpr(records, fpr_targets)
    n_live = sum(r.liveness for r in records)
    return MetricsReport(
        hter=hter(records, threshold), auc=auc(records), apcer=apcer, bpcer=bpcer, acer=acer_,
        recall_at_fpr=recall, threshold_used=threshold, threshold_source=source,
        counts={"live": n_live, "spoof": len(records) - n_live},
    )


# --------------------------------------------------------------------------- #
# files

SCORE_FIELDS = ("sample_id", "score", "liveness", "domain_id")


def write_scores(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in records:
            w.writerow([r.sample_id, repr(float(r.score)), r.liveness, r.domain_id])
    return path


def read_scores(path) -> list:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
                raise FormatError(f"{path}: header must be {','.join(SCORE_FIELDS)}")
            return [ScoreRecord(r["sample_id"], float(r["score"]), int(r["liveness"]),
                                int(r["domain_id"])) for r in reader]
    except FileNotFoundError as exc:
        raise FormatError(f"score file not found: {path}") from exc
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_roc(records, path) -> Path:
    fpr, tpr, thr = roc(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr", "threshold"))
        for row in zip(fpr, tpr, thr):
            w.writerow([repr(float(v)) for v in row])
    return path


def write_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    return path


def read_report(path) -> MetricsReport:
    try:
        return MetricsReport.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
