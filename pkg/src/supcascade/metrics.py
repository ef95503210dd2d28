"""Cost/accuracy and supervised-performance metrics, plus the latency model.

Request-accuracy curves are computed from integer correctness counts, so
endpoints and the normalized area are exact up to a single final division.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cascade import CascadeOutcome, Decision
from .quantifiers import Quantifier
from .trace import TraceDataset, resolve_correctness

BETAS = (0.5, 1.0, 2.0)


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Request-accuracy curve


def correctness_arrays(
    dataset: TraceDataset, quantifier: Quantifier, *, normalize_answers: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local confidence, local correctness and remote correctness per record."""
    conf = np.empty(len(dataset))
    local = np.empty(len(dataset), dtype=bool)
    remote = np.empty(len(dataset), dtype=bool)
    for i, record in enumerate(dataset.records):
        lc, rc = resolve_correctness(record, normalize=normalize_answers)
        if rc is None:
            raise MetricError(f"record {record.id!r} has no remote observation")
        conf[i] = quantifier(record.local)
        local[i] = lc
        remote[i] = rc
    return conf, local, remote


def forwarding_order(confidences: Sequence[float]) -> np.ndarray:
    """Record indices by ascending confidence, ties by ascending index."""
    return np.argsort(np.asarray(confidences, dtype=float), kind="stable")


def _check_arrays(confidences, local_correct, remote_correct):
    conf = np.asarray(confidences, dtype=float)
    lc = np.asarray(local_correct, dtype=bool)
    rc = np.asarray(remote_correct, dtype=bool)
    if conf.ndim != 1 or conf.size == 0 or lc.shape != conf.shape or rc.shape != conf.shape:
        raise MetricError("confidence and correctness arrays must be non-empty and equally long")
    return conf, lc, rc


def system_correct_counts(confidences, local_correct, remote_correct) -> np.ndarray:
    """Number of correct system predictions when forwarding the i least confident, i = 0..n."""
    conf, lc, rc = _check_arrays(confidences, local_correct, remote_correct)
    order = forwarding_order(conf)
    gain = rc[order].astype(np.int64) - lc[order].astype(np.int64)
    counts = np.empty(conf.size + 1, dtype=np.int64)
    counts[0] = int(lc.sum())
    counts[1:] = counts[0] + np.cumsum(gain)
    return counts


def system_accuracy_at(confidences, local_correct, remote_correct, i: int) -> float:
    conf, lc, rc = _check_arrays(confidences, local_correct, remote_correct)
    n = conf.size
    if not 0 <= i <= n:
        raise MetricError(f"i must lie in [0, {n}]")
    forwarded = forwarding_order(conf)[:i]
    mask = np.zeros(n, dtype=bool)
    mask[forwarded] = True
    return int(np.where(mask, rc, lc).sum()) / n


@dataclass(frozen=True)
class RacCurve:
    r: np.ndarray
    accuracy: np.ndarray
    correct_counts: np.ndarray
    n: int

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "RacCurve":
        counts = np.asarray(counts, dtype=np.int64)
        n = counts.size - 1
        if n < 1:
            raise MetricError("a curve needs at least two points")
        return cls(np.arange(n + 1) / n, counts / n, counts, n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("r,accuracy\n")
        for r, acc in zip(self.r, self.accuracy):
            buf.write(f"{r:.6f},{repr(float(acc))}\n")
        return buf.getvalue()


def rac_curve(confidences, local_correct, remote_correct) -> RacCurve:
    return RacCurve.from_counts(system_correct_counts(confidences, local_correct, remote_correct))


def rac_curve_for(dataset: TraceDataset, quantifier: Quantifier, **kw) -> RacCurve:
    return rac_curve(*correctness_arrays(dataset, quantifier, **kw))


def auc_rac(curve: RacCurve) -> float:
    """Normalized mean of the n + 1 grid accuracies.

    0 means no better than all-local, 1 matches all-remote on average, 0.5
    is what a random forwarding order gives in expectation.
    """
    counts = curve.correct_counts
    n = curve.n
    c0, cn = int(counts[0]), int(counts[-1])
    if c0 == cn:
        raise MetricError("local and remote accuracy are equal; AUC-RAC is undefined")
    total = int(counts.sum())
    return (total - (n + 1) * c0) / ((n + 1) * (cn - c0))


@dataclass(frozen=True)
class RacSummary:
    auc_rac: float
    acc_local: float
    acc_remote: float
    r_peak: float
    acc_peak: float
    r_remote_even: float
    superaccurate: bool

    def to_dict(self) -> dict:
        return {
            "auc": self.auc_rac,
            "acc_local": self.acc_local,
            "acc_remote": self.acc_remote,
            "r_peak": self.r_peak,
            "acc_peak": self.acc_peak,
            "r_remote_even": self.r_remote_even,
            "superaccurate": self.superaccurate,
        }


def rac_summary(curve: RacCurve) -> RacSummary:
    counts = curve.correct_counts
    peak = int(np.argmax(counts))
    even = int(np.argmax(counts >= counts[-1]))
    return RacSummary(
        auc_rac=auc_rac(curve),
        acc_local=float(curve.accuracy[0]),
        acc_remote=float(curve.accuracy[-1]),
        r_peak=float(curve.r[peak]),
        acc_peak=float(curve.accuracy[peak]),
        r_remote_even=float(curve.r[even]),
        superaccurate=bool(counts[peak] > counts[-1]),
    )


def random_auc_baseline(
    local_correct, remote_correct, seed: int = 0, repeats: int = 1000, *, chunk: int = 256
) -> tuple[float, float]:
    """Mean and standard error of AUC-RAC over uniformly random forwarding orders.

    Repeats are drawn in fixed-size chunks, each from its own child of
    ``SeedSequence(seed)``, so results do not depend on how chunks are scheduled.
    """
    if repeats < 1:
        raise MetricError("repeats must be >= 1")
    lc = np.asarray(local_correct, dtype=bool)
    rc = np.asarray(remote_correct, dtype=bool)
    n = lc.size
    c0, cn = int(lc.sum()), int(rc.sum())
    if c0 == cn:
        raise MetricError("local and remote accuracy are equal; AUC-RAC is undefined")
    gain = rc.astype(np.int64) - lc.astype(np.int64)
    # the record at forwarding position j counts towards grid points j+1..n
    weight = np.arange(n, 0, -1, dtype=np.int64)
    children = np.random.SeedSequence(seed).spawn(math.ceil(repeats / chunk))
    values = []
    for k, child in enumerate(children):
        size = min(chunk, repeats - k * chunk)
        rng = np.random.default_rng(child)
        perms = rng.permuted(np.tile(np.arange(n), (size, 1)), axis=1)
        extra = gain[perms] @ weight
        values.append(extra / ((n + 1) * (cn - c0)))
    aucs = np.concatenate(values)
    stderr = float(aucs.std(ddof=1) / math.sqrt(repeats)) if repeats > 1 else float("nan")
    return float(aucs.mean()), stderr


# ---------------------------------------------------------------------------
# Supervised performance


def acceptance_rate(outcomes: Sequence[CascadeOutcome]) -> float:
    if not outcomes:
        raise MetricError("no outcomes")
    return sum(o.decision is not Decision.REJECTED for o in outcomes) / len(outcomes)


def supervised_accuracy(outcomes: Sequence[CascadeOutcome]) -> float:
    accepted = [o for o in outcomes if o.decision is not Decision.REJECTED]
    if not accepted:
        raise MetricError("no accepted outcomes; supervised accuracy is undefined")
    return sum(bool(o.correct) for o in accepted) / len(accepted)


def false_positive_rate(outcomes: Sequence[CascadeOutcome]) -> float:
    """Share of would-be-correct predictions that were rejected (false alarms)."""
    good = [o for o in outcomes if o.would_be_correct]
    if not good:
        raise MetricError("no correct predictions; false positive rate is undefined")
    return sum(o.decision is Decision.REJECTED for o in good) / len(good)


def s_beta(supervised_accuracy: float, delta: float, beta: float) -> float:
    """Weighted harmonic mean of supervised accuracy and acceptance rate.

    ``beta`` weights the acceptance rate, as in the F-beta score:
    ``(1 + b^2) * acc * delta / (b^2 * acc + delta)``.
    """
    for name, v in (("supervised_accuracy", supervised_accuracy), ("delta", delta)):
        if not 0.0 <= v <= 1.0:
            raise MetricError(f"{name} must lie in [0, 1]")
    if not beta > 0:
        raise MetricError("beta must be positive")
    b2 = beta * beta
    denom = b2 * supervised_accuracy + delta
    if denom == 0:
        return 0.0
    return (1 + b2) * supervised_accuracy * delta / denom


@dataclass(frozen=True)
class SupervisedReport:
    delta: float
    supervised_accuracy: float
    fpr: float
    s_beta: Mapping[float, float]
    remote_fraction: float

    def to_dict(self, fpr_target: float | None = None) -> dict:
        return {
            "fpr_target": fpr_target,
            "fpr_achieved": self.fpr,
            "delta": self.delta,
            "supervised_accuracy": self.supervised_accuracy,
            "s_beta": {_beta_key(b): v for b, v in self.s_beta.items()},
            "remote_fraction": self.remote_fraction,
        }


def _beta_key(beta: float) -> str:
    return f"{beta:g}"


def supervised_report(outcomes: Sequence[CascadeOutcome], betas: Iterable[float] = BETAS) -> SupervisedReport:
    delta = acceptance_rate(outcomes)
    acc = supervised_accuracy(outcomes)
    return SupervisedReport(
        delta=delta,
        supervised_accuracy=acc,
        fpr=false_positive_rate(outcomes),
        s_beta={b: s_beta(acc, delta, b) for b in betas},
        remote_fraction=sum(o.remote_called for o in outcomes) / len(outcomes),
    )


# ---------------------------------------------------------------------------
# Latency and cost


@dataclass(frozen=True)
class LatencyModel:
    latency_local: float
    latency_remote: float

    def __post_init__(self) -> None:
        if self.latency_local < 0 or self.latency_remote < 0:
            raise MetricError("latencies must be non-negative")


@dataclass(frozen=True)
class CostModel:
    cost_per_remote_call: float = 0.0

    def __post_init__(self) -> None:
        if self.cost_per_remote_call < 0:
            raise MetricError("cost per call must be non-negative")


def mean_latency(r: float, model: LatencyModel) -> float:
    """Expected per-input latency when a fraction ``r`` of inputs goes remote."""
    if not 0.0 <= r <= 1.0:
        raise MetricError("remote fraction must lie in [0, 1]")
    return model.latency_local + r * model.latency_remote


def break_even_fraction(model: LatencyModel) -> float:
    """Remote fraction at which the cascade is as slow as calling remote for everything."""
    if not model.latency_remote > model.latency_local:
        raise MetricError("remote latency must exceed local latency for a break-even point")
    return 1.0 - model.latency_local / model.latency_remote


def cost_report(outcomes: Sequence[CascadeOutcome], model: CostModel | None = None) -> dict:
    if not outcomes:
        raise MetricError("no outcomes")
    calls = sum(o.remote_called for o in outcomes)
    if model is not None:
        total = calls * model.cost_per_remote_call
    else:
        total = math.fsum(o.cost for o in outcomes)
    return {
        "remote_calls": calls,
        "total_cost": total,
        "saved_fraction": 1.0 - calls / len(outcomes),
    }


def csv_table(rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
