"""Two-level supervised local/remote cascade.

Per input: score the local prediction; serve it if the confidence is
strictly above ``threshold_local``. Otherwise fetch the remote prediction,
score it, and serve it if strictly above ``threshold_remote``; else reject.
"""

from __future__ import annotations

import enum
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Protocol, Sequence

from .quantifiers import Quantifier
from .trace import ModelObservation, Prediction, TraceDataset, TraceRecord, observation_correct

FALLBACK_POLICIES = ("error", "serve-local", "reject")


class Decision(enum.Enum):
    LOCAL_ACCEPT = "local_accept"
    REMOTE_ACCEPT = "remote_accept"
    REJECTED = "rejected"


class CascadeError(RuntimeError):
    pass


class MissingRemoteObservation(CascadeError, LookupError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"record {record_id!r} has no remote observation but needs one")


class _RemoteFailure(Exception):
    def __init__(self, cause: Exception):
        self.cause = cause
        super().__init__(str(cause))


@dataclass(frozen=True)
class Thresholds:
    local: float
    remote: float

    def __post_init__(self) -> None:
        if math.isnan(self.local) or math.isnan(self.remote):
            raise ValueError("thresholds must not be NaN")


@dataclass(frozen=True)
class CascadeOutcome:
    id: str
    decision: Decision
    served_prediction: Prediction | None
    correct: bool | None
    conf_local: float
    conf_remote: float | None
    latency_s: float
    cost: float
    remote_called: bool
    # correctness of the prediction that was (or, for rejections, would have been) served
    would_be_correct: bool | None = None
    degraded: bool = False

    @property
    def accepted(self) -> bool:
        return self.decision is not Decision.REJECTED

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "decision": self.decision.value,
            "served_prediction": self.served_prediction,
            "correct": self.correct,
            "would_be_correct": self.would_be_correct,
            "conf_local": self.conf_local,
            "conf_remote": self.conf_remote,
            "latency_s": self.latency_s,
            "cost": self.cost,
            "remote_called": self.remote_called,
            "degraded": self.degraded,
        }


class Predictor(Protocol):
    """Source of remote observations keyed by record id."""

    def predict(self, record_id: str, payload: Any = None) -> ModelObservation: ...


class TraceReplayPredictor:
    """Serves the remote blocks of a trace in-process, counting calls."""

    def __init__(self, dataset: TraceDataset):
        self._remote = {r.id: r.remote for r in dataset.records}
        self._lock = threading.Lock()
        self.calls: dict[str, int] = {}

    @property
    def total_calls(self) -> int:
        return sum(self.calls.values())

    def predict(self, record_id: str, payload: Any = None) -> ModelObservation:
        with self._lock:
            self.calls[record_id] = self.calls.get(record_id, 0) + 1
        try:
            obs = self._remote[record_id]
        except KeyError:
            raise KeyError(f"unknown input {record_id!r}") from None
        if obs is None:
            raise MissingRemoteObservation(record_id)
        return obs


@dataclass(frozen=True)
class LatencyCostDefaults:
    """Per-call figures used when a trace observation carries none."""

    latency_local: float = 0.0
    latency_remote: float = 0.0
    cost_per_remote_call: float = 0.0


def decide(
    conf_local: float,
    thresholds: Thresholds,
    remote_supplier: Callable[[], tuple[Any, float]],
) -> Decision:
    """Run the two supervisor checks.

    ``remote_supplier`` returns ``(prediction, conf_remote)`` and is only
    called when the local check fails.
    """
    if math.isnan(conf_local):
        raise ValueError("local confidence is NaN")
    if conf_local > thresholds.local:
        return Decision.LOCAL_ACCEPT
    _, conf_remote = remote_supplier()
    if conf_remote > thresholds.remote:
        return Decision.REMOTE_ACCEPT
    return Decision.REJECTED


def _run_one(
    record: TraceRecord,
    local_quantifier: Quantifier,
    remote_quantifier: Quantifier | None,
    thresholds: Thresholds,
    predictor: Predictor | None,
    defaults: LatencyCostDefaults,
    fallback: str,
    normalize: bool,
) -> CascadeOutcome:
    local = record.local
    conf_local = float(local_quantifier(local))
    local_latency = local.latency_s if local.latency_s is not None else defaults.latency_local
    local_correct = observation_correct(local, record.truth, normalize=normalize)

    fetched: list[tuple[ModelObservation, float]] = []

    def supplier() -> tuple[Any, float]:
        if fetched:
            raise CascadeError("remote supplier invoked twice")
        try:
            if predictor is None:
                raise MissingRemoteObservation(record.id)
            obs = predictor.predict(record.id, None)
        except Exception as exc:
            raise _RemoteFailure(exc) from exc
        conf = float(remote_quantifier(obs))
        fetched.append((obs, conf))
        return obs.resolved_prediction(), conf

    try:
        decision = decide(conf_local, thresholds, supplier)
    except _RemoteFailure as failure:
        if fallback == "error":
            raise failure.cause from None
        # remote unavailable: apply the configured degradation policy
        if fallback == "serve-local":
            return CascadeOutcome(
                record.id, Decision.LOCAL_ACCEPT, local.resolved_prediction(), local_correct,
                conf_local, None, local_latency, 0.0, True, local_correct, degraded=True,
            )
        return CascadeOutcome(
            record.id, Decision.REJECTED, None, None, conf_local, None, local_latency, 0.0,
            True, None, degraded=True,
        )

    if decision is Decision.LOCAL_ACCEPT:
        return CascadeOutcome(
            record.id, decision, local.resolved_prediction(), local_correct, conf_local, None,
            local_latency, 0.0, False, local_correct,
        )

    remote, conf_remote = fetched[0]
    remote_correct = observation_correct(remote, record.truth, normalize=normalize)
    remote_latency = remote.latency_s if remote.latency_s is not None else defaults.latency_remote
    cost = remote.cost if remote.cost is not None else defaults.cost_per_remote_call
    latency = local_latency + remote_latency
    if decision is Decision.REMOTE_ACCEPT:
        return CascadeOutcome(
            record.id, decision, remote.resolved_prediction(), remote_correct, conf_local,
            conf_remote, latency, cost, True, remote_correct,
        )
    return CascadeOutcome(
        record.id, decision, None, None, conf_local, conf_remote, latency, cost, True, remote_correct,
    )


def run_cascade(
    dataset: TraceDataset | Sequence[TraceRecord],
    local_quantifier: Quantifier,
    remote_quantifier: Quantifier,
    thresholds: Thresholds,
    *,
    predictor: Predictor | None = None,
    defaults: LatencyCostDefaults = LatencyCostDefaults(),
    fallback: str = "error",
    normalize_answers: bool = False,
    workers: int = 1,
) -> list[CascadeOutcome]:
    """Replay the cascade over every record, preserving input order.

    Remote observations come from ``predictor`` (an HTTP client, say); by
    default the trace's own remote blocks are replayed in-process.
    """
    if fallback not in FALLBACK_POLICIES:
        raise ValueError(f"fallback must be one of {FALLBACK_POLICIES}")
    records = dataset.records if isinstance(dataset, TraceDataset) else tuple(dataset)
    if predictor is None:
        predictor = TraceReplayPredictor(TraceDataset(tuple(records)))

    def one(record: TraceRecord) -> CascadeOutcome:
        return _run_one(
            record, local_quantifier, remote_quantifier, thresholds, predictor, defaults,
            fallback, normalize_answers,
        )

    if workers <= 1:
        return [one(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, records))


def run_local_only(
    dataset: TraceDataset | Sequence[TraceRecord],
    local_quantifier: Quantifier,
    threshold_local: float,
    *,
    defaults: LatencyCostDefaults = LatencyCostDefaults(),
    normalize_answers: bool = False,
) -> list[CascadeOutcome]:
    """Supervised local model alone: first-level rejections are final."""
    records = dataset.records if isinstance(dataset, TraceDataset) else tuple(dataset)
    out = []
    for r in records:
        conf = float(local_quantifier(r.local))
        correct = observation_correct(r.local, r.truth, normalize=normalize_answers)
        latency = r.local.latency_s if r.local.latency_s is not None else defaults.latency_local
        if conf > threshold_local:
            out.append(CascadeOutcome(
                r.id, Decision.LOCAL_ACCEPT, r.local.resolved_prediction(), correct, conf, None,
                latency, 0.0, False, correct,
            ))
        else:
            out.append(CascadeOutcome(
                r.id, Decision.REJECTED, None, None, conf, None, latency, 0.0, False, correct,
            ))
    return out


def remote_fraction(outcomes: Sequence[CascadeOutcome]) -> float:
    if not outcomes:
        raise ValueError("no outcomes")
    return sum(o.remote_called for o in outcomes) / len(outcomes)
