"""Prediction traces: data model, JSONL ingestion, correctness resolution.

A trace holds, for every input, the ground truth plus what the local and
(optionally) the remote model produced for it. Everything downstream
(cascade replay, calibration, metrics) operates on these records only,
so no model is ever executed by this package.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

Prediction = Union[int, str]

TRUTH_KINDS = ("class", "answers", "boolean")

_OBS_FIELDS = (
    "prediction",
    "softmax",
    "token_likelihoods",
    "top_tokens",
    "activations",
    "latency_s",
    "cost",
    "correct",
)


class TraceError(ValueError):
    """Raised for malformed trace content.

    ``line`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnresolvableCorrectness(TraceError):
    pass


@dataclass(frozen=True)
class PredictionTarget:
    kind: str
    label: int | None = None
    accepted: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.kind not in TRUTH_KINDS:
            raise TraceError(f"unknown truth kind {self.kind!r}", field="truth.kind")
        if self.kind == "class":
            if isinstance(self.label, bool) or not isinstance(self.label, int) or self.label < 0:
                raise TraceError("class label must be a non-negative integer", field="truth.label")
        if self.kind == "answers" and not self.accepted:
            raise TraceError("accepted answer set is empty", field="truth.accepted")


@dataclass(frozen=True)
class ModelObservation:
    """What one model reported for one input. Every field is optional."""

    prediction: Prediction | None = None
    softmax: tuple[float, ...] | None = None
    token_likelihoods: tuple[float, ...] | None = None
    top_tokens: tuple[tuple[tuple[str, float], ...], ...] | None = None
    activations: tuple[float, ...] | None = None
    latency_s: float | None = None
    cost: float | None = None
    correct: bool | None = None

    def __post_init__(self) -> None:
        if self.softmax is not None:
            sm = self.softmax
            if len(sm) == 0:
                raise TraceError("softmax is empty", field="softmax")
            if any(not (0.0 <= p <= 1.0) for p in sm):
                raise TraceError("softmax entries must lie in [0, 1]", field="softmax")
            if abs(math.fsum(sm) - 1.0) > 1e-6:
                raise TraceError("softmax does not sum to 1", field="softmax")
        if self.token_likelihoods is not None:
            if any(not (0.0 <= p <= 1.0) for p in self.token_likelihoods):
                raise TraceError("token_likelihoods entries must lie in [0, 1]", field="token_likelihoods")
        if self.top_tokens is not None:
            for position in self.top_tokens:
                for _, logprob in position:
                    if logprob > 0:
                        raise TraceError("top_tokens logprob must be <= 0", field="top_tokens")
        if self.activations is not None and any(not math.isfinite(a) for a in self.activations):
            raise TraceError("activations must be finite", field="activations")
        for name in ("latency_s", "cost"):
            value = getattr(self, name)
            if value is not None and not (value >= 0 and math.isfinite(value)):
                raise TraceError(f"{name} must be a finite non-negative number", field=name)

    def resolved_prediction(self) -> Prediction | None:
        """The explicit prediction, or the argmax of the softmax (lowest index on ties)."""
        if self.prediction is not None:
            return self.prediction
        if self.softmax is not None:
            return int(np.argmax(self.softmax))
        return None


@dataclass(frozen=True)
class TraceRecord:
    id: str
    truth: PredictionTarget
    local: ModelObservation
    remote: ModelObservation | None = None


@dataclass(frozen=True)
class TraceDataset:
    records: tuple[TraceRecord, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.records:
            raise TraceError("dataset is empty")
        kinds = {r.truth.kind for r in self.records}
        if len(kinds) > 1:
            raise TraceError(f"records mix truth kinds {sorted(kinds)}", field="truth.kind")
        seen: set[str] = set()
        for r in self.records:
            if r.id in seen:
                raise TraceError(f"duplicate id {r.id!r}", field="id")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, idx: int) -> TraceRecord:
        return self.records[idx]

    @property
    def kind(self) -> str:
        return self.records[0].truth.kind

    def by_id(self) -> dict[str, TraceRecord]:
        return {r.id: r for r in self.records}


# ---------------------------------------------------------------------------
# JSON (de)serialization


def _number(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TraceError(f"{name} must be a number", field=name)
    return float(value)


def _number_list(value: Any, name: str) -> tuple[float, ...]:
    if not isinstance(value, list):
        raise TraceError(f"{name} must be a list of numbers", field=name)
    return tuple(_number(v, name) for v in value)


def truth_from_dict(obj: Any) -> PredictionTarget:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise TraceError("truth must be an object with a 'kind'", field="truth")
    kind = obj["kind"]
    if kind == "class":
        if "label" not in obj:
            raise TraceError("class truth requires 'label'", field="truth.label")
        return PredictionTarget("class", label=obj["label"])
    if kind == "answers":
        accepted = obj.get("accepted")
        if not isinstance(accepted, list) or not all(isinstance(a, str) for a in accepted):
            raise TraceError("answers truth requires a list of strings", field="truth.accepted")
        return PredictionTarget("answers", accepted=frozenset(accepted))
    return PredictionTarget(kind)


def truth_to_dict(truth: PredictionTarget) -> dict[str, Any]:
    if truth.kind == "class":
        return {"kind": "class", "label": truth.label}
    if truth.kind == "answers":
        return {"kind": "answers", "accepted": sorted(truth.accepted)}
    return {"kind": truth.kind}


def observation_from_dict(obj: Any, where: str = "observation") -> ModelObservation:
    if not isinstance(obj, dict):
        raise TraceError(f"{where} must be an object", field=where)
    unknown = set(obj) - set(_OBS_FIELDS)
    if unknown:
        raise TraceError(f"{where} has unknown fields {sorted(unknown)}", field=where)
    kwargs: dict[str, Any] = {}
    if "prediction" in obj:
        pred = obj["prediction"]
        if isinstance(pred, bool) or not isinstance(pred, (int, str)):
            raise TraceError("prediction must be an integer or a string", field=f"{where}.prediction")
        kwargs["prediction"] = pred
    for name in ("softmax", "token_likelihoods", "activations"):
        if name in obj:
            kwargs[name] = _number_list(obj[name], f"{where}.{name}")
    if "top_tokens" in obj:
        positions = obj["top_tokens"]
        if not isinstance(positions, list):
            raise TraceError("top_tokens must be a list of lists", field=f"{where}.top_tokens")
        parsed = []
        for position in positions:
            if not isinstance(position, list):
                raise TraceError("top_tokens must be a list of lists", field=f"{where}.top_tokens")
            entries = []
            for entry in position:
                if not isinstance(entry, dict) or not isinstance(entry.get("token"), str):
                    raise TraceError(
                        "top_tokens entries need 'token' and 'logprob'", field=f"{where}.top_tokens"
                    )
                entries.append((entry["token"], _number(entry.get("logprob"), f"{where}.top_tokens")))
            parsed.append(tuple(entries))
        kwargs["top_tokens"] = tuple(parsed)
    for name in ("latency_s", "cost"):
        if name in obj:
            kwargs[name] = _number(obj[name], f"{where}.{name}")
    if "correct" in obj:
        if not isinstance(obj["correct"], bool):
            raise TraceError("correct must be a boolean", field=f"{where}.correct")
        kwargs["correct"] = obj["correct"]
    try:
        return ModelObservation(**kwargs)
    except TraceError as exc:
        raise TraceError(str(exc), field=f"{where}.{exc.field}" if exc.field else where) from None


def observation_to_dict(obs: ModelObservation) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if obs.prediction is not None:
        out["prediction"] = obs.prediction
    for name in ("softmax", "token_likelihoods", "activations"):
        value = getattr(obs, name)
        if value is not None:
            out[name] = list(value)
    if obs.top_tokens is not None:
        out["top_tokens"] = [
            [{"token": tok, "logprob": lp} for tok, lp in position] for position in obs.top_tokens
        ]
    for name in ("latency_s", "cost", "correct"):
        value = getattr(obs, name)
        if value is not None:
            out[name] = value
    return out


def record_from_dict(obj: Any) -> TraceRecord:
    if not isinstance(obj, dict):
        raise TraceError("record must be a JSON object")
    for name in ("id", "truth", "local"):
        if name not in obj:
            raise TraceError(f"missing field {name!r}", field=name)
    if not isinstance(obj["id"], str):
        raise TraceError("id must be a string", field="id")
    remote = obj.get("remote")
    return TraceRecord(
        id=obj["id"],
        truth=truth_from_dict(obj["truth"]),
        local=observation_from_dict(obj["local"], "local"),
        remote=observation_from_dict(remote, "remote") if "remote" in obj else None,
    )


def record_to_dict(record: TraceRecord) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": record.id,
        "truth": truth_to_dict(record.truth),
        "local": observation_to_dict(record.local),
    }
    if record.remote is not None:
        out["remote"] = observation_to_dict(record.remote)
    return out


def load_trace(path: str | os.PathLike) -> TraceDataset:
    """Read a newline-delimited JSON trace file. Blank lines are skipped."""
    path = Path(path)
    records: list[TraceRecord] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"invalid JSON: {exc.msg}", line=lineno) from None
            try:
                record = record_from_dict(obj)
            except TraceError as exc:
                raise TraceError(str(exc), line=lineno, field=exc.field) from None
            if record.id in seen:
                raise TraceError(
                    f"duplicate id {record.id!r} (first seen on line {seen[record.id]})",
                    line=lineno,
                    field="id",
                )
            seen[record.id] = lineno
            records.append(record)
    if not records:
        raise TraceError(f"{path}: no records")
    return TraceDataset(tuple(records), {"source": str(path), "kind": records[0].truth.kind})


def dumps_records(records: Iterable[TraceRecord]) -> str:
    return "".join(json.dumps(record_to_dict(r), ensure_ascii=False) + "\n" for r in records)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_trace(dataset: TraceDataset | Sequence[TraceRecord], path: str | os.PathLike) -> None:
    records = dataset.records if isinstance(dataset, TraceDataset) else dataset
    atomic_write_text(path, dumps_records(records))


# ---------------------------------------------------------------------------
# Correctness


def _normalize_answer(text: str) -> str:
    return text.strip().casefold()


def exact_match(prediction: str, accepted: Iterable[str], *, normalize: bool = False) -> bool:
    """Strict string equality against any accepted answer.

    With ``normalize=True`` both sides are trimmed and casefolded first.
    """
    accepted = list(accepted)
    if not accepted:
        raise ValueError("accepted answer set is empty")
    if normalize:
        prediction = _normalize_answer(prediction)
        return any(prediction == _normalize_answer(a) for a in accepted)
    return prediction in accepted


def observation_correct(
    obs: ModelObservation, truth: PredictionTarget, *, normalize: bool = False
) -> bool:
    """Correctness of one observation: explicit flag, then class comparison, then exact match."""
    if obs.correct is not None:
        return obs.correct
    if truth.kind == "class":
        pred = obs.resolved_prediction()
        if isinstance(pred, int):
            return pred == truth.label
        raise UnresolvableCorrectness("class truth needs an integer prediction or a softmax")
    if truth.kind == "answers":
        if isinstance(obs.prediction, str):
            return exact_match(obs.prediction, truth.accepted, normalize=normalize)
        raise UnresolvableCorrectness("answers truth needs a string prediction")
    raise UnresolvableCorrectness("boolean truth needs an explicit 'correct' flag")


def resolve_correctness(
    record: TraceRecord, *, normalize: bool = False
) -> tuple[bool, bool | None]:
    try:
        local = observation_correct(record.local, record.truth, normalize=normalize)
        remote = (
            None
            if record.remote is None
            else observation_correct(record.remote, record.truth, normalize=normalize)
        )
    except UnresolvableCorrectness as exc:
        raise UnresolvableCorrectness(f"record {record.id!r}: {exc}") from None
    return local, remote


# ---------------------------------------------------------------------------
# Synthetic traces


def _confidence_softmax(rng: np.random.Generator, top: float, predicted: int, n_classes: int) -> tuple[float, ...]:
    rest = rng.dirichlet(np.ones(n_classes - 1)) * (1.0 - top) if n_classes > 2 else np.array([1.0 - top])
    probs = np.insert(rest, predicted, top)
    return tuple(float(p) for p in probs)


def synthesize_trace(
    n: int,
    local_accuracy: float,
    remote_accuracy: float,
    complementarity: float | None = None,
    seed: int = 0,
    *,
    n_classes: int = 2,
    latency_local: float | None = None,
    latency_remote: float | None = None,
    cost_per_call: float | None = None,
    separation: float = 3.0,
) -> TraceDataset:
    """Generate a classification trace with controlled correctness counts.

    ``complementarity`` is the fraction of records the local model gets right
    while the remote model gets wrong; by default it is what independent
    errors would give, ``local_accuracy * (1 - remote_accuracy)``.

    Local and remote top-softmax values are drawn from Beta distributions,
    favouring high values for correct records; ``separation`` controls how
    strongly (1.0 means no signal at all).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    for name, acc in (("local_accuracy", local_accuracy), ("remote_accuracy", remote_accuracy)):
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if complementarity is None:
        complementarity = local_accuracy * (1.0 - remote_accuracy)

    n_local = int(round(local_accuracy * n))
    n_remote = int(round(remote_accuracy * n))
    lo = max(0.0, local_accuracy - remote_accuracy)
    hi = min(local_accuracy, 1.0 - remote_accuracy)
    if not lo - 1e-12 <= complementarity <= hi + 1e-12:
        raise ValueError(
            f"infeasible complementarity {complementarity} for accuracies "
            f"({local_accuracy}, {remote_accuracy})"
        )
    # rounding each count separately can leave the feasible integer range
    n_only_local = int(round(complementarity * n))
    n_only_local = min(max(n_only_local, n_local - n_remote, 0), n_local, n - n_remote)
    n_both = n_local - n_only_local
    n_only_remote = n_remote - n_both
    n_neither = n - n_local - n_only_remote

    rng = np.random.default_rng(seed)
    pattern = np.array(
        [(True, True)] * n_both
        + [(True, False)] * n_only_local
        + [(False, True)] * n_only_remote
        + [(False, False)] * n_neither,
        dtype=bool,
    ).reshape(n, 2)
    pattern = pattern[rng.permutation(n)]
    labels = rng.integers(0, n_classes, size=n)

    def observation(correct: bool, label: int, latency: float | None, cost: float | None) -> ModelObservation:
        a, b = (separation, 1.0) if correct else (1.0, separation)
        top = 0.5 + 0.5 * float(rng.beta(a, b))
        # keep strictly inside (0.5, 1) so the predicted class is the unique argmax
        top = min(max(top, 0.5 + 1e-9), 1.0 - 1e-9)
        pred = label if correct else int((label + rng.integers(1, n_classes)) % n_classes)
        return ModelObservation(
            prediction=pred,
            softmax=_confidence_softmax(rng, top, pred, n_classes),
            latency_s=latency,
            cost=cost,
        )

    records = []
    width = len(str(n - 1))
    for i in range(n):
        label = int(labels[i])
        local = observation(bool(pattern[i, 0]), label, latency_local, None)
        remote = observation(bool(pattern[i, 1]), label, latency_remote, cost_per_call)
        records.append(TraceRecord(f"r{i:0{width}d}", PredictionTarget("class", label=label), local, remote))
    meta = {
        "kind": "class",
        "source": f"synthetic(n={n}, local={local_accuracy}, remote={remote_accuracy}, "
        f"complementarity={complementarity}, seed={seed})",
    }
    return TraceDataset(tuple(records), meta)


def without_remote(dataset: TraceDataset) -> TraceDataset:
    return TraceDataset(tuple(replace(r, remote=None) for r in dataset.records), dict(dataset.metadata))
