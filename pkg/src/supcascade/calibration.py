"""Threshold selection for the two supervisors.

All empirical rules here share the cascade's acceptance convention: an
input is trusted iff its confidence is strictly greater than the threshold,
so a sample with confidence equal to the threshold counts as rejected.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .quantifiers import Quantifier
from .trace import TraceDataset, observation_correct

log = logging.getLogger(__name__)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    achieved: float
    m: int
    details: dict = field(default_factory=dict)


def _allowed(target: float, m: int) -> int:
    # guard against 0.07 * 100 == 7.000000000000001 style rounding
    return int(math.floor(target * m + 1e-9))


def _largest_threshold(candidates: np.ndarray, protected: np.ndarray, allowed: int) -> float:
    """Largest candidate value rejecting at most ``allowed`` protected samples (``-inf`` if none)."""
    protected = np.sort(protected)
    best = -math.inf
    for c in np.unique(candidates):
        rejected = int(np.searchsorted(protected, c, side="right"))
        if rejected <= allowed:
            best = float(c)
        else:
            break
    return best


def threshold_for_fpr(correct_confidences: Sequence[float], target_fpr: float) -> CalibrationResult:
    """Largest threshold whose false-alarm rate on correct samples stays within ``target_fpr``."""
    x = np.asarray(correct_confidences, dtype=float)
    if x.size == 0:
        raise CalibrationError("no correct samples to calibrate on")
    if not 0.0 <= target_fpr <= 1.0:
        raise CalibrationError("target_fpr must lie in [0, 1]")
    m = x.size
    threshold = _largest_threshold(x, x, _allowed(target_fpr, m))
    achieved = int(np.count_nonzero(x <= threshold)) / m
    return CalibrationResult(threshold, achieved, m)


def threshold_for_remote_fraction(local_confidences: Sequence[float], target: float) -> CalibrationResult:
    """Local threshold forwarding ``ceil(target * n)`` records.

    When the cut falls inside a run of tied confidences, a threshold alone
    cannot split it; ``details["forward_indices"]`` then lists the exact
    records chosen by (confidence, index) order, and ``achieved`` reports
    what the threshold itself forwards.
    """
    x = np.asarray(local_confidences, dtype=float)
    if x.size == 0:
        raise CalibrationError("no confidences given")
    if not 0.0 <= target <= 1.0:
        raise CalibrationError("target remote fraction must lie in [0, 1]")
    n = x.size
    k = min(n, int(math.ceil(target * n - 1e-9)))
    order = np.argsort(x, kind="stable")
    threshold = -math.inf if k == 0 else float(x[order[k - 1]])
    forwarded = int(np.count_nonzero(x <= threshold))
    details = {
        "target_count": k,
        "forwarded_count": forwarded,
        "forward_indices": sorted(int(i) for i in order[:k]),
        "tie_split": forwarded != k,
    }
    if forwarded != k:
        log.warning("tied confidences at the cut: threshold forwards %d instead of %d", forwarded, k)
    return CalibrationResult(threshold, forwarded / n, n, details)


def calibrate_second_level(
    dataset: TraceDataset,
    threshold_local: float,
    target_fpr: float,
    local_quantifier: Quantifier,
    remote_quantifier: Quantifier,
    *,
    normalize_answers: bool = False,
) -> CalibrationResult:
    """Remote threshold meeting a system-level false-alarm budget, local threshold fixed.

    The denominator counts every prediction the cascade would serve
    correctly: locally accepted ones and remote ones alike. Only remote
    predictions can be rejected, so the budget is spent on the remote side.
    """
    if not 0.0 <= target_fpr <= 1.0:
        raise CalibrationError("target_fpr must lie in [0, 1]")
    local_good = 0
    remote_conf = []
    remote_good = []
    for record in dataset.records:
        if local_quantifier(record.local) > threshold_local:
            local_good += observation_correct(record.local, record.truth, normalize=normalize_answers)
            continue
        if record.remote is None:
            raise CalibrationError(f"record {record.id!r} is forwarded but has no remote observation")
        remote_conf.append(float(remote_quantifier(record.remote)))
        remote_good.append(observation_correct(record.remote, record.truth, normalize=normalize_answers))
    conf = np.asarray(remote_conf, dtype=float)
    good = np.asarray(remote_good, dtype=bool)
    denominator = local_good + int(good.sum())
    if denominator == 0:
        raise CalibrationError("no correct predictions; the false positive rate is undefined")
    allowed = _allowed(target_fpr, denominator)
    threshold = _largest_threshold(conf, conf[good], allowed) if conf.size else -math.inf
    rejected_good = int(np.count_nonzero(conf[good] <= threshold))
    details = {
        "system_correct": denominator,
        "remote_handled": int(conf.size),
        "rejected_correct": rejected_good,
        "rejected_total": int(np.count_nonzero(conf <= threshold)),
    }
    return CalibrationResult(threshold, rejected_good / denominator, denominator, details)


def nominal_quantile_threshold(
    nominal_scores: Sequence[float],
    target_fpr: float,
    fit: str = "empirical",
    *,
    tail: str = "lower",
) -> float:
    """Threshold from the score distribution of nominal, correctly handled inputs.

    ``tail="lower"`` treats scores as confidences (reject low values);
    ``tail="upper"`` treats them as uncertainties (reject high values), in
    which case only the gamma fit applies directly.
    """
    x = np.asarray(nominal_scores, dtype=float)
    if x.size < 2:
        raise CalibrationError("need at least two nominal scores")
    if tail not in ("lower", "upper"):
        raise CalibrationError("tail must be 'lower' or 'upper'")
    if fit == "empirical":
        if tail == "upper":
            return -threshold_for_fpr(-x, target_fpr).threshold
        return threshold_for_fpr(x, target_fpr).threshold
    if fit != "gamma":
        raise CalibrationError(f"unknown fit {fit!r}")
    if np.any(x <= 0):
        raise CalibrationError("gamma fit needs strictly positive scores")
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    if not var > 1e-12 * mean * mean:
        raise CalibrationError("degenerate variance")
    shape = mean * mean / var
    scale = var / mean
    q = target_fpr if tail == "lower" else 1.0 - target_fpr
    return float(stats.gamma.ppf(q, shape, scale=scale))


@dataclass(frozen=True)
class SeparationResult:
    threshold: float
    youden_j: float
    tpr: float
    fpr: float
    degenerate: bool


def separation_threshold(nominal_scores: Sequence[float], invalid_scores: Sequence[float]) -> SeparationResult:
    """Threshold maximizing Youden's J between nominal and invalid confidences.

    A detection is an invalid input at or below the threshold; a false alarm
    is a nominal input at or below it. Candidates are the pooled sample
    values; ties go to the larger threshold.
    """
    nom = np.sort(np.asarray(nominal_scores, dtype=float))
    inv = np.sort(np.asarray(invalid_scores, dtype=float))
    if nom.size == 0 or inv.size == 0:
        raise CalibrationError("both score sets must be non-empty")
    candidates = np.unique(np.concatenate([nom, inv]))
    tpr = np.searchsorted(inv, candidates, side="right") / inv.size
    fpr = np.searchsorted(nom, candidates, side="right") / nom.size
    j = tpr - fpr
    best = int(np.flatnonzero(j == j.max())[-1])
    degenerate = bool(j[best] <= 1e-12)
    if degenerate:
        log.warning("nominal and invalid scores are not separable (J = %g)", j[best])
    return SeparationResult(float(candidates[best]), float(j[best]), float(tpr[best]), float(fpr[best]), degenerate)
