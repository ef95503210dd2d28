"""Confidence quantifiers.

Every function here reduces model output to a single float where larger
means "trust more". Uncertainty measures (entropy, Gini impurity,
Mahalanobis surprise) are negated so that one comparison direction works
for every supervisor.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .trace import ModelObservation

__all__ = [
    "QuantifierError",
    "max_softmax",
    "prediction_confidence_score",
    "entropy",
    "negative_entropy",
    "gini_impurity",
    "negative_gini",
    "MdsaModel",
    "fit_mdsa",
    "mdsa_score",
    "sequence_confidence_min",
    "sequence_confidence_product",
    "TokenEquivalence",
    "load_token_equivalence",
    "aggregate_equivalent_tokens",
    "QUANTIFIERS",
    "make_quantifier",
]


class QuantifierError(ValueError):
    pass


def _probabilities(sm: Sequence[float]) -> np.ndarray:
    p = np.asarray(sm, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise QuantifierError("softmax must be a non-empty 1-D vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise QuantifierError("softmax entries must lie in [0, 1]")
    if abs(math.fsum(p) - 1.0) > 1e-6:
        raise QuantifierError("softmax does not sum to 1")
    return p


def max_softmax(sm: Sequence[float]) -> float:
    return float(np.max(_probabilities(sm)))


def prediction_confidence_score(sm: Sequence[float]) -> float:
    """Gap between the two largest likelihoods."""
    p = _probabilities(sm)
    if p.size < 2:
        raise QuantifierError("prediction confidence score needs at least 2 classes")
    top2 = np.partition(p, -2)[-2:]
    return float(top2[1] - top2[0])


def entropy(sm: Sequence[float]) -> float:
    """Shannon entropy in nats, with 0 * ln 0 taken as 0."""
    p = _probabilities(sm)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz))) + 0.0


def negative_entropy(sm: Sequence[float]) -> float:
    return -entropy(sm) + 0.0


def gini_impurity(sm: Sequence[float]) -> float:
    p = _probabilities(sm)
    return float(1.0 - np.sum(p * p))


def negative_gini(sm: Sequence[float]) -> float:
    """Sum of squared likelihoods, i.e. one minus the Gini impurity."""
    p = _probabilities(sm)
    return float(np.sum(p * p))


# ---------------------------------------------------------------------------
# Mahalanobis distance based surprise


_EPS_CEILING = 1e-2


@dataclass(frozen=True)
class _Gaussian:
    mean: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of the regularized covariance
    eps: float


@dataclass(frozen=True)
class MdsaModel:
    """Per-class Gaussians over activation traces.

    ``classes`` maps a class to its fitted Gaussian; classes too thin for
    their own covariance point at the pooled ``fallback`` instead.
    """

    dim: int
    eps_scale: float
    classes: Mapping[object, _Gaussian]
    fallback: _Gaussian | None = None
    thin_classes: frozenset = field(default_factory=frozenset)

    def gaussian(self, cls: object) -> _Gaussian:
        g = self.classes.get(cls)
        if g is not None:
            return g
        if self.fallback is not None:
            return self.fallback
        raise QuantifierError(f"class {cls!r} unknown to MDSA model and no global fallback fitted")

    @classmethod
    def from_moments(
        cls,
        means: Mapping[object, Sequence[float]],
        covariances: Mapping[object, np.ndarray],
        *,
        global_mean: Sequence[float] | None = None,
        global_covariance: np.ndarray | None = None,
    ) -> "MdsaModel":
        """Build a model directly from known means and covariances (no regularization)."""
        gaussians = {}
        dims = set()
        for c, mu in means.items():
            mu = np.asarray(mu, dtype=float)
            dims.add(mu.size)
            gaussians[c] = _Gaussian(mu, _cholesky(np.asarray(covariances[c], dtype=float)), 0.0)
        fallback = None
        if global_mean is not None:
            mu = np.asarray(global_mean, dtype=float)
            dims.add(mu.size)
            fallback = _Gaussian(mu, _cholesky(np.asarray(global_covariance, dtype=float)), 0.0)
        if len(dims) != 1:
            raise QuantifierError("inconsistent dimensions")
        return cls(dims.pop(), 0.0, gaussians, fallback)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        c, _ = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError:
        raise QuantifierError("covariance is not positive definite") from None
    return np.tril(c)


def _fit_gaussian(samples: np.ndarray, eps_scale: float) -> _Gaussian:
    mean = samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False, ddof=1))
    d = cov.shape[0]
    base = float(np.trace(cov)) / d
    scales = [eps_scale]
    s = eps_scale if eps_scale > 0 else 1e-7
    while s * 10 <= _EPS_CEILING * (1 + 1e-9):
        s *= 10
        scales.append(s)
    for scale in scales:
        eps = scale * base
        try:
            c, _ = cho_factor(cov + eps * np.eye(d), lower=True)
        except np.linalg.LinAlgError:
            continue
        return _Gaussian(mean, np.tril(c), eps)
    raise QuantifierError(
        f"covariance not positive definite even with ridge {scales[-1]:g} * trace/d"
    )


def fit_mdsa(
    activations_by_class: Mapping[object, Iterable[Sequence[float]]],
    eps_scale: float = 1e-6,
) -> MdsaModel:
    """Fit per-class Gaussians for Mahalanobis surprise.

    Covariances get a ridge of ``eps_scale * trace(cov) / d``; if the
    factorization still fails the ridge grows tenfold up to ``1e-2 * trace/d``.
    Classes with fewer than ``d + 1`` samples use a Gaussian pooled over all
    samples.
    """
    if eps_scale < 0:
        raise QuantifierError("eps_scale must be non-negative")
    arrays = {}
    dims = set()
    for cls, vectors in activations_by_class.items():
        a = np.asarray(list(vectors), dtype=float)
        if a.ndim != 2 or a.shape[0] == 0:
            raise QuantifierError(f"class {cls!r}: activations must be a non-empty list of vectors")
        dims.add(a.shape[1])
        arrays[cls] = a
    if not arrays:
        raise QuantifierError("no activations given")
    if len(dims) != 1:
        raise QuantifierError(f"activation dimension mismatch: {sorted(dims)}")
    d = dims.pop()
    if not any(a.shape[0] >= 2 for a in arrays.values()):
        raise QuantifierError("at least one class needs two or more samples")

    classes = {}
    thin = set()
    for cls, a in arrays.items():
        if a.shape[0] >= d + 1:
            classes[cls] = _fit_gaussian(a, eps_scale)
        else:
            thin.add(cls)
    pooled = np.concatenate(list(arrays.values()), axis=0)
    fallback = _fit_gaussian(pooled, eps_scale)
    return MdsaModel(d, eps_scale, classes, fallback, frozenset(thin))


def mdsa_score(model: MdsaModel, activation: Sequence[float], predicted_class: object) -> float:
    """Mahalanobis distance of ``activation`` from the predicted class's Gaussian.

    This is a surprise (larger = less trustworthy); negate it for use as a
    confidence.
    """
    a = np.asarray(activation, dtype=float)
    if a.shape != (model.dim,):
        raise QuantifierError(f"activation has shape {a.shape}, model expects ({model.dim},)")
    g = model.gaussian(predicted_class)
    z = solve_triangular(g.chol, a - g.mean, lower=True)
    return float(np.sqrt(z @ z))


def mdsa_scores(model: MdsaModel, activations: np.ndarray, predicted: Sequence[object]) -> np.ndarray:
    activations = np.asarray(activations, dtype=float)
    return np.array([mdsa_score(model, a, c) for a, c in zip(activations, predicted)])


# ---------------------------------------------------------------------------
# Token sequences


def _likelihoods(values: Sequence[float]) -> np.ndarray:
    p = np.asarray(values, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise QuantifierError("token likelihood sequence is empty")
    if np.any(p < 0) or np.any(p > 1):
        raise QuantifierError("token likelihoods must lie in [0, 1]")
    return p


def sequence_confidence_min(token_likelihoods: Sequence[float]) -> float:
    return float(np.min(_likelihoods(token_likelihoods)))


def sequence_confidence_product(token_likelihoods: Sequence[float]) -> float:
    p = _likelihoods(token_likelihoods)
    with np.errstate(divide="ignore"):
        return float(np.exp(np.sum(np.log(p))))


@dataclass(frozen=True)
class TokenEquivalence:
    """Named groups of tokens that count as the same answer."""

    groups: Mapping[str, frozenset[str]]

    def __post_init__(self) -> None:
        owner: dict[str, str] = {}
        for name, tokens in self.groups.items():
            for tok in tokens:
                if tok in owner:
                    raise QuantifierError(
                        f"token {tok!r} appears in groups {owner[tok]!r} and {name!r}"
                    )
                owner[tok] = name

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Iterable[str]]) -> "TokenEquivalence":
        return cls({name: frozenset(tokens) for name, tokens in mapping.items()})

    def members(self, token: str) -> frozenset[str]:
        for tokens in self.groups.values():
            if token in tokens:
                return tokens
        return frozenset([token])


def load_token_equivalence(path: str | os.PathLike) -> TokenEquivalence:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or not all(
        isinstance(v, list) and all(isinstance(t, str) for t in v) for v in data.values()
    ):
        raise QuantifierError("token equivalence file must map group names to lists of tokens")
    return TokenEquivalence.from_mapping(data)


def aggregate_equivalent_tokens(
    top_tokens: Sequence[tuple[str, float]],
    groups: TokenEquivalence | None,
    predicted_token: str,
    *,
    top_k: int | None = 5,
) -> float:
    """Summed likelihood of the listed tokens equivalent to ``predicted_token``.

    Only the ``top_k`` most likely entries of the list are considered.
    """
    if not top_tokens:
        raise QuantifierError("top_tokens is empty")
    entries = sorted(top_tokens, key=lambda e: -e[1])
    if top_k is not None:
        entries = entries[:top_k]
    members = groups.members(predicted_token) if groups is not None else frozenset([predicted_token])
    return float(math.fsum(math.exp(lp) for tok, lp in entries if tok in members))


# ---------------------------------------------------------------------------
# Observation-level quantifiers, selectable by name


Quantifier = Callable[[ModelObservation], float]


def _need(value, name: str):
    if value is None:
        raise QuantifierError(f"observation has no {name}")
    return value


def _softmax_based(fn: Callable[[Sequence[float]], float]) -> Quantifier:
    return lambda obs: fn(_need(obs.softmax, "softmax"))


QUANTIFIERS: dict[str, Quantifier] = {
    "max_softmax": _softmax_based(max_softmax),
    "pcs": _softmax_based(prediction_confidence_score),
    "entropy": _softmax_based(negative_entropy),
    "gini": _softmax_based(negative_gini),
    "seq_min": lambda obs: sequence_confidence_min(_need(obs.token_likelihoods, "token_likelihoods")),
    "seq_product": lambda obs: sequence_confidence_product(
        _need(obs.token_likelihoods, "token_likelihoods")
    ),
}

QUANTIFIER_NAMES = tuple(QUANTIFIERS) + ("token_group", "mdsa")


def make_quantifier(
    name: str,
    *,
    token_groups: TokenEquivalence | None = None,
    mdsa_model: MdsaModel | None = None,
) -> Quantifier:
    """Look up an observation quantifier by name.

    ``token_group`` scores the first generated position using
    ``token_groups``; ``mdsa`` needs a fitted ``mdsa_model`` and returns the
    negated distance.
    """
    if name in QUANTIFIERS:
        return QUANTIFIERS[name]
    if name == "token_group":

        def token_group(obs: ModelObservation) -> float:
            positions = _need(obs.top_tokens, "top_tokens")
            if not positions:
                raise QuantifierError("observation has no top_tokens")
            return aggregate_equivalent_tokens(positions[0], token_groups, str(obs.prediction))

        return token_group
    if name == "mdsa":
        if mdsa_model is None:
            raise QuantifierError("mdsa quantifier needs a fitted model")

        def mdsa(obs: ModelObservation) -> float:
            pred = _need(obs.resolved_prediction(), "prediction")
            return -mdsa_score(mdsa_model, _need(obs.activations, "activations"), pred)

        return mdsa
    raise QuantifierError(f"unknown quantifier {name!r}; choose from {', '.join(QUANTIFIER_NAMES)}")
