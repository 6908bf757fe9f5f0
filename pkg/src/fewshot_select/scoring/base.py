"""Scoring interface shared by every backend, plus pass accounting."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from ..errors import BackendError, BudgetExhausted
from ..task import RenderedSequence

EPSILON = 1e-6
CRITERION = "criterion"
TEST = "test"

SEQUENCE_MODE = "sequence"
CLASS_MODE = "class"
MODES = (SEQUENCE_MODE, CLASS_MODE)

NATS_TO_BITS = 1.0 / math.log(2.0)


def smooth_probability(p: float, eps: float = EPSILON) -> float:
    """Clamp a probability into ``[eps, 1 - eps]`` so its log-loss stays finite."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability out of range: {p}")
    return min(max(p, eps), 1.0 - eps)


def smooth_nll(nll, eps: float = EPSILON):
    """NLL counterpart of :func:`smooth_probability` (works on arrays)."""
    return np.clip(nll, -math.log1p(-eps), -math.log(eps))


@dataclass(frozen=True)
class LabelScore:
    label_ids: tuple[str, ...]
    logprobs: tuple[float, ...]
    raw_nll: tuple[float, ...]
    predicted: str
    normalized: bool = True

    def prob(self, label_id: str) -> float:
        return math.exp(self.logprobs[self.label_ids.index(label_id)])

    def gold_probability(self, gold: Sequence[str]) -> float:
        return float(sum(math.exp(lp) for lid, lp in zip(self.label_ids, self.logprobs) if lid in gold))


def label_score_from_nll(label_ids: Sequence[str], raw_nll: Sequence[float], normalize: bool = True) -> LabelScore:
    """Softmax over per-label total log-probabilities; ties go to the earliest label."""
    if not label_ids:
        raise BackendError("cannot score an empty label list")
    raw = np.asarray(raw_nll, dtype=float)
    logits = -raw
    if normalize:
        if not np.any(np.isfinite(logits)):
            raise BackendError("every label has zero probability")
        logprobs = logits - logsumexp(logits)
    else:
        logprobs = logits
    best = int(np.argmax(logprobs))
    return LabelScore(tuple(label_ids), tuple(float(x) for x in logprobs), tuple(float(x) for x in raw), label_ids[best], normalize)


@dataclass(frozen=True)
class SequenceScore:
    label_nll: tuple[float, ...]
    block_nll: tuple[float, ...]
    label_tokens: tuple[int, ...] | None = None

    @property
    def total(self) -> float:
        return float(math.fsum(self.block_nll))

    def to_json(self) -> dict:
        return {"label_nll": list(self.label_nll), "block_nll": list(self.block_nll), "label_tokens": None if self.label_tokens is None else list(self.label_tokens)}

    @classmethod
    def from_json(cls, data: dict) -> "SequenceScore":
        tokens = data.get("label_tokens")
        return cls(tuple(data["label_nll"]), tuple(data["block_nll"]), None if tokens is None else tuple(tokens))


class PassCounter:
    """Thread-safe count of upstream scoring passes, with an optional hard budget."""

    def __init__(self, budget: int | None = None) -> None:
        self.budget = budget
        self._lock = threading.Lock()
        self._upstream: dict[str, int] = {}
        self._hits = 0

    def charge(self, passes: int, purpose: str = CRITERION) -> None:
        with self._lock:
            used = sum(self._upstream.values())
            if self.budget is not None and used + passes > self.budget:
                raise BudgetExhausted(f"pass budget {self.budget} exhausted ({used} used, {passes} requested)")
            self._upstream[purpose] = self._upstream.get(purpose, 0) + passes

    def hit(self, passes: int = 1) -> None:
        with self._lock:
            self._hits += passes

    @property
    def upstream(self) -> int:
        with self._lock:
            return sum(self._upstream.values())

    @property
    def cache_hits(self) -> int:
        return self._hits

    def by_purpose(self) -> dict[str, int]:
        with self._lock:
            return dict(sorted(self._upstream.items()))

    def snapshot(self) -> dict:
        return {"upstream": self.upstream, "by_purpose": self.by_purpose(), "cache_hits": self.cache_hits, "budget": self.budget}


class ScoringBackend:
    """Base class. Subclasses implement :meth:`_score_sequence`.

    ``score_labels`` by default fills each label surface into the query slot
    and scores the filled sequence, one pass per label.
    """

    backend_id = "abstract"
    model_id = ""
    multi_continuation = False
    concurrency = 1

    def __init__(self, budget: int | None = None) -> None:
        self.counter = PassCounter(budget)

    def describe(self) -> dict:
        return {"backend": self.backend_id, "model": self.model_id}

    def score_sequence(self, rendered: RenderedSequence, purpose: str = CRITERION) -> SequenceScore:
        if not rendered.blocks:
            raise BackendError("sequence has no labelled blocks to score")
        self.counter.charge(1, purpose)
        return self._score_sequence(rendered)

    def score_labels(
        self, rendered: RenderedSequence, labels: Sequence[tuple[str, str]], purpose: str = CRITERION
    ) -> LabelScore:
        if not labels:
            raise BackendError("cannot score an empty label list")
        if rendered.query is None:
            raise BackendError("label scoring needs a sequence ending in a query")
        self.counter.charge(1 if self.multi_continuation else len(labels), purpose)
        raw = self._label_nlls(rendered, labels)
        return label_score_from_nll([lid for lid, _ in labels], raw)

    def _score_sequence(self, rendered: RenderedSequence) -> SequenceScore:
        raise NotImplementedError

    def _label_nlls(self, rendered: RenderedSequence, labels: Sequence[tuple[str, str]]) -> list[float]:
        return [self._score_sequence(rendered.with_query_label(lid, surface)).label_nll[-1] for lid, surface in labels]
