"""Synthetic ground-truth scorer.

Every candidate ``a`` has a true per-example correctness probability
``theta[a]``.  For a target example scored after an ordered context, the gold
label gets logit ``z = noise * (probit(theta[a]) + g)`` and every other label
logit 0, where ``g`` is a standard normal built from a per-(candidate, example)
difficulty draw and a per-(candidate, context, example) order draw.  Gold is
top-1 exactly when ``z > 0``, which happens with probability ``theta[a]``.

With ``noise == 0`` the model is deterministic: the gold label receives
probability ``theta[a]`` and the rest is spread evenly over the other labels.

All draws are counter-based hashes of ids, so scores depend only on
``(seed, candidate, ordered context ids, target id)`` and the vectorised path
agrees with the one-sequence-at-a-time path.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, ndtri

from ..errors import BackendError
from ..task import CLOSED, Dataset, Example, LabelSpace, PromptCandidate, RenderedSequence
from .base import CLASS_MODE, CRITERION, EPSILON, SEQUENCE_MODE, ScoringBackend, SequenceScore, smooth_nll

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_K_DIFF = np.uint64(0x5851F42D4C957F2D)
_K_ORDER = np.uint64(0x14057B7EF767814F)
_K_INPUT = np.uint64(0x2545F4914F6CDD1D)
_K_CTX = np.uint64(0x9E3779B97F4A7C15)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser; array (not scalar) arithmetic wraps without warnings
    x = np.array(x, dtype=np.uint64, ndmin=1)
    x ^= x >> _S30
    x *= _M1
    x ^= x >> _S27
    x *= _M2
    x ^= x >> _S31
    return x


_MASK = (1 << 64) - 1
_IM1, _IM2, _IK_DIFF, _IK_ORDER, _IK_CTX = (int(c) for c in (_M1, _M2, _K_DIFF, _K_ORDER, _K_CTX))


def _mix_int(x: int) -> int:
    # same finaliser on Python ints, much cheaper than numpy for a handful of values
    x ^= x >> 30
    x = (x * _IM1) & _MASK
    x ^= x >> 27
    x = (x * _IM2) & _MASK
    return x ^ (x >> 31)


def _normal(h: np.ndarray) -> np.ndarray:
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    return ndtri(u)


def _str_hash(seed: int, kind: str, value: str) -> np.uint64:
    digest = hashlib.blake2b(f"{seed}\x1f{kind}\x1f{value}".encode(), digest_size=8).digest()
    return np.uint64(int.from_bytes(digest, "little"))


@dataclass(frozen=True)
class SyntheticTaskSpec:
    qualities: tuple[float, ...]
    noise: float = 1.0
    order_weight: float = 0.3
    label_count: int = 2
    input_nll: float = 0.0
    seed: int = 0
    num_examples: int = 1000
    candidate_ids: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.qualities:
            raise ValueError("need at least one candidate quality")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        lo, hi = (0.0, 1.0)
        for q in self.qualities:
            if self.noise > 0 and not lo < q < hi:
                raise ValueError(f"quality {q} must lie in (0, 1) when noise > 0")
            if not lo <= q <= hi:
                raise ValueError(f"quality {q} must lie in [0, 1]")
        if not 0.0 <= self.order_weight <= 1.0:
            raise ValueError("order_weight must lie in [0, 1]")
        if self.label_count < 2:
            raise ValueError("label_count must be >= 2")
        if not self.candidate_ids:
            object.__setattr__(self, "candidate_ids", tuple(f"c{i:02d}" for i in range(len(self.qualities))))
        if len(self.candidate_ids) != len(self.qualities):
            raise ValueError("candidate_ids and qualities differ in length")

    @property
    def label_ids(self) -> tuple[str, ...]:
        return tuple(f"L{i}" for i in range(self.label_count))

    def example_id(self, i: int) -> str:
        return f"ex{i:05d}"

    def gold_label(self, example_id: str) -> str:
        h = _mix(np.atleast_1d(_str_hash(self.seed, "gold", example_id)))
        return self.label_ids[int(h[0] % np.uint64(self.label_count))]


def make_synthetic_task(spec: SyntheticTaskSpec) -> tuple[Dataset, list[PromptCandidate]]:
    """Closed-class dataset and candidate prompts matching ``spec``."""
    examples = tuple(
        Example(spec.example_id(i), {"x": f"item {i}"}, (spec.gold_label(spec.example_id(i)),))
        for i in range(spec.num_examples)
    )
    space = LabelSpace(CLOSED, tuple((lid, f"label{lid[1:]}") for lid in spec.label_ids))
    candidates = [PromptCandidate(cid, f"[{cid}] input: {{x}} output: {{label}}") for cid in spec.candidate_ids]
    return Dataset(examples, space, f"synthetic-{spec.seed}"), candidates


class _Oracle:
    """Vectorised core shared by ``synthetic_score`` and the backend."""

    def __init__(self, spec: SyntheticTaskSpec) -> None:
        self.spec = spec
        self.cand_hash = np.array([_str_hash(spec.seed, "cand", c) for c in spec.candidate_ids], dtype=np.uint64)
        self.probit = ndtri(np.clip(np.asarray(spec.qualities, dtype=float), 0.0, 1.0))
        self.theta = np.asarray(spec.qualities, dtype=float)
        self.ctx0 = _mix(np.atleast_1d(_str_hash(spec.seed, "ctx", "")))[0]
        self._ids: dict[str, np.uint64] = {}

    def id_hash(self, example_id: str) -> np.uint64:
        h = self._ids.get(example_id)
        if h is None:
            h = self._ids[example_id] = _str_hash(self.spec.seed, "ex", example_id)
        return h

    def context_hash(self, ids: Sequence[str]) -> np.uint64:
        h = np.atleast_1d(self.ctx0)
        for eid in ids:
            h = _mix(h ^ self.id_hash(eid) ^ _K_CTX)
        return h[0]

    def prefix_hashes(self, id_hashes: np.ndarray) -> np.ndarray:
        """Context hash before each position, for rows of example-id hashes (P, n) -> (P, n + 1)."""
        p, n = id_hashes.shape
        out = np.empty((p, n + 1), dtype=np.uint64)
        out[:, 0] = self.ctx0
        for k in range(n):
            out[:, k + 1] = _mix(out[:, k] ^ id_hashes[:, k] ^ _K_CTX)
        return out

    def sequence_margins(self, cand: int, id_hashes: Sequence[int]) -> np.ndarray:
        """Margins of every position of one ordered sequence; matches ``margin`` draw for draw."""
        if self.spec.noise == 0:
            return np.zeros(len(id_hashes))
        ch = int(self.cand_hash[cand])
        d0, o0 = _mix_int(ch ^ _IK_DIFF), _mix_int(ch ^ _IK_ORDER)
        ctx, diff, order = int(self.ctx0), [], []
        for h in id_hashes:
            diff.append(_mix_int(d0 ^ h))
            order.append(_mix_int(_mix_int(o0 ^ ctx) ^ h))
            ctx = _mix_int(ctx ^ h ^ _IK_CTX)
        w = self.spec.order_weight
        u = _normal(np.array(diff + order, dtype=np.uint64))
        n = len(diff)
        g = math.sqrt(1.0 - w) * u[:n] + math.sqrt(w) * u[n:]
        return self.spec.noise * (self.probit[cand] + g)

    def margin(self, cand: int, ctx_hash: np.ndarray, target_hash: np.ndarray) -> np.ndarray:
        spec = self.spec
        if spec.noise == 0:
            # noise-free: probabilities come straight from the quality
            return np.zeros(np.broadcast(ctx_hash, target_hash).shape)
        ch = self.cand_hash[cand]
        diff = _normal(_mix(_mix(np.atleast_1d(ch ^ _K_DIFF)) ^ target_hash))
        order = _normal(_mix(_mix(_mix(np.atleast_1d(ch ^ _K_ORDER)) ^ ctx_hash) ^ target_hash))
        w = spec.order_weight
        g = math.sqrt(1.0 - w) * diff + math.sqrt(w) * order
        return spec.noise * (self.probit[cand] + g)

    def input_nll(self, cand: int, target_hash: np.ndarray) -> np.ndarray:
        if self.spec.input_nll == 0:
            return np.zeros(np.shape(target_hash))
        h = _mix(_mix(np.atleast_1d(self.cand_hash[cand] ^ _K_INPUT)) ^ target_hash)
        return self.spec.input_nll * np.exp(0.5 * _normal(h))

    def logprobs(self, cand: int, z: np.ndarray, gold: np.ndarray) -> np.ndarray:
        """Per-label log-probabilities, rows of ``gold`` (M, L) masks."""
        gold = np.asarray(gold, dtype=bool)
        if self.spec.noise > 0:
            logits = np.where(gold, z[:, None], 0.0)
            shifted = logits - logits.max(axis=1, keepdims=True)
            return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        theta = self.theta[cand]
        n_gold = gold.sum(axis=1, keepdims=True)
        n_other = gold.shape[1] - n_gold
        with np.errstate(divide="ignore", invalid="ignore"):
            p_gold = np.where(n_other > 0, theta / n_gold, 1.0 / n_gold)
            p_other = np.where(n_other > 0, (1.0 - theta) / np.maximum(n_other, 1), 0.0)
            return np.log(np.where(gold, p_gold, p_other))


def synthetic_score(
    spec: SyntheticTaskSpec,
    candidate_id: str,
    context_ids: Sequence[str],
    target_id: str,
    label_ids: Sequence[str] | None = None,
    gold: Sequence[str] | None = None,
) -> dict[str, float]:
    """Per-label log-probabilities for one target given an ordered context.

    Labels and gold default to those of the task specification object.
    """
    if candidate_id not in spec.candidate_ids:
        raise BackendError(f"unknown candidate {candidate_id!r}")
    labels = tuple(label_ids) if label_ids is not None else spec.label_ids
    gold = tuple(gold) if gold is not None else (spec.gold_label(target_id),)
    oracle = _Oracle(spec)
    cand = spec.candidate_ids.index(candidate_id)
    z = oracle.margin(cand, np.atleast_1d(oracle.context_hash(context_ids)), np.atleast_1d(oracle.id_hash(target_id)))
    mask = np.array([[lid in gold for lid in labels]])
    lp = oracle.logprobs(cand, z, mask)[0]
    return dict(zip(labels, (float(x) for x in lp)))


class SyntheticBackend(ScoringBackend):
    """Backend answering from the synthetic oracle; never touches the network.

    ``dataset`` supplies gold labels and label sets; candidate ids map to
    ``spec.qualities`` by position.
    """

    backend_id = "synthetic"

    def __init__(
        self,
        spec: SyntheticTaskSpec,
        dataset: Dataset,
        budget: int | None = None,
        epsilon: float = EPSILON,
    ) -> None:
        super().__init__(budget)
        self.spec = spec
        self.dataset = dataset
        self.epsilon = epsilon
        self.model_id = f"synthetic-seed{spec.seed}"
        self._oracle = _Oracle(spec)
        self._examples = dataset.by_id()
        self._cand_index = {cid: i for i, cid in enumerate(spec.candidate_ids)}
        self.supports_bulk = dataset.label_space.kind == CLOSED
        if self.supports_bulk:
            labels = dataset.label_space.ids
            pos = {lid: i for i, lid in enumerate(labels)}
            self._row = {ex.id: i for i, ex in enumerate(dataset.examples)}
            self._hashes = np.array([self._oracle.id_hash(ex.id) for ex in dataset.examples], dtype=np.uint64)
            self._gold = np.array([[lid in ex.gold_labels for lid in labels] for ex in dataset.examples], dtype=bool)
            self._primary = np.array([pos[ex.primary_label] for ex in dataset.examples], dtype=np.int64)
            self._label_pos = pos
            self._gold_list = self._gold.tolist()
            self._gold_count = self._gold.sum(axis=1).tolist()

    def describe(self) -> dict:
        d = super().describe()
        d["spec"] = {k: getattr(self.spec, k) for k in ("qualities", "noise", "order_weight", "label_count", "input_nll", "seed")}
        return d

    # -- helpers -------------------------------------------------------------

    def _cand(self, candidate_id: str) -> int:
        try:
            return self._cand_index[candidate_id]
        except KeyError:
            raise BackendError(f"unknown candidate {candidate_id!r}") from None

    def _example(self, example_id: str) -> Example:
        try:
            return self._examples[example_id]
        except KeyError:
            raise BackendError(f"unknown example {example_id!r}") from None

    def _row_logprobs(self, cand: int, context_ids: Sequence[str], target: Example, labels: Sequence[str]) -> np.ndarray:
        o = self._oracle
        z = o.margin(cand, np.atleast_1d(o.context_hash(context_ids)), np.atleast_1d(o.id_hash(target.id)))
        mask = np.array([[lid in target.gold_labels for lid in labels]])
        return o.logprobs(cand, z, mask)[0]

    # -- generic path --------------------------------------------------------

    def _score_sequence(self, rendered: RenderedSequence) -> SequenceScore:
        cand = self._cand(rendered.candidate_id)
        ids = rendered.example_ids
        if self.supports_bulk and ids:
            return self._score_closed(cand, rendered)
        label_nll, block_nll = [], []
        for k, block in enumerate(rendered.blocks):
            target = self._example(block.example_id)
            labels = self.dataset.label_space.label_ids_for(target)
            lp = self._row_logprobs(cand, ids[:k], target, labels)
            lp_label = lp[labels.index(block.label_id)] if block.label_id in labels else -np.inf
            nll = float(smooth_nll(-lp_label, self.epsilon))
            label_nll.append(nll)
            extra = float(self._oracle.input_nll(cand, np.atleast_1d(self._oracle.id_hash(target.id)))[0])
            block_nll.append(nll + extra)
        return SequenceScore(tuple(label_nll), tuple(block_nll))

    def _score_closed(self, cand: int, rendered: RenderedSequence) -> SequenceScore:
        # all positions of one sequence at once; same draws as the row-by-row loop
        o = self._oracle
        rows = self._rows(rendered.example_ids)
        hashes = self._hashes[rows]
        pos = self._label_pos
        cols = [pos.get(b.label_id, -1) for b in rendered.blocks]
        if self.spec.noise > 0:
            label_nll = self._closed_form_nll(o.sequence_margins(cand, hashes.tolist()).tolist(), rows.tolist(), cols)
        else:
            lp = o.logprobs(cand, o.sequence_margins(cand, hashes.tolist()), self._gold[rows])
            picked = lp[np.arange(len(cols)), cols]
            picked[np.asarray(cols) < 0] = -np.inf
            label_nll = smooth_nll(-picked, self.epsilon)
        block_nll = label_nll + o.input_nll(cand, hashes)
        return SequenceScore(tuple(label_nll.tolist()), tuple(block_nll.tolist()))

    def _closed_form_nll(self, margins: list[float], rows: list[int], cols: list[int]) -> np.ndarray:
        # softmax over logits (z on gold labels, 0 elsewhere) without building the matrix
        n_labels = len(self._label_pos)
        lo, hi = -math.log1p(-self.epsilon), -math.log(self.epsilon)
        out = []
        for z, row, col in zip(margins, rows, cols):
            n_gold = self._gold_count[row]
            top = max(z, 0.0) if n_gold < n_labels else z
            lse = top + math.log(n_gold * math.exp(z - top) + (n_labels - n_gold) * math.exp(-top))
            nll = math.inf if col < 0 else lse - (z if self._gold_list[row][col] else 0.0)
            out.append(min(max(nll, lo), hi))
        return np.array(out)

    def _label_nlls(self, rendered: RenderedSequence, labels: Sequence[tuple[str, str]]) -> list[float]:
        assert rendered.query is not None
        cand = self._cand(rendered.candidate_id)
        target = self._example(rendered.query.example_id)
        lp = self._row_logprobs(cand, rendered.example_ids, target, [lid for lid, _ in labels])
        return [float(-x) for x in lp]

    # -- bulk path (closed-class datasets only) ------------------------------

    def _rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._row[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise BackendError(f"unknown example {exc.args[0]!r}") from None

    def bulk_table(
        self,
        candidate_id: str,
        unit_ids: Sequence[str],
        orderings: np.ndarray,
        mode: str = SEQUENCE_MODE,
        purpose: str = CRITERION,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Label and full-block NLLs for every (ordering, position), shape (P, n).

        Charges the same passes as the generic path would.
        """
        if not self.supports_bulk:
            raise BackendError("bulk scoring needs a closed-class label space")
        if mode not in (SEQUENCE_MODE, CLASS_MODE):
            raise BackendError(f"unknown scoring mode {mode!r}")
        orderings = np.asarray(orderings)
        p, n = orderings.shape
        n_labels = self._gold.shape[1]
        per = 1 if self.multi_continuation else n_labels
        self.counter.charge(p if mode == SEQUENCE_MODE else p * n * per, purpose)
        cand = self._cand(candidate_id)
        rows = self._rows(unit_ids)[orderings]
        hashes = self._hashes[rows]
        ctx = self._oracle.prefix_hashes(hashes)
        flat = rows.ravel()
        z = self._oracle.margin(cand, ctx[:, :n].ravel(), hashes.ravel())
        gold = self._gold[flat]
        lp = self._oracle.logprobs(cand, z, gold)
        if mode == SEQUENCE_MODE:
            lp_label = lp[np.arange(len(flat)), self._primary[flat]]
        else:
            lp_label = logsumexp(np.where(gold, lp, -np.inf), axis=1)
        label_nll = smooth_nll(-lp_label, self.epsilon).reshape(p, n)
        extra = self._oracle.input_nll(cand, hashes.ravel()).reshape(p, n)
        return label_nll, label_nll + extra

    def bulk_predict(
        self,
        candidate_id: str,
        unit_ids: Sequence[str],
        orderings: np.ndarray,
        query_ids: Sequence[str],
        purpose: str = CRITERION,
    ) -> list[str]:
        """Top-1 label for each query appended after the full ordering (ties: label order)."""
        orderings = np.asarray(orderings)
        labels = self.dataset.label_space.ids
        self.counter.charge(len(query_ids) * (1 if self.multi_continuation else len(labels)), purpose)
        cand = self._cand(candidate_id)
        ctx = self._oracle.prefix_hashes(self._hashes[self._rows(unit_ids)[orderings]])[:, -1]
        q = self._rows(query_ids)
        z = self._oracle.margin(cand, ctx, self._hashes[q])
        lp = self._oracle.logprobs(cand, z, self._gold[q])
        return [labels[i] for i in np.argmax(lp, axis=1)]
