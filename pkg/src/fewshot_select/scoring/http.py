"""Log-probability client for completion endpoints that echo the prompt.

Request body: ``{"model", "prompt", "echo": true, "logprobs": 0,
"max_tokens": 0, "temperature": 0}``.  The response must carry
``choices[0].logprobs`` with ``tokens``, ``token_logprobs`` and
``text_offset`` (offsets into the prompt, characters by default).
"""

from __future__ import annotations

import logging
import os
import threading
import time
from typing import Callable, Sequence

import httpx

from ..errors import ContextLengthError, TransportError
from ..task import RenderedSequence
from .base import ScoringBackend, SequenceScore

log = logging.getLogger(__name__)

RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


def attribute_tokens(
    rendered: RenderedSequence,
    offsets: Sequence[int],
    logprobs: Sequence[float | None],
    token_ends: Sequence[int],
) -> SequenceScore:
    """Split token log-probabilities into per-block label and full NLLs.

    A token counts toward a label when it overlaps the label span (a leading
    space merged into the label token is therefore charged to the label).
    Every token is charged to exactly one block: the one whose region
    [previous block end, this block end) contains its start offset.  A missing
    log-probability (the first token) counts as zero.
    """
    blocks = rendered.blocks
    label_nll = [0.0] * len(blocks)
    label_tokens = [0] * len(blocks)
    block_nll = [0.0] * len(blocks)
    region_start = [0] + [b.end for b in blocks[:-1]]
    for start, end, lp in zip(offsets, token_ends, logprobs):
        nll = 0.0 if lp is None else -float(lp)
        for k, block in enumerate(blocks):
            if region_start[k] <= start < block.end:
                block_nll[k] += nll
                break
        for k, block in enumerate(blocks):
            if start < block.label_end and end > block.label_start:
                label_nll[k] += nll
                label_tokens[k] += 1
                break
    return SequenceScore(tuple(label_nll), tuple(block_nll), tuple(label_tokens))


class HTTPBackend(ScoringBackend):
    backend_id = "http"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "FEWSHOT_API_KEY",
        concurrency: int = 4,
        budget: int | None = None,
        max_retries: int = 5,
        backoff: float = 0.5,
        timeout: float = 60.0,
        offset_unit: str = "char",
        length_normalize: bool = False,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        super().__init__(budget)
        if offset_unit not in ("char", "byte"):
            raise ValueError("offset_unit must be 'char' or 'byte'")
        self.endpoint = endpoint
        self.model_id = model
        self.concurrency = max(1, int(concurrency))
        self.max_retries = max_retries
        self.backoff = backoff
        self.offset_unit = offset_unit
        self.length_normalize = length_normalize
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(self.concurrency)
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        if client is not None and key:
            self._client.headers.update(headers)

    def describe(self) -> dict:
        d = super().describe()
        d["endpoint"] = self.endpoint
        return d

    def _post(self, prompt: str) -> dict:
        body = {"model": self.model_id, "prompt": prompt, "echo": True, "logprobs": 0, "max_tokens": 0, "temperature": 0}
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=body)
            except httpx.HTTPError as exc:
                last = TransportError(f"transport failure: {exc}")
                log.warning("request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in RETRY_STATUS:
                last = TransportError(f"upstream status {resp.status_code}")
                log.warning("retryable status %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                text = resp.text
                if "context" in text.lower() and "length" in text.lower():
                    raise ContextLengthError("context length exceeded", len(prompt))
                raise TransportError(f"upstream status {resp.status_code}: {text[:200]}", retryable=False)
            try:
                return resp.json()
            except ValueError as exc:
                raise TransportError(f"response is not JSON: {exc}", retryable=False) from exc
        assert last is not None
        raise last

    def _score_sequence(self, rendered: RenderedSequence) -> SequenceScore:
        data = self._post(rendered.text)
        try:
            lp = data["choices"][0]["logprobs"]
            tokens, logprobs, offsets = lp["tokens"], lp["token_logprobs"], lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed log-probability response: {exc}", retryable=False) from exc
        if self.offset_unit == "byte":
            offsets = _bytes_to_chars(rendered.text, offsets)
        ends = list(offsets[1:]) + [len(rendered.text)]
        ends = [max(e, s + 1) for s, e in zip(offsets, ends)]
        if len(tokens) != len(logprobs) or len(tokens) != len(offsets):
            raise TransportError("token arrays differ in length", retryable=False)
        return attribute_tokens(rendered, offsets, logprobs, ends)

    def _label_nlls(self, rendered: RenderedSequence, labels: Sequence[tuple[str, str]]) -> list[float]:
        out = []
        for lid, surface in labels:
            score = self._score_sequence(rendered.with_query_label(lid, surface))
            nll = score.label_nll[-1]
            if self.length_normalize and score.label_tokens and score.label_tokens[-1]:
                nll /= score.label_tokens[-1]
            out.append(nll)
        return out

    def close(self) -> None:
        self._client.close()


def _bytes_to_chars(text: str, offsets: Sequence[int]) -> list[int]:
    table = {}
    pos = 0
    for i, ch in enumerate(text):
        table[pos] = i
        pos += len(ch.encode("utf-8"))
    table[pos] = len(text)
    out = []
    for off in offsets:
        while off not in table and off > 0:
            off -= 1
        out.append(table.get(off, 0))
    return out
