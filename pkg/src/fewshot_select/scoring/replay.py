"""Record/replay store wrapping any scoring backend.

The store is an append-only JSONL file.  Each line holds the request digest,
the request itself, the response, and a checksum over request and response so
that edited entries are caught on load.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Any, Sequence

from ..errors import BackendError, DigestMismatchError, MissingRecordingError
from ..task import RenderedSequence
from .base import (
    CLASS_MODE,
    CRITERION,
    SEQUENCE_MODE,
    LabelScore,
    ScoringBackend,
    SequenceScore,
    label_score_from_nll,
)

RECORD = "record"
REPLAY = "replay"


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def request_digest(request: dict) -> str:
    return hashlib.sha256(_canonical(request)).hexdigest()


def _checksum(request: dict, response: dict) -> str:
    return hashlib.sha256(_canonical({"request": request, "response": response})).hexdigest()


class ReplayStore:
    """Digest-keyed response store. Reads are concurrent; appends are serialised."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, tuple[dict, dict]] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    digest, request, response, check = rec["digest"], rec["request"], rec["response"], rec["check"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DigestMismatchError(f"{self.path}:{lineno}: unreadable store entry ({exc})") from exc
                if request_digest(request) != digest or _checksum(request, response) != check:
                    raise DigestMismatchError(f"{self.path}:{lineno}: digest mismatch for entry {digest[:12]}")
                self._admit(digest, request, response)

    def _admit(self, digest: str, request: dict, response: dict) -> None:
        known = self._entries.get(digest)
        if known is not None and known[0] != request:
            raise DigestMismatchError(f"digest collision on {digest[:12]}")
        self._entries[digest] = (request, response)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, digest: str) -> dict | None:
        entry = self._entries.get(digest)
        return None if entry is None else entry[1]

    def put(self, digest: str, request: dict, response: dict) -> None:
        with self._lock:
            if digest in self._entries:
                self._admit(digest, request, response)
                return
            self._admit(digest, request, response)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            line = json.dumps(
                {"digest": digest, "request": request, "response": response, "check": _checksum(request, response)},
                sort_keys=True,
                ensure_ascii=False,
            )
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class RecordReplayBackend(ScoringBackend):
    """Serve scores from a store; in record mode, fill misses from ``upstream``.

    ``counter.upstream`` counts passes forwarded upstream, ``counter.cache_hits``
    counts passes answered from the store.
    """

    def __init__(
        self,
        store: ReplayStore | str | Path,
        upstream: ScoringBackend | None = None,
        mode: str = RECORD,
        backend_id: str | None = None,
        model_id: str | None = None,
    ) -> None:
        super().__init__(None)
        if mode not in (RECORD, REPLAY):
            raise ValueError(f"unknown store mode {mode!r}")
        if mode == RECORD and upstream is None:
            raise ValueError("record mode needs an upstream backend")
        self.store = store if isinstance(store, ReplayStore) else ReplayStore(store)
        self.upstream = upstream
        self.mode = mode
        self.backend_id = backend_id or (upstream.backend_id if upstream else "replay")
        self.model_id = model_id or (upstream.model_id if upstream else "")
        if upstream is not None:
            self.multi_continuation = upstream.multi_continuation
            self.concurrency = upstream.concurrency

    def _request(self, op: str, rendered: RenderedSequence, mode: str, extra: dict | None = None) -> dict:
        req = {"op": op, "backend": self.backend_id, "model": self.model_id, "mode": mode, "rendered": rendered.canonical()}
        if extra:
            req.update(extra)
        return req

    def _resolve(self, request: dict, passes: int, purpose: str, call) -> dict:
        digest = request_digest(request)
        response = self.store.get(digest)
        if response is not None:
            self.counter.hit(passes)
            return response
        if self.mode == REPLAY:
            raise MissingRecordingError(digest)
        response = call()
        self.counter.charge(passes, purpose)
        self.store.put(digest, request, response)
        return response

    def score_sequence(self, rendered: RenderedSequence, purpose: str = CRITERION) -> SequenceScore:
        if not rendered.blocks:
            raise BackendError("sequence has no labelled blocks to score")
        request = self._request("sequence", rendered, SEQUENCE_MODE)
        response = self._resolve(
            request, 1, purpose, lambda: self.upstream.score_sequence(rendered, purpose).to_json()
        )
        return SequenceScore.from_json(response)

    def score_labels(
        self, rendered: RenderedSequence, labels: Sequence[tuple[str, str]], purpose: str = CRITERION
    ) -> LabelScore:
        if not labels:
            raise BackendError("cannot score an empty label list")
        request = self._request("labels", rendered, CLASS_MODE, {"labels": [list(x) for x in labels]})
        passes = 1 if self.multi_continuation else len(labels)

        def call() -> dict:
            score = self.upstream.score_labels(rendered, labels, purpose)
            return {"raw_nll": list(score.raw_nll)}

        response = self._resolve(request, passes, purpose, call)
        return label_score_from_nll([lid for lid, _ in labels], response["raw_nll"])
