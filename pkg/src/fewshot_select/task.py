"""Tasks, examples, label spaces, prompt candidates and sequence rendering."""

from __future__ import annotations

import itertools
import json
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ._seeding import rng_for
from .errors import DatasetError, RenderError

LABEL_FIELD = "label"
CLOSED = "closed-class"
PER_EXAMPLE = "per-example-candidates"

_FORMATTER = string.Formatter()


@dataclass(frozen=True)
class Example:
    id: str
    input_fields: Mapping[str, str]
    gold_labels: tuple[str, ...]
    candidates: tuple[str, ...] | None = None
    meta: Mapping[str, str] = field(default_factory=dict)

    @property
    def primary_label(self) -> str:
        """Label rendered into the example's own block."""
        return self.gold_labels[0]


@dataclass(frozen=True)
class LabelSpace:
    kind: str
    labels: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in (CLOSED, PER_EXAMPLE):
            raise DatasetError(f"unknown label-space kind {self.kind!r}")
        ids = [lid for lid, _ in self.labels]
        if len(set(ids)) != len(ids):
            raise DatasetError("label ids must be distinct")
        for lid, surface in self.labels:
            if not surface:
                raise DatasetError(f"label {lid!r} has an empty surface form")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(lid for lid, _ in self.labels)

    def surface(self, label_id: str) -> str:
        for lid, surface in self.labels:
            if lid == label_id:
                return surface
        if self.kind == PER_EXAMPLE:
            return label_id
        raise DatasetError(f"label {label_id!r} not in label space")

    def label_ids_for(self, example: Example) -> tuple[str, ...]:
        if self.kind == PER_EXAMPLE:
            if not example.candidates:
                raise DatasetError(f"example {example.id} has no candidate labels")
            return example.candidates
        return self.ids


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    label_space: LabelSpace
    source: str = ""

    def __len__(self) -> int:
        return len(self.examples)

    def by_id(self) -> dict[str, Example]:
        return {ex.id: ex for ex in self.examples}

    def validate(self) -> None:
        if not self.examples:
            raise DatasetError("dataset has no examples")
        seen: set[str] = set()
        known = set(self.label_space.ids)
        for ex in self.examples:
            if ex.id in seen:
                raise DatasetError(f"duplicate example id {ex.id}")
            seen.add(ex.id)
            if not ex.gold_labels:
                raise DatasetError(f"example {ex.id} has no gold labels")
            if self.label_space.kind == PER_EXAMPLE:
                allowed = set(ex.candidates or ())
                if not allowed:
                    raise DatasetError(f"example {ex.id} has no candidate labels")
                if len(allowed) != len(ex.candidates or ()):
                    raise DatasetError(f"example {ex.id} has duplicate candidate labels")
            else:
                allowed = known
            for label in ex.gold_labels:
                if label not in allowed:
                    raise DatasetError(f"example {ex.id}: gold label {label!r} not in label space")


@dataclass(frozen=True)
class TrainSet:
    examples: tuple[Example, ...]
    seed: int
    source: str = ""

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(ex.id for ex in self.examples)

    def __len__(self) -> int:
        return len(self.examples)


# ---------------------------------------------------------------------------
# loading


def load_label_space(path: str | Path) -> LabelSpace:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid label-space JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise DatasetError(f"{path}: label-space file must be an array")
    labels = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "id" not in item or "surface" not in item:
            raise DatasetError(f"{path}: entry {i} needs 'id' and 'surface'")
        labels.append((str(item["id"]), str(item["surface"])))
    return LabelSpace(CLOSED, tuple(labels))


def _parse_example(record: Any, where: str) -> Example:
    if not isinstance(record, dict):
        raise DatasetError(f"{where}: record must be an object")
    for key in ("id", "input", "labels"):
        if key not in record:
            raise DatasetError(f"{where}: missing field {key!r}")
    inputs = record["input"]
    if not isinstance(inputs, dict):
        raise DatasetError(f"{where}: 'input' must be an object")
    labels = record["labels"]
    if not isinstance(labels, list) or not labels:
        raise DatasetError(f"{where}: example {record['id']} needs a non-empty 'labels' array")
    cands = record.get("candidates")
    return Example(
        id=str(record["id"]),
        input_fields={str(k): str(v) for k, v in inputs.items()},
        gold_labels=tuple(dict.fromkeys(str(x) for x in labels)),
        candidates=None if cands is None else tuple(str(x) for x in cands),
        meta={str(k): str(v) for k, v in (record.get("meta") or {}).items()},
    )


def load_dataset(
    path: str | Path,
    label_space: LabelSpace | str | Path | None = None,
    source: str | None = None,
) -> Dataset:
    """Read a JSONL dataset and validate it.

    Without an explicit label space, examples that all carry ``candidates``
    produce a per-example space; otherwise the closed class set is the gold
    labels in first-appearance order, with the ids as surfaces.
    """
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: parse error: {exc.msg}") from exc
            examples.append(_parse_example(record, f"{path}:{lineno}"))
    if not examples:
        raise DatasetError("dataset has no examples")

    if isinstance(label_space, (str, Path)):
        space = load_label_space(label_space)
    elif label_space is not None:
        space = label_space
    elif all(ex.candidates for ex in examples):
        space = LabelSpace(PER_EXAMPLE)
    else:
        order = dict.fromkeys(label for ex in examples for label in ex.gold_labels)
        space = LabelSpace(CLOSED, tuple((lid, lid) for lid in order))
    dataset = Dataset(tuple(examples), space, source or path.stem)
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# train/test split


def sample_train_set(
    dataset: Dataset,
    n: int,
    seed: int,
    require_class_coverage: bool = False,
    max_attempts: int = 100_000,
) -> tuple[TrainSet, tuple[Example, ...]]:
    """Draw ``n`` training examples; everything else is the test pool.

    Coverage is enforced by rejecting whole draws, never by stratifying.
    """
    if n < 1 or n > len(dataset):
        raise DatasetError(f"cannot sample {n} examples from a dataset of {len(dataset)}")
    classes: set[str] = set()
    if require_class_coverage:
        if dataset.label_space.kind != CLOSED:
            raise DatasetError("class coverage requires a closed-class label space")
        classes = set(dataset.label_space.ids)
        if n < len(classes):
            raise DatasetError(f"coverage needs n >= {len(classes)} classes, got n={n}")
        present = {label for ex in dataset.examples for label in ex.gold_labels}
        missing = sorted(classes - present)
        if missing:
            raise DatasetError(f"classes absent from dataset: {missing}")

    rng = rng_for("train-set", seed)
    for _ in range(max_attempts):
        idx = rng.choice(len(dataset), size=n, replace=False)
        chosen = [dataset.examples[i] for i in idx]
        if classes:
            covered = {label for ex in chosen for label in ex.gold_labels}
            if not classes <= covered:
                continue
        taken = set(int(i) for i in idx)
        pool = tuple(ex for i, ex in enumerate(dataset.examples) if i not in taken)
        return TrainSet(tuple(chosen), seed, dataset.source), pool
    raise DatasetError(f"no class-covering draw found in {max_attempts} attempts")


# ---------------------------------------------------------------------------
# prompt candidates and rendering


def _template_fields(template: str) -> list[str]:
    try:
        return [name for _, name, _, _ in _FORMATTER.parse(template) if name is not None]
    except ValueError as exc:
        raise RenderError(f"malformed template {template!r}: {exc}") from exc


@dataclass(frozen=True)
class PromptCandidate:
    id: str
    block_template: str
    query_template: str | None = None
    separator: str = "\n"
    label_surfaces: Mapping[str, str] | None = None

    def __post_init__(self) -> None:
        fields = _template_fields(self.block_template)
        if fields.count(LABEL_FIELD) != 1:
            raise RenderError(
                f"candidate {self.id}: '{{{LABEL_FIELD}}}' must occur exactly once in block_template"
            )
        if fields[-1] != LABEL_FIELD:
            raise RenderError(f"candidate {self.id}: '{{{LABEL_FIELD}}}' must be the final placeholder")
        if any(f == "" or not f.isidentifier() for f in fields):
            raise RenderError(f"candidate {self.id}: placeholders must be plain field names")
        if self.query_template is not None:
            qfields = _template_fields(self.query_template)
            if qfields.count(LABEL_FIELD) > 1 or (LABEL_FIELD in qfields and qfields[-1] != LABEL_FIELD):
                raise RenderError(f"candidate {self.id}: query label marker must be final and unique")

    @property
    def effective_query_template(self) -> str:
        if self.query_template is not None:
            return self.query_template
        # block template cut at the label placeholder
        out = []
        for literal, name, spec, conv in _FORMATTER.parse(self.block_template):
            out.append(literal.replace("{", "{{").replace("}", "}}"))
            if name is None:
                continue
            if name == LABEL_FIELD:
                break
            out.append("{" + name + ("!" + conv if conv else "") + (":" + spec if spec else "") + "}")
        return "".join(out)

    def surface(self, label_id: str, label_space: LabelSpace | None) -> str:
        if self.label_surfaces and label_id in self.label_surfaces:
            return self.label_surfaces[label_id]
        if label_space is None:
            return label_id
        return label_space.surface(label_id)


@dataclass(frozen=True)
class Block:
    example_id: str
    label_id: str
    start: int
    end: int
    label_start: int
    label_end: int


@dataclass(frozen=True)
class QuerySlot:
    example_id: str
    start: int
    end: int
    label_start: int
    label_end: int


@dataclass(frozen=True)
class RenderedSequence:
    """Rendered text plus exact character spans for every block and label."""

    text: str
    candidate_id: str
    blocks: tuple[Block, ...]
    query: QuerySlot | None = None
    separator: str = "\n"

    @property
    def example_ids(self) -> tuple[str, ...]:
        return tuple(b.example_id for b in self.blocks)

    def with_query_label(self, label_id: str, surface: str) -> "RenderedSequence":
        """Fill the query's label slot, turning the query into a final block."""
        if self.query is None:
            raise RenderError("sequence has no query slot")
        q = self.query
        text = self.text[: q.label_start] + surface + self.text[q.label_end :]
        shift = len(surface) - (q.label_end - q.label_start)
        block = Block(q.example_id, label_id, q.start, q.end + shift, q.label_start, q.label_start + len(surface))
        return replace(self, text=text, blocks=self.blocks + (block,), query=None)

    def canonical(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "candidate": self.candidate_id,
            "blocks": [[b.example_id, b.label_id, b.start, b.end, b.label_start, b.label_end] for b in self.blocks],
            "query": None
            if self.query is None
            else [self.query.example_id, self.query.start, self.query.end, self.query.label_start, self.query.label_end],
        }


def _render_template(
    template: str, example: Example, label_text: str | None, candidate_id: str
) -> tuple[str, int | None]:
    """Render one template; return text and the label offset (None if no label slot)."""
    parts: list[str] = []
    pos = 0
    label_at = None
    for literal, name, spec, conv in _FORMATTER.parse(template):
        parts.append(literal)
        pos += len(literal)
        if name is None:
            continue
        if name == LABEL_FIELD:
            label_at = pos
            value = label_text or ""
        else:
            if name not in example.input_fields:
                raise RenderError(
                    f"candidate {candidate_id}: example {example.id} has no field {name!r}"
                )
            value = example.input_fields[name]
            if conv:
                value = _FORMATTER.convert_field(value, conv)
            value = _FORMATTER.format_field(value, spec or "")
        parts.append(value)
        pos += len(value)
    return "".join(parts), label_at


def render_sequence(
    candidate: PromptCandidate,
    ordered_examples: Sequence[Example],
    query: Example | None = None,
    label_space: LabelSpace | None = None,
) -> RenderedSequence:
    """Render blocks joined by the candidate's separator, optionally ending in a query."""
    chunks: list[str] = []
    blocks: list[Block] = []
    offset = 0
    for i, ex in enumerate(ordered_examples):
        if i:
            chunks.append(candidate.separator)
            offset += len(candidate.separator)
        label_id = ex.primary_label
        surface = candidate.surface(label_id, label_space)
        text, label_at = _render_template(candidate.block_template, ex, surface, candidate.id)
        assert label_at is not None
        blocks.append(Block(ex.id, label_id, offset, offset + len(text), offset + label_at, offset + label_at + len(surface)))
        chunks.append(text)
        offset += len(text)
    slot = None
    if query is not None:
        if blocks:
            chunks.append(candidate.separator)
            offset += len(candidate.separator)
        text, label_at = _render_template(candidate.effective_query_template, query, None, candidate.id)
        at = len(text) if label_at is None else label_at
        slot = QuerySlot(query.id, offset, offset + len(text), offset + at, offset + at)
        chunks.append(text)
        offset += len(text)
    return RenderedSequence("".join(chunks), candidate.id, tuple(blocks), slot, candidate.separator)


def check_renderable(candidate: PromptCandidate, examples: Iterable[Example], label_space: LabelSpace) -> None:
    for ex in examples:
        render_sequence(candidate, [ex], query=ex, label_space=label_space)


def load_candidates(path: str | Path, dataset: Dataset | None = None) -> list[PromptCandidate]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list) or not raw:
        raise RenderError(f"{path}: candidate file must be a non-empty array")
    out = []
    for i, item in enumerate(raw):
        try:
            out.append(
                PromptCandidate(
                    id=str(item["id"]),
                    block_template=item["block_template"],
                    query_template=item.get("query_template"),
                    separator=item.get("separator", "\n"),
                    label_surfaces=item.get("label_surfaces"),
                )
            )
        except KeyError as exc:
            raise RenderError(f"{path}: candidate {i} missing {exc}") from exc
    ids = [c.id for c in out]
    if len(set(ids)) != len(ids):
        raise RenderError(f"{path}: duplicate candidate ids")
    if dataset is not None:
        for cand in out:
            check_renderable(cand, dataset.examples, dataset.label_space)
    return out


# ---------------------------------------------------------------------------
# candidate grids


def enumerate_grid(axes: Mapping[str, Sequence[Any]]) -> list[str]:
    """Canonical ``axis=value&...`` ids over the Cartesian product, axes sorted by name."""
    if not axes:
        raise ValueError("grid needs at least one axis")
    names = sorted(axes)
    for name in names:
        if len(axes[name]) == 0:
            raise ValueError(f"grid axis {name!r} is empty")
    return [
        "&".join(f"{name}={value}" for name, value in zip(names, combo))
        for combo in itertools.product(*(axes[name] for name in names))
    ]


def parse_grid_id(candidate_id: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in candidate_id.split("&"))
