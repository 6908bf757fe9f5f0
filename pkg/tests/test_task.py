import json

import pytest

from conftest import write_jsonl
from fewshot_select.errors import DatasetError, RenderError
from fewshot_select.task import (
    CLOSED,
    PER_EXAMPLE,
    Dataset,
    Example,
    LabelSpace,
    PromptCandidate,
    enumerate_grid,
    load_candidates,
    load_dataset,
    parse_grid_id,
    render_sequence,
    sample_train_set,
)


def _dataset(n=20, labels=("pos", "neg")):
    exs = tuple(Example(f"e{i}", {"x": f"text {i}"}, (labels[i % len(labels)],)) for i in range(n))
    return Dataset(exs, LabelSpace(CLOSED, tuple((lid, lid.upper()) for lid in labels)))


def test_load_dataset_closed_space_from_first_appearance(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [
        {"id": "a", "input": {"x": "1"}, "labels": ["yes"]},
        {"id": "b", "input": {"x": "2"}, "labels": ["no"]},
        {"id": "c", "input": {"x": "3"}, "labels": ["yes"]},
    ])
    ds = load_dataset(path)
    assert ds.label_space.kind == CLOSED
    assert ds.label_space.ids == ("yes", "no")
    assert [e.id for e in ds.examples] == ["a", "b", "c"]


def test_load_dataset_per_example_candidates(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [
        {"id": "a", "input": {"x": "Paris is the capital of"}, "labels": ["France"], "candidates": ["France", "Spain"]},
    ])
    ds = load_dataset(path)
    assert ds.label_space.kind == PER_EXAMPLE
    assert ds.label_space.label_ids_for(ds.examples[0]) == ("France", "Spain")


def test_gold_outside_label_space_names_example(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [{"id": "q7", "input": {"x": "1"}, "labels": ["maybe"]}])
    space = LabelSpace(CLOSED, (("yes", "yes"), ("no", "no")))
    with pytest.raises(DatasetError, match="q7"):
        load_dataset(path, space)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"id": "a", "input": {"x": "1"}, "labels": ["y"]}) + "\n{not json\n")
    with pytest.raises(DatasetError, match=":2:"):
        load_dataset(path)


def test_empty_dataset_rejected(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("\n")
    with pytest.raises(DatasetError, match="no examples"):
        load_dataset(path)


def test_duplicate_ids_rejected():
    ex = Example("a", {"x": "1"}, ("pos",))
    ds = Dataset((ex, ex), LabelSpace(CLOSED, (("pos", "P"),)))
    with pytest.raises(DatasetError, match="duplicate"):
        ds.validate()


def test_multi_gold_keeps_order_and_dedupes(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [{"id": "a", "input": {"x": "1"}, "labels": ["b", "a", "b"]}])
    ds = load_dataset(path)
    assert ds.examples[0].gold_labels == ("b", "a")
    assert ds.examples[0].primary_label == "b"


class TestSampling:
    def test_deterministic_and_disjoint(self):
        ds = _dataset(30)
        t1, pool1 = sample_train_set(ds, 5, seed=3)
        t2, pool2 = sample_train_set(ds, 5, seed=3)
        assert t1.ids == t2.ids and pool1 == pool2
        assert len(t1) == 5 and len(pool1) == 25
        assert not set(t1.ids) & {e.id for e in pool1}

    def test_seeds_differ(self):
        ds = _dataset(30)
        assert sample_train_set(ds, 5, 0)[0].ids != sample_train_set(ds, 5, 1)[0].ids

    def test_class_coverage_by_rejection(self):
        ds = _dataset(40, labels=("a", "b", "c", "d"))
        for seed in range(20):
            train, _ = sample_train_set(ds, 4, seed, require_class_coverage=True)
            assert {e.primary_label for e in train.examples} == {"a", "b", "c", "d"}

    def test_coverage_impossible(self):
        ds = _dataset(10, labels=("a", "b", "c"))
        with pytest.raises(DatasetError):
            sample_train_set(ds, 2, 0, require_class_coverage=True)

    def test_too_many(self):
        with pytest.raises(DatasetError):
            sample_train_set(_dataset(4), 5, 0)


class TestRendering:
    def test_spans_cover_labels_exactly(self):
        ds = _dataset(3)
        cand = PromptCandidate("p", "Review: {x}\nSentiment: {label}", separator="\n\n")
        r = render_sequence(cand, ds.examples, label_space=ds.label_space)
        assert r.text.count("Sentiment:") == 3
        for block, ex in zip(r.blocks, ds.examples):
            assert r.text[block.label_start:block.label_end] == ds.label_space.surface(ex.primary_label)
            assert r.text[block.start:block.end].startswith("Review: ")
        assert r.blocks[1].start == r.blocks[0].end + 2

    def test_query_slot_at_label_position(self):
        ds = _dataset(3)
        cand = PromptCandidate("p", "Q: {x} A: {label}")
        r = render_sequence(cand, ds.examples[:2], query=ds.examples[2], label_space=ds.label_space)
        assert r.text.endswith("Q: text 2 A: ")
        assert r.query.label_start == len(r.text)
        filled = r.with_query_label("pos", "POS")
        assert filled.text.endswith("A: POS")
        last = filled.blocks[-1]
        assert filled.text[last.label_start:last.label_end] == "POS"

    def test_label_surface_override(self):
        ds = _dataset(1)
        cand = PromptCandidate("p", "{x} => {label}", label_surfaces={"pos": "great"})
        r = render_sequence(cand, ds.examples, label_space=ds.label_space)
        assert r.text == "text 0 => great"

    def test_unknown_placeholder_names_candidate_and_example(self):
        ds = _dataset(1)
        cand = PromptCandidate("p9", "{missing} {label}")
        with pytest.raises(RenderError, match="p9.*e0"):
            render_sequence(cand, ds.examples, label_space=ds.label_space)

    @pytest.mark.parametrize("template", ["{x}", "{label} {label}", "{label} then {x}"])
    def test_label_marker_rules(self, template):
        with pytest.raises(RenderError):
            PromptCandidate("bad", template)

    def test_braces_in_literals_survive_query_cut(self):
        cand = PromptCandidate("p", "{{json}} {x}: {label}")
        ex = Example("e", {"x": "v"}, ("pos",))
        r = render_sequence(cand, [], query=ex)
        assert r.text == "{json} v: "


def test_load_candidates_checks_renderability(tmp_path):
    ds = _dataset(2)
    path = tmp_path / "c.json"
    path.write_text(json.dumps([{"id": "a", "block_template": "{x} {label}"}, {"id": "b", "block_template": "{y} {label}"}]))
    with pytest.raises(RenderError, match="b"):
        load_candidates(path, ds)


def test_grid_is_canonical_and_complete():
    ids = enumerate_grid({"template": ["t1", "t2"], "k": [1, 2, 3]})
    assert len(ids) == 6 and len(set(ids)) == 6
    assert ids[0] == "k=1&template=t1"
    assert parse_grid_id(ids[-1]) == {"k": "3", "template": "t2"}
    assert enumerate_grid({"k": [1, 2, 3], "template": ["t1", "t2"]}) == ids
    with pytest.raises(ValueError):
        enumerate_grid({"k": []})
