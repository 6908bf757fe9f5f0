import json

import numpy as np
import pytest

from fewshot_select.harness import Task
from fewshot_select.scoring import SyntheticBackend, SyntheticTaskSpec, make_synthetic_task


def synthetic_setup(qualities=(0.55, 0.6, 0.65), noise=1.0, order_weight=0.5, seed=0, num_examples=200, label_count=2, input_nll=0.0):
    spec = SyntheticTaskSpec(
        qualities=tuple(qualities),
        noise=noise,
        order_weight=order_weight,
        seed=seed,
        num_examples=num_examples,
        label_count=label_count,
        input_nll=input_nll,
    )
    dataset, candidates = make_synthetic_task(spec)
    return spec, dataset, candidates, SyntheticBackend(spec, dataset)


class GenericOnly:
    """Wraps a backend and hides its bulk path, forcing per-sequence scoring."""

    def __init__(self, inner):
        self.inner = inner
        self.counter = inner.counter
        self.concurrency = 1
        self.multi_continuation = inner.multi_continuation
        self.backend_id = inner.backend_id
        self.model_id = inner.model_id

    def describe(self):
        return self.inner.describe()

    def score_sequence(self, rendered, purpose="criterion"):
        return self.inner.score_sequence(rendered, purpose)

    def score_labels(self, rendered, labels, purpose="criterion"):
        return self.inner.score_labels(rendered, labels, purpose)


@pytest.fixture
def small():
    return synthetic_setup()


@pytest.fixture
def small_task(small):
    spec, dataset, candidates, backend = small
    return Task("small", dataset, tuple(candidates)), backend


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
