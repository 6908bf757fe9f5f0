from .base import (
    CLASS_MODE,
    CRITERION,
    EPSILON,
    MODES,
    NATS_TO_BITS,
    SEQUENCE_MODE,
    TEST,
    LabelScore,
    PassCounter,
    ScoringBackend,
    SequenceScore,
    label_score_from_nll,
    smooth_nll,
    smooth_probability,
)
from .http import HTTPBackend, attribute_tokens
from .replay import RECORD, REPLAY, RecordReplayBackend, ReplayStore, request_digest
from .synthetic import SyntheticBackend, SyntheticTaskSpec, make_synthetic_task, synthetic_score

__all__ = [
    "CLASS_MODE",
    "CRITERION",
    "EPSILON",
    "MODES",
    "NATS_TO_BITS",
    "SEQUENCE_MODE",
    "TEST",
    "HTTPBackend",
    "LabelScore",
    "PassCounter",
    "RECORD",
    "REPLAY",
    "RecordReplayBackend",
    "ReplayStore",
    "ScoringBackend",
    "SequenceScore",
    "SyntheticBackend",
    "SyntheticTaskSpec",
    "attribute_tokens",
    "label_score_from_nll",
    "make_synthetic_task",
    "request_digest",
    "smooth_nll",
    "smooth_probability",
    "synthetic_score",
]
