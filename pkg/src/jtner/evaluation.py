"""Span-level exact-match scoring and the same-seed base vs multitask comparison."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .datagen import LabeledQuery
from .encoder import encode_batch
from .heads import (
    B_STORE,
    I_STORE,
    O,
    gate_on_intent,
    intent_scores,
    ner_logits,
    predict_tags,
    query_intent,
    repair_bio,
)
from .trainer import Checkpoint

COLUMNS = ("Precision", "Recall", "F-1 Score")


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int  # inclusive
    label: str = "STORE"


def extract_spans(tags: Sequence[str]) -> List[Span]:
    """Maximal ``B (I)*`` runs, left to right. Expects valid BIO."""
    spans = []
    start = None
    for i, t in enumerate(tags):
        if t == I_STORE and start is not None:
            continue
        if start is not None:
            spans.append(Span(start, i - 1))
            start = None
        if t == B_STORE:
            start = i
    if start is not None:
        spans.append(Span(start, len(tags) - 1))
    return spans


def spans_to_tags(spans: Sequence[Span], n: int) -> List[str]:
    tags = [O] * n
    for s in spans:
        tags[s.start] = B_STORE
        for i in range(s.start + 1, s.end + 1):
            tags[i] = I_STORE
    return tags


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class ModelScore:
    model: str
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, model: str, tp: int, fp: int, fn: int) -> "ModelScore":
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        return cls(model, p, r, f1, tp, fp, fn)


def span_counts(gold: Sequence[str], predicted: Sequence[str]) -> Tuple[int, int, int]:
    g = set(extract_spans(gold))
    p = set(extract_spans(predicted))
    tp = len(g & p)
    return tp, len(p) - tp, len(g) - tp


def score(gold: Sequence[LabeledQuery], predicted: Sequence[Sequence[str]], model: str = "model") -> ModelScore:
    """Micro-averaged exact-match span precision/recall/F1."""
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold queries but {len(predicted)} predictions")
    tp = fp = fn = 0
    for q, tags in zip(gold, predicted):
        if len(tags) != len(q.tags):
            raise ValueError(f"prediction length {len(tags)} != query length {len(q.tags)}")
        a, b, c = span_counts(q.tags, tags)
        tp, fp, fn = tp + a, fp + b, fn + c
    return ModelScore.from_counts(model, tp, fp, fn)


@dataclass
class Tagged:
    tokens: Tuple[str, ...]
    tags: List[str]
    scores: np.ndarray  # per-token intent logits

    @property
    def intent(self) -> Tuple[bool, float]:
        return query_intent(self.scores)


def tag_token_lists(
    ckpt: Checkpoint,
    token_lists: Sequence[Sequence[str]],
    gate: Optional[bool] = None,
    chunk: int = 64,
) -> List[Tagged]:
    """Tag queries with a frozen checkpoint: argmax, then BIO repair.

    ``gate`` overrides the checkpoint's ``gate_entities_on_intent`` flag.
    """
    gate = ckpt.train.gate_entities_on_intent if gate is None else gate
    params = ckpt.model_params()
    out = []
    for start in range(0, len(token_lists), chunk):
        group = token_lists[start : start + chunk]
        h = encode_batch([ckpt.vocab.encode(t) for t in group], params, ckpt.encoder)
        logits = ner_logits(h, params).data
        scores = intent_scores(h, params).data
        row = 0
        for tokens in group:
            n = len(tokens)
            tags = repair_bio(predict_tags(logits[row : row + n]))
            s = scores[row : row + n].copy()
            if gate:
                tags = gate_on_intent(tags, query_intent(s)[0])
            out.append(Tagged(tuple(tokens), tags, s))
            row += n
    return out


def evaluate(ckpt: Checkpoint, test: Sequence[LabeledQuery], model: str = "model") -> ModelScore:
    tagged = tag_token_lists(ckpt, [q.tokens for q in test])
    return score(test, [t.tags for t in tagged], model)


def token_accuracy(ckpt: Checkpoint, queries: Sequence[LabeledQuery]) -> float:
    tagged = tag_token_lists(ckpt, [q.tokens for q in queries], gate=False)
    hits = sum(a == b for q, t in zip(queries, tagged) for a, b in zip(q.tags, t.tags))
    return hits / sum(len(q) for q in queries)


@dataclass
class EvalReport:
    rows: List[ModelScore]
    test_size: int
    seed: Optional[int] = None

    @property
    def deltas(self) -> Optional[dict]:
        """First row minus second row (multitask minus base in a comparison)."""
        if len(self.rows) < 2:
            return None
        a, b = self.rows[0], self.rows[1]
        return {"precision": a.precision - b.precision, "recall": a.recall - b.recall, "f1": a.f1 - b.f1}

    def to_table(self) -> str:
        lines = [
            f"Span-level exact match, {self.test_size} test queries"
            + ("" if self.seed is None else f", seed {self.seed}"),
            f"{'Algorithm':<16}{COLUMNS[0]:>11}{COLUMNS[1]:>9}{COLUMNS[2]:>11}",
        ]
        for r in self.rows:
            lines.append(f"{r.model:<16}{r.precision:>11.2%}{r.recall:>9.2%}{r.f1:>11.4f}")
        d = self.deltas
        if d is not None:
            lines.append(f"{'delta':<16}{d['precision']:>+11.2%}{d['recall']:>+9.2%}{d['f1']:>+11.4f}")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        keys = ("model", "precision", "recall", "f1", "tp", "fp", "fn")
        return "\n".join(json.dumps({k: asdict(r)[k] for k in keys}) for r in self.rows)


def compare(base: Checkpoint, multitask: Checkpoint, test: Sequence[LabeledQuery]) -> EvalReport:
    """Tag ``test`` with both models and report the multitask row first."""
    if base.vocab != multitask.vocab:
        raise ValueError("checkpoints were trained with different vocabularies")
    if base.tags != multitask.tags:
        raise ValueError("checkpoints use different tag sets")
    rows = [evaluate(multitask, test, "multitask"), evaluate(base, test, "base")]
    seed = multitask.train.seed if multitask.train.seed == base.train.seed else None
    return EvalReport(rows, len(test), seed)


@dataclass
class IntentRow:
    tokens: Tuple[str, ...]
    scores: List[float]
    mean_score: float
    is_store_lookup: bool


def intent_report(ckpt: Checkpoint, test: Sequence[LabeledQuery]) -> List[IntentRow]:
    tagged = tag_token_lists(ckpt, [q.tokens for q in test], gate=False)
    return [
        IntentRow(q.tokens, t.scores.tolist(), t.intent[1], q.is_store_lookup)
        for q, t in zip(test, tagged)
    ]


def mean_intent_by_class(rows: Sequence[IntentRow]) -> Tuple[float, float]:
    """Mean query-level intent score over (store-lookup, other) rows."""
    store = [r.mean_score for r in rows if r.is_store_lookup]
    other = [r.mean_score for r in rows if not r.is_store_lookup]
    return float(np.mean(store)), float(np.mean(other))
