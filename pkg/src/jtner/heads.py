"""Token-level NER and intent heads, plus BIO label helpers."""

from __future__ import annotations

from typing import List, Mapping, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

O, B_STORE, I_STORE = "O", "B-STORE", "I-STORE"
TAGS: Tuple[str, ...] = (O, B_STORE, I_STORE)
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}


def is_valid_bio(tags: Sequence[str]) -> bool:
    prev = O
    for t in tags:
        if t not in TAG_INDEX:
            return False
        if t == I_STORE and prev == O:
            return False
        prev = t
    return True


def ner_logits(h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Unnormalised tag scores ``[n, len(TAGS)]``."""
    w, b = params["ner.weight"], params["ner.bias"]
    return ad.add(ad.matmul(h, ad.transpose(w)), b)


def intent_scores(h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One signed store-lookup logit per token, shape ``[n]``."""
    w, b = params["intent.weight"], params["intent.bias"]
    s = ad.add(ad.matmul(h, ad.transpose(w)), b)
    return ad.reshape(s, (h.shape[0],))


def expand_intent_labels(is_store_lookup: bool, n: int) -> List[int]:
    """Copy the query-level intent bit onto each of its ``n`` tokens."""
    if n < 1:
        raise ValueError("a query needs at least one token")
    return [int(bool(is_store_lookup))] * n


def predict_tags(logits) -> List[str]:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index (O)
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return [TAGS[i] for i in np.argmax(data, axis=1)]


def repair_bio(tags: Sequence[str]) -> List[str]:
    """Rewrite every I-STORE that does not continue a span as B-STORE."""
    out = []
    prev = O
    for t in tags:
        if t == I_STORE and prev == O:
            t = B_STORE
        out.append(t)
        prev = t
    return out


def query_intent(scores) -> Tuple[bool, float]:
    """Aggregate per-token intent logits: ``(mean > 0, mean)``."""
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if data.size < 1:
        raise ValueError("cannot aggregate intent over an empty query")
    m = float(data.mean())
    return m > 0.0, m


def gate_on_intent(tags: Sequence[str], is_store_lookup: bool) -> List[str]:
    """Drop every STORE tag when the query is not a store lookup."""
    return list(tags) if is_store_lookup else [O] * len(tags)
