"""Synthetic store-lookup query corpus, tokenizer, vocabulary and dataset files.

Store-location and product lexicons share an ambiguous subset (``orange``,
``jasmine``, ...), so the same surface word is a STORE entity in one query
and an ordinary product word in another. Templates and lexicons live in
``data/lexicon.json``.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .heads import B_STORE, I_STORE, O, TAGS, is_valid_bio

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledQuery:
    tokens: Tuple[str, ...]
    tags: Tuple[str, ...]
    is_store_lookup: bool

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "is_store_lookup", bool(self.is_store_lookup))
        if len(self.tokens) != len(self.tags):
            raise DatasetError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        if not is_valid_bio(self.tags):
            raise DatasetError(f"invalid BIO sequence {list(self.tags)}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class GenConfig:
    n_queries: int = 2500
    store_fraction: float = 0.5
    ambiguity_rate: float = 0.4
    seed: int = 1

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        for name in ("store_fraction", "ambiguity_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@lru_cache(maxsize=None)
def load_lexicon() -> dict:
    text = resources.files("jtner").joinpath("data/lexicon.json").read_text(encoding="utf-8")
    return json.loads(text)


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(string.punctuation)
        if tok:
            out.append(tok)
    return out


def fill_template(template: str, fill: str, is_store_lookup: bool) -> LabeledQuery:
    """Instantiate one template; the ``{LOC}`` fill is tagged as a STORE span."""
    tokens, tags = [], []
    for part in template.split():
        if part in ("{LOC}", "{ITEM}"):
            words = fill.split()
            tokens.extend(words)
            if part == "{LOC}":
                tags.extend([B_STORE] + [I_STORE] * (len(words) - 1))
            else:
                tags.extend([O] * len(words))
        else:
            tokens.append(part)
            tags.append(O)
    return LabeledQuery(tokens, tags, is_store_lookup)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def generate_corpus(cfg: GenConfig) -> List[LabeledQuery]:
    lex = load_lexicon()
    rng = np.random.default_rng(cfg.seed)
    n_store = _round_half_up(cfg.n_queries * cfg.store_fraction)
    flags = np.zeros(cfg.n_queries, dtype=bool)
    flags[:n_store] = True
    rng.shuffle(flags)

    corpus = []
    for is_store in flags:
        templates = lex["store_templates"] if is_store else lex["other_templates"]
        template = templates[rng.integers(len(templates))]
        if rng.random() < cfg.ambiguity_rate:
            pool = lex["ambiguous"]
        else:
            pool = lex["locations"] if is_store else lex["items"]
        fill = pool[rng.integers(len(pool))]
        if is_store:
            query = fill_template(template.replace("{ITEM}", "{LOC}"), fill, True)
        else:
            query = fill_template(template.replace("{LOC}", "{ITEM}"), fill, False)
        corpus.append(query)
    return corpus


def split(
    corpus: Sequence[LabeledQuery], test_fraction: float = 0.2, seed: int = 0
) -> Tuple[List[LabeledQuery], List[LabeledQuery]]:
    """Stratified (by intent) shuffle-and-split; both halves keep corpus order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    if len(corpus) < 2:
        raise ValueError("need at least two queries to split")
    rng = np.random.default_rng(seed)
    test_idx: List[int] = []
    for label in (True, False):
        members = [i for i, q in enumerate(corpus) if q.is_store_lookup == label]
        perm = rng.permutation(members)
        test_idx.extend(int(i) for i in perm[: _round_half_up(len(members) * test_fraction)])
    in_test = set(test_idx)
    train = [q for i, q in enumerate(corpus) if i not in in_test]
    test = [q for i, q in enumerate(corpus) if i in in_test]
    return train, test


class Vocabulary:
    """Frozen token -> id map; ids 0 and 1 are reserved for padding and unknowns."""

    def __init__(self, tokens: Iterable[str]):
        self._tokens: List[str] = list(tokens)
        if self._tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with the reserved tokens")
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def lookup(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.lookup(t) for t in tokens]

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)


def build_vocab(train: Sequence[LabeledQuery]) -> Vocabulary:
    if not train:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    seen = {PAD: None, UNK: None}
    for q in train:
        for t in q.tokens:
            seen.setdefault(t, None)
    return Vocabulary(seen)


def query_to_json(q: LabeledQuery) -> str:
    record = {"tokens": list(q.tokens), "tags": list(q.tags), "intent": int(q.is_store_lookup)}
    return json.dumps(record, ensure_ascii=False)


def query_from_json(line: str) -> LabeledQuery:
    try:
        record = json.loads(line)
        tokens, tags, intent = record["tokens"], record["tags"], record["intent"]
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"malformed dataset record: {line[:80]!r}") from e
    if intent not in (0, 1) or any(t not in TAGS for t in tags):
        raise DatasetError(f"bad labels in record: {line[:80]!r}")
    return LabeledQuery(tokens, tags, bool(intent))


def write_dataset(path, queries: Iterable[LabeledQuery]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for q in queries:
            f.write(query_to_json(q) + "\n")


def read_dataset(path) -> List[LabeledQuery]:
    with open(Path(path), encoding="utf-8") as f:
        return [query_from_json(line) for line in f if line.strip()]
