"""Corpus ingestion: preprocessing, vocabulary, JSONL loading and batching.

Every document is framed as ``<s> tok_1 ... tok_n </s>``; the model predicts
positions 1..n+1, so the end sentinel counts as a predicted token everywhere
(loss, perplexity, unigram counts).

Word-mode preprocessing lowercases, then keeps maximal runs of letters and
digits, allowing a single apostrophe or hyphen *between* two such runs
("don't", "5-8pm"). Every other character is a separator, so all remaining
punctuation is dropped.
"""

from __future__ import annotations

import json
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .context import ContextSchema, class_weights, encode_raw
from .errors import EmptyDocumentError, ParseError, SchemaError, VocabError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")

_WORD_RE = re.compile(r"[^\W_]+(?:['’-][^\W_]+)*")


def preprocess(text: str, unit: str = "word", cap: Optional[int] = None) -> list:
    text = text.lower()
    if unit == "word":
        tokens = _WORD_RE.findall(text)
    elif unit == "character":
        tokens = list(text.strip())
    else:
        raise ValueError(f"unit must be 'word' or 'character', got {unit!r}")
    if cap is not None:
        tokens = tokens[:cap]
    if not tokens:
        raise EmptyDocumentError(f"no tokens left after preprocessing {text[:40]!r}")
    return tokens


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids 0-3."""

    def __init__(self, tokens: Sequence[str], unit: str = "word", counts: Optional[Mapping[str, int]] = None):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.tokens = tokens
        self.unit = unit
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.counts = dict(counts or {})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str], frame: bool = True) -> list:
        ids = [self.index.get(t, UNK) for t in tokens]
        return [BOS, *ids, EOS] if frame else ids

    def decode(self, ids: Iterable[int]) -> list:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return out

    def join(self, tokens: Sequence[str]) -> str:
        return "".join(tokens) if self.unit == "character" else " ".join(tokens)

    def dump(self) -> str:
        """``id<TAB>token<TAB>count`` lines."""
        return "".join(f"{i}\t{t}\t{self.counts.get(t, 0)}\n" for i, t in enumerate(self.tokens))

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.unit == other.unit


def build_vocab(train_tokens: Iterable[Sequence[str]], unit: str = "word", min_count: int = 1,
                max_size: Optional[int] = None) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first, ties lexical."""
    counts = Counter()
    for toks in train_tokens:
        counts.update(toks)
    kept = sorted((t for t, n in counts.items() if n >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max(0, max_size - len(RESERVED))]
    return Vocabulary(list(RESERVED) + kept, unit, {t: counts[t] for t in kept})


@dataclass
class Document:
    text: str
    raw_context: dict
    context: Optional[tuple] = None
    tokens: Optional[list] = None
    label: Optional[str] = None

    @property
    def n_predicted(self) -> int:
        return len(self.tokens) - 1


def _parse_record(line: str, lineno: int, schema: Optional[ContextSchema]) -> Document:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not a JSON object", lineno)
    if not isinstance(rec.get("text"), str):
        raise ParseError("missing or non-string 'text'", lineno)
    ctx = rec.get("context", {})
    if not isinstance(ctx, dict):
        raise ParseError("'context' is not an object", lineno)
    value = None
    if schema is not None:
        try:
            value = schema.value(ctx)
        except SchemaError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from None
    label = rec.get("label")
    return Document(rec["text"], ctx, value, None, None if label is None else str(label))


def load_jsonl(path, schema: Optional[ContextSchema] = None, lenient: bool = False) -> list:
    """Read ``{"context": {...}, "text": "..."}`` records, one per line.

    Blank lines are ignored. With ``lenient`` a malformed line is skipped with
    a warning instead of raising.
    """
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(_parse_record(line, lineno, schema))
            except (ParseError, SchemaError) as exc:
                if not lenient:
                    raise
                warnings.warn(f"{path}: skipped {exc}", stacklevel=2)
    return docs


def write_jsonl(path, docs: Iterable[Document]):
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            rec = {"context": d.raw_context, "text": d.text}
            if d.label is not None:
                rec["label"] = d.label
            fh.write(json.dumps(rec) + "\n")


def tokenize(docs: Sequence[Document], vocab: Vocabulary, schema: Optional[ContextSchema] = None,
             cap: Optional[int] = None) -> list:
    """Attach framed token ids (and contexts, when ``schema`` is given); empty documents are dropped."""
    out = []
    for d in docs:
        try:
            toks = preprocess(d.text, vocab.unit, cap)
        except EmptyDocumentError:
            warnings.warn(f"dropped empty document {d.text[:40]!r}", stacklevel=2)
            continue
        ctx = schema.value(d.raw_context) if schema is not None else d.context
        out.append(Document(d.text, d.raw_context, ctx, vocab.encode(toks), d.label))
    return out


def unigram_counts(docs: Sequence[Document], vocab_size: int) -> np.ndarray:
    """Counts of predicted tokens (positions 1.., end sentinel included)."""
    counts = np.zeros(vocab_size, dtype=np.int64)
    for d in docs:
        np.add.at(counts, np.asarray(d.tokens[1:], dtype=np.int64), 1)
    return counts


@dataclass
class Corpus:
    train: list
    dev: list
    test: list
    schema: ContextSchema
    vocab: Vocabulary
    unigram: np.ndarray = field(repr=False, default=None)

    @property
    def proposal(self) -> np.ndarray:
        total = self.unigram.sum()
        return self.unigram / total

    @classmethod
    def from_documents(cls, train, dev=(), test=(), unit="word", cap=None, min_count=1,
                       schema: Optional[ContextSchema] = None, kinds=None, context_min_count=1,
                       max_vocab=None) -> "Corpus":
        from .context import build_schema

        if not train:
            raise ValueError("training split is empty")
        if schema is None:
            schema = build_schema([d.raw_context for d in train], kinds, context_min_count)
        train_toks = []
        for d in train:
            try:
                train_toks.append(preprocess(d.text, unit, cap))
            except EmptyDocumentError:
                pass
        vocab = build_vocab(train_toks, unit, min_count, max_vocab)
        tr = tokenize(train, vocab, schema, cap)
        return cls(tr, tokenize(dev, vocab, schema, cap), tokenize(test, vocab, schema, cap),
                   schema, vocab, unigram_counts(tr, len(vocab)))


@dataclass
class Batch:
    inputs: np.ndarray      # (B, T) ids fed at each step
    targets: np.ndarray     # (B, T) ids to predict
    mask: np.ndarray        # (B, T) 1.0 on real positions
    raw_context: np.ndarray  # (B, raw width)
    class_w: np.ndarray     # (B, number of categorical classes)
    index: np.ndarray       # (B,) positions in the source document list

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def collate(seqs: Sequence[Sequence[int]], contexts: Sequence[tuple], schema: ContextSchema,
            index=None) -> Batch:
    """Right-pad framed sequences into a single batch."""
    B = len(seqs)
    T = max(len(s) for s in seqs) - 1
    if T < 1:
        raise ValueError("sequences need at least two framed tokens")
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.float64)
    for b, s in enumerate(seqs):
        n = len(s) - 1
        inputs[b, :n] = s[:-1]
        targets[b, :n] = s[1:]
        mask[b, :n] = 1.0
    contexts = [c if c is not None else (None,) * len(schema) for c in contexts]
    raw = np.stack([encode_raw(schema, c) for c in contexts]) if len(schema) else np.zeros((B, 0))
    cw = np.stack([class_weights(schema, c) for c in contexts])
    idx = np.arange(B) if index is None else np.asarray(index)
    return Batch(inputs, targets, mask, raw, cw, idx)


def make_batches(docs: Sequence[Document], batch_size: int, schema: ContextSchema,
                 seed: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> list:
    """Length-bucketed, right-padded batches.

    Documents are sorted by length (ties in a seeded random order), cut into
    consecutive groups of ``batch_size`` and the group order is shuffled. With
    neither ``seed`` nor ``rng`` the order is the deterministic sort order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if rng is None and seed is not None:
        rng = np.random.default_rng(seed)
    order = np.arange(len(docs))
    if rng is not None:
        order = rng.permutation(len(docs))
    lengths = np.array([len(docs[i].tokens) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([docs[i].tokens for i in g], [docs[i].context for i in g], schema, g) for g in groups]
