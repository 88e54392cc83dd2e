"""Perplexity, generative classification and the analysis helpers.

Functions that score text accept a single :class:`LanguageModel` or a list of
models; a list is treated as an ensemble whose per-token probabilities (not
logits) are averaged.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .context import ContextSchema
from .data import Document, collate, make_batches, preprocess
from .errors import CapabilityError, ConfigError
from .model import LanguageModel, batch_token_logprobs, context_embedding, softmax_offset


def _as_models(model) -> list:
    models = list(model) if isinstance(model, (list, tuple)) else [model]
    if not models:
        raise ValueError("no models given")
    return models


def _doc_token_logprobs(models, docs: Sequence[Document], context=None, batch_size: int = 64) -> list:
    """Per-document arrays of predicted-token log-probabilities.

    ``context`` overrides every document's own context when given.
    """
    models = _as_models(models)
    schema = models[0].schema
    if context is not None:
        docs = [Document(d.text, d.raw_context, context, d.tokens, d.label) for d in docs]
    out: list = [None] * len(docs)
    for batch in make_batches(docs, batch_size, schema):
        per_model = np.stack([batch_token_logprobs(m, batch) for m in models])
        if len(models) == 1:
            lp = per_model[0]
        else:
            mx = per_model.max(axis=0)
            lp = mx + np.log(np.mean(np.exp(per_model - mx), axis=0))
        for row, i in enumerate(batch.index):
            out[i] = lp[row, :len(docs[i].tokens) - 1].astype(np.float64)
    return out


@dataclass
class EvalReport:
    perplexity: float
    tokens: int
    doc_logprobs: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"perplexity": self.perplexity, "tokens": self.tokens}

    def to_text(self) -> str:
        return f"{'perplexity':<12}{self.perplexity:>14.6f}\n{'tokens':<12}{self.tokens:>14d}\n"


def perplexity(model, docs: Sequence[Document], batch_size: int = 64) -> EvalReport:
    """exp(-total log-likelihood / predicted tokens), each document under its own context."""
    if not docs:
        raise ValueError("perplexity needs at least one document")
    per_doc = _doc_token_logprobs(model, docs, batch_size=batch_size)
    doc_lp = [math.fsum(x) for x in per_doc]
    n = sum(x.shape[0] for x in per_doc)
    return EvalReport(math.exp(-math.fsum(doc_lp) / n), n, doc_lp)


@dataclass
class ClassificationReport:
    labels: list
    accuracy: float
    confusion: np.ndarray          # rows: true label, columns: predicted label
    predictions: list
    logprobs: np.ndarray           # (docs, labels) including the log prior

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "labels": list(self.labels),
                "confusion": self.confusion.tolist(), "predictions": list(self.predictions)}

    def to_text(self) -> str:
        w = max(8, *(len(str(l)) + 2 for l in self.labels))
        lines = [f"accuracy {self.accuracy:.4f}", "true \\ predicted".ljust(w + 4)]
        lines[-1] += "".join(str(l).rjust(w) for l in self.labels)
        for lab, row in zip(self.labels, self.confusion):
            lines.append(str(lab).ljust(w + 4) + "".join(str(int(x)).rjust(w) for x in row))
        return "\n".join(lines) + "\n"


def _log_prior(prior, n: int) -> np.ndarray:
    if prior is None:
        return np.zeros(n)
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != (n,) or np.any(prior < 0) or not prior.sum() > 0:
        raise ConfigError(f"prior must be {n} non-negative weights")
    with np.errstate(divide="ignore"):
        return np.log(prior / prior.sum())


def label_logprobs(model, docs: Sequence[Document], label_values: Sequence[tuple], prior=None) -> np.ndarray:
    """(docs, labels) matrix of log p(text | label) + log p(label)."""
    if not label_values:
        raise ValueError("classification needs at least one label")
    cols = []
    for value in label_values:
        cols.append([math.fsum(x) for x in _doc_token_logprobs(model, docs, context=value)])
    return np.array(cols, dtype=np.float64).T + _log_prior(prior, len(label_values))[None, :]


def classify(model, text, label_values: Sequence[tuple], prior=None) -> tuple:
    """Most probable label index for one text, and the per-label scores.

    ``text`` is either a raw string or a framed id sequence. Ties go to the
    lowest label index.
    """
    m0 = _as_models(model)[0]
    if isinstance(text, str):
        tokens = m0.vocab.encode(preprocess(text, m0.vocab.unit))
    else:
        tokens = list(text)
    doc = Document("", {}, None, tokens)
    scores = label_logprobs(model, [doc], label_values, prior)[0]
    return int(np.argmax(scores)), scores


def classify_corpus(model, docs: Sequence[Document], labels: Sequence[tuple], prior=None) -> ClassificationReport:
    """Generative classification of every document.

    ``labels`` is a list of ``(name, ContextValue)``. A document's true label
    is its ``label`` field when present, otherwise the label whose context
    equals the document's context.
    """
    if not labels:
        raise ValueError("classification needs at least one label")
    names = [n for n, _ in labels]
    values = [v for _, v in labels]
    scores = label_logprobs(model, docs, values, prior)
    pred = np.argmax(scores, axis=1)
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    truth = []
    for d in docs:
        if d.label is not None and d.label in names:
            truth.append(names.index(d.label))
        elif d.context in values:
            truth.append(values.index(d.context))
        else:
            raise ConfigError(f"document {d.text[:30]!r} matches none of the labels")
    for t, p in zip(truth, pred):
        confusion[t, p] += 1
    acc = float(np.trace(confusion)) / len(docs) if docs else math.nan
    return ClassificationReport(names, acc, confusion, [names[p] for p in pred], scores)


def log_likelihood_ratio(model, text, ctx_a: tuple, ctx_b: tuple) -> list:
    """Per predicted token: log p(token | history, a) - log p(token | history, b)."""
    m0 = _as_models(model)[0]
    if isinstance(text, str):
        tokens = m0.vocab.encode(preprocess(text, m0.vocab.unit))
    else:
        tokens = list(text)
    doc = Document("", {}, None, tokens)
    la = _doc_token_logprobs(model, [doc], context=ctx_a)[0]
    lb = _doc_token_logprobs(model, [doc], context=ctx_b)[0]
    names = m0.vocab.decode(tokens[1:]) if m0.vocab is not None else [str(t) for t in tokens[1:]]
    return list(zip(names, (la - lb).tolist()))


def top_boosted_words(model: LanguageModel, value: tuple, n: int = 10, include_reserved: bool = False) -> list:
    """Tokens with the largest softmax-bias offset under ``value``; ties in lexical order."""
    cfg = model.config
    if cfg.variant == "unadapted" or cfg.bias_mode == "off":
        raise CapabilityError("model has no softmax-bias adaptation")
    offset = softmax_offset(model.params, cfg, model.schema, value).astype(np.float64)
    tokens = model.vocab.tokens if model.vocab is not None else [str(i) for i in range(cfg.vocab_size)]
    start = 0 if include_reserved else 4
    ranked = sorted(range(start, len(tokens)), key=lambda i: (-offset[i], tokens[i]))
    return [(tokens[i], float(offset[i])) for i in ranked[:n]]


def context_embeddings(model: LanguageModel, values: Sequence[tuple]) -> np.ndarray:
    if not model.config.uses_encoder:
        raise CapabilityError(f"variant {model.config.variant} with bias_mode {model.config.bias_mode} "
                              "has no context encoder")
    return np.stack([context_embedding(model.params, model.config, model.schema, v) for v in values])


def export_context_embeddings(model: LanguageModel, values: Sequence[tuple], path) -> np.ndarray:
    """CSV with the context fields followed by the embedding components."""
    emb = context_embeddings(model, values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(model.schema.names + [f"c{j}" for j in range(emb.shape[1])])
        for v, row in zip(values, emb):
            w.writerow(model.schema.describe(v) + [repr(float(x)) for x in row])
    return emb


def write_ratios_csv(pairs, path_or_fh):
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "w", newline="", encoding="utf-8") if own else path_or_fh
    try:
        w = csv.writer(fh)
        w.writerow(["token", "log_ratio"])
        for tok, val in pairs:
            w.writerow([tok, repr(val)])
    finally:
        if own:
            fh.close()
