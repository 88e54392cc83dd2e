"""Toy corpora with known context structure, for sanity checks and demos."""

from __future__ import annotations

import string

import numpy as np

from .data import Document


def _lexicon(rng, size, min_len, max_len, alphabet):
    words = set()
    while len(words) < size:
        n = int(rng.integers(min_len, max_len + 1))
        w = "".join(rng.choice(list(alphabet), size=n))
        if w != w[::-1] and w[::-1] not in words:
            words.add(w)
    return sorted(words)


def mirrored_char_corpus(n_per_class=2000, words_per_doc=2, lexicon_size=20, min_len=3, max_len=4,
                         seed=0, alphabet=string.ascii_lowercase):
    """Two "languages" over one alphabet: class ``b`` spells every word of class ``a`` backwards.

    Both classes therefore share the same character unigram distribution while
    their character n-gram statistics differ. Returns shuffled documents whose
    raw context is ``{"lang": "a" | "b"}``.
    """
    rng = np.random.default_rng(seed)
    lex_a = _lexicon(rng, lexicon_size, min_len, max_len, alphabet)
    lexicons = {"a": lex_a, "b": [w[::-1] for w in lex_a]}
    docs = []
    for lang, lex in lexicons.items():
        for _ in range(n_per_class):
            words = rng.choice(lex, size=words_per_doc)
            docs.append(Document(" ".join(words), {"lang": lang}, label=lang))
    order = rng.permutation(len(docs))
    return [docs[i] for i in order]


def topic_word_corpus(n_per_class=1000, doc_len=8, shared_size=30, topic_size=30, topic_share=0.5, seed=0):
    """Bag-of-words documents from two topics.

    Each topic owns a disjoint set of high-frequency words; the rest of every
    document is drawn from a shared pool. Word order carries no information.
    """
    rng = np.random.default_rng(seed)
    shared = [f"w{i}" for i in range(shared_size)]
    topics = {"t0": [f"x{i}" for i in range(topic_size)], "t1": [f"y{i}" for i in range(topic_size)]}
    zipf = 1.0 / np.arange(1, max(shared_size, topic_size) + 1)
    p_shared = zipf[:shared_size] / zipf[:shared_size].sum()
    p_topic = zipf[:topic_size] / zipf[:topic_size].sum()
    docs = []
    for name, words in topics.items():
        for _ in range(n_per_class):
            from_topic = rng.random(doc_len) < topic_share
            toks = [words[rng.choice(topic_size, p=p_topic)] if t else shared[rng.choice(shared_size, p=p_shared)]
                    for t in from_topic]
            docs.append(Document(" ".join(toks), {"topic": name}, label=name))
    order = rng.permutation(len(docs))
    return [docs[i] for i in order]


def repeated_sentence(text="the cat sat on the mat", n=64, context=None):
    return [Document(text, dict(context or {"k": "a"}), label="a") for _ in range(n)]
