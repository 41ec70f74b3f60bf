"""Keyword-first retrieval with cosine fallback.

Queries are matched exactly against the keyword index first; the embedding
path runs only when keywords produce nothing (``strict_fallback``, the
default) or when there is room left under the result cap (``fill``).  The
vector query embeds the whole query sentence, not individual terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .backends import Embedder
from .corpus import Document
from .index import KeywordIndex, VectorIndex, keyword_lookup, normalize_keyword, vector_topk

KEYWORD = "keyword"
VECTOR = "vector"

POLICY_STRICT_FALLBACK = "strict_fallback"
POLICY_FILL = "fill"


class RetrievalError(Exception):
    """Inconsistent index/document set or unusable query embedding."""


@dataclass(frozen=True)
class RetrievalConfig:
    k_vector: int = 5
    k_total: int = 8
    policy: str = POLICY_STRICT_FALLBACK
    max_phrase_len: int = 4

    def __post_init__(self) -> None:
        if not 1 <= self.k_vector <= self.k_total:
            raise ValueError("need 1 <= k_vector <= k_total")
        if self.policy not in (POLICY_STRICT_FALLBACK, POLICY_FILL):
            raise ValueError(f"unknown retrieval policy {self.policy!r}")
        if self.max_phrase_len < 1:
            raise ValueError("max_phrase_len must be >= 1")


@dataclass(frozen=True)
class RetrievalResult:
    """One retrieved document with its score and provenance.  Keyword hits
    score 1.0 (the cosine ceiling); ``matched_phrase`` is set only for them."""

    doc: Document
    score: float
    provenance: str
    matched_phrase: str | None = None


def extract_query_terms(query: str, max_phrase_len: int) -> list[str]:
    """All n-grams of the normalized query for n = max_phrase_len..1, longest
    first, left to right within each length, first occurrence kept."""
    tokens = normalize_keyword(query).split()
    seen: set[str] = set()
    phrases: list[str] = []
    for n in range(min(max_phrase_len, len(tokens)), 0, -1):
        for start in range(len(tokens) - n + 1):
            phrase = " ".join(tokens[start : start + n])
            if phrase not in seen:
                seen.add(phrase)
                phrases.append(phrase)
    return phrases


def _doc_for(doc_id: str, docs: Mapping[str, Document]) -> Document:
    try:
        return docs[doc_id]
    except KeyError:
        raise RetrievalError(
            f"index refers to document {doc_id!r} that is not in the loaded document set"
        ) from None


def retrieve(
    query: str,
    kw_index: KeywordIndex,
    vec_index: VectorIndex,
    docs: Mapping[str, Document],
    embedder: Embedder,
    config: RetrievalConfig = RetrievalConfig(),
) -> list[RetrievalResult]:
    """Run the two retrieval phases and merge, capped at ``k_total``.

    Phase 1 walks the extracted phrases in order and appends exact keyword
    hits.  Phase 2 embeds the full query and appends cosine top-K hits; it
    runs only on zero keyword hits under ``strict_fallback``, or whenever
    the cap is not yet filled under ``fill``.  Already-included documents
    are never duplicated.  Deterministic for a deterministic embedder.
    """
    results: list[RetrievalResult] = []
    included: set[str] = set()

    for phrase in extract_query_terms(query, config.max_phrase_len):
        if len(results) >= config.k_total:
            break
        for doc_id in keyword_lookup(kw_index, phrase):
            if doc_id in included:
                continue
            results.append(
                RetrievalResult(
                    doc=_doc_for(doc_id, docs),
                    score=1.0,
                    provenance=KEYWORD,
                    matched_phrase=phrase,
                )
            )
            included.add(doc_id)
            if len(results) >= config.k_total:
                break

    run_vector = (
        not results
        if config.policy == POLICY_STRICT_FALLBACK
        else len(results) < config.k_total
    )
    if run_vector and vec_index.count:
        query_vec = np.asarray(embedder.embed_texts([query])[0], dtype=np.float64)
        norm = float(np.linalg.norm(query_vec))
        if norm == 0.0:
            raise RetrievalError("embedder returned a zero vector for the query")
        unit = (query_vec / norm).tolist()
        for doc_id, score in vector_topk(vec_index, unit, config.k_vector):
            if len(results) >= config.k_total:
                break
            if doc_id in included:
                continue
            results.append(
                RetrievalResult(doc=_doc_for(doc_id, docs), score=score, provenance=VECTOR)
            )
            included.add(doc_id)
    return results
