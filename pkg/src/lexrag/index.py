"""The two index structures behind retrieval, plus their on-disk form.

A corpus is indexed twice: an exact keyword-to-document mapping over
normalized phrases, and a vector store of unit-normalized embeddings queried
by cosine similarity (dot product, since rows are unit vectors).  Top-K is
exact brute force: corpora here are dictionary-scale, and exactness is what
makes the search testable against a full-sort oracle.

Index directory layout::

    manifest.json       version / dim / count / embedder_id / created_at /
                        max_phrase_len
    keyword_index.json  normalized phrase -> array of document ids
    docs.jsonl          Documents, one per line
    vectors.bin         binary vector payload (see below)
    cache/embeddings.jsonl   optional embedding cache

``vectors.bin``, little-endian: magic ``LRXV``, version u32 (=1), dim u32,
count u64, then ``count`` records of (id_len u16, id UTF-8 bytes,
dim × float32).
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
import unicodedata
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backends import Embedder
from .corpus import DICTIONARY_KIND, Document, load_documents, save_documents

MAGIC = b"LRXV"
FORMAT_VERSION = 1
MAX_PHRASE_LEN = 4
UNIT_NORM_TOL = 1e-4

MANIFEST_FILE = "manifest.json"
KEYWORD_FILE = "keyword_index.json"
DOCS_FILE = "docs.jsonl"
VECTORS_FILE = "vectors.bin"
CACHE_FILE = "cache/embeddings.jsonl"


class IndexBuildError(Exception):
    """Embedding or construction failure while building an index."""


class IndexFormatError(Exception):
    """Corrupt or inconsistent on-disk index data."""


def _strip_punctuation(word: str) -> str:
    start, end = 0, len(word)
    while start < end and unicodedata.category(word[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(word[end - 1]).startswith("P"):
        end -= 1
    return word[start:end]


def normalize_keyword(text: str) -> str:
    """NFC + casefold, strip leading/trailing punctuation per word, collapse
    whitespace.  May return an empty string; the caller decides what that means.
    """
    text = unicodedata.normalize("NFC", text).casefold()
    text = unicodedata.normalize("NFC", text)
    words = [_strip_punctuation(w) for w in text.split()]
    return " ".join(w for w in words if w)


@dataclass
class KeywordIndex:
    """Exact-match mapping from normalized phrase to sorted document ids."""

    entries: dict[str, list[str]]
    max_phrase_len: int = MAX_PHRASE_LEN


def build_keyword_index(docs: Sequence[Document]) -> KeywordIndex:
    """Index dictionary documents under their normalized headword and example
    documents under each source-text unigram.

    ``max_phrase_len`` records the longest indexed phrase, capped at
    ``MAX_PHRASE_LEN``; longer headwords are still indexed and remain exact-
    lookup reachable.
    """
    if not docs:
        raise ValueError("cannot build a keyword index from zero documents")
    if len({doc.id for doc in docs}) != len(docs):
        raise ValueError("document ids must be unique")
    mapping: dict[str, set[str]] = {}
    longest = 0
    for doc in docs:
        if doc.kind == DICTIONARY_KIND:
            phrases: Iterable[str] = [normalize_keyword(doc.source_text)]
        else:
            phrases = normalize_keyword(doc.source_text).split()
        for phrase in phrases:
            if not phrase:
                continue
            longest = max(longest, len(phrase.split()))
            mapping.setdefault(phrase, set()).add(doc.id)
    entries = {phrase: sorted(ids) for phrase, ids in mapping.items()}
    return KeywordIndex(entries=entries, max_phrase_len=min(max(longest, 1), MAX_PHRASE_LEN))


def keyword_lookup(index: KeywordIndex, phrase: str) -> list[str]:
    """Exact lookup of the normalized phrase; misses yield an empty list."""
    return list(index.entries.get(normalize_keyword(phrase), []))


@dataclass(eq=False)
class VectorIndex:
    """Ordered unit vectors, one float32 row per document."""

    dim: int
    embedder_id: str
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape != (len(self.ids), self.dim):
            raise IndexBuildError(
                f"vector payload shape {self.vectors.shape} does not match "
                f"{len(self.ids)} ids x dim {self.dim}"
            )
        if len(set(self.ids)) != len(self.ids):
            raise IndexBuildError("vector index ids must be unique")
        if len(self.ids):
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            bad = np.where(np.abs(norms - 1.0) > UNIT_NORM_TOL)[0]
            if bad.size:
                raise IndexBuildError(
                    f"row {bad[0]} (id {self.ids[bad[0]]!r}) has norm {norms[bad[0]]:.6f}, "
                    "expected unit length"
                )

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def rows(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(self.ids, self.vectors))


@dataclass(frozen=True)
class IndexManifest:
    dim: int
    count: int
    embedder_id: str
    created_at: str
    max_phrase_len: int
    version: int = FORMAT_VERSION

    @classmethod
    def create(cls, keyword: KeywordIndex, vector: VectorIndex) -> "IndexManifest":
        return cls(
            dim=vector.dim,
            count=vector.count,
            embedder_id=vector.embedder_id,
            created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            max_phrase_len=keyword.max_phrase_len,
        )


def cache_key(embedder_id: str, text: str) -> str:
    digest = hashlib.sha256(
        embedder_id.encode("utf-8") + b"\x00" + text.encode("utf-8")
    )
    return digest.hexdigest()


class EmbeddingCache:
    """Append-only JSONL cache of raw embedder output, keyed by the SHA-256
    of (embedder_id, text).  Backend calls are billable and slow; the cache
    makes rebuilds reproducible and free after the first run.

    Reads are lock-free once loaded; appends are serialized.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, list[float]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.is_file():
            for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    vector = [float(v) for v in obj["vector"]]
                    if len(vector) != int(obj["dim"]):
                        raise ValueError("dim field disagrees with vector length")
                    self._entries[obj["key"]] = vector
                except (ValueError, KeyError, TypeError) as exc:
                    raise IndexFormatError(f"{self.path}:{lineno}: bad cache entry: {exc}") from exc

    def get(self, embedder_id: str, text: str) -> list[float] | None:
        vector = self._entries.get(cache_key(embedder_id, text))
        if vector is None:
            self.misses += 1
            return None
        self.hits += 1
        return vector

    def put(self, embedder_id: str, text: str, vector: Sequence[float]) -> None:
        key = cache_key(embedder_id, text)
        record = json.dumps(
            {"key": key, "dim": len(vector), "vector": list(map(float, vector))}
        )
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = list(map(float, vector))
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(record + "\n")


def _unit_rows(raw: list[list[float]], ids: Sequence[str], dim: int) -> np.ndarray:
    matrix = np.asarray(raw, dtype=np.float64)
    if matrix.shape != (len(ids), dim):
        raise IndexBuildError(
            f"embedder returned shape {matrix.shape}, expected ({len(ids)}, {dim})"
        )
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise IndexBuildError(
            f"embedder returned a zero vector for document {ids[zero[0]]!r}; cannot normalize"
        )
    return (matrix / norms[:, None]).astype(np.float32)


def build_vector_index(
    docs: Sequence[Document],
    embedder: Embedder,
    batch_size: int = 32,
    cache: EmbeddingCache | None = None,
) -> VectorIndex:
    """Embed each document's render_text (in document order), unit-normalize,
    and assemble the vector index.  Texts already in the cache are served
    from it and never reach the backend.
    """
    if not docs:
        raise ValueError("cannot build a vector index from zero documents")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    raw: dict[str, list[float]] = {}
    pending: list[str] = []
    for doc in docs:
        text = doc.render_text
        if text in raw:
            continue
        cached = cache.get(embedder.embedder_id, text) if cache is not None else None
        if cached is not None:
            raw[text] = cached
        else:
            raw[text] = []  # placeholder keeps first-seen order
            pending.append(text)

    dim: int | None = None
    for start in range(0, len(pending), batch_size):
        batch = pending[start : start + batch_size]
        vectors = embedder.embed_texts(batch)
        if len(vectors) != len(batch):
            raise IndexBuildError(
                f"embedder returned {len(vectors)} vectors for {len(batch)} texts"
            )
        for text, vector in zip(batch, vectors):
            if dim is None:
                dim = len(vector)
            elif len(vector) != dim:
                raise IndexBuildError(
                    f"embedding dimension drifted from {dim} to {len(vector)} within one build"
                )
            raw[text] = list(map(float, vector))
            if cache is not None:
                cache.put(embedder.embedder_id, text, vector)

    dims = {len(v) for v in raw.values()}
    if len(dims) != 1:
        raise IndexBuildError(f"inconsistent embedding dimensions: {sorted(dims)}")
    dim = dims.pop()

    ids = [doc.id for doc in docs]
    matrix = _unit_rows([raw[doc.render_text] for doc in docs], ids, dim)
    return VectorIndex(dim=dim, embedder_id=embedder.embedder_id, ids=ids, vectors=matrix)


def vector_topk(
    index: VectorIndex, query_vec: Sequence[float], k: int
) -> list[tuple[str, float]]:
    """Exact cosine top-K: score every row by dot product against the unit
    query, sort descending, break score ties by ascending document id."""
    if k < 0:
        raise ValueError("k must be >= 0")
    query = np.asarray(query_vec, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query dim {query.shape} does not match index dim {index.dim}")
    norm = float(np.linalg.norm(query))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"query vector norm {norm:.6f} is not unit length")
    if k == 0 or index.count == 0:
        return []
    scores = index.vectors.astype(np.float64) @ query
    ranked = sorted(zip(index.ids, scores), key=lambda item: (-item[1], item[0]))
    return [(doc_id, float(score)) for doc_id, score in ranked[:k]]


@dataclass
class IndexBundle:
    """Everything loaded from one index directory."""

    keyword: KeywordIndex
    vector: VectorIndex
    manifest: IndexManifest
    docs: list[Document]
    doc_map: dict[str, Document] = field(init=False)

    def __post_init__(self) -> None:
        self.doc_map = {doc.id: doc for doc in self.docs}


def _write_vectors(path: Path, vector: VectorIndex) -> None:
    with path.open("wb") as fh:
        fh.write(struct.pack("<4sIIQ", MAGIC, FORMAT_VERSION, vector.dim, vector.count))
        for doc_id, row in zip(vector.ids, vector.vectors):
            encoded = doc_id.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(np.ascontiguousarray(row, dtype="<f4").tobytes())


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise IndexFormatError(f"vectors.bin truncated while reading {what}")
    return data


def _read_vectors(path: Path, embedder_id: str) -> VectorIndex:
    with path.open("rb") as fh:
        header = _read_exact(fh, struct.calcsize("<4sIIQ"), "header")
        magic, version, dim, count = struct.unpack("<4sIIQ", header)
        if magic != MAGIC:
            raise IndexFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"unsupported vectors.bin version {version}")
        ids: list[str] = []
        rows = []
        for _ in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, "id length"))
            ids.append(_read_exact(fh, id_len, "document id").decode("utf-8"))
            payload = _read_exact(fh, 4 * dim, "vector row")
            rows.append(np.frombuffer(payload, dtype="<f4"))
        if fh.read(1):
            raise IndexFormatError("vectors.bin has trailing bytes beyond declared count")
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    try:
        return VectorIndex(dim=dim, embedder_id=embedder_id, ids=ids, vectors=matrix)
    except IndexBuildError as exc:
        raise IndexFormatError(f"vectors.bin payload invalid: {exc}") from exc


def save_index(
    keyword: KeywordIndex,
    vector: VectorIndex,
    manifest: IndexManifest,
    docs: Sequence[Document],
    out_dir: str | Path,
) -> None:
    """Persist one index directory (manifest, keyword map, docs, vectors)."""
    if manifest.count != vector.count:
        raise IndexFormatError(
            f"manifest count {manifest.count} does not match vector rows {vector.count}"
        )
    if manifest.dim != vector.dim:
        raise IndexFormatError(
            f"manifest dim {manifest.dim} does not match vector dim {vector.dim}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST_FILE).write_text(
        json.dumps(
            {
                "version": manifest.version,
                "dim": manifest.dim,
                "count": manifest.count,
                "embedder_id": manifest.embedder_id,
                "created_at": manifest.created_at,
                "max_phrase_len": manifest.max_phrase_len,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    (out / KEYWORD_FILE).write_text(
        json.dumps(keyword.entries, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    save_documents(list(docs), out / DOCS_FILE)
    _write_vectors(out / VECTORS_FILE, vector)


def load_index(index_dir: str | Path) -> IndexBundle:
    """Load and cross-validate an index directory written by :func:`save_index`."""
    root = Path(index_dir)
    manifest_path = root / MANIFEST_FILE
    if not manifest_path.is_file():
        raise IndexFormatError(f"{root} is not an index directory (missing {MANIFEST_FILE})")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest = IndexManifest(
            version=int(raw["version"]),
            dim=int(raw["dim"]),
            count=int(raw["count"]),
            embedder_id=str(raw["embedder_id"]),
            created_at=str(raw["created_at"]),
            max_phrase_len=int(raw["max_phrase_len"]),
        )
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"{manifest_path}: malformed manifest: {exc}") from exc
    if manifest.version != FORMAT_VERSION:
        raise IndexFormatError(f"unsupported index version {manifest.version}")

    try:
        entries = json.loads((root / KEYWORD_FILE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"{root / KEYWORD_FILE}: {exc}") from exc
    if not isinstance(entries, dict) or not all(
        isinstance(ids, list) and all(isinstance(i, str) for i in ids)
        for ids in entries.values()
    ):
        raise IndexFormatError(f"{root / KEYWORD_FILE}: expected phrase -> [ids] object")
    keyword = KeywordIndex(
        entries={phrase: list(ids) for phrase, ids in entries.items()},
        max_phrase_len=manifest.max_phrase_len,
    )

    docs = load_documents(root / DOCS_FILE)
    vector = _read_vectors(root / VECTORS_FILE, manifest.embedder_id)

    if vector.count != manifest.count:
        raise IndexFormatError(
            f"manifest count {manifest.count} does not match vectors.bin rows {vector.count}"
        )
    if vector.dim != manifest.dim:
        raise IndexFormatError(
            f"manifest dim {manifest.dim} does not match vectors.bin dim {vector.dim}"
        )
    known = {doc.id for doc in docs}
    missing = [doc_id for doc_id in vector.ids if doc_id not in known]
    for ids in keyword.entries.values():
        missing.extend(doc_id for doc_id in ids if doc_id not in known)
    if missing:
        raise IndexFormatError(f"index refers to unknown document ids: {sorted(set(missing))[:5]}")
    return IndexBundle(keyword=keyword, vector=vector, manifest=manifest, docs=docs)
