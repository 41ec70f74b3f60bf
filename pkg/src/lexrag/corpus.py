"""Ingestion of bilingual dictionaries and parallel examples.

Two input shapes are supported:

* Dictionary JSONL: one object per line with fields ``headword`` (required),
  ``target`` (required), ``definition``, ``part_of_speech`` and ``examples``
  (a list of ``[source, target]`` pairs).
* Parallel JSONL or TSV: fields ``source_text``, ``target_text``,
  ``source_lang``, ``target_lang``, ``provenance`` (TSV columns in that
  order, no header row).

All ingested text is NFC-normalized, since syllabary codepoints come in
composed and decomposed variants.  Both inputs are flattened into
:class:`Document` records, the unit that both indexes and the prompt
assembler operate on.
"""

from __future__ import annotations

import json
import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

# Hard cap on words per indexed keyword phrase; mirrors the keyword index.
MAX_PHRASE_LEN = 4

DICTIONARY_KIND = "dictionary"
EXAMPLE_KIND = "example"


class IngestError(Exception):
    """Raised for unreadable files, malformed lines, or invariant violations."""


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass(frozen=True)
class DictionaryEntry:
    """One source-language headword with its target-language translation."""

    headword: str
    target: str
    definition: str | None = None
    part_of_speech: str | None = None
    examples: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class ParallelExample:
    """An aligned sentence pair used as retrieval context."""

    source_text: str
    target_text: str
    source_lang: str
    target_lang: str
    provenance: str = ""


@dataclass(frozen=True)
class Document:
    """Unified retrievable unit; ``render_text`` is what gets embedded and
    inserted into prompts, and is always re-derivable from the other fields."""

    id: str
    kind: str
    source_text: str
    target_text: str
    render_text: str
    metadata: dict[str, str] = field(default_factory=dict)


def _require_str(obj: dict, key: str, where: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise IngestError(f"{where}: field {key!r} missing or not a string")
    return value


def _optional_str(obj: dict, key: str, where: str) -> str | None:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, str):
        raise IngestError(f"{where}: field {key!r} must be a string")
    return nfc(value)


def _clean_headword(raw: str) -> str:
    return " ".join(nfc(raw).split())


def _iter_lines(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"input file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise IngestError(f"{path} is not valid UTF-8: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            yield lineno, line


def load_dictionary(
    path: str | Path,
    fmt: str = "jsonl",
    max_phrase_len: int = MAX_PHRASE_LEN,
) -> list[DictionaryEntry]:
    """Read dictionary entries from a JSONL file, preserving line order.

    An empty file yields an empty list (with a warning) so keyword-only or
    example-only corpora remain possible.
    """
    if fmt != "jsonl":
        raise IngestError(f"unsupported dictionary format: {fmt!r}")
    entries: list[DictionaryEntry] = []
    for lineno, line in _iter_lines(path):
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"{where}: invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise IngestError(f"{where}: expected a JSON object")

        headword = _clean_headword(_require_str(obj, "headword", where))
        if not headword:
            raise IngestError(f"{where}: headword is empty after normalization")
        if len(headword.split()) > max_phrase_len:
            raise IngestError(
                f"{where}: headword {headword!r} exceeds {max_phrase_len} words"
            )
        target = nfc(_require_str(obj, "target", where)).strip()
        if not target:
            raise IngestError(f"{where}: target is empty")

        raw_examples = obj.get("examples") or []
        if not isinstance(raw_examples, list):
            raise IngestError(f"{where}: examples must be a list of [source, target] pairs")
        examples = []
        for pair in raw_examples:
            if (
                not isinstance(pair, (list, tuple))
                or len(pair) != 2
                or not all(isinstance(p, str) for p in pair)
            ):
                raise IngestError(f"{where}: examples must be a list of [source, target] pairs")
            examples.append((nfc(pair[0]), nfc(pair[1])))

        entries.append(
            DictionaryEntry(
                headword=headword,
                target=target,
                definition=_optional_str(obj, "definition", where),
                part_of_speech=_optional_str(obj, "part_of_speech", where),
                examples=tuple(examples),
            )
        )
    if not entries:
        logger.warning("dictionary file %s contained no entries", path)
    return entries


_PARALLEL_FIELDS = ("source_text", "target_text", "source_lang", "target_lang")


def _parallel_from_fields(
    source_text: str,
    target_text: str,
    source_lang: str,
    target_lang: str,
    provenance: str,
    where: str,
) -> ParallelExample:
    source_text = nfc(source_text).strip()
    target_text = nfc(target_text).strip()
    source_lang = nfc(source_lang).strip()
    target_lang = nfc(target_lang).strip()
    if not source_text or not target_text:
        raise IngestError(f"{where}: source_text and target_text must be non-empty")
    if not source_lang or not target_lang:
        raise IngestError(f"{where}: language codes must be non-empty")
    return ParallelExample(
        source_text=source_text,
        target_text=target_text,
        source_lang=source_lang,
        target_lang=target_lang,
        provenance=nfc(provenance).strip(),
    )


def load_parallel(path: str | Path, fmt: str = "jsonl") -> list[ParallelExample]:
    """Read aligned sentence pairs from JSONL or headerless 5-column TSV."""
    if fmt not in ("jsonl", "tsv"):
        raise IngestError(f"unsupported parallel format: {fmt!r}")
    examples: list[ParallelExample] = []
    for lineno, line in _iter_lines(path):
        where = f"{path}:{lineno}"
        if fmt == "tsv":
            columns = line.split("\t")
            if len(columns) != 5:
                raise IngestError(f"{where}: expected 5 tab-separated columns, got {len(columns)}")
            examples.append(_parallel_from_fields(*columns, where=where))
        else:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{where}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise IngestError(f"{where}: expected a JSON object")
            fields = [_require_str(obj, name, where) for name in _PARALLEL_FIELDS]
            provenance = obj.get("provenance", "")
            if not isinstance(provenance, str):
                raise IngestError(f"{where}: provenance must be a string")
            examples.append(_parallel_from_fields(*fields, provenance, where=where))
    if not examples:
        logger.warning("parallel file %s contained no examples", path)
    return examples


def render_dictionary_text(headword: str, target: str, definition: str | None) -> str:
    parts = [headword, target]
    if definition:
        parts.append(definition)
    return " — ".join(parts)


def render_example_text(source_text: str, target_text: str) -> str:
    return f"{source_text} ⇒ {target_text}"


def to_documents(
    entries: list[DictionaryEntry],
    examples: list[ParallelExample],
) -> list[Document]:
    """Flatten entries and examples into Documents with deterministic ids
    (``d:<seq>`` for dictionary entries, ``x:<seq>`` for examples)."""
    if not entries and not examples:
        raise IngestError("no input: need at least one dictionary entry or parallel example")
    docs: list[Document] = []
    for seq, entry in enumerate(entries):
        metadata: dict[str, str] = {}
        if entry.definition:
            metadata["definition"] = entry.definition
        if entry.part_of_speech:
            metadata["part_of_speech"] = entry.part_of_speech
        if entry.examples:
            metadata["examples"] = json.dumps(
                [list(pair) for pair in entry.examples], ensure_ascii=False
            )
        docs.append(
            Document(
                id=f"d:{seq}",
                kind=DICTIONARY_KIND,
                source_text=entry.headword,
                target_text=entry.target,
                render_text=render_dictionary_text(
                    entry.headword, entry.target, entry.definition
                ),
                metadata=metadata,
            )
        )
    for seq, example in enumerate(examples):
        docs.append(
            Document(
                id=f"x:{seq}",
                kind=EXAMPLE_KIND,
                source_text=example.source_text,
                target_text=example.target_text,
                render_text=render_example_text(example.source_text, example.target_text),
                metadata={
                    "source_lang": example.source_lang,
                    "target_lang": example.target_lang,
                    "provenance": example.provenance,
                },
            )
        )
    assert len({doc.id for doc in docs}) == len(docs), "document ids must be unique"
    return docs


def _rederive_render_text(doc: Document) -> str:
    if doc.kind == DICTIONARY_KIND:
        return render_dictionary_text(
            doc.source_text, doc.target_text, doc.metadata.get("definition")
        )
    return render_example_text(doc.source_text, doc.target_text)


def save_documents(docs: list[Document], path: str | Path) -> None:
    """Write Documents as JSONL (one object per line, UTF-8)."""
    lines = []
    for doc in docs:
        lines.append(
            json.dumps(
                {
                    "id": doc.id,
                    "kind": doc.kind,
                    "source_text": doc.source_text,
                    "target_text": doc.target_text,
                    "render_text": doc.render_text,
                    "metadata": doc.metadata,
                },
                ensure_ascii=False,
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_documents(path: str | Path) -> list[Document]:
    """Reload Documents written by :func:`save_documents`, re-checking that
    each render_text still derives from the other fields."""
    docs: list[Document] = []
    seen: set[str] = set()
    for lineno, line in _iter_lines(path):
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"{where}: invalid JSON: {exc.msg}") from exc
        try:
            doc = Document(
                id=obj["id"],
                kind=obj["kind"],
                source_text=obj["source_text"],
                target_text=obj["target_text"],
                render_text=obj["render_text"],
                metadata=dict(obj.get("metadata", {})),
            )
        except (KeyError, TypeError) as exc:
            raise IngestError(f"{where}: malformed document record: {exc}") from exc
        if doc.kind not in (DICTIONARY_KIND, EXAMPLE_KIND):
            raise IngestError(f"{where}: unknown document kind {doc.kind!r}")
        if doc.id in seen:
            raise IngestError(f"{where}: duplicate document id {doc.id!r}")
        if not doc.render_text:
            raise IngestError(f"{where}: render_text is empty")
        if doc.render_text != _rederive_render_text(doc):
            raise IngestError(f"{where}: render_text does not match its fields")
        seen.add(doc.id)
        docs.append(doc)
    return docs
