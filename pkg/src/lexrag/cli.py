"""Command-line surface: build indexes, translate, evaluate, report.

Exit codes are a stable scripting contract: 0 success, 1 I/O or file-format
problem, 2 backend failure, 64 usage error, 65 data validation error.

Configuration is a single strict JSON file (default ``./lexrag.json``);
unknown keys are rejected so a typo in a retrieval parameter cannot silently
skew an experiment.  With no config file present, built-in defaults apply,
which use the deterministic mock backends and therefore run offline.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from statistics import fmean

from .backends import (
    BackendConfig,
    BackendError,
    Embedder,
    Generator,
    HttpBackend,
    MockEmbedder,
    MockGenerator,
    RetryPolicy,
)
from .corpus import IngestError, load_dictionary, load_parallel, to_documents
from .index import (
    CACHE_FILE,
    DOCS_FILE,
    KEYWORD_FILE,
    MANIFEST_FILE,
    VECTORS_FILE,
    EmbeddingCache,
    IndexFormatError,
    IndexManifest,
    build_keyword_index,
    build_vector_index,
    load_index,
    save_index,
)
from .metrics import (
    ALL_METRICS,
    TokenizationPolicy,
    evaluate_set,
    human_eval_normalize,
    load_human_scores,
)
from .pipeline import DEFAULT_TEMPLATE, PromptTemplate, batch_translate, translate
from .retrieval import RetrievalConfig

EXIT_OK = 0
EXIT_IO = 1
EXIT_BACKEND = 2
EXIT_USAGE = 64
EXIT_DATA = 65

DEFAULT_CONFIG_PATH = "./lexrag.json"


class UsageError(Exception):
    """Bad command-line invocation (maps to exit 64)."""


class ConfigFileError(Exception):
    """Missing or unparsable config file (maps to exit 1)."""


def _round3(value: float) -> str:
    return str(Decimal(repr(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def _reject_unknown(raw: dict, allowed: tuple[str, ...], where: str) -> None:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class BackendSettings:
    provider: str = "mock"
    embed_dim: int = 8
    http: BackendConfig = field(default_factory=BackendConfig)

    def __post_init__(self) -> None:
        if self.provider not in ("mock", "http"):
            raise ValueError(f"backend.provider must be 'mock' or 'http', got {self.provider!r}")
        if self.embed_dim < 1:
            raise ValueError("backend.embed_dim must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "BackendSettings":
        _reject_unknown(
            raw,
            (
                "provider",
                "embed_dim",
                "base_url",
                "api_key_env",
                "embed_model_id",
                "chat_model_id",
                "max_in_flight",
                "timeout_s",
                "retry",
            ),
            "backend",
        )
        retry_raw = raw.get("retry", {})
        _reject_unknown(retry_raw, ("max_attempts", "initial_backoff_ms", "multiplier"), "backend.retry")
        http_kwargs = {
            key: raw[key]
            for key in (
                "base_url",
                "api_key_env",
                "embed_model_id",
                "chat_model_id",
                "max_in_flight",
                "timeout_s",
            )
            if key in raw
        }
        if retry_raw:
            http_kwargs["retry"] = RetryPolicy(**retry_raw)
        return cls(
            provider=raw.get("provider", "mock"),
            embed_dim=raw.get("embed_dim", 8),
            http=BackendConfig(**http_kwargs),
        )


@dataclass(frozen=True)
class AppConfig:
    backend: BackendSettings = field(default_factory=BackendSettings)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    template_path: str | None = None
    tokenize: TokenizationPolicy = TokenizationPolicy.WHITESPACE
    index_dir: str | None = None
    report_format: str = "json"
    source_lang: str = "English"
    target_lang: str = "Cherokee"

    def __post_init__(self) -> None:
        if self.report_format not in ("json", "csv", "markdown"):
            raise ValueError(f"report_format must be json, csv or markdown, got {self.report_format!r}")

    def template(self) -> PromptTemplate:
        if self.template_path is None:
            return DEFAULT_TEMPLATE
        path = Path(self.template_path)
        if not path.is_file():
            raise ConfigFileError(f"template file not found: {path}")
        return PromptTemplate.from_file(path)


def load_config(path: str | None) -> AppConfig:
    """Read the JSON config; an explicitly given path must exist, while a
    missing default path silently falls back to built-in defaults."""
    explicit = path is not None
    config_path = Path(path or DEFAULT_CONFIG_PATH)
    if not config_path.is_file():
        if explicit:
            raise ConfigFileError(f"config file not found: {config_path}")
        return AppConfig()
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigFileError(f"{config_path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError(f"{config_path}: config must be a JSON object")
    _reject_unknown(
        raw,
        (
            "backend",
            "retrieval",
            "template",
            "tokenize",
            "index_dir",
            "report_format",
            "source_lang",
            "target_lang",
        ),
        "config",
    )
    retrieval_raw = raw.get("retrieval", {})
    backend_raw = raw.get("backend", {})
    for name, section in (("retrieval", retrieval_raw), ("backend", backend_raw)):
        if not isinstance(section, dict):
            raise ValueError(f"{config_path}: {name} must be a JSON object")
    _reject_unknown(
        retrieval_raw, ("k_vector", "k_total", "policy", "max_phrase_len"), "retrieval"
    )
    try:
        return AppConfig(
            backend=BackendSettings.from_dict(backend_raw),
            retrieval=RetrievalConfig(**retrieval_raw),
            template_path=raw.get("template"),
            tokenize=TokenizationPolicy(raw.get("tokenize", "whitespace")),
            index_dir=raw.get("index_dir"),
            report_format=raw.get("report_format", "json"),
            source_lang=raw.get("source_lang", "English"),
            target_lang=raw.get("target_lang", "Cherokee"),
        )
    except TypeError as exc:
        raise ValueError(f"{config_path}: invalid config value: {exc}") from exc


def make_backends(settings: BackendSettings) -> tuple[Embedder, Generator]:
    if settings.provider == "mock":
        return MockEmbedder(settings.embed_dim), MockGenerator()
    client = HttpBackend(settings.http)
    return client, client


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_index_build(args: argparse.Namespace) -> int:
    if not args.dict and not args.parallel:
        raise UsageError("at least one of --dict or --parallel is required")
    config = load_config(args.config)
    out = Path(args.out)
    existed_before = out.exists()

    entries = load_dictionary(args.dict) if args.dict else []
    examples = (
        load_parallel(args.parallel, _parallel_format(args.parallel)) if args.parallel else []
    )
    docs = to_documents(entries, examples)

    embedder, _ = make_backends(config.backend)
    cache = EmbeddingCache(out / CACHE_FILE)
    try:
        keyword = build_keyword_index(docs)
        vector = build_vector_index(docs, embedder, cache=cache)
        manifest = IndexManifest.create(keyword, vector)
        save_index(keyword, vector, manifest, docs, out)
    except Exception:
        _cleanup_partial_output(out, existed_before)
        raise
    print(
        f"indexed {len(docs)} documents -> {out} "
        f"(dim={vector.dim}, cache_hits={cache.hits}, cache_misses={cache.misses})"
    )
    return EXIT_OK


def _parallel_format(path: str) -> str:
    return "tsv" if Path(path).suffix.lower() == ".tsv" else "jsonl"


def _cleanup_partial_output(out: Path, existed_before: bool) -> None:
    # A directory we created is removed outright; a pre-existing one keeps its
    # embedding cache and loses only the index files written this run.
    if not out.exists():
        return
    if not existed_before:
        shutil.rmtree(out, ignore_errors=True)
        return
    for name in (MANIFEST_FILE, KEYWORD_FILE, DOCS_FILE, VECTORS_FILE):
        (out / name).unlink(missing_ok=True)


def cmd_translate(args: argparse.Namespace) -> int:
    if (args.text is None) == (args.input is None):
        raise UsageError("exactly one of --text or --input is required")
    config = load_config(args.config)
    bundle = load_index(args.index or config.index_dir or _missing_index())
    embedder, generator = make_backends(config.backend)
    template = config.template()
    source_lang = args.source_lang or config.source_lang
    target_lang = args.target_lang or config.target_lang
    # Phrase extraction mirrors what the index actually holds.
    retrieval_config = replace(
        config.retrieval, max_phrase_len=bundle.manifest.max_phrase_len
    )

    if args.text is not None:
        record = translate(
            args.text,
            bundle,
            embedder,
            generator,
            retrieval_config,
            template,
            source_lang,
            target_lang,
        )
        print(record.output)
        return EXIT_OK

    ids, queries = _read_batch_input(Path(args.input))
    records = batch_translate(
        queries,
        bundle,
        embedder,
        generator,
        retrieval_config,
        template,
        source_lang,
        target_lang,
        parallelism=args.parallel,
    )
    lines = []
    for item_id, record in zip(ids, records):
        payload = record.to_dict(include_prompt=args.trace)
        if item_id is not None:
            payload = {"id": item_id, **payload}
        lines.append(json.dumps(payload, ensure_ascii=False))
    _write_lines(lines, args.output)
    failures = sum(1 for record in records if record.error)
    if failures:
        print(f"{failures}/{len(records)} items failed", file=sys.stderr)
        if args.strict:
            return EXIT_BACKEND
    return EXIT_OK


def _missing_index() -> str:
    raise UsageError("--index is required (or set index_dir in the config)")


def _read_batch_input(path: Path) -> tuple[list[str | None], list[str]]:
    if not path.is_file():
        raise IngestError(f"input file not found: {path}")
    text = path.read_text(encoding="utf-8")
    ids: list[str | None] = []
    queries: list[str] = []
    if path.suffix.lower() == ".jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids.append(str(obj["id"]))
                queries.append(str(obj["source"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IngestError(f"{path}:{lineno}: expected JSONL with id and source: {exc}") from exc
    else:
        for line in text.splitlines():
            if line.strip():
                ids.append(None)
                queries.append(line.strip())
    if not queries:
        raise IngestError(f"{path}: no input sentences")
    return ids, queries


def _write_lines(lines: list[str], output: str | None) -> None:
    body = "\n".join(lines) + "\n"
    if output:
        Path(output).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    hyps = _read_sentence_lines(Path(args.hyp))
    refs = _read_sentence_lines(Path(args.ref))
    if len(hyps) != len(refs):
        raise ValueError(
            f"line count mismatch: {args.hyp} has {len(hyps)}, {args.ref} has {len(refs)}"
        )
    metrics = tuple(name.strip() for name in args.metrics.split(",") if name.strip())
    policy = TokenizationPolicy(args.tokenize) if args.tokenize else config.tokenize
    embedder = make_backends(config.backend)[0] if "bertscore" in metrics else None
    report = evaluate_set(hyps, refs, policy, embedder, metrics)

    payload: dict = {}
    if args.language:
        payload["language"] = args.language
    if args.model:
        payload["model"] = args.model
    payload.update(report.to_dict())
    fmt = args.format or config.report_format
    if fmt == "json":
        out = json.dumps(payload, ensure_ascii=False, indent=2) + "\n"
    elif fmt == "csv":
        keys = list(payload)
        out = ",".join(keys) + "\n" + ",".join(str(payload[k]) for k in keys) + "\n"
    else:
        keys = list(payload)
        header = "| " + " | ".join(keys) + " |"
        rule = "| " + " | ".join("---" for _ in keys) + " |"
        cells = [
            _round3(payload[k]) if isinstance(payload[k], float) else str(payload[k])
            for k in keys
        ]
        out = "\n".join([header, rule, "| " + " | ".join(cells) + " |"]) + "\n"
    if args.output:
        Path(args.output).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    return EXIT_OK


def _read_sentence_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise IngestError(f"file not found: {path}")
    return path.read_text(encoding="utf-8").splitlines()


def cmd_humaneval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    sheet = load_human_scores(args.scores)
    if args.per_model:
        rows = [
            {"model": model, "human_eval": human_eval_normalize(sheet, model)}
            for model in sheet.model_ids()
        ]
    else:
        pooled = fmean(
            (row.fluency + row.grammaticality + row.faithfulness) / 15
            for row in sheet.rows
        )
        rows = [{"model": "all", "human_eval": pooled}]
    if args.language:
        rows = [{"language": args.language, **row} for row in rows]

    fmt = args.format or config.report_format
    if fmt == "json":
        out = json.dumps(rows, ensure_ascii=False, indent=2) + "\n"
    elif fmt == "csv":
        keys = list(rows[0])
        lines = [",".join(keys)]
        lines += [",".join(str(row[k]) for k in keys) for row in rows]
        out = "\n".join(lines) + "\n"
    else:
        out = "".join(f"{row['model']}\t{_round3(row['human_eval'])}\n" for row in rows)
    if args.output:
        Path(args.output).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    return EXIT_OK


REPORT_COLUMNS = (
    ("bleu", "BLEU"),
    ("rouge_l_f", "ROUGE-L"),
    ("bert_p", "BERTScore P"),
    ("bert_r", "BERTScore R"),
    ("bert_f1", "BERTScore F1"),
    ("human_eval", "Human Evaluation"),
)
_REPORT_FIELDS = (
    "bleu",
    "rouge_l_p",
    "rouge_l_r",
    "rouge_l_f",
    "bert_p",
    "bert_r",
    "bert_f1",
    "human_eval",
    "n_sentences",
)


def cmd_report(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    merged: dict[tuple[str, str], dict] = {}
    for file_name in args.metrics_files:
        path = Path(file_name)
        if not path.is_file():
            raise IngestError(f"metrics file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IngestError(f"{path}: invalid JSON: {exc}") from exc
        rows = data if isinstance(data, list) else [data]
        for row in rows:
            if not isinstance(row, dict) or "language" not in row or "model" not in row:
                raise ValueError(f"{path}: every row needs 'language' and 'model' fields")
            unknown = set(row) - set(_REPORT_FIELDS) - {"language", "model"}
            if unknown:
                raise ValueError(f"{path}: unknown metric fields {sorted(unknown)}")
            key = (str(row["language"]), str(row["model"]))
            slot = merged.setdefault(key, {})
            for name in _REPORT_FIELDS:
                if name not in row:
                    continue
                if name in slot:
                    raise ValueError(
                        f"duplicate metric {name!r} for (language={key[0]!r}, model={key[1]!r})"
                    )
                slot[name] = row[name]

    fmt = args.format or config.report_format
    header = ["Language", "Model"] + [label for _, label in REPORT_COLUMNS]
    if fmt == "json":
        payload = [
            {"language": lang, "model": model, **fields}
            for (lang, model), fields in merged.items()
        ]
        out = json.dumps(payload, ensure_ascii=False, indent=2) + "\n"
    else:
        table_rows = []
        for (lang, model), fields in merged.items():
            cells = [lang, model]
            for name, _ in REPORT_COLUMNS:
                value = fields.get(name)
                cells.append(_round3(float(value)) if value is not None else "-")
            table_rows.append(cells)
        if fmt == "csv":
            lines = [",".join(header)] + [",".join(row) for row in table_rows]
            out = "\n".join(lines) + "\n"
        else:
            lines = [
                "| " + " | ".join(header) + " |",
                "| " + " | ".join("---" for _ in header) + " |",
            ]
            lines += ["| " + " | ".join(row) + " |" for row in table_rows]
            out = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(out, encoding="utf-8")
    else:
        sys.stdout.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems exit 64, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lexrag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index-build", help="ingest corpora and build the index directory")
    p.add_argument("--dict", help="dictionary JSONL file")
    p.add_argument("--parallel", help="parallel examples file (.jsonl or .tsv)")
    p.add_argument("--out", required=True, help="output index directory")
    p.add_argument("--config", help=f"config file (default {DEFAULT_CONFIG_PATH})")
    p.set_defaults(func=cmd_index_build)

    p = sub.add_parser("translate", help="translate one sentence or a batch file")
    p.add_argument("--index", help="index directory")
    p.add_argument("--text", help="single sentence to translate")
    p.add_argument("--input", help="batch input: plain text or JSONL with id/source")
    p.add_argument("--output", help="batch output JSONL path (default stdout)")
    p.add_argument("--trace", action="store_true", help="include the prompt in batch records")
    p.add_argument("--strict", action="store_true", help="exit 2 if any batch item failed")
    p.add_argument("--parallel", type=int, default=1, help="worker threads for batch mode")
    p.add_argument("--source-lang", help="source language name override")
    p.add_argument("--target-lang", help="target language name override")
    p.add_argument("--config", help=f"config file (default {DEFAULT_CONFIG_PATH})")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score hypothesis translations against references")
    p.add_argument("--hyp", required=True, help="hypothesis file, one sentence per line")
    p.add_argument("--ref", required=True, help="reference file, aligned by line number")
    p.add_argument("--metrics", default=",".join(ALL_METRICS), help="comma-separated subset")
    p.add_argument("--tokenize", choices=["whitespace", "codepoint"], help="tokenization policy")
    p.add_argument("--language", help="language label for reports")
    p.add_argument("--model", help="model label for reports")
    p.add_argument("--format", choices=["json", "csv", "markdown"], help="output format")
    p.add_argument("--output", help="write to file instead of stdout")
    p.add_argument("--config", help=f"config file (default {DEFAULT_CONFIG_PATH})")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("humaneval", help="normalize 0-5 expert score sheets to [0, 1]")
    p.add_argument("--scores", required=True, help="CSV score sheet")
    p.add_argument(
        "--per-model",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="one score per model (default); --no-per-model pools all rows",
    )
    p.add_argument("--language", help="language label for reports")
    p.add_argument("--format", choices=["json", "csv", "markdown"], help="output format")
    p.add_argument("--output", help="write to file instead of stdout")
    p.add_argument("--config", help=f"config file (default {DEFAULT_CONFIG_PATH})")
    p.set_defaults(func=cmd_humaneval)

    p = sub.add_parser("report", help="merge metric JSON files into one table")
    p.add_argument("metrics_files", nargs="+", help="JSON files from evaluate/humaneval")
    p.add_argument("--format", choices=["json", "csv", "markdown"], help="output format")
    p.add_argument("--output", help="write to file instead of stdout")
    p.add_argument("--config", help=f"config file (default {DEFAULT_CONFIG_PATH})")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lexrag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"lexrag: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ConfigFileError as exc:
        print(f"lexrag: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (IngestError, IndexFormatError, OSError, UnicodeDecodeError) as exc:
        print(f"lexrag: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"lexrag: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"lexrag: validation error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
