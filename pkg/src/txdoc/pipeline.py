"""Dataset ingestion and the generate -> validate -> select -> score -> export
pipeline.

Every artifact is JSONL, one record per line, written in dataset order so
that runs against the replay backend are byte-identical.  Documents are
fanned out to a bounded worker pool; all writes happen on the caller's
thread after results are re-ordered by (document, sample index).
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path

from .llm import (
    AuthError,
    Backend,
    BackendError,
    Candidate,
    EndpointConfig,
    GenerationRequest,
    HttpBackend,
    ReplayBackend,
    build_prompt,
    select_best,
)
from .metrics import (
    DocumentEntry,
    FieldBag,
    FilterTable,
    ScoredPrediction,
    doc_tree,
    filter_table,
    flatten,
    nted,
)
from .resolver import DEFAULT_REL_TOL
from .schema import SchemaDef, builtin_transactional_schema, load_schema
from .validation import (
    CascadeLevel,
    FILTER_LEVELS,
    domain_validate,
    extract_json_block,
    run_cascade,
    syntactic_validate,
)
from .values import ExplicitDocument

logger = logging.getLogger(__name__)

API_KEY_ENV_VARS = ("TXDOC_API_KEY", "OPENAI_API_KEY")


class DataError(ValueError):
    """Input files are malformed or inconsistent."""


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    ocr_text: str
    image_path: str | None = None
    ground_truth: dict | None = None

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetRecord":
        try:
            return cls(
                id=obj["id"],
                ocr_text=obj["ocr_text"],
                image_path=obj.get("image_path"),
                ground_truth=obj.get("ground_truth"),
            )
        except KeyError as exc:
            raise DataError(f"dataset record missing {exc}") from exc

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "ocr_text": self.ocr_text}
        if self.image_path is not None:
            out["image_path"] = self.image_path
        if self.ground_truth is not None:
            out["ground_truth"] = self.ground_truth
        return out


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{number}: bad JSON: {exc}") from exc
    return rows


def write_jsonl(path: str | Path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    records = [DatasetRecord.from_json(obj) for obj in read_jsonl(path)]
    seen: set[str] = set()
    for record in records:
        if record.id in seen:
            raise DataError(f"duplicate document id {record.id!r}")
        seen.add(record.id)
        if not record.ocr_text:
            raise DataError(f"document {record.id!r} has empty ocr_text")
    return records


@dataclass
class RunConfig:
    out_dir: Path
    schema_path: str | None = None
    backend: str = "replay"  # http | replay
    endpoint: str | None = None  # base URL, or fixture path for replay
    model: str = ""
    temperature: float = 0.0
    n_samples: int = 1
    rel_tol: Decimal = DEFAULT_REL_TOL
    concurrency: int = 4
    max_tokens: int = 2048
    seed: int | None = None
    with_images: bool = False
    subset: str = "domain"

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.rel_tol < 0:
            raise DataError("tolerance must be >= 0")
        if self.n_samples < 1:
            raise DataError("samples must be >= 1")
        if self.concurrency < 1:
            raise DataError("concurrency must be >= 1")

    def load_schema_def(self) -> SchemaDef:
        if self.schema_path is None:
            return builtin_transactional_schema()
        return load_schema(self.schema_path)

    def build_backend(self) -> Backend:
        if self.backend == "replay":
            if not self.endpoint:
                raise DataError("replay backend needs --endpoint pointing at a "
                                "fixture JSONL file")
            return ReplayBackend.from_jsonl(self.endpoint)
        if self.backend == "http":
            if not self.endpoint:
                raise DataError("http backend needs --endpoint (e.g. "
                                "http://localhost:8000/v1)")
            api_key = next(
                (os.environ[name] for name in API_KEY_ENV_VARS if os.environ.get(name)),
                None,
            )
            return HttpBackend(EndpointConfig(
                base_url=self.endpoint, model=self.model, api_key=api_key))
        raise DataError(f"unknown backend {self.backend!r}")


# ---------------------------------------------------------------------------
# extract


def cmd_extract(dataset_path: str | Path, config: RunConfig) -> Path:
    """One candidate per (document, sample); resumable, failures recorded."""
    records = load_dataset(dataset_path)
    schema = config.load_schema_def()
    backend = config.build_backend()
    out_path = config.out_dir / "candidates.jsonl"
    errors_path = config.out_dir / "extract_errors.jsonl"

    existing: set[tuple[str, int]] = set()
    if out_path.exists():
        for obj in read_jsonl(out_path):
            existing.add((obj["doc_id"], obj["sample_index"]))

    def generate(record: DatasetRecord) -> tuple[list[Candidate], dict | None]:
        keys = [(record.id, i) for i in range(config.n_samples)]
        if all(key in existing for key in keys):
            return [], None
        prompt = build_prompt(
            schema,
            record.ocr_text,
            image_path=record.image_path,
            include_image=config.with_images and record.image_path is not None,
        )
        request = GenerationRequest(
            doc_id=record.id,
            prompt=prompt,
            temperature=config.temperature,
            n_samples=config.n_samples,
            max_tokens=config.max_tokens,
            seed=config.seed,
        )
        try:
            produced = backend.generate(request)
        except AuthError:
            raise  # pointless to keep going; every document would fail the same way
        except BackendError as exc:
            logger.error("generation failed for %s: %s", record.id, exc)
            return [], {"doc_id": record.id, "error": str(exc)}
        return [c for c in produced if (c.doc_id, c.sample_index) not in existing], None

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        results = list(pool.map(generate, records))

    new_candidates = [c for produced, _ in results for c in produced]
    failures = [err for _, err in results if err is not None]

    config.out_dir.mkdir(parents=True, exist_ok=True)
    mode = "a" if out_path.exists() else "w"
    with open(out_path, mode, encoding="utf-8") as handle:
        for candidate in new_candidates:
            handle.write(json.dumps(candidate.to_json(), ensure_ascii=False) + "\n")
    if failures:
        write_jsonl(errors_path, failures)
    logger.info("wrote %d candidate(s) to %s (%d failure(s))",
                len(new_candidates), out_path, len(failures))
    if failures and not new_candidates and not existing:
        raise BackendError(
            f"all {len(failures)} document(s) failed; see {errors_path}")
    return out_path


# ---------------------------------------------------------------------------
# validate


def _load_candidates(path: str | Path) -> list[Candidate]:
    return [Candidate.from_json(obj) for obj in read_jsonl(path)]


def _dataset_index(records: list[DatasetRecord]) -> dict[str, DatasetRecord]:
    return {record.id: record for record in records}


def _ordered(records: list[DatasetRecord], candidates: list[Candidate]) -> list[Candidate]:
    order = {record.id: i for i, record in enumerate(records)}
    for candidate in candidates:
        if candidate.doc_id not in order:
            raise DataError(f"candidate references unknown document "
                            f"{candidate.doc_id!r}")
    return sorted(candidates, key=lambda c: (order[c.doc_id], c.sample_index))


def cmd_validate(
    candidates_path: str | Path,
    dataset_path: str | Path,
    config: RunConfig,
    level: str = "domain",
) -> tuple[Path, Path]:
    """Run the cascade on every candidate; a document survives the requested
    level iff at least one of its candidates reaches it."""
    if level not in FILTER_LEVELS:
        raise DataError(f"unknown filter level {level!r}")
    records = load_dataset(dataset_path)
    by_id = _dataset_index(records)
    schema = config.load_schema_def()
    candidates = _ordered(records, _load_candidates(candidates_path))

    def check(candidate: Candidate) -> dict:
        verdict = run_cascade(candidate.raw_text, by_id[candidate.doc_id].ocr_text,
                              schema, config.rel_tol)
        row = {"doc_id": candidate.doc_id, "sample_index": candidate.sample_index}
        row.update(verdict.to_json())
        return row

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        rows = list(pool.map(check, candidates))

    verdicts_path = config.out_dir / "verdicts.jsonl"
    write_jsonl(verdicts_path, rows)

    survivors: list[str] = []
    reached: dict[str, bool] = {}
    for row in rows:
        outcome = CascadeLevel(row["level_reached"])
        reached[row["doc_id"]] = reached.get(row["doc_id"], False) or outcome.survives(level)
    for record in records:
        if reached.get(record.id):
            survivors.append(record.id)
    survivors_path = config.out_dir / f"survivors_{level}.jsonl"
    write_jsonl(survivors_path, ({"doc_id": doc_id} for doc_id in survivors))
    logger.info("%d/%d documents survive the %s filter",
                len(survivors), len(records), level)
    return verdicts_path, survivors_path


def _load_verdicts(path: str | Path) -> dict[tuple[str, int], CascadeLevel]:
    out = {}
    for obj in read_jsonl(path):
        out[(obj["doc_id"], obj["sample_index"])] = CascadeLevel(obj["level_reached"])
    return out


def _require_verdicts(candidates: list[Candidate],
                      verdicts: dict[tuple[str, int], CascadeLevel]) -> None:
    for candidate in candidates:
        if (candidate.doc_id, candidate.sample_index) not in verdicts:
            raise DataError(
                f"no verdict for ({candidate.doc_id!r}, {candidate.sample_index})")


# ---------------------------------------------------------------------------
# select


def cmd_select(
    candidates_path: str | Path,
    verdicts_path: str | Path,
    config: RunConfig,
) -> Path:
    """At most one candidate per document: the best fully-valid one."""
    candidates = _load_candidates(candidates_path)
    verdicts = _load_verdicts(verdicts_path)
    by_doc: dict[str, list[Candidate]] = {}
    doc_order: list[str] = []
    for candidate in candidates:
        key = (candidate.doc_id, candidate.sample_index)
        if key not in verdicts:
            raise DataError(f"no verdict for {key}")
        if candidate.doc_id not in by_doc:
            by_doc[candidate.doc_id] = []
            doc_order.append(candidate.doc_id)
        if verdicts[key] is CascadeLevel.PASSED:
            by_doc[candidate.doc_id].append(candidate)

    rows = []
    for doc_id in doc_order:
        best = select_best(by_doc[doc_id])
        if best is None:
            continue
        rows.append({
            "doc_id": doc_id,
            "sample_index": best.sample_index,
            "mean_token_prob": best.mean_token_prob(),
            "raw_text": best.raw_text,
        })
    selected_path = config.out_dir / "selected.jsonl"
    write_jsonl(selected_path, rows)
    logger.info("selected candidates for %d document(s)", len(rows))
    return selected_path


# ---------------------------------------------------------------------------
# evaluate


EMPTY_PREDICTION = ScoredPrediction(bag=FieldBag(), nted=1.0, exact=False, valid=False)


def _score_candidate(candidate: Candidate, truth_resolved, truth_tree,
                     schema: SchemaDef, rel_tol: Decimal) -> ScoredPrediction:
    syn = syntactic_validate(candidate.raw_text, schema)
    if not syn.ok:
        return EMPTY_PREDICTION
    outcome = domain_validate(syn.document, schema, rel_tol)
    resolved = outcome.resolved
    return ScoredPrediction(
        bag=flatten(resolved),
        nted=nted(doc_tree(resolved, schema), truth_tree),
        exact=resolved.canonical() == truth_resolved.canonical(),
        valid=outcome.passed,
    )


def cmd_evaluate(
    candidates_path: str | Path,
    verdicts_path: str | Path,
    dataset_path: str | Path,
    config: RunConfig,
) -> FilterTable:
    """The four-row filter table plus a per-document score file.

    At each filter level a document is represented by its best candidate
    (highest mean token probability) among those surviving the level; at the
    Base level an unparseable representative scores as an empty prediction.
    """
    records = load_dataset(dataset_path)
    schema = config.load_schema_def()
    candidates = _ordered(records, _load_candidates(candidates_path))
    verdicts = _load_verdicts(verdicts_path)
    _require_verdicts(candidates, verdicts)
    by_doc: dict[str, list[Candidate]] = {}
    for candidate in candidates:
        by_doc.setdefault(candidate.doc_id, []).append(candidate)

    entries: list[DocumentEntry] = []
    score_rows: list[dict] = []
    for record in records:
        if record.ground_truth is None:
            raise DataError(f"document {record.id!r} has no ground truth")
        truth_outcome = domain_validate(ExplicitDocument(record.ground_truth),
                                        schema, config.rel_tol)
        truth_resolved = truth_outcome.resolved
        truth_bag = flatten(truth_resolved)
        truth_tree = doc_tree(truth_resolved, schema)
        if truth_tree.size() == 0:
            raise DataError(f"document {record.id!r} has an empty ground truth")

        doc_candidates = by_doc.get(record.id, [])
        cache: dict[int, ScoredPrediction] = {}

        def scored(candidate: Candidate) -> ScoredPrediction:
            if candidate.sample_index not in cache:
                cache[candidate.sample_index] = _score_candidate(
                    candidate, truth_resolved, truth_tree, schema, config.rel_tol)
            return cache[candidate.sample_index]

        levels: dict[str, ScoredPrediction | None] = {}
        row_levels: dict[str, dict | None] = {}
        for level in FILTER_LEVELS:
            if level == "base":
                pool = doc_candidates
            else:
                pool = [
                    c for c in doc_candidates
                    if verdicts[(c.doc_id, c.sample_index)].survives(level)
                ]
            representative = select_best(pool)
            if representative is None:
                levels[level] = EMPTY_PREDICTION if level == "base" else None
                row_levels[level] = (
                    {"sample_index": None, "empty_prediction": True}
                    if level == "base" else None
                )
                continue
            score = scored(representative)
            levels[level] = score
            row_levels[level] = {
                "sample_index": representative.sample_index,
                "tp": (score.bag & truth_bag).total(),
                "pred_size": score.bag.total(),
                "truth_size": truth_bag.total(),
                "nted": score.nted,
                "valid": score.valid,
                "exact": score.exact,
            }
        entries.append(DocumentEntry(record.id, truth_bag, levels))
        score_rows.append({
            "doc_id": record.id,
            "gt_valid": truth_outcome.passed,
            "levels": row_levels,
        })

    table = filter_table(entries)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    (config.out_dir / "report.txt").write_text(table.to_text(), encoding="utf-8")
    (config.out_dir / "report.csv").write_text(table.to_csv(), encoding="utf-8")
    (config.out_dir / "report.json").write_text(
        json.dumps(table.to_json(), indent=2) + "\n", encoding="utf-8")
    write_jsonl(config.out_dir / "scores.jsonl", score_rows)
    return table


# ---------------------------------------------------------------------------
# distill


def cmd_distill(
    candidates_path: str | Path,
    verdicts_path: str | Path,
    dataset_path: str | Path,
    config: RunConfig,
) -> Path:
    """Prompt/completion pairs for fine-tuning.

    --subset domain keeps only documents whose best candidate passed the full
    cascade; --subset base keeps every document with a syntactically usable
    candidate (the unfiltered control arm).
    """
    if config.subset not in ("domain", "base"):
        raise DataError(f"unknown subset {config.subset!r}")
    records = load_dataset(dataset_path)
    schema = config.load_schema_def()
    candidates = _ordered(records, _load_candidates(candidates_path))
    verdicts = _load_verdicts(verdicts_path)
    _require_verdicts(candidates, verdicts)
    by_doc: dict[str, list[Candidate]] = {}
    for candidate in candidates:
        by_doc.setdefault(candidate.doc_id, []).append(candidate)

    needed = "domain" if config.subset == "domain" else "syntactic"
    rows = []
    for record in records:
        pool = [
            c for c in by_doc.get(record.id, [])
            if verdicts[(c.doc_id, c.sample_index)].survives(needed)
        ]
        best = select_best(pool)
        if best is None:
            continue
        prompt = build_prompt(
            schema,
            record.ocr_text,
            image_path=record.image_path,
            include_image=config.with_images and record.image_path is not None,
        )
        completion = extract_json_block(best.raw_text)
        rows.append({
            "doc_id": record.id,
            "prompt": prompt.render(),
            "completion": completion,
            "filter_level": verdicts[(best.doc_id, best.sample_index)].value,
            "mean_token_prob": best.mean_token_prob(),
        })
    distill_path = config.out_dir / f"distill_{config.subset}.jsonl"
    write_jsonl(distill_path, rows)
    logger.info("exported %d distillation record(s) to %s", len(rows), distill_path)
    return distill_path


# ---------------------------------------------------------------------------
# resolve (single document)


def cmd_resolve(document_path: str | Path, config: RunConfig) -> dict:
    """Resolve one explicit document and report trace plus residuals."""
    try:
        data = json.loads(Path(document_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read document: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError("document file must hold a JSON object")
    schema = config.load_schema_def()
    outcome = domain_validate(ExplicitDocument(data), schema, config.rel_tol)
    return {
        **outcome.resolved.to_json(),
        "trace": outcome.trace.to_json(),
        "report": outcome.report.to_json(),
        "coercion_errors": [e.to_json() for e in outcome.coercion_errors],
        "valid": outcome.passed,
    }
