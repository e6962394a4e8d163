"""The three-level validation cascade: syntactic, task, domain.

Each level is a strictly harder filter than the one before, so the set of
documents passing level k+1 is always a subset of those passing level k.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum

from .resolver import (
    ConstraintReport,
    DEFAULT_REL_TOL,
    ResolutionTrace,
    apply_defaults,
    evaluate_constraints,
    resolve,
)
from .schema import COLLECTION_KEYS, Level, SchemaDef
from .values import CoercionError, ExplicitDocument, ImplicitDocument, materialize

FILTER_LEVELS = ("base", "syntactic", "task", "domain")


class CascadeLevel(str, Enum):
    FAILED_SYNTACTIC = "failed_syntactic"
    FAILED_TASK = "failed_task"
    FAILED_DOMAIN = "failed_domain"
    PASSED = "passed"

    def survives(self, filter_level: str) -> bool:
        """Did a candidate with this outcome pass the given filter?"""
        order = {
            "base": 0,
            "syntactic": 1,
            "task": 2,
            "domain": 3,
        }
        reached = {
            CascadeLevel.FAILED_SYNTACTIC: 0,
            CascadeLevel.FAILED_TASK: 1,
            CascadeLevel.FAILED_DOMAIN: 2,
            CascadeLevel.PASSED: 3,
        }[self]
        return reached >= order[filter_level]


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    path: str | None = None
    value: str | None = None

    def to_json(self) -> dict:
        out = {"code": self.code, "message": self.message}
        if self.path is not None:
            out["path"] = self.path
        if self.value is not None:
            out["value"] = self.value
        return out


def extract_json_block(raw: str) -> str | None:
    """The substring from the first '{' to the last '}', stripping any
    surrounding explanatory text or backticks; None when no block exists."""
    start = raw.find("{")
    end = raw.rfind("}")
    if start == -1 or end == -1 or end < start:
        return None
    return raw[start : end + 1]


# ---------------------------------------------------------------------------
# Syntactic


@dataclass
class SyntacticOutcome:
    document: ExplicitDocument | None
    errors: list[Diagnostic] = field(default_factory=list)
    warnings: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.document is not None


def _check_object(obj: dict, schema: SchemaDef, level: Level, prefix: str,
                  errors: list[Diagnostic], warnings: list[Diagnostic]) -> dict:
    out: dict = {}
    known = {f.name for f in schema.fields_at(level)}
    child = level.child()
    collection_key = None
    if child is not None and schema.fields_at(child):
        collection_key = COLLECTION_KEYS[child]

    for fdef in schema.fields_at(level):
        path = f"{prefix}.{fdef.name}" if prefix else fdef.name
        if fdef.name not in obj:
            errors.append(Diagnostic("missing_key", f"key {fdef.name!r} must be present "
                                     "even when the value is null", path))
            continue
        value = obj[fdef.name]
        if fdef.kind.is_list():
            if not isinstance(value, list):
                errors.append(Diagnostic(
                    "wrong_type", "list field must be an array (an empty list, "
                    "never null)", path))
                continue
            elements = []
            bad = False
            for i, element in enumerate(value):
                if not isinstance(element, str):
                    errors.append(Diagnostic("wrong_type", "list elements must be "
                                             "strings", f"{path}[{i}]"))
                    bad = True
                else:
                    elements.append(element)
            if not bad:
                out[fdef.name] = elements
        else:
            if value is None or isinstance(value, str):
                out[fdef.name] = value
            else:
                errors.append(Diagnostic("wrong_type", "leaf values must be strings "
                                         "or null", path))

    if collection_key is not None:
        path = f"{prefix}.{collection_key}" if prefix else collection_key
        if collection_key not in obj:
            errors.append(Diagnostic("missing_key", f"key {collection_key!r} must be "
                                     "present as an array", path))
        elif not isinstance(obj[collection_key], list):
            errors.append(Diagnostic("wrong_type", "item collection must be an array "
                                     "(an empty list, never null)", path))
        else:
            items = []
            for i, element in enumerate(obj[collection_key]):
                item_path = f"{path}[{i}]"
                if not isinstance(element, dict):
                    errors.append(Diagnostic("wrong_type", "items must be objects",
                                             item_path))
                    continue
                items.append(_check_object(element, schema, child, item_path,
                                           errors, warnings))
            out[collection_key] = items

    for key in obj:
        if key not in known and key != collection_key:
            where = f"{prefix}.{key}" if prefix else key
            warnings.append(Diagnostic("extra_key", "key not in schema, dropped", where))
    return out


def syntactic_validate(raw: str, schema: SchemaDef) -> SyntacticOutcome:
    """Parse the JSON block and check it against the output schema: all keys
    present, list fields as arrays, leaves strings or null.  Extra keys are
    dropped with a warning."""
    block = extract_json_block(raw)
    if block is None:
        return SyntacticOutcome(None, [Diagnostic("no_json_block",
                                                  "no {...} block in output")])
    try:
        obj = json.loads(block)
    except json.JSONDecodeError as exc:
        return SyntacticOutcome(None, [Diagnostic("invalid_json", str(exc))])
    if not isinstance(obj, dict):
        return SyntacticOutcome(None, [Diagnostic("invalid_json",
                                                  "top level is not an object")])
    errors: list[Diagnostic] = []
    warnings: list[Diagnostic] = []
    data = _check_object(obj, schema, Level.GLOBAL, "", errors, warnings)
    if errors:
        return SyntacticOutcome(None, errors, warnings)
    return SyntacticOutcome(ExplicitDocument(data), [], warnings)


# ---------------------------------------------------------------------------
# Task


@dataclass
class TaskOutcome:
    passed: bool
    checks: list[tuple[str, str, bool]]  # (path, value, found verbatim)

    def misses(self) -> list[Diagnostic]:
        return [
            Diagnostic("not_verbatim", "value does not occur in the OCR text",
                       path, value)
            for path, value, found in self.checks
            if not found
        ]


def task_validate(doc: ExplicitDocument, ocr_text: str) -> TaskOutcome:
    """Every non-null string leaf must occur verbatim (contiguous, case- and
    whitespace-exact) in the OCR text; an all-null document passes vacuously."""
    checks = [
        (path, value, value in ocr_text)
        for path, value in doc.iter_string_values()
    ]
    return TaskOutcome(all(found for _, _, found in checks), checks)


# ---------------------------------------------------------------------------
# Domain


@dataclass
class DomainOutcome:
    report: ConstraintReport
    resolved: ImplicitDocument
    trace: ResolutionTrace
    coercion_errors: list[CoercionError]

    @property
    def passed(self) -> bool:
        # A value that was extracted but cannot join the arithmetic is a
        # violation, same as a broken equation.
        return self.report.valid and not self.coercion_errors

    def reasons(self) -> list[Diagnostic]:
        out = [
            Diagnostic("coercion_failed", err.reason, err.path, err.raw)
            for err in self.coercion_errors
        ]
        out.extend(
            Diagnostic("equation_violated",
                       f"residual {check.residual}", check.key)
            for check in self.report.violations()
        )
        out.extend(
            Diagnostic("rule_failed", rule.detail or "structural rule failed",
                       rule.rule_id)
            for rule in self.report.failed_rules()
        )
        return out


def domain_validate(
    doc: ExplicitDocument, schema: SchemaDef, rel_tol: Decimal = DEFAULT_REL_TOL
) -> DomainOutcome:
    """Materialize, apply defaults, resolve to a fixpoint, then evaluate the
    constraints and structural rules."""
    implicit, coercion_errors = materialize(doc, schema)
    resolved, trace = resolve(apply_defaults(implicit, schema), schema)
    report = evaluate_constraints(resolved, schema, rel_tol)
    return DomainOutcome(report, resolved, trace, coercion_errors)


# ---------------------------------------------------------------------------
# Cascade


@dataclass
class CascadeVerdict:
    level_reached: CascadeLevel
    reasons: list[Diagnostic] = field(default_factory=list)
    warnings: list[Diagnostic] = field(default_factory=list)
    document: ExplicitDocument | None = None
    resolved: ImplicitDocument | None = None
    report: ConstraintReport | None = None

    @property
    def passed(self) -> bool:
        return self.level_reached is CascadeLevel.PASSED

    def to_json(self) -> dict:
        return {
            "level_reached": self.level_reached.value,
            "reasons": [d.to_json() for d in self.reasons],
            "warnings": [d.to_json() for d in self.warnings],
        }


def run_cascade(
    raw: str, ocr_text: str, schema: SchemaDef, rel_tol: Decimal = DEFAULT_REL_TOL
) -> CascadeVerdict:
    """Apply the three levels in order, stopping at the first failure."""
    syn = syntactic_validate(raw, schema)
    if not syn.ok:
        return CascadeVerdict(CascadeLevel.FAILED_SYNTACTIC, syn.errors, syn.warnings)
    task = task_validate(syn.document, ocr_text)
    if not task.passed:
        return CascadeVerdict(CascadeLevel.FAILED_TASK, task.misses(), syn.warnings,
                              document=syn.document)
    dom = domain_validate(syn.document, schema, rel_tol)
    if not dom.passed:
        return CascadeVerdict(CascadeLevel.FAILED_DOMAIN, dom.reasons(), syn.warnings,
                              document=syn.document, resolved=dom.resolved,
                              report=dom.report)
    return CascadeVerdict(CascadeLevel.PASSED, [], syn.warnings,
                          document=syn.document, resolved=dom.resolved,
                          report=dom.report)
