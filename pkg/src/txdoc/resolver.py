"""Default filling, fixpoint inference over the equation system, and
constraint evaluation.

Inference fills an absent field only when an equation instance has exactly
one absent operand and is algebraically solvable for it; present values are
never rewritten, so the set of present leaves only grows.  Tolerance plays no
role during inference (values are computed exactly); it matters only when
equations are checked afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum

from .schema import Equation, FieldKind, Level, SchemaDef, StructuralRule, TermKind
from .values import (
    ImplicitDocument,
    ImplicitItem,
    Leaf,
    Provenance,
    approx_equal,
    decimal_to_str,
    divide,
)

DEFAULT_REL_TOL = Decimal("0.005")


class ConstraintStatus(str, Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    NOT_EVALUABLE = "not_evaluable"


@dataclass(frozen=True)
class ResolutionStep:
    equation_id: str
    path: str
    value: Decimal | int
    iteration: int


@dataclass
class ResolutionTrace:
    steps: list[ResolutionStep] = field(default_factory=list)

    def to_json(self) -> list[dict]:
        return [
            {
                "equation": s.equation_id,
                "path": s.path,
                "value": decimal_to_str(s.value) if isinstance(s.value, Decimal) else s.value,
                "iteration": s.iteration,
            }
            for s in self.steps
        ]


@dataclass(frozen=True)
class EquationCheck:
    equation_id: str
    instance: str  # "" for global, else e.g. "line_items[1]"
    status: ConstraintStatus
    residual: Decimal | None = None

    @property
    def key(self) -> str:
        return f"{self.equation_id}@{self.instance}" if self.instance else self.equation_id


@dataclass(frozen=True)
class RuleCheck:
    rule_id: str
    passed: bool
    detail: str = ""


@dataclass
class ConstraintReport:
    equations: list[EquationCheck]
    rules: list[RuleCheck]

    @property
    def valid(self) -> bool:
        return all(e.status is not ConstraintStatus.VIOLATED for e in self.equations) and all(
            r.passed for r in self.rules
        )

    def violations(self) -> list[EquationCheck]:
        return [e for e in self.equations if e.status is ConstraintStatus.VIOLATED]

    def failed_rules(self) -> list[RuleCheck]:
        return [r for r in self.rules if not r.passed]

    def to_json(self) -> dict:
        return {
            "valid": self.valid,
            "equations": [
                {
                    "key": e.key,
                    "equation": e.equation_id,
                    "instance": e.instance,
                    "status": e.status.value,
                    **(
                        {"residual": decimal_to_str(e.residual)}
                        if e.residual is not None
                        else {}
                    ),
                }
                for e in self.equations
            ],
            "rules": [
                {"rule": r.rule_id, "passed": r.passed, "detail": r.detail}
                for r in self.rules
            ],
        }


def apply_defaults(doc: ImplicitDocument, schema: SchemaDef) -> ImplicitDocument:
    """Fill absent leaves that carry a schema default; present leaves untouched."""
    out = doc.copy()

    def fill(fields: dict[str, Leaf], level: Level):
        for fdef in schema.fields_at(level):
            if fdef.default is not None and fdef.name not in fields:
                fields[fdef.name] = Leaf(fdef.default, Provenance.DEFAULTED)

    fill(out.globals, Level.GLOBAL)
    for item in out.line_items:
        fill(item.fields, Level.LINE_ITEM)
        for sub in item.sub_items:
            fill(sub.fields, Level.SUB_ITEM)
    return out


# ---------------------------------------------------------------------------
# Equation instances


def _instances(schema: SchemaDef, doc: ImplicitDocument):
    """Yield (equation, binding fields, children, instance path)."""
    for eq in schema.equations:
        if eq.level is Level.GLOBAL:
            yield eq, doc.globals, doc.line_items, ""
        elif eq.level is Level.LINE_ITEM:
            for i, item in enumerate(doc.line_items):
                yield eq, item.fields, item.sub_items, f"line_items[{i}]"
        else:
            for i, item in enumerate(doc.line_items):
                for j, sub in enumerate(item.sub_items):
                    yield eq, sub.fields, [], f"line_items[{i}].sub_items[{j}]"


def _as_decimal(value) -> Decimal:
    return Decimal(value) if isinstance(value, int) else value


def _leaf_value(fields: dict[str, Leaf], name: str) -> Decimal | None:
    leaf = fields.get(name)
    return None if leaf is None else _as_decimal(leaf.value)


@dataclass
class _Analysis:
    applicable: bool
    lhs_value: Decimal | None
    term_values: list[Decimal | None]
    # (term index, slot) where slot is None (whole term / single field),
    # ("factor", k), ("child", k), or ("list",)
    missing: list[tuple]
    rhs_total: Decimal | None = None


def _analyze(eq: Equation, fields: dict, children: list[ImplicitItem]) -> _Analysis:
    lhs_value = _leaf_value(fields, eq.lhs.field_name)
    term_values: list[Decimal | None] = []
    missing: list[tuple] = []
    if lhs_value is None:
        missing.append((-1, None))
    for idx, term in enumerate(eq.terms):
        if term.kind is TermKind.FIELD:
            v = _leaf_value(fields, term.paths[0].field_name)
            if v is None:
                missing.append((idx, None))
            term_values.append(v)
        elif term.kind is TermKind.PRODUCT:
            a = _leaf_value(fields, term.paths[0].field_name)
            b = _leaf_value(fields, term.paths[1].field_name)
            if a is None:
                missing.append((idx, ("factor", 0)))
            if b is None:
                missing.append((idx, ("factor", 1)))
            term_values.append(a * b if a is not None and b is not None else None)
        elif term.kind is TermKind.CHILD_SUM:
            if not children:
                return _Analysis(False, lhs_value, [], [])
            name = term.paths[0].field_name
            vals = [_leaf_value(child.fields, name) for child in children]
            for k, v in enumerate(vals):
                if v is None:
                    missing.append((idx, ("child", k)))
            term_values.append(
                sum((v for v in vals), Decimal(0)) if all(v is not None for v in vals) else None
            )
        else:  # LIST_SUM
            leaf = fields.get(term.paths[0].field_name)
            if leaf is None:
                missing.append((idx, ("list",)))
                term_values.append(None)
            else:
                term_values.append(sum((_as_decimal(v) for v in leaf.value), Decimal(0)))
    rhs_total = None
    if all(v is not None for v in term_values):
        rhs_total = sum(
            (term.sign * v for term, v in zip(eq.terms, term_values)), Decimal(0)
        )
    return _Analysis(True, lhs_value, term_values, missing, rhs_total)


def _store(fields: dict[str, Leaf], schema: SchemaDef, level: Level, name: str,
           value: Decimal) -> Decimal | int | None:
    """Type-check an inferred value against the field kind and store it."""
    fdef = schema.field(level, name)
    if fdef.kind is FieldKind.INTEGER:
        if value != value.to_integral_value():
            return None
        stored: Decimal | int = int(value)
    else:
        stored = value
    fields[name] = Leaf(stored, Provenance.INFERRED)
    return stored


def _try_solve(eq: Equation, fields: dict, children: list[ImplicitItem],
               prefix: str, schema: SchemaDef, iteration: int) -> ResolutionStep | None:
    analysis = _analyze(eq, fields, children)
    if not analysis.applicable or len(analysis.missing) != 1:
        return None
    term_idx, slot = analysis.missing[0]

    def step(path_suffix: str, value) -> ResolutionStep:
        path = f"{prefix}.{path_suffix}" if prefix else path_suffix
        return ResolutionStep(eq.id, path, value, iteration)

    if term_idx == -1:
        stored = _store(fields, schema, eq.lhs.level, eq.lhs.field_name, analysis.rhs_total)
        return None if stored is None else step(eq.lhs.field_name, stored)

    # One operand missing on the right: the term's required value is what is
    # left of the lhs after the other terms.
    term = eq.terms[term_idx]
    others = Decimal(0)
    for i, (t, v) in enumerate(zip(eq.terms, analysis.term_values)):
        if i != term_idx:
            others += t.sign * v
    needed = (analysis.lhs_value - others) * term.sign

    if term.kind is TermKind.FIELD:
        name = term.paths[0].field_name
        stored = _store(fields, schema, term.paths[0].level, name, needed)
        return None if stored is None else step(name, stored)
    if term.kind is TermKind.PRODUCT:
        _, k = slot
        cofactor = _leaf_value(fields, term.paths[1 - k].field_name)
        if cofactor == 0:
            return None
        name = term.paths[k].field_name
        stored = _store(fields, schema, term.paths[k].level, name, divide(needed, cofactor))
        return None if stored is None else step(name, stored)
    if term.kind is TermKind.CHILD_SUM:
        _, k = slot
        name = term.paths[0].field_name
        present = sum(
            (_leaf_value(c.fields, name) for i, c in enumerate(children) if i != k),
            Decimal(0),
        )
        stored = _store(children[k].fields, schema, term.paths[0].level, name,
                        needed - present)
        if stored is None:
            return None
        collection = "sub_items" if eq.level is Level.LINE_ITEM else "line_items"
        return step(f"{collection}[{k}].{name}", stored)
    return None  # LIST_SUM: a list can never be reconstructed from its sum


def resolve(
    doc: ImplicitDocument, schema: SchemaDef, rel_tol: Decimal = DEFAULT_REL_TOL
) -> tuple[ImplicitDocument, ResolutionTrace]:
    """Infer missing values until a fixpoint.

    ``rel_tol`` is accepted for symmetry with :func:`evaluate_constraints`
    but unused: inference is exact, and a derived value that disagrees with a
    present one is never written; the disagreement surfaces as an equation
    violation at evaluation time.
    """
    del rel_tol
    out = doc.copy()
    trace = ResolutionTrace()
    iteration = 0
    progress = True
    while progress:
        progress = False
        iteration += 1
        for eq, fields, children, prefix in _instances(schema, out):
            solved = _try_solve(eq, fields, children, prefix, schema, iteration)
            if solved is not None:
                trace.steps.append(solved)
                progress = True
    return out, trace


def _check_rule(rule: StructuralRule, doc: ImplicitDocument) -> RuleCheck:
    if rule.kind == "min_line_items":
        needed = int(rule.minimum or 1)
        ok = len(doc.line_items) >= needed
        return RuleCheck(rule.id, ok, f"{len(doc.line_items)} line item(s), need {needed}")
    if rule.kind == "require_one_of_extracted":
        ok = any(
            name in doc.globals and doc.globals[name].provenance is Provenance.EXTRACTED
            for name in rule.fields
        )
        return RuleCheck(rule.id, ok, f"one of {', '.join(rule.fields)} must be extracted")
    if rule.kind == "rate_bounds":
        for name in rule.fields:
            leaf = doc.globals.get(name)
            if leaf is None:
                continue
            value = _as_decimal(leaf.value)
            low = rule.minimum if rule.minimum is not None else Decimal(0)
            high = rule.maximum if rule.maximum is not None else Decimal(1)
            if not low <= value <= high:
                return RuleCheck(
                    rule.id, False,
                    f"{name}={decimal_to_str(value)} outside [{low}, {high}]",
                )
        return RuleCheck(rule.id, True)
    return RuleCheck(rule.id, False, f"unknown rule kind {rule.kind!r}")


def evaluate_constraints(
    doc: ImplicitDocument, schema: SchemaDef, rel_tol: Decimal = DEFAULT_REL_TOL
) -> ConstraintReport:
    """Check every equation instance whose operands are all present, plus the
    structural rules.  Equations missing an operand are reported as
    not-evaluable and excluded from the validity decision."""
    checks: list[EquationCheck] = []
    for eq, fields, children, prefix in _instances(schema, doc):
        analysis = _analyze(eq, fields, children)
        if not analysis.applicable or analysis.missing:
            checks.append(EquationCheck(eq.id, prefix, ConstraintStatus.NOT_EVALUABLE))
            continue
        residual = abs(analysis.lhs_value - analysis.rhs_total)
        ok = approx_equal(analysis.lhs_value, analysis.rhs_total, rel_tol)
        checks.append(
            EquationCheck(
                eq.id,
                prefix,
                ConstraintStatus.SATISFIED if ok else ConstraintStatus.VIOLATED,
                residual,
            )
        )
    rules = [_check_rule(rule, doc) for rule in schema.rules]
    return ConstraintReport(equations=checks, rules=rules)
