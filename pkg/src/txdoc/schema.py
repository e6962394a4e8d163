"""Transactional-document schema: fields, arithmetic equations, structural rules.

The schema is plain data.  Equations are written as strings in the schema
file ("gross_total = net_total + total_tax", "base_taxable_amount =
SUM(line_items.net_total)") and parsed into small expression trees: a signed
sum of terms, each term a field, a product of two fields, or a SUM aggregate.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path

import yaml


class SchemaError(ValueError):
    """Schema definition is malformed (unknown field, duplicate id, ...)."""


class Level(str, Enum):
    GLOBAL = "global"
    LINE_ITEM = "line_item"
    SUB_ITEM = "sub_item"

    def child(self) -> "Level | None":
        chain = {Level.GLOBAL: Level.LINE_ITEM, Level.LINE_ITEM: Level.SUB_ITEM}
        return chain.get(self)


# Serialized key for the child collection of each level.
COLLECTION_KEYS = {Level.LINE_ITEM: "line_items", Level.SUB_ITEM: "sub_items"}


class FieldKind(str, Enum):
    AMOUNT = "amount"
    RATE = "rate"
    INTEGER = "integer"
    TEXT = "text"
    TEXT_LIST = "text_list"
    AMOUNT_LIST = "amount_list"

    def is_list(self) -> bool:
        return self in (FieldKind.TEXT_LIST, FieldKind.AMOUNT_LIST)

    def is_numeric(self) -> bool:
        return self in (FieldKind.AMOUNT, FieldKind.RATE, FieldKind.INTEGER,
                        FieldKind.AMOUNT_LIST)


@dataclass(frozen=True)
class FieldDef:
    name: str
    level: Level
    kind: FieldKind
    default: Decimal | int | None = None
    description: str = ""

    def __post_init__(self):
        if self.default is None:
            return
        if self.kind is FieldKind.INTEGER and not isinstance(self.default, int):
            raise SchemaError(f"field {self.name}: integer default required")
        if self.kind in (FieldKind.AMOUNT, FieldKind.RATE) and not isinstance(
            self.default, Decimal
        ):
            raise SchemaError(f"field {self.name}: decimal default required")
        if self.kind in (FieldKind.TEXT, FieldKind.TEXT_LIST, FieldKind.AMOUNT_LIST):
            raise SchemaError(f"field {self.name}: {self.kind.value} fields take no default")


@dataclass(frozen=True)
class PathRef:
    """Reference to one field; ``aggregate`` marks SUM over all children."""

    level: Level
    field_name: str
    aggregate: bool = False

    def __str__(self) -> str:
        if self.aggregate:
            return f"SUM({COLLECTION_KEYS[self.level]}.{self.field_name})"
        return self.field_name


class TermKind(str, Enum):
    FIELD = "field"
    PRODUCT = "product"
    CHILD_SUM = "child_sum"
    LIST_SUM = "list_sum"


@dataclass(frozen=True)
class Term:
    sign: int
    kind: TermKind
    paths: tuple[PathRef, ...]


@dataclass(frozen=True)
class Equation:
    """lhs = signed sum of terms, bound at ``level`` (instantiated once for
    global, once per element for deeper levels)."""

    id: str
    level: Level
    lhs: PathRef
    terms: tuple[Term, ...]
    expr: str

    def referenced_paths(self) -> list[PathRef]:
        refs = [self.lhs]
        for term in self.terms:
            refs.extend(term.paths)
        return refs


@dataclass(frozen=True)
class StructuralRule:
    id: str
    kind: str  # min_line_items | require_one_of_extracted | rate_bounds
    fields: tuple[str, ...] = ()
    minimum: Decimal | None = None
    maximum: Decimal | None = None


@dataclass(frozen=True)
class SchemaDef:
    fields: tuple[FieldDef, ...]
    equations: tuple[Equation, ...]
    rules: tuple[StructuralRule, ...]
    version: str = "1"

    def fields_at(self, level: Level) -> tuple[FieldDef, ...]:
        return tuple(f for f in self.fields if f.level == level)

    def field(self, level: Level, name: str) -> FieldDef:
        for f in self.fields:
            if f.level == level and f.name == name:
                return f
        raise SchemaError(f"unknown field {name!r} at level {level.value}")

    def has_field(self, level: Level, name: str) -> bool:
        return any(f.level == level and f.name == name for f in self.fields)

    def validate(self) -> None:
        seen: set[tuple[Level, str]] = set()
        for f in self.fields:
            key = (f.level, f.name)
            if key in seen:
                raise SchemaError(
                    f"duplicate field {f.name!r} at level {f.level.value}"
                )
            seen.add(key)
        eq_ids: set[str] = set()
        for eq in self.equations:
            if eq.id in eq_ids:
                raise SchemaError(f"duplicate equation id {eq.id!r}")
            eq_ids.add(eq.id)
            for ref in eq.referenced_paths():
                if not self.has_field(ref.level, ref.field_name):
                    raise SchemaError(
                        f"equation {eq.id}: unknown field {ref.field_name!r} "
                        f"at level {ref.level.value}"
                    )
                if ref.aggregate and ref.level != eq.level.child():
                    raise SchemaError(
                        f"equation {eq.id}: aggregate over {ref.level.value} is not "
                        f"one level below {eq.level.value}"
                    )
            scalar_kinds = (FieldKind.AMOUNT, FieldKind.RATE, FieldKind.INTEGER)
            for ref, want_list in [(eq.lhs, False)] + [
                (path, term.kind is TermKind.LIST_SUM)
                for term in eq.terms
                for path in term.paths
            ]:
                kind = self.field(ref.level, ref.field_name).kind
                if want_list and kind is not FieldKind.AMOUNT_LIST:
                    raise SchemaError(
                        f"equation {eq.id}: SUM({ref.field_name}) needs an "
                        f"amount_list field"
                    )
                if not want_list and kind not in scalar_kinds:
                    raise SchemaError(
                        f"equation {eq.id}: field {ref.field_name!r} of kind "
                        f"{kind.value} cannot appear in arithmetic"
                    )
        rule_ids: set[str] = set()
        for rule in self.rules:
            if rule.id in rule_ids:
                raise SchemaError(f"duplicate rule id {rule.id!r}")
            rule_ids.add(rule.id)
            for name in rule.fields:
                if not self.has_field(Level.GLOBAL, name):
                    raise SchemaError(f"rule {rule.id}: unknown global field {name!r}")


# ---------------------------------------------------------------------------
# Equation parsing

_OPERAND = re.compile(r"SUM\(\s*[A-Za-z_][\w.]*\s*\)|[A-Za-z_][\w.]*|[+\-*=]")
_SUM = re.compile(r"SUM\(\s*([A-Za-z_][\w.]*)\s*\)")


def _resolve_scalar(eq_id: str, level: Level, name: str) -> PathRef:
    if "." in name:
        raise SchemaError(f"equation {eq_id}: qualified path {name!r} is only valid inside SUM()")
    return PathRef(level, name)


def _resolve_sum(eq_id: str, level: Level, inner: str) -> Term:
    child = level.child()
    if "." in inner:
        collection, field_name = inner.split(".", 1)
        if child is None or collection != COLLECTION_KEYS[child]:
            raise SchemaError(
                f"equation {eq_id}: SUM over {collection!r} not reachable from "
                f"level {level.value}"
            )
        return Term(1, TermKind.CHILD_SUM, (PathRef(child, field_name, aggregate=True),))
    return Term(1, TermKind.LIST_SUM, (PathRef(level, inner),))


def parse_equation(eq_id: str, level: Level, expr: str) -> Equation:
    """Parse "lhs = term (+|- term)*" where a term is a field, a product of
    two fields, or SUM(collection.field) / SUM(list_field)."""
    if expr.count("=") != 1:
        raise SchemaError(f"equation {eq_id}: expected exactly one '='")
    lhs_text, rhs_text = (part.strip() for part in expr.split("="))
    if not re.fullmatch(r"[A-Za-z_]\w*", lhs_text):
        raise SchemaError(f"equation {eq_id}: left side must be a bare field name")
    lhs = PathRef(level, lhs_text)

    tokens = _OPERAND.findall(rhs_text)
    if "".join(tokens).replace(" ", "") != rhs_text.replace(" ", ""):
        raise SchemaError(f"equation {eq_id}: cannot parse {rhs_text!r}")

    terms: list[Term] = []
    sign = 1
    pending: list = []  # operands of the current term
    star_open = False   # a '*' is waiting for its right factor

    def flush():
        if not pending or star_open:
            raise SchemaError(f"equation {eq_id}: dangling operator in {rhs_text!r}")
        if len(pending) == 1:
            op = pending[0]
            term = op if isinstance(op, Term) else Term(1, TermKind.FIELD, (op,))
        else:
            if any(isinstance(op, Term) for op in pending):
                raise SchemaError(f"equation {eq_id}: SUM() cannot appear in a product")
            term = Term(1, TermKind.PRODUCT, tuple(pending))
        terms.append(Term(sign, term.kind, term.paths))

    for token in tokens:
        if token in "+-":
            flush()
            pending = []
            sign = 1 if token == "+" else -1
        elif token == "*":
            if not pending or star_open or len(pending) >= 2:
                raise SchemaError(f"equation {eq_id}: products are limited to two factors")
            star_open = True
        elif token == "=":
            raise SchemaError(f"equation {eq_id}: unexpected '='")
        else:
            match = _SUM.fullmatch(token)
            operand = (
                _resolve_sum(eq_id, level, match.group(1))
                if match
                else _resolve_scalar(eq_id, level, token)
            )
            if pending and not star_open:
                raise SchemaError(f"equation {eq_id}: missing operator before "
                                  f"{token!r}")
            pending.append(operand)
            star_open = False
    flush()
    return Equation(eq_id, level, lhs, tuple(terms), expr)


# ---------------------------------------------------------------------------
# Builtin schema

_D = Decimal


def _f(name, level, kind, default=None, description=""):
    return FieldDef(name, level, kind, default, description)


def builtin_transactional_schema() -> SchemaDef:
    """The default invoice/receipt schema: a compact field core plus the
    arithmetic that ties totals, taxes, and line items together."""
    g, li, si = Level.GLOBAL, Level.LINE_ITEM, Level.SUB_ITEM
    amount, rate, integer, text = (
        FieldKind.AMOUNT, FieldKind.RATE, FieldKind.INTEGER, FieldKind.TEXT,
    )
    fields = (
        _f("gross_total", g, amount, description="The total amount including taxes"),
        _f("net_total", g, amount, description="The total amount excluding taxes"),
        _f("total_tax", g, amount, description="The total amount of taxes"),
        _f("tax_rate", g, rate, description="The tax rate applied to the taxable base"),
        _f("base_taxable_amount", g, amount,
           description="The base amount that is subject to tax"),
        _f("non_taxable_amount", g, amount,
           description="The part of the net total that is not subject to tax"),
        _f("subtotal", g, amount, description="The subtotal as printed on the document"),
        _f("net_discounts", g, FieldKind.AMOUNT_LIST,
           description="Discounts applied after the total"),
        _f("commission", g, amount, default=_D(0),
           description="Commission added on top of the gross total"),
        _f("prior_balance", g, amount, default=_D(0),
           description="Outstanding balance carried over from before"),
        _f("due_amount", g, amount, description="The amount due before discounts"),
        _f("net_due_amount", g, amount, description="The final amount due"),
        _f("menutype_count", g, integer, description="The number of distinct item types"),
        _f("currency", g, text, description="The currency of the amounts"),
        _f("name", li, text, description="The name of the line item"),
        _f("quantity", li, amount, default=_D(1), description="The quantity sold"),
        _f("unit_price", li, amount, description="The price per unit excluding taxes"),
        _f("net_total", li, amount, description="The line amount excluding taxes"),
        _f("gross_total", li, amount, description="The line amount including taxes"),
        _f("tax_amount", li, amount, description="The taxes for this line"),
        _f("name", si, text, description="The name of the sub item"),
        _f("quantity", si, amount, default=_D(1), description="The quantity sold"),
        _f("net_total", si, amount, description="The sub item amount excluding taxes"),
    )
    equations = (
        parse_equation("E1", g, "gross_total = net_total + total_tax"),
        parse_equation("E2", g, "total_tax = base_taxable_amount * tax_rate"),
        parse_equation("E3", g, "base_taxable_amount = SUM(line_items.net_total)"),
        parse_equation("E4", g, "net_total = base_taxable_amount + non_taxable_amount"),
        parse_equation("E5", g, "due_amount = gross_total + commission + prior_balance"),
        parse_equation("E6", g, "net_due_amount = due_amount - SUM(net_discounts)"),
        parse_equation("E7", li, "net_total = quantity * unit_price"),
        parse_equation("E8", li, "gross_total = net_total + tax_amount"),
        parse_equation("E9", li, "net_total = SUM(sub_items.net_total)"),
    )
    rules = (
        StructuralRule("R1", "min_line_items", minimum=_D(1)),
        StructuralRule("R2", "require_one_of_extracted",
                       fields=("gross_total", "net_total")),
        StructuralRule("R3", "rate_bounds", fields=("tax_rate",),
                       minimum=_D(0), maximum=_D(1)),
    )
    schema = SchemaDef(fields=fields, equations=equations, rules=rules)
    schema.validate()
    return schema


# ---------------------------------------------------------------------------
# Schema file I/O (YAML)


def _parse_default(kind: FieldKind, raw) -> Decimal | int | None:
    if raw is None:
        return None
    try:
        if kind is FieldKind.INTEGER:
            return int(raw)
        return Decimal(str(raw))
    except (InvalidOperation, ValueError) as exc:
        raise SchemaError(f"bad default {raw!r} for kind {kind.value}") from exc


def load_schema_text(text: str, source: str = "<schema>") -> SchemaDef:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"{source}: not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError(f"{source}: expected a mapping at the top level")

    fields: list[FieldDef] = []
    for level_name, entries in (raw.get("fields") or {}).items():
        try:
            level = Level(level_name)
        except ValueError as exc:
            raise SchemaError(f"{source}: unknown level {level_name!r}") from exc
        for entry in entries or []:
            try:
                kind = FieldKind(entry["kind"])
                fields.append(
                    FieldDef(
                        name=entry["name"],
                        level=level,
                        kind=kind,
                        default=_parse_default(kind, entry.get("default")),
                        description=entry.get("description", ""),
                    )
                )
            except KeyError as exc:
                raise SchemaError(f"{source}: field entry missing {exc}") from exc

    equations = []
    for entry in raw.get("equations") or []:
        try:
            eq_id, expr = entry["id"], entry["expr"]
        except KeyError as exc:
            raise SchemaError(f"{source}: equation entry missing {exc}") from exc
        level = Level(entry.get("level", "global"))
        equations.append(parse_equation(eq_id, level, expr))

    rules = []
    for entry in raw.get("rules") or []:
        try:
            rules.append(
                StructuralRule(
                    id=entry["id"],
                    kind=entry["kind"],
                    fields=tuple(entry.get("fields") or ()),
                    minimum=None if entry.get("minimum") is None
                    else Decimal(str(entry["minimum"])),
                    maximum=None if entry.get("maximum") is None
                    else Decimal(str(entry["maximum"])),
                )
            )
        except KeyError as exc:
            raise SchemaError(f"{source}: rule entry missing {exc}") from exc

    schema = SchemaDef(
        fields=tuple(fields),
        equations=tuple(equations),
        rules=tuple(rules),
        version=str(raw.get("version", "1")),
    )
    schema.validate()
    return schema


def load_schema(path: str | Path) -> SchemaDef:
    path = Path(path)
    return load_schema_text(path.read_text(encoding="utf-8"), source=str(path))


def dump_schema(schema: SchemaDef) -> str:
    """Serialize to the schema-file format; load_schema(dump_schema(s)) == s."""
    def field_entry(f: FieldDef) -> dict:
        entry: dict = {"name": f.name, "kind": f.kind.value}
        if f.default is not None:
            entry["default"] = (
                f.default if isinstance(f.default, int) else str(f.default)
            )
        if f.description:
            entry["description"] = f.description
        return entry

    doc = {
        "version": schema.version,
        "fields": {
            level.value: [field_entry(f) for f in schema.fields_at(level)]
            for level in Level
            if schema.fields_at(level)
        },
        "equations": [
            {"id": eq.id, "level": eq.level.value, "expr": eq.expr}
            for eq in schema.equations
        ],
        "rules": [
            {
                "id": rule.id,
                "kind": rule.kind,
                **({"fields": list(rule.fields)} if rule.fields else {}),
                **({"minimum": str(rule.minimum)} if rule.minimum is not None else {}),
                **({"maximum": str(rule.maximum)} if rule.maximum is not None else {}),
            }
            for rule in schema.rules
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True)


# ---------------------------------------------------------------------------
# Output schema for prompts


def _title(name: str) -> str:
    return " ".join(part.capitalize() for part in name.split("_"))


def _field_property(f: FieldDef) -> dict:
    if f.kind.is_list():
        type_options = [{"items": {"type": "string"}, "type": "array"}, {"type": "null"}]
    else:
        type_options = [{"type": "string"}, {"type": "null"}]
    prop = {"anyOf": type_options, "default": None, "title": _title(f.name)}
    if f.description:
        prop["description"] = f.description
    return prop


def to_output_schema(schema: SchemaDef) -> dict:
    """The machine-readable output schema embedded in prompts.

    Every field is rendered as a nullable string (lists as string arrays):
    the model is expected to return only strings, typing happens downstream.
    """
    def level_def(level: Level, title: str, child_ref: str | None) -> dict:
        properties = {f.name: _field_property(f) for f in schema.fields_at(level)}
        if child_ref is not None:
            child_key = COLLECTION_KEYS[level.child()]
            properties[child_key] = {
                "items": {"$ref": f"#/$defs/{child_ref}"},
                "type": "array",
                "title": _title(child_key),
            }
        return {"properties": properties, "title": title, "type": "object"}

    defs: dict = {}
    has_sub = bool(schema.fields_at(Level.SUB_ITEM))
    has_line = bool(schema.fields_at(Level.LINE_ITEM))
    if has_sub:
        defs["SubItem"] = level_def(Level.SUB_ITEM, "SubItem", None)
    if has_line:
        defs["LineItem"] = level_def(
            Level.LINE_ITEM, "LineItem", "SubItem" if has_sub else None
        )
    invoice_properties = {f.name: _field_property(f) for f in schema.fields_at(Level.GLOBAL)}
    if has_line:
        invoice_properties["line_items"] = {
            "items": {"$ref": "#/$defs/LineItem"},
            "type": "array",
            "title": "Line Items",
        }
    defs["Invoice"] = {
        "properties": invoice_properties,
        "title": "Invoice",
        "type": "object",
    }
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$defs": defs,
        "$ref": "#/$defs/Invoice",
    }
