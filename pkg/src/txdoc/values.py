"""Exact decimal values, string coercion, and the explicit/implicit document pair.

All numeric work uses ``decimal.Decimal`` so that the relative tolerance used
by constraint checking is the only source of slack; binary floats would add
their own rounding noise on top.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation, ROUND_HALF_UP
from enum import Enum
from typing import Iterator

from .schema import FieldKind, Level, SchemaDef

DIVISION_SCALE = Decimal("0.000001")

_NON_NUMERIC = re.compile(r"[^\d.,\-()]")


class ParseError(ValueError):
    """A raw string cannot be coerced to its field type."""


class Provenance(str, Enum):
    EXTRACTED = "extracted"
    DEFAULTED = "defaulted"
    INFERRED = "inferred"


@dataclass(frozen=True)
class CoercionError:
    """One failed string-to-value coercion, kept as data next to the document."""

    path: str
    raw: str
    reason: str

    def to_json(self) -> dict:
        return {"path": self.path, "raw": self.raw, "reason": self.reason}


def decimal_to_str(d: Decimal) -> str:
    """Canonical dot-decimal rendering: no exponent, trailing zeros stripped."""
    s = format(d, "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    if s in ("", "-", "-0"):
        s = "0"
    return s


def normalize_decimal(d: Decimal) -> Decimal:
    return Decimal(decimal_to_str(d))


def parse_amount(raw: str) -> Decimal:
    """Parse a printed amount into an exact decimal.

    Rule table (the contract for mixed period/comma conventions):
      * currency symbols, letters, and spaces are stripped first;
      * if both '.' and ',' occur, the rightmost separator is the decimal
        point and every other separator is a grouping character;
      * a single separator occurring once, preceded by at least one digit and
        followed by exactly three digits, is a thousands separator;
      * a single separator occurring more than once marks thousands groups;
      * otherwise the separator is the decimal point;
      * a leading '-' or a parenthesized value is negative.
    """
    if raw is None or not raw.strip():
        raise ParseError("empty string")
    s = _NON_NUMERIC.sub("", raw)

    negative = False
    if s.startswith("(") and s.endswith(")") and len(s) > 2:
        negative = True
        s = s[1:-1]
    if "(" in s or ")" in s:
        raise ParseError(f"unbalanced parentheses in {raw!r}")
    if s.startswith("-"):
        negative = True
        s = s[1:]
    if "-" in s:
        raise ParseError(f"misplaced minus sign in {raw!r}")
    if not any(c.isdigit() for c in s):
        raise ParseError(f"no digits in {raw!r}")

    dots, commas = s.count("."), s.count(",")
    if dots and commas:
        last = max(s.rfind("."), s.rfind(","))
        intpart = s[:last].replace(".", "").replace(",", "")
        normalized = intpart + "." + s[last + 1:]
    elif dots or commas:
        sep = "." if dots else ","
        if dots + commas == 1:
            before, after = s.split(sep)
            if len(after) == 3 and len(before) >= 1:
                normalized = before + after
            else:
                normalized = before + "." + after
        else:
            normalized = s.replace(sep, "")
    else:
        normalized = s

    try:
        value = Decimal(normalized)
    except InvalidOperation as exc:
        raise ParseError(f"cannot parse {raw!r}") from exc
    return -value if negative else value


def parse_rate(raw: str) -> Decimal:
    """Parse a rate; '10%' becomes 0.10 and bare values in (1, 100] are read
    as percentages.  Out-of-range results are returned as-is so the rate
    bounds rule can flag them."""
    s = raw.strip() if raw else ""
    percent = "%" in s
    value = parse_amount(s.replace("%", ""))
    if percent or Decimal(1) < value <= Decimal(100):
        value = value / Decimal(100)
    return value


def parse_integer(raw: str) -> int:
    value = parse_amount(raw)
    if value != value.to_integral_value():
        raise ParseError(f"not a whole number: {raw!r}")
    return int(value)


def approx_equal(a: Decimal, b: Decimal, rel_tol: Decimal) -> bool:
    """True iff |a - b| <= rel_tol * max(|a|, |b|).  Symmetric; zero==zero."""
    if rel_tol < 0:
        raise ValueError("rel_tol must be >= 0")
    if a == b:
        return True
    return abs(a - b) <= rel_tol * max(abs(a), abs(b))


def divide(numerator: Decimal, denominator: Decimal) -> Decimal:
    """Division at scale 6; exactness past that is the tolerance's job."""
    return (numerator / denominator).quantize(DIVISION_SCALE, rounding=ROUND_HALF_UP)


# ---------------------------------------------------------------------------
# Documents


@dataclass(frozen=True)
class ExplicitDocument:
    """The model's raw extraction: a schema-shaped tree of strings and nulls.

    ``data`` is the serialized object form: global fields at the root plus a
    ``line_items`` array whose elements may carry a ``sub_items`` array.
    """

    data: dict

    def to_json(self) -> dict:
        return self.data

    @classmethod
    def from_json(cls, obj: dict) -> "ExplicitDocument":
        return cls(data=obj)

    def iter_string_values(self) -> Iterator[tuple[str, str]]:
        """Yield (path, value) for every non-null string leaf, list elements
        and nested items included."""
        yield from _walk_strings(self.data, "")

    def line_items(self) -> list[dict]:
        return self.data.get("line_items") or []


def _walk_strings(node, prefix: str) -> Iterator[tuple[str, str]]:
    if isinstance(node, dict):
        for key, value in node.items():
            path = f"{prefix}.{key}" if prefix else key
            yield from _walk_strings(value, path)
    elif isinstance(node, list):
        for i, element in enumerate(node):
            yield from _walk_strings(element, f"{prefix}[{i}]")
    elif isinstance(node, str):
        yield prefix, node


def blank_explicit(schema: SchemaDef) -> ExplicitDocument:
    """An all-null document of the schema's shape (list fields as empty lists)."""
    def level_shape(level: Level) -> dict:
        shape = {}
        for f in schema.fields_at(level):
            shape[f.name] = [] if f.kind.is_list() else None
        return shape

    data = level_shape(Level.GLOBAL)
    if schema.fields_at(Level.LINE_ITEM):
        data["line_items"] = []
    return ExplicitDocument(data=data)


@dataclass
class Leaf:
    """A typed value with a record of where it came from."""

    value: Decimal | int | str | tuple
    provenance: Provenance

    def canonical(self):
        return canonical_value(self.value)


def canonical_value(value):
    if isinstance(value, Decimal):
        return decimal_to_str(value)
    if isinstance(value, tuple):
        return tuple(canonical_value(v) for v in value)
    return value


@dataclass
class ImplicitItem:
    fields: dict[str, Leaf] = field(default_factory=dict)
    sub_items: list["ImplicitItem"] = field(default_factory=list)

    def copy(self) -> "ImplicitItem":
        return ImplicitItem(
            fields={k: Leaf(v.value, v.provenance) for k, v in self.fields.items()},
            sub_items=[s.copy() for s in self.sub_items],
        )


@dataclass
class ImplicitDocument:
    """The typed counterpart of an explicit document, after coercion.

    Absent leaves are simply missing keys; the resolver fills what it can.
    """

    globals: dict[str, Leaf] = field(default_factory=dict)
    line_items: list[ImplicitItem] = field(default_factory=list)

    def copy(self) -> "ImplicitDocument":
        return ImplicitDocument(
            globals={k: Leaf(v.value, v.provenance) for k, v in self.globals.items()},
            line_items=[item.copy() for item in self.line_items],
        )

    def iter_leaves(self) -> Iterator[tuple[str, Leaf]]:
        for name, leaf in self.globals.items():
            yield name, leaf
        for i, item in enumerate(self.line_items):
            for name, leaf in item.fields.items():
                yield f"line_items[{i}].{name}", leaf
            for j, sub in enumerate(item.sub_items):
                for name, leaf in sub.fields.items():
                    yield f"line_items[{i}].sub_items[{j}].{name}", leaf

    def leaf_count(self) -> int:
        return sum(1 for _ in self.iter_leaves())

    def canonical(self):
        """Provenance-free nested value structure, for exact-match comparison."""
        def item_canon(item: ImplicitItem):
            out = {k: leaf.canonical() for k, leaf in sorted(item.fields.items())}
            if item.sub_items:
                out["sub_items"] = [item_canon(s) for s in item.sub_items]
            return out

        doc = {k: leaf.canonical() for k, leaf in sorted(self.globals.items())}
        if self.line_items:
            doc["line_items"] = [item_canon(item) for item in self.line_items]
        return doc

    def to_json(self) -> dict:
        """Serialize with canonical decimal strings plus a provenance sidecar."""
        def render(value):
            if isinstance(value, Decimal):
                return decimal_to_str(value)
            if isinstance(value, tuple):
                return [render(v) for v in value]
            return value

        def item_json(item: ImplicitItem):
            out = {k: render(leaf.value) for k, leaf in item.fields.items()}
            out["sub_items"] = [item_json(s) for s in item.sub_items]
            return out

        doc = {k: render(leaf.value) for k, leaf in self.globals.items()}
        doc["line_items"] = [item_json(item) for item in self.line_items]
        provenance = {path: leaf.provenance.value for path, leaf in self.iter_leaves()}
        return {"document": doc, "provenance": provenance}


def _coerce(kind: FieldKind, raw):
    if kind is FieldKind.TEXT:
        return raw
    if kind is FieldKind.AMOUNT:
        return parse_amount(raw)
    if kind is FieldKind.RATE:
        return parse_rate(raw)
    if kind is FieldKind.INTEGER:
        return parse_integer(raw)
    raise ParseError(f"unsupported kind {kind}")


def _coerce_fields(
    values: dict,
    schema: SchemaDef,
    level: Level,
    prefix: str,
    errors: list[CoercionError],
) -> dict[str, Leaf]:
    fields: dict[str, Leaf] = {}
    for fdef in schema.fields_at(level):
        raw = values.get(fdef.name)
        path = f"{prefix}{fdef.name}"
        if fdef.kind.is_list():
            if raw is None:
                continue
            element_kind = (
                FieldKind.AMOUNT if fdef.kind is FieldKind.AMOUNT_LIST else FieldKind.TEXT
            )
            parsed = []
            ok = True
            for i, element in enumerate(raw):
                try:
                    parsed.append(_coerce(element_kind, element))
                except ParseError as exc:
                    errors.append(CoercionError(f"{path}[{i}]", str(element), str(exc)))
                    ok = False
            if ok:
                fields[fdef.name] = Leaf(tuple(parsed), Provenance.EXTRACTED)
            continue
        if raw is None:
            continue
        try:
            fields[fdef.name] = Leaf(_coerce(fdef.kind, raw), Provenance.EXTRACTED)
        except ParseError as exc:
            errors.append(CoercionError(path, str(raw), str(exc)))
    return fields


def materialize(
    doc: ExplicitDocument, schema: SchemaDef
) -> tuple[ImplicitDocument, list[CoercionError]]:
    """Coerce every non-null string leaf per its field kind.

    Failures are collected as :class:`CoercionError` records; the offending
    leaves are absent from the result, never silently defaulted.
    """
    errors: list[CoercionError] = []
    out = ImplicitDocument(
        globals=_coerce_fields(doc.data, schema, Level.GLOBAL, "", errors)
    )
    for i, raw_item in enumerate(doc.line_items()):
        item = ImplicitItem(
            fields=_coerce_fields(
                raw_item, schema, Level.LINE_ITEM, f"line_items[{i}].", errors
            )
        )
        for j, raw_sub in enumerate(raw_item.get("sub_items") or []):
            item.sub_items.append(
                ImplicitItem(
                    fields=_coerce_fields(
                        raw_sub,
                        schema,
                        Level.SUB_ITEM,
                        f"line_items[{i}].sub_items[{j}].",
                        errors,
                    )
                )
            )
        out.line_items.append(item)
    return out, errors
