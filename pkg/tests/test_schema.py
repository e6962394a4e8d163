from decimal import Decimal as D

import pytest

from txdoc.schema import (
    FieldKind,
    Level,
    SchemaDef,
    SchemaError,
    TermKind,
    dump_schema,
    load_schema_text,
    parse_equation,
    to_output_schema,
)


def _equation(schema, eq_id):
    return next(eq for eq in schema.equations if eq.id == eq_id)


class TestBuiltinSchema:
    def test_core_fields_present(self, schema):
        global_names = {f.name for f in schema.fields_at(Level.GLOBAL)}
        assert {
            "gross_total", "net_total", "total_tax", "tax_rate",
            "base_taxable_amount", "non_taxable_amount", "subtotal",
            "net_discounts", "commission", "prior_balance", "due_amount",
            "net_due_amount", "menutype_count", "currency",
        } <= global_names
        line_names = {f.name for f in schema.fields_at(Level.LINE_ITEM)}
        assert {"name", "quantity", "unit_price", "net_total", "gross_total",
                "tax_amount"} <= line_names
        sub_names = {f.name for f in schema.fields_at(Level.SUB_ITEM)}
        assert {"name", "quantity", "net_total"} <= sub_names

    def test_defaults(self, schema):
        assert schema.field(Level.GLOBAL, "commission").default == D(0)
        assert schema.field(Level.GLOBAL, "prior_balance").default == D(0)
        assert schema.field(Level.LINE_ITEM, "quantity").default == D(1)
        assert schema.field(Level.SUB_ITEM, "quantity").default == D(1)

    def test_kinds(self, schema):
        assert schema.field(Level.GLOBAL, "tax_rate").kind is FieldKind.RATE
        assert schema.field(Level.GLOBAL, "menutype_count").kind is FieldKind.INTEGER
        assert schema.field(Level.GLOBAL, "net_discounts").kind is FieldKind.AMOUNT_LIST
        assert schema.field(Level.GLOBAL, "currency").kind is FieldKind.TEXT

    def test_gross_equation_relates_net_and_tax(self, schema):
        eq = _equation(schema, "E1")
        assert eq.lhs.field_name == "gross_total"
        names = {p.field_name for t in eq.terms for p in t.paths}
        assert names == {"net_total", "total_tax"}
        assert all(t.sign == 1 for t in eq.terms)

    def test_base_taxable_aggregates_line_net_totals(self, schema):
        eq = _equation(schema, "E3")
        assert eq.lhs.field_name == "base_taxable_amount"
        (term,) = eq.terms
        assert term.kind is TermKind.CHILD_SUM
        assert term.paths[0].field_name == "net_total"
        assert term.paths[0].level is Level.LINE_ITEM
        assert term.paths[0].aggregate

    def test_rate_bounds_rule(self, schema):
        rule = next(r for r in schema.rules if r.kind == "rate_bounds")
        assert rule.fields == ("tax_rate",)
        assert rule.minimum == D(0)
        assert rule.maximum == D(1)

    def test_discount_sum_is_a_list_aggregate(self, schema):
        eq = _equation(schema, "E6")
        kinds = [t.kind for t in eq.terms]
        assert TermKind.LIST_SUM in kinds
        list_term = next(t for t in eq.terms if t.kind is TermKind.LIST_SUM)
        assert list_term.sign == -1

    def test_validates(self, schema):
        schema.validate()


class TestEquationParser:
    def test_signed_sum(self):
        eq = parse_equation("X", Level.GLOBAL,
                            "net_due_amount = due_amount - commission")
        assert [t.sign for t in eq.terms] == [1, -1]

    def test_product(self):
        eq = parse_equation("X", Level.GLOBAL,
                            "total_tax = base_taxable_amount * tax_rate")
        (term,) = eq.terms
        assert term.kind is TermKind.PRODUCT
        assert len(term.paths) == 2

    def test_rejects_three_factor_product(self):
        with pytest.raises(SchemaError):
            parse_equation("X", Level.GLOBAL, "a = b * c * d")

    def test_rejects_sum_inside_product(self):
        with pytest.raises(SchemaError):
            parse_equation("X", Level.GLOBAL, "a = b * SUM(line_items.c)")

    def test_rejects_missing_equals(self):
        with pytest.raises(SchemaError):
            parse_equation("X", Level.GLOBAL, "a + b")

    def test_rejects_missing_operator(self):
        with pytest.raises(SchemaError, match="missing operator"):
            parse_equation("X", Level.GLOBAL, "a = b c")

    def test_rejects_trailing_star(self):
        with pytest.raises(SchemaError):
            parse_equation("X", Level.GLOBAL, "a = b *")

    def test_rejects_unreachable_collection(self):
        with pytest.raises(SchemaError):
            parse_equation("X", Level.SUB_ITEM, "a = SUM(line_items.b)")


MINIMAL_SCHEMA = """
version: "7"
fields:
  global:
    - {name: total, kind: amount, description: the total}
    - {name: tax, kind: amount}
    - {name: net, kind: amount, default: "0"}
  line_item:
    - {name: amount, kind: amount}
equations:
  - {id: Q1, expr: "total = net + tax"}
  - {id: Q2, expr: "net = SUM(line_items.amount)"}
rules:
  - {id: R1, kind: min_line_items, minimum: "1"}
"""


class TestLoadSchema:
    def test_loads_minimal(self):
        schema = load_schema_text(MINIMAL_SCHEMA)
        assert schema.version == "7"
        assert len(schema.equations) == 2
        assert schema.field(Level.GLOBAL, "net").default == D(0)

    def test_unknown_field_in_equation_names_the_field(self):
        bad = MINIMAL_SCHEMA.replace("total = net + tax", "total = net + bogus")
        with pytest.raises(SchemaError, match="bogus"):
            load_schema_text(bad)

    def test_duplicate_equation_id(self):
        bad = MINIMAL_SCHEMA.replace("id: Q2", "id: Q1")
        with pytest.raises(SchemaError, match="duplicate equation id"):
            load_schema_text(bad)

    def test_duplicate_field(self):
        bad = MINIMAL_SCHEMA.replace(
            "- {name: tax, kind: amount}",
            "- {name: tax, kind: amount}\n    - {name: tax, kind: rate}",
        )
        with pytest.raises(SchemaError, match="duplicate field"):
            load_schema_text(bad)

    def test_text_field_in_arithmetic_rejected(self):
        bad = MINIMAL_SCHEMA.replace("{name: tax, kind: amount}",
                                     "{name: tax, kind: text}")
        with pytest.raises(SchemaError, match="cannot appear in arithmetic"):
            load_schema_text(bad)

    def test_not_yaml(self):
        with pytest.raises(SchemaError):
            load_schema_text("fields: [unclosed")

    def test_builtin_round_trips(self, schema):
        reloaded = load_schema_text(dump_schema(schema))
        assert reloaded == schema

    def test_round_trip_is_a_fixpoint(self, schema):
        once = dump_schema(load_schema_text(dump_schema(schema)))
        assert once == dump_schema(schema)


class TestOutputSchema:
    def test_nullable_string_with_description(self, schema):
        out = to_output_schema(schema)
        prop = out["$defs"]["Invoice"]["properties"]["base_taxable_amount"]
        assert prop["anyOf"] == [{"type": "string"}, {"type": "null"}]
        assert prop["description"] == "The base amount that is subject to tax"
        assert prop["default"] is None

    def test_list_field_is_string_array(self, schema):
        prop = to_output_schema(schema)["$defs"]["Invoice"]["properties"]["net_discounts"]
        assert {"items": {"type": "string"}, "type": "array"} in prop["anyOf"]

    def test_draft_2020_12(self, schema):
        out = to_output_schema(schema)
        assert out["$schema"] == "https://json-schema.org/draft/2020-12/schema"

    def test_nested_defs(self, schema):
        out = to_output_schema(schema)
        line = out["$defs"]["LineItem"]["properties"]
        assert line["sub_items"]["items"] == {"$ref": "#/$defs/SubItem"}
        invoice = out["$defs"]["Invoice"]["properties"]
        assert invoice["line_items"]["items"] == {"$ref": "#/$defs/LineItem"}

    def test_lists_exactly_the_declared_fields(self, schema):
        out = to_output_schema(schema)
        declared = {f.name for f in schema.fields_at(Level.GLOBAL)}
        rendered = set(out["$defs"]["Invoice"]["properties"]) - {"line_items"}
        assert rendered == declared

    def test_empty_schema_gives_empty_properties(self):
        empty = SchemaDef(fields=(), equations=(), rules=())
        out = to_output_schema(empty)
        assert out["$defs"]["Invoice"]["properties"] == {}
