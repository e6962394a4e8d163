"""Synthetic receipt fixtures: coherent documents, a golden corpus with
injected failures for end-to-end runs, and a fuzz corpus for cascade tests.

Every generated receipt is arithmetically exact by construction, and its OCR
text contains every ground-truth value verbatim (plus a cash/change decoy
pair that broken candidates can latch onto).
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .llm import Candidate, TokenProb
from .schema import Level, SchemaDef, builtin_transactional_schema
from .values import blank_explicit

ITEM_NAMES = (
    "KOPI SUSU", "TEH MANIS", "NASI GORENG", "MIE AYAM", "AYAM BAKAR",
    "ES JERUK", "SATE KAMBING", "BAKSO URAT", "GADO GADO", "PISANG GORENG",
)
SHOP_NAMES = ("TOKO MAJU", "WARUNG SARI", "DEPOT ANEKA", "KEDAI LIMA", "RM PADANG")


def fmt_amount(value: int) -> str:
    """Integer amount in the receipts' printed style: 18000 -> '18,000.00'."""
    return f"{value:,d}.00"


def explicit_with(schema: SchemaDef, globals_present: dict,
                  lines: list[dict]) -> dict:
    """A full-key explicit document with the given values filled in."""
    data = blank_explicit(schema).data
    data.update(globals_present)
    line_shape = {f.name: None for f in schema.fields_at(Level.LINE_ITEM)}
    items = []
    for line in lines:
        item = dict(line_shape)
        item.update(line)
        item.setdefault("sub_items", [])
        items.append(item)
    data["line_items"] = items
    return data


@dataclass(frozen=True)
class Receipt:
    doc_id: str
    ocr_text: str
    ground_truth: dict
    gross_str: str  # the printed total
    cash_str: str   # a decoy amount present verbatim in the OCR


def make_receipt(schema: SchemaDef, doc_id: str, index: int) -> Receipt:
    """One deterministic, arithmetically coherent receipt."""
    p1 = 1000 * (index % 7 + 3)          # unit price, line 1 (qty 1)
    p2 = 1000 * (index % 5 + 2)          # unit price, line 2 (qty 2)
    name1 = ITEM_NAMES[index % len(ITEM_NAMES)]
    name2 = ITEM_NAMES[(index + 3) % len(ITEM_NAMES)]
    base = p1 + 2 * p2
    tax = base // 10                      # exact: base is a multiple of 1000
    gross = base + tax
    cash = gross + 5000

    gross_str = fmt_amount(gross)
    cash_str = fmt_amount(cash)
    shop = SHOP_NAMES[index % len(SHOP_NAMES)]
    ocr_text = " ".join([
        shop, f"JALAN MAWAR NO {index + 1}",
        "1", "x", name1, fmt_amount(p1), fmt_amount(p1),
        "2", "x", name2, fmt_amount(p2), fmt_amount(2 * p2),
        "SUBTOTAL", fmt_amount(base),
        "TAX 10%", fmt_amount(tax),
        "TOTAL: RP.", gross_str,
        "CASH", cash_str,
        "CHANGE", fmt_amount(cash - gross),
    ])
    ground_truth = explicit_with(
        schema,
        {
            "gross_total": gross_str,
            "net_total": fmt_amount(base),
            "total_tax": fmt_amount(tax),
            "tax_rate": "10%",
            "base_taxable_amount": fmt_amount(base),
            "currency": "RP",
        },
        [
            {"name": name1, "quantity": "1", "unit_price": fmt_amount(p1),
             "net_total": fmt_amount(p1)},
            {"name": name2, "quantity": "2", "unit_price": fmt_amount(p2),
             "net_total": fmt_amount(2 * p2)},
        ],
    )
    return Receipt(doc_id, ocr_text, ground_truth, gross_str, cash_str)


def wrap_answer(payload: dict) -> str:
    """Model-style output: chatter plus a fenced JSON block."""
    return (
        "Here is the extracted information:\n```json\n"
        + json.dumps(payload, indent=1)
        + "\n```\nLet me know if you need anything else."
    )


def _tokens(probs: list[float]) -> tuple[TokenProb, ...]:
    return tuple(TokenProb(f"t{i}", p) for i, p in enumerate(probs))


def _with_gross(doc: dict, gross: str) -> dict:
    out = json.loads(json.dumps(doc))
    out["gross_total"] = gross
    return out


HALLUCINATED_GROSS = "77,777.77"  # appears in no OCR text

# Mean token probabilities per sample, chosen so the best candidate is not
# sample 0 (exercises selection) while staying deterministic.
SAMPLE_PROBS = (
    [0.90, 0.90, 0.90],
    [0.98, 0.96, 0.94],
    [0.80, 0.84, 0.82],
    [0.70, 0.74, 0.72],
)

BROKEN_TEXTS = (
    "The document appears to be a receipt but I could not extract anything.",
    '```json\n{"gross_total": "5\n```',  # truncated, no closing brace
    "Sorry, no structured data found here at all.",
    '{"gross_total": }',  # braces present, invalid JSON
)


def golden_corpus(n_samples: int = 4) -> tuple[list[dict], list[Candidate]]:
    """Ten documents with four candidates each: two documents fully valid,
    two with syntax-broken candidates, three with hallucinated totals, and
    three with wrong-but-verbatim totals that break the arithmetic."""
    schema = builtin_transactional_schema()
    records: list[dict] = []
    candidates: list[Candidate] = []
    classes = ["valid"] * 2 + ["syntax"] * 2 + ["hallucinated"] * 3 + ["arithmetic"] * 3

    for index, failure_class in enumerate(classes):
        doc_id = f"g{index:02d}"
        receipt = make_receipt(schema, doc_id, index)
        records.append({
            "id": doc_id,
            "ocr_text": receipt.ocr_text,
            "ground_truth": receipt.ground_truth,
        })
        for sample in range(n_samples):
            if failure_class == "valid":
                text = wrap_answer(receipt.ground_truth)
            elif failure_class == "syntax":
                text = BROKEN_TEXTS[sample % len(BROKEN_TEXTS)]
            elif failure_class == "hallucinated":
                text = wrap_answer(_with_gross(receipt.ground_truth,
                                               HALLUCINATED_GROSS))
            else:  # arithmetic: the decoy cash amount is verbatim but wrong
                text = wrap_answer(_with_gross(receipt.ground_truth,
                                               receipt.cash_str))
            candidates.append(Candidate(
                doc_id=doc_id,
                sample_index=sample,
                raw_text=text,
                tokens=_tokens(SAMPLE_PROBS[sample % len(SAMPLE_PROBS)]),
            ))
    return records, candidates


# ---------------------------------------------------------------------------
# Fuzz corpus

_GARBAGE_ALPHABET = "abz{}[]:,\"'0123456789 \n\té€%"


def _corrupt(rng: random.Random, receipt: Receipt, payload: dict) -> str:
    kind = rng.choice([
        "garbage", "no_braces", "truncated", "bad_json", "missing_key",
        "null_lines", "wrong_type", "hallucinate", "break_arithmetic",
        "extra_key", "valid",
    ])
    if kind == "garbage":
        return "".join(rng.choice(_GARBAGE_ALPHABET) for _ in range(rng.randint(1, 80)))
    if kind == "no_braces":
        return "no structured output today " + str(rng.random())
    if kind == "truncated":
        return wrap_answer(payload)[: rng.randint(5, 40)]
    if kind == "bad_json":
        return '{"gross_total": ' + str(rng.random()) + ", }"
    if kind == "missing_key":
        broken = json.loads(json.dumps(payload))
        broken.pop(rng.choice(list(k for k in broken if k != "line_items")))
        return wrap_answer(broken)
    if kind == "null_lines":
        broken = json.loads(json.dumps(payload))
        broken["line_items"] = None
        return wrap_answer(broken)
    if kind == "wrong_type":
        broken = json.loads(json.dumps(payload))
        broken["gross_total"] = 12345
        return wrap_answer(broken)
    if kind == "hallucinate":
        return wrap_answer(_with_gross(payload, HALLUCINATED_GROSS))
    if kind == "break_arithmetic":
        return wrap_answer(_with_gross(payload, receipt.cash_str))
    if kind == "extra_key":
        extra = json.loads(json.dumps(payload))
        extra["notes"] = "something the schema never asked for"
        return wrap_answer(extra)
    return wrap_answer(payload)


def fuzz_corpus(
    n_candidates: int, seed: int = 0, samples_per_doc: int = 4
) -> tuple[list[dict], list[Candidate]]:
    """Candidates with randomized corruptions over synthetic receipts."""
    schema = builtin_transactional_schema()
    rng = random.Random(seed)
    records: list[dict] = []
    candidates: list[Candidate] = []
    n_docs = (n_candidates + samples_per_doc - 1) // samples_per_doc
    emitted = 0
    for d in range(n_docs):
        doc_id = f"f{d:04d}"
        receipt = make_receipt(schema, doc_id, d)
        records.append({
            "id": doc_id,
            "ocr_text": receipt.ocr_text,
            "ground_truth": receipt.ground_truth,
        })
        for sample in range(samples_per_doc):
            if emitted >= n_candidates:
                break
            text = _corrupt(rng, receipt, receipt.ground_truth)
            probs = [round(rng.uniform(0.2, 0.99), 3) for _ in range(3)]
            candidates.append(Candidate(doc_id, sample, text, _tokens(probs)))
            emitted += 1
    return records, candidates
