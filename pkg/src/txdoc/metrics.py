"""Scoring against ground truth: implicit micro F1, normalized tree edit
distance, validity rate, document accuracy, and the per-filter report table.

F1 compares flattened (field, value) multisets of resolved documents, so it
ignores how list items are grouped and ordered; nTED compares the documents
as ordered trees and is sensitive to exactly that.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .schema import Level, SchemaDef
from .validation import FILTER_LEVELS
from .values import ImplicitDocument, Leaf, canonical_value

FieldBag = Counter  # multiset of (index-free key path, canonical value string)


def _bag_pairs(fields: dict[str, Leaf], key_prefix: str) -> Iterable[tuple[str, str]]:
    for name, leaf in fields.items():
        key = f"{key_prefix}{name}"
        value = canonical_value(leaf.value)
        if isinstance(value, tuple):
            for element in value:
                yield key, str(element)
        else:
            yield key, str(value)


def flatten(doc: ImplicitDocument) -> FieldBag:
    """Flatten a resolved document into its (key, value) multiset; list
    indices are dropped, decimals are trailing-zero normalized."""
    bag: FieldBag = Counter()
    bag.update(_bag_pairs(doc.globals, ""))
    for item in doc.line_items:
        bag.update(_bag_pairs(item.fields, "line_items."))
        for sub in item.sub_items:
            bag.update(_bag_pairs(sub.fields, "line_items.sub_items."))
    return bag


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float


def micro_f1(pairs: list[tuple[FieldBag, FieldBag]]) -> F1Result:
    """Micro-averaged F1 over per-document multiset intersections."""
    tp = sum((pred & truth).total() for pred, truth in pairs)
    pred_total = sum(pred.total() for pred, _ in pairs)
    truth_total = sum(truth.total() for _, truth in pairs)
    precision = tp / pred_total if pred_total else 0.0
    recall = tp / truth_total if truth_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Result(precision, recall, f1)


def doc_accuracy(pairs: list[tuple[ImplicitDocument, ImplicitDocument]]) -> float:
    """Percentage of pairs whose resolved trees match exactly (values
    normalized, list order preserved)."""
    if not pairs:
        return 0.0
    hits = sum(1 for pred, truth in pairs if pred.canonical() == truth.canonical())
    return 100.0 * hits / len(pairs)


# ---------------------------------------------------------------------------
# Tree edit distance


@dataclass(frozen=True)
class TreeNode:
    label: str
    children: tuple["TreeNode", ...] = ()

    def size(self) -> int:
        return 1 + sum(child.size() for child in self.children)


@dataclass(frozen=True)
class DocTree:
    root: TreeNode | None = None

    def size(self) -> int:
        return 0 if self.root is None else self.root.size()


EMPTY_TREE = DocTree(None)


def doc_tree(doc: ImplicitDocument, schema: SchemaDef) -> DocTree:
    """Ordered labeled tree of a document: field names become internal nodes
    (in schema declaration order), values become leaves, list elements keep
    their order.  A document with nothing present is the empty tree."""
    def field_nodes(fields: dict[str, Leaf], level: Level) -> list[TreeNode]:
        nodes = []
        for fdef in schema.fields_at(level):
            leaf = fields.get(fdef.name)
            if leaf is None:
                continue
            value = canonical_value(leaf.value)
            if isinstance(value, tuple):
                children = tuple(TreeNode(str(v)) for v in value)
            else:
                children = (TreeNode(str(value)),)
            nodes.append(TreeNode(fdef.name, children))
        return nodes

    children = field_nodes(doc.globals, Level.GLOBAL)
    item_nodes = []
    for item in doc.line_items:
        inner = field_nodes(item.fields, Level.LINE_ITEM)
        sub_nodes = [
            TreeNode("sub_item", tuple(field_nodes(sub.fields, Level.SUB_ITEM)))
            for sub in item.sub_items
        ]
        if sub_nodes:
            inner.append(TreeNode("sub_items", tuple(sub_nodes)))
        item_nodes.append(TreeNode("line_item", tuple(inner)))
    if item_nodes:
        children.append(TreeNode("line_items", tuple(item_nodes)))
    if not children:
        return EMPTY_TREE
    return DocTree(TreeNode("doc", tuple(children)))


def _index_postorder(root: TreeNode) -> tuple[list[TreeNode], list[int]]:
    nodes: list[TreeNode] = []
    leftmost: list[int] = []

    def walk(node: TreeNode) -> int:
        first_leaf = None
        for child in node.children:
            ci = walk(child)
            if first_leaf is None:
                first_leaf = leftmost[ci]
        nodes.append(node)
        idx = len(nodes) - 1
        leftmost.append(first_leaf if first_leaf is not None else idx)
        return idx

    walk(root)
    return nodes, leftmost


def _keyroots(leftmost: list[int]) -> list[int]:
    seen: set[int] = set()
    roots = []
    for i in range(len(leftmost) - 1, -1, -1):
        if leftmost[i] not in seen:
            roots.append(i)
            seen.add(leftmost[i])
    return sorted(roots)


def ted(a: DocTree, b: DocTree) -> int:
    """Zhang-Shasha ordered tree edit distance, unit costs for insert,
    delete, and relabel."""
    if a.root is None or b.root is None:
        return a.size() + b.size()
    n1, l1 = _index_postorder(a.root)
    n2, l2 = _index_postorder(b.root)
    td = [[0] * len(n2) for _ in n1]

    for i in _keyroots(l1):
        for j in _keyroots(l2):
            m = i - l1[i] + 2
            n = j - l2[j] + 2
            fd = [[0] * n for _ in range(m)]
            ioff = l1[i] - 1
            joff = l2[j] - 1
            for x in range(1, m):
                fd[x][0] = fd[x - 1][0] + 1
            for y in range(1, n):
                fd[0][y] = fd[0][y - 1] + 1
            for x in range(1, m):
                for y in range(1, n):
                    if l1[x + ioff] == l1[i] and l2[y + joff] == l2[j]:
                        cost = 0 if n1[x + ioff].label == n2[y + joff].label else 1
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[x - 1][y - 1] + cost)
                        td[x + ioff][y + joff] = fd[x][y]
                    else:
                        p = l1[x + ioff] - 1 - ioff
                        q = l2[y + joff] - 1 - joff
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[p][q] + td[x + ioff][y + joff])
    return td[-1][-1]


def nted(pred: DocTree, truth: DocTree) -> float:
    """Tree edit distance normalized by the distance from the empty tree to
    the truth, so an empty prediction scores exactly 1.0.  Lower is better."""
    denominator = truth.size()
    if denominator == 0:
        raise ValueError("ground-truth tree is empty; nTED is undefined")
    return ted(pred, truth) / denominator


# ---------------------------------------------------------------------------
# Filter table


@dataclass(frozen=True)
class ScoredPrediction:
    """The scoring payload of one document's representative candidate at one
    filter level; an unparseable representative has an empty bag."""

    bag: FieldBag
    nted: float
    exact: bool
    valid: bool


@dataclass(frozen=True)
class DocumentEntry:
    doc_id: str
    truth_bag: FieldBag
    # filter level -> representative's scores, or None when the document has
    # no candidate surviving that level ("base" is always set).
    levels: dict[str, "ScoredPrediction | None"]


@dataclass(frozen=True)
class FilterRow:
    name: str
    remaining: float
    f1: float
    nted: float
    valid: float
    doc_acc: float

    def cells(self) -> list[float]:
        return [self.remaining, self.f1, self.nted, self.valid, self.doc_acc]


@dataclass
class FilterTable:
    rows: list[FilterRow]

    HEADERS = ("Filter", "% Remaining", "F1", "nTED", "Valid", "Doc. Acc.")

    def to_json(self) -> dict:
        return {
            "rows": [
                {
                    "filter": row.name,
                    "remaining": round(row.remaining, 1),
                    "f1": round(row.f1, 1),
                    "nted": round(row.nted, 1),
                    "valid": round(row.valid, 1),
                    "doc_acc": round(row.doc_acc, 1),
                }
                for row in self.rows
            ]
        }

    def to_csv(self) -> str:
        lines = ["filter,remaining,f1,nted,valid,doc_acc"]
        for row in self.rows:
            cells = ",".join(f"{value:.1f}" for value in row.cells())
            lines.append(f"{row.name},{cells}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        table = [list(self.HEADERS)]
        for row in self.rows:
            table.append([row.name] + [f"{value:.1f}" for value in row.cells()])
        widths = [max(len(line[col]) for line in table) for col in range(len(table[0]))]
        rendered = []
        for line in table:
            cells = [line[0].ljust(widths[0])] + [
                cell.rjust(widths[col]) for col, cell in enumerate(line) if col
            ]
            rendered.append("  ".join(cells).rstrip())
        return "\n".join(rendered) + "\n"


_ROW_NAMES = {"base": "Base", "syntactic": "Syntactic", "task": "Task",
              "domain": "Domain"}


def filter_table(entries: list[DocumentEntry]) -> FilterTable:
    """The Base/Syntactic/Task/Domain report: each row's metrics are computed
    strictly over the documents surviving that filter level."""
    total = len(entries)
    rows = []
    for level in FILTER_LEVELS:
        survivors = [e for e in entries if e.levels.get(level) is not None]
        remaining = 100.0 * len(survivors) / total if total else 0.0
        if survivors:
            score = micro_f1([(e.levels[level].bag, e.truth_bag) for e in survivors])
            mean_nted = 100.0 * sum(e.levels[level].nted for e in survivors) / len(survivors)
            valid = 100.0 * sum(e.levels[level].valid for e in survivors) / len(survivors)
            acc = 100.0 * sum(e.levels[level].exact for e in survivors) / len(survivors)
            f1 = 100.0 * score.f1
        else:
            f1 = mean_nted = acc = 0.0
            valid = 100.0  # vacuously: every surviving document is valid
        rows.append(FilterRow(_ROW_NAMES[level], remaining, f1, mean_nted, valid, acc))
    return FilterTable(rows)
