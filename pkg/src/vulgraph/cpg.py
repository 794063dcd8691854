"""Canonical code property graph model and corpus ingestion.

External extractors (Joern and friends) are expected to convert their output
into one JSON document per function::

    {"function_id": str, "label": 0 | 1, "cwe": [str], "code": str,
     "nodes": [{"id": int, "type": str, "code": str}],
     "edges": [{"src": int, "dst": int, "kind": "AST" | "CFG" | "DDG" | "CDG"}]}

A corpus is a JSON Lines file of such documents, each optionally carrying a
``split`` key.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import IntegrityError, MappingError, ParseError

logger = logging.getLogger(__name__)

EDGE_KINDS = ("AST", "CFG", "DDG", "CDG")
SPLITS = ("train", "valid", "test")
DEFAULT_MAX_NODES = 500


@dataclass(frozen=True)
class CodeNode:
    id: int
    node_type: str
    code_fragment: str = ""
    is_leaf: bool = True


@dataclass(frozen=True)
class CodeEdge:
    src: int
    dst: int
    kind: str


@dataclass(frozen=True)
class CodePropertyGraph:
    function_id: str
    nodes: tuple[CodeNode, ...]
    edges: tuple[CodeEdge, ...]
    label: int
    cwe_tags: tuple[str, ...] = ()
    source_code: str = ""
    content_hash: str = ""

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def edges_of(self, kind: str) -> list[CodeEdge]:
        return [e for e in self.edges if e.kind == kind]


@dataclass
class CorpusRecord:
    graph: CodePropertyGraph
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ParseError("split", f"expected one of {SPLITS}, got {self.split!r}")


def md5_hex(text: str) -> str:
    return hashlib.md5(text.encode("utf-8")).hexdigest()


def _require(doc: dict, key: str, types, where: str = ""):
    name = f"{where}{key}"
    if key not in doc:
        raise ParseError(name, "missing")
    value = doc[key]
    # bool is an int subclass; never accept it where an int is expected
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ParseError(name, f"expected {types}, got bool")
    if not isinstance(value, types):
        raise ParseError(name, f"expected {types}, got {type(value).__name__}")
    return value


def parse_cpg_export(document: dict | str) -> CodePropertyGraph:
    """Validate a canonical CPG document and build the graph.

    Nodes come back sorted by ascending id, which is the canonical order used
    by every downstream consumer. Repeated ``(src, dst, kind)`` triples are
    collapsed to their first occurrence.
    """
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError("<document>", f"invalid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ParseError("<document>", "expected a JSON object")

    function_id = _require(document, "function_id", str)
    label = _require(document, "label", int)
    if label not in (0, 1):
        raise ParseError("label", f"must be 0 or 1, got {label}")
    cwe = document.get("cwe", [])
    if not isinstance(cwe, list) or not all(isinstance(t, str) for t in cwe):
        raise ParseError("cwe", "expected a list of strings")
    code = _require(document, "code", str)
    raw_nodes = _require(document, "nodes", list)
    raw_edges = _require(document, "edges", list)

    seen: dict[int, tuple[str, str]] = {}
    for i, raw in enumerate(raw_nodes):
        where = f"nodes[{i}]."
        if not isinstance(raw, dict):
            raise ParseError(f"nodes[{i}]", "expected an object")
        nid = _require(raw, "id", int, where)
        ntype = _require(raw, "type", str, where)
        frag = raw.get("code", "")
        if not isinstance(frag, str):
            raise ParseError(f"{where}code", "expected str")
        if nid in seen:
            raise IntegrityError(f"duplicate node id {nid}")
        seen[nid] = (ntype, frag)

    edges: list[CodeEdge] = []
    triples: set[tuple[int, int, str]] = set()
    for i, raw in enumerate(raw_edges):
        where = f"edges[{i}]."
        if not isinstance(raw, dict):
            raise ParseError(f"edges[{i}]", "expected an object")
        src = _require(raw, "src", int, where)
        dst = _require(raw, "dst", int, where)
        kind = _require(raw, "kind", str, where)
        if kind not in EDGE_KINDS:
            raise ParseError(f"{where}kind", f"expected one of {EDGE_KINDS}, got {kind!r}")
        for end, nid in (("src", src), ("dst", dst)):
            if nid not in seen:
                raise IntegrityError(f"edge {i} ({src}->{dst}, {kind}): {end} {nid} is not a node")
        key = (src, dst, kind)
        if key in triples:
            logger.debug("dropping repeated edge %s in %s", key, function_id)
            continue
        triples.add(key)
        edges.append(CodeEdge(src, dst, kind))

    has_ast_child = {e.src for e in edges if e.kind == "AST"}
    nodes = tuple(
        CodeNode(nid, seen[nid][0], seen[nid][1], nid not in has_ast_child) for nid in sorted(seen)
    )
    return CodePropertyGraph(
        function_id=function_id,
        nodes=nodes,
        edges=tuple(edges),
        label=label,
        cwe_tags=tuple(cwe),
        source_code=code,
        content_hash=md5_hex(code),
    )


def to_document(g: CodePropertyGraph) -> dict:
    return {
        "function_id": g.function_id,
        "label": g.label,
        "cwe": list(g.cwe_tags),
        "code": g.source_code,
        "nodes": [{"id": n.id, "type": n.node_type, "code": n.code_fragment} for n in g.nodes],
        "edges": [{"src": e.src, "dst": e.dst, "kind": e.kind} for e in g.edges],
    }


def dumps_graph(g: CodePropertyGraph, split: str | None = None) -> str:
    doc = to_document(g)
    if split is not None:
        doc["split"] = split
    return json.dumps(doc, sort_keys=True, ensure_ascii=False)


def filter_by_node_count(g: CodePropertyGraph, max_nodes: int = DEFAULT_MAX_NODES) -> CodePropertyGraph | None:
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    return g if g.num_nodes <= max_nodes else None


def prune_nonleaf_properties(g: CodePropertyGraph) -> CodePropertyGraph:
    """Blank the code fragment of every node that has an outgoing AST edge."""
    if all(n.is_leaf or not n.code_fragment for n in g.nodes):
        return g
    nodes = tuple(n if n.is_leaf else replace(n, code_fragment="") for n in g.nodes)
    return replace(g, nodes=nodes)


def dedup_by_hash(corpus: Iterable[CodePropertyGraph]) -> list[CodePropertyGraph]:
    seen: set[str] = set()
    out = []
    for g in corpus:
        if g.content_hash in seen:
            continue
        seen.add(g.content_hash)
        out.append(g)
    return out


_WS = re.compile(r"\s+")
_BRACES_ONLY = re.compile(r"^[\s{}();]*$")


def _normalize_statement(text: str) -> str:
    return _WS.sub(" ", text).strip().rstrip(";").strip()


def split_statements(source_code: str) -> list[str]:
    """One statement per source line; brace-only lines are structural and skipped."""
    return [line.strip() for line in source_code.splitlines() if not _BRACES_ONLY.match(line)]


def map_statements_to_nodes(source_code: str, g: CodePropertyGraph) -> dict[int, int]:
    """Map each statement index to the node whose fragment matches it.

    Matching is on whitespace-normalized text with a trailing ``;`` ignored.
    When several nodes carry the same fragment, the lowest id not already
    claimed wins so repeated statements land on distinct nodes.
    """
    by_text: dict[str, list[int]] = {}
    for n in g.nodes:
        key = _normalize_statement(n.code_fragment)
        if key:
            by_text.setdefault(key, []).append(n.id)

    mapping: dict[int, int] = {}
    used: set[int] = set()
    missing = []
    for idx, stmt in enumerate(split_statements(source_code)):
        candidates = by_text.get(_normalize_statement(stmt))
        if not candidates:
            missing.append(stmt)
            continue
        free = [c for c in candidates if c not in used]
        chosen = free[0] if free else candidates[0]
        used.add(chosen)
        mapping[idx] = chosen
    if missing:
        raise MappingError(missing)
    return mapping


# -- corpus files ------------------------------------------------------------


def read_corpus(path: str | Path) -> list[CorpusRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}", f"invalid JSON: {exc}") from exc
            split = doc.get("split", "train") if isinstance(doc, dict) else "train"
            records.append(CorpusRecord(parse_cpg_export(doc), split))
    return records


def write_corpus(records: Sequence[CorpusRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_graph(rec.graph, rec.split) + "\n")


def assign_splits(graphs: Sequence[CodePropertyGraph], seed: int = 0,
                  valid_frac: float = 0.1, test_frac: float = 0.1) -> list[CorpusRecord]:
    """Seeded shuffle into train/valid/test; input order is kept in the output.

    With at least three graphs, valid and test each get at least one record.
    """
    n = len(graphs)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_valid = round(valid_frac * n)
    n_test = round(test_frac * n)
    if n >= 3:
        n_valid, n_test = max(1, n_valid), max(1, n_test)
    split_of = {}
    for rank, idx in enumerate(order):
        if rank < n_valid:
            split_of[idx] = "valid"
        elif rank < n_valid + n_test:
            split_of[idx] = "test"
        else:
            split_of[idx] = "train"
    return [CorpusRecord(g, split_of[i]) for i, g in enumerate(graphs)]


def iter_documents(input_dir: str | Path) -> Iterator[tuple[Path, dict]]:
    """Yield ``(path, document)`` for every ``*.json`` and ``*.jsonl`` file, sorted by path."""
    root = Path(input_dir)
    for path in sorted(root.rglob("*")):
        if path.suffix == ".json":
            yield path, json.loads(path.read_text(encoding="utf-8"))
        elif path.suffix == ".jsonl":
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    yield path, json.loads(line)


def ingest_directory(input_dir: str | Path, max_nodes: int = DEFAULT_MAX_NODES,
                     dedup: bool = True, seed: int = 0) -> tuple[list[CorpusRecord], dict]:
    """Parse, size-filter, prune and deduplicate every document under ``input_dir``.

    The node-count filter runs on the parsed graph before pruning. Documents
    that already carry a ``split`` keep it; the rest are assigned by
    :func:`assign_splits`.
    """
    graphs, given_splits = [], []
    stats = {"documents": 0, "too_large": 0, "duplicates": 0}
    for _path, doc in iter_documents(input_dir):
        stats["documents"] += 1
        g = filter_by_node_count(parse_cpg_export(doc), max_nodes)
        if g is None:
            stats["too_large"] += 1
            continue
        graphs.append(prune_nonleaf_properties(g))
        given_splits.append(doc.get("split"))

    if dedup:
        kept = dedup_by_hash(graphs)
        stats["duplicates"] = len(graphs) - len(kept)
        kept_ids = {id(g) for g in kept}
        pairs = [(g, s) for g, s in zip(graphs, given_splits) if id(g) in kept_ids]
    else:
        pairs = list(zip(graphs, given_splits))

    unassigned = [g for g, s in pairs if s is None]
    assigned = iter(assign_splits(unassigned, seed=seed))
    records = [CorpusRecord(g, s) if s is not None else next(assigned) for g, s in pairs]
    stats["records"] = len(records)
    return records, stats
