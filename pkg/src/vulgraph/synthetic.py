"""Small synthetic CPG corpora with a planted vulnerability motif.

Every function is a handful of statements over a shared buffer. Vulnerable
functions contain an unbounded ``strcpy`` call; safe ones use a bounded copy
instead. The motif shows up both as a distinct leaf fragment in the graph and
as a token in the source text, so both branches can pick it up.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .cpg import CodePropertyGraph, parse_cpg_export, prune_nonleaf_properties, to_document

_FILLER = [
    "int n = strlen(input)",
    "char buf[64]",
    "int i = 0",
    "n = n + 1",
    "i = i * 2",
    "log_message(buf)",
    "count = count - 1",
    "flag = check(input)",
]
_UNSAFE = "strcpy(buf, input)"
_SAFE = ["strncpy(buf, input, 63)", "snprintf(buf, 64, input)", "memcpy_s(buf, 64, input, n)"]
_CWES = ["CWE-120", "CWE-787", "CWE-119"]


def _token_type(tok: str) -> str:
    if tok.isdigit():
        return "LITERAL"
    if tok.replace("_", "").isalnum():
        return "IDENTIFIER"
    return "OPERATOR"


def synth_document(index: int, vulnerable: bool, rng: random.Random) -> dict:
    statements = rng.sample(_FILLER, rng.randint(2, 5))
    motif = _UNSAFE if vulnerable else rng.choice(_SAFE)
    statements.insert(rng.randint(0, len(statements)), motif)
    code = "void f%d(char *input) {\n%s\n}" % (index, "\n".join(f"    {s};" for s in statements))

    nodes = [{"id": 0, "type": "METHOD", "code": code}]
    edges = []
    stmt_ids = []
    next_id = 1
    for s in statements:
        sid = next_id
        next_id += 1
        stmt_ids.append(sid)
        is_call = "(" in s and "=" not in s
        nodes.append({"id": sid, "type": "CALL" if is_call else "STATEMENT", "code": s})
        edges.append({"src": 0, "dst": sid, "kind": "AST"})
        for tok in s.replace("(", " ( ").replace(")", " ) ").replace(",", " , ").split():
            nodes.append({"id": next_id, "type": _token_type(tok), "code": tok})
            edges.append({"src": sid, "dst": next_id, "kind": "AST"})
            next_id += 1
    for a, b in zip(stmt_ids, stmt_ids[1:]):
        edges.append({"src": a, "dst": b, "kind": "CFG"})
    # data dependence: every statement touching buf depends on the first one that does
    buf_users = [sid for sid, s in zip(stmt_ids, statements) if "buf" in s]
    for later in buf_users[1:]:
        edges.append({"src": buf_users[0], "dst": later, "kind": "DDG"})
    return {
        "function_id": f"synthetic_{index}",
        "label": int(vulnerable),
        "cwe": [rng.choice(_CWES)] if vulnerable else [],
        "code": code,
        "nodes": nodes,
        "edges": edges,
    }


def planted_motif_corpus(n: int, seed: int = 0, prune: bool = True) -> list[CodePropertyGraph]:
    """``n`` graphs, half vulnerable, shuffled by ``seed``; pruned like ingested graphs by default."""
    rng = random.Random(seed)
    labels = [i % 2 == 0 for i in range(n)]
    rng.shuffle(labels)
    graphs = [parse_cpg_export(synth_document(seed * 100_000 + i, v, rng)) for i, v in enumerate(labels)]
    return [prune_nonleaf_properties(g) for g in graphs] if prune else graphs


def write_documents(graphs, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for g in graphs:
        path = directory / f"{g.function_id}.json"
        path.write_text(json.dumps(to_document(g), sort_keys=True))
        paths.append(path)
    return paths
