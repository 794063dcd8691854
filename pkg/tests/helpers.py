"""Shared builders for test graphs and small models."""

from __future__ import annotations

import random

import numpy as np
import torch

from vulgraph.cpg import EDGE_KINDS, parse_cpg_export


def graph_doc(num_nodes, edges, label=0, code=None, function_id="g", types=None, fragments=None, cwe=()):
    code = code if code is not None else f"void {function_id}() {{}}"
    nodes = [{"id": i,
              "type": types[i] if types else "IDENTIFIER",
              "code": fragments[i] if fragments else f"v{i}"} for i in range(num_nodes)]
    return {
        "function_id": function_id,
        "label": label,
        "cwe": list(cwe),
        "code": code,
        "nodes": nodes,
        "edges": [{"src": s, "dst": d, "kind": k} for s, d, k in edges],
    }


def random_edges(rng: random.Random, n: int, count: int, allow_self=False):
    out = set()
    for _ in range(count):
        s, d = rng.randrange(n), rng.randrange(n)
        if s == d and not allow_self:
            continue
        out.add((s, d, rng.choice(EDGE_KINDS)))
    return sorted(out)


def random_graph(rng: random.Random, n: int, count: int | None = None, **kw):
    edges = random_edges(rng, n, count if count is not None else 2 * n)
    return parse_cpg_export(graph_doc(n, edges, **kw)), edges


def ggnn_params_as_lists(net):
    """Message matrices keyed by (kind, dir), bias and GRU weights as plain Python lists."""
    A = {(k, d): net.message_matrix(k, d).detach().numpy().copy() for k in EDGE_KINDS for d in ("fwd", "rev")}
    b = net.b.detach().numpy().tolist()
    W = {name: p.detach().numpy().tolist() for name, p in net.gru.items()}
    return A, b, W


def state_bytes(module: torch.nn.Module) -> bytes:
    return b"".join(v.detach().contiguous().numpy().tobytes() for _, v in sorted(module.state_dict().items()))


def random_states(rng: np.random.Generator, n: int, z: int, scale=1.0):
    return rng.normal(scale=scale, size=(n, z))


def tiny_config(**overrides):
    """A fast configuration for training tests; dotted keys override nested fields."""
    from vulgraph.config import TrainConfig

    base = {
        "content_dim": 8, "batch_size": 8, "lr": 3e-3, "max_epochs": 2, "patience": 5,
        "ggnn": {"steps": 3, "conv_layers": 1, "kernel_width": 2, "pool_window": 2},
        "aux": {"epochs": 50, "lr": 0.05},
    }
    return TrainConfig.from_dict(base).with_overrides(**overrides) if overrides else TrainConfig.from_dict(base)


def synthetic_records(n=24, seed=0):
    from vulgraph.cpg import assign_splits
    from vulgraph.synthetic import planted_motif_corpus

    return assign_splits(planted_motif_corpus(n, seed=seed), seed=seed, valid_frac=0.2, test_frac=0.2)
