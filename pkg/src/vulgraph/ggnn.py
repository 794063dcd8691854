"""Gated graph neural network over code property graphs, plus the conv/pool readout.

Node states live in rows, so a message ``A @ h_u`` is computed as ``h_u @ A.T``.
Every directed edge kind gets two message matrices: ``fwd`` carries ``src -> dst``
and ``rev`` carries ``dst -> src``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .cpg import EDGE_KINDS, CodePropertyGraph
from .errors import DimensionError
from .featurize import DTYPE, pad_to_state_dim

DIRECTIONS = ("fwd", "rev")
NUM_CLASSES = 2

DEFAULT_STEPS = 6
DEFAULT_CONV_LAYERS = 2
DEFAULT_KERNEL_WIDTH = 3
DEFAULT_POOL_WINDOW = 2


@dataclass
class Adjacency:
    """Edge index of one graph, or of a disjoint union of graphs (a batch).

    ``edges[kind]`` holds ``(src, dst)`` row positions. ``pairs`` lists the
    undirected, self-loop-free neighbor relation over all kinds as
    ``(center, neighbor)``, sorted by center then neighbor.
    """

    num_nodes: int
    edges: dict[str, tuple[torch.Tensor, torch.Tensor]]
    pairs: tuple[torch.Tensor, torch.Tensor]
    slices: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def from_graph(cls, g: CodePropertyGraph) -> "Adjacency":
        pos = {nid: i for i, nid in enumerate(g.node_ids())}
        edges = {}
        for kind in EDGE_KINDS:
            es = g.edges_of(kind)
            edges[kind] = (
                torch.tensor([pos[e.src] for e in es], dtype=torch.long),
                torch.tensor([pos[e.dst] for e in es], dtype=torch.long),
            )
        nbrs = set()
        for e in g.edges:
            a, b = pos[e.src], pos[e.dst]
            if a != b:
                nbrs.add((a, b))
                nbrs.add((b, a))
        ordered = sorted(nbrs)
        pairs = (
            torch.tensor([p[0] for p in ordered], dtype=torch.long),
            torch.tensor([p[1] for p in ordered], dtype=torch.long),
        )
        return cls(g.num_nodes, edges, pairs, [(0, g.num_nodes)])

    @classmethod
    def batch(cls, parts: Sequence["Adjacency"]) -> "Adjacency":
        offset = 0
        edges = {k: ([], []) for k in EDGE_KINDS}
        centers, neighbors, slices = [], [], []
        for adj in parts:
            for k in EDGE_KINDS:
                src, dst = adj.edges[k]
                edges[k][0].append(src + offset)
                edges[k][1].append(dst + offset)
            centers.append(adj.pairs[0] + offset)
            neighbors.append(adj.pairs[1] + offset)
            slices.append((offset, offset + adj.num_nodes))
            offset += adj.num_nodes
        cat = lambda ts: torch.cat(ts) if ts else torch.zeros(0, dtype=torch.long)
        return cls(
            offset,
            {k: (cat(s), cat(d)) for k, (s, d) in edges.items()},
            (cat(centers), cat(neighbors)),
            slices,
        )

    def degree(self) -> torch.Tensor:
        return torch.bincount(self.pairs[0], minlength=self.num_nodes)


@dataclass
class PropagationTrace:
    states: list[torch.Tensor]

    def __len__(self):
        return len(self.states)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]

    def select(self, start: int, stop: int) -> "PropagationTrace":
        return PropagationTrace([h[start:stop] for h in self.states])


@dataclass
class GraphLogits:
    scores: torch.Tensor

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.scores, dim=-1)


def _uniform(shape, bound):
    return nn.Parameter((torch.rand(*shape, dtype=DTYPE) * 2 - 1) * bound)


class GatedGraphNet(nn.Module):
    """Message matrices, message bias and GRU weights shared across all steps."""

    def __init__(self, state_dim: int, steps: int = DEFAULT_STEPS):
        super().__init__()
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.state_dim = state_dim
        self.steps = steps
        bound = 1.0 / math.sqrt(state_dim)
        self.A = nn.ParameterDict(
            {f"{k}_{d}": _uniform((state_dim, state_dim), bound) for k in EDGE_KINDS for d in DIRECTIONS}
        )
        self.b = nn.Parameter(torch.zeros(state_dim, dtype=DTYPE))
        self.gru = nn.ParameterDict(
            {name: _uniform((state_dim, state_dim), bound) for name in ("Wz", "Uz", "Wr", "Ur", "W", "U")}
        )

    def message_matrix(self, kind: str, direction: str) -> torch.Tensor:
        return self.A[f"{kind}_{direction}"]

    def forward(self, H1: torch.Tensor, adj: Adjacency) -> PropagationTrace:
        return propagate(adj, H1, self)


def aggregate_messages(H_prev: torch.Tensor, adj: Adjacency, params: GatedGraphNet) -> torch.Tensor:
    """SUM over edge kinds and directions of transformed neighbor states, plus the bias."""
    if H_prev.shape != (adj.num_nodes, params.state_dim):
        raise DimensionError(
            f"state matrix {tuple(H_prev.shape)} does not match ({adj.num_nodes}, {params.state_dim})"
        )
    out = params.b.expand(adj.num_nodes, -1).clone()
    for kind in EDGE_KINDS:
        src, dst = adj.edges[kind]
        if len(src) == 0:
            continue
        fwd = H_prev @ params.message_matrix(kind, "fwd").T
        rev = H_prev @ params.message_matrix(kind, "rev").T
        out = out.index_add(0, dst, fwd[src]).index_add(0, src, rev[dst])
    return out


def gru_update(A_msg: torch.Tensor, H_prev: torch.Tensor, params: GatedGraphNet) -> torch.Tensor:
    if A_msg.shape != H_prev.shape:
        raise DimensionError(f"message {tuple(A_msg.shape)} vs state {tuple(H_prev.shape)}")
    g = params.gru
    update = torch.sigmoid(A_msg @ g["Wz"].T + H_prev @ g["Uz"].T)
    reset = torch.sigmoid(A_msg @ g["Wr"].T + H_prev @ g["Ur"].T)
    candidate = torch.tanh(A_msg @ g["W"].T + (reset * H_prev) @ g["U"].T)
    return (1 - update) * H_prev + update * candidate


def propagate(adj: Adjacency, H1: torch.Tensor, params: GatedGraphNet) -> PropagationTrace:
    """Snapshot H^(1)..H^(T); H^(1) is the padded input, so T-1 updates are applied."""
    states = [H1]
    for _ in range(params.steps - 1):
        H = states[-1]
        states.append(gru_update(aggregate_messages(H, adj, params), H, params))
    return PropagationTrace(states)


def graph_embedding_sum(H_T: torch.Tensor) -> torch.Tensor:
    return H_T.sum(dim=0)


# Alternate propagation schemes (GCN, GAT, ...) for comparison runs register here.
# A propagator is an nn.Module built as cls(state_dim, steps) whose forward(H1, adj)
# returns a PropagationTrace.
PROPAGATORS: dict[str, Callable[..., nn.Module]] = {"ggnn": GatedGraphNet}


def register_propagator(name: str):
    def deco(cls):
        PROPAGATORS[name] = cls
        return cls
    return deco


# -- readout -----------------------------------------------------------------


def receptive_field(layers: int, kernel_width: int, pool_window: int) -> int:
    """Shortest node sequence that survives ``layers`` rounds of valid conv + pool."""
    need = 1
    for _ in range(layers):
        need = need * pool_window + kernel_width - 1
    return need


class ConvPoolReadout(nn.Module):
    """Two conv/max-pool stacks with a dense head each, multiplied and averaged.

    The ``z`` branch sees ``[h_v ‖ x_v]`` per node, the ``y`` branch sees ``h_v``.
    Sequences shorter than the receptive field are right-padded with zero rows.
    """

    def __init__(self, state_dim: int, feature_dim: int, layers: int = DEFAULT_CONV_LAYERS,
                 kernel_width: int = DEFAULT_KERNEL_WIDTH, pool_window: int = DEFAULT_POOL_WINDOW):
        super().__init__()
        if layers < 1:
            raise ValueError("conv layers must be >= 1")
        self.state_dim = state_dim
        self.feature_dim = feature_dim
        self.layers = layers
        self.kernel_width = kernel_width
        self.pool_window = pool_window
        cz, cy = state_dim + feature_dim, state_dim
        self.conv_z = nn.ModuleList(nn.Conv1d(cz, cz, kernel_width, dtype=DTYPE) for _ in range(layers))
        self.conv_y = nn.ModuleList(nn.Conv1d(cy, cy, kernel_width, dtype=DTYPE) for _ in range(layers))
        self.mlp_z = nn.Linear(cz, NUM_CLASSES, dtype=DTYPE)
        self.mlp_y = nn.Linear(cy, NUM_CLASSES, dtype=DTYPE)

    @property
    def min_length(self) -> int:
        return receptive_field(self.layers, self.kernel_width, self.pool_window)

    def _stack(self, seq: torch.Tensor, convs: nn.ModuleList) -> torch.Tensor:
        x = seq.T.unsqueeze(0)  # (1, channels, length)
        for conv in convs:
            x = F.max_pool1d(F.relu(conv(x)), self.pool_window)
        return x.squeeze(0).T  # (positions, channels)

    def forward(self, H_T: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
        if H_T.shape[1] != self.state_dim or X.shape[1] != self.feature_dim:
            raise DimensionError(
                f"readout expects state width {self.state_dim} and feature width {self.feature_dim}, "
                f"got {H_T.shape[1]} and {X.shape[1]}"
            )
        seq_y = H_T
        seq_z = torch.cat([H_T, X], dim=1)
        short = self.min_length - seq_y.shape[0]
        if short > 0:
            seq_y = F.pad(seq_y, (0, 0, 0, short))
            seq_z = F.pad(seq_z, (0, 0, 0, short))
        out_z = self.mlp_z(self._stack(seq_z, self.conv_z))
        out_y = self.mlp_y(self._stack(seq_y, self.conv_y))
        return (out_z * out_y).mean(dim=0)


def readout(trace: PropagationTrace, X: torch.Tensor, params: ConvPoolReadout) -> GraphLogits:
    if not trace.states:
        raise ValueError("empty propagation trace")
    return GraphLogits(params(trace.final, X))


# -- one student -------------------------------------------------------------


@dataclass(frozen=True)
class ModelShape:
    feature_dim: int
    state_dim: int
    steps: int = DEFAULT_STEPS
    conv_layers: int = DEFAULT_CONV_LAYERS
    kernel_width: int = DEFAULT_KERNEL_WIDTH
    pool_window: int = DEFAULT_POOL_WINDOW
    propagator: str = "ggnn"


class GraphClassifier(nn.Module):
    """Propagation plus readout: one student of the ensemble."""

    def __init__(self, shape: ModelShape):
        super().__init__()
        if shape.state_dim < shape.feature_dim:
            raise DimensionError(f"state_dim {shape.state_dim} < feature_dim {shape.feature_dim}")
        if shape.propagator not in PROPAGATORS:
            raise KeyError(f"unknown propagator {shape.propagator!r}; registered: {sorted(PROPAGATORS)}")
        self.shape = shape
        self.ggnn = PROPAGATORS[shape.propagator](shape.state_dim, shape.steps)
        self.readout = ConvPoolReadout(shape.state_dim, shape.feature_dim, shape.conv_layers,
                                       shape.kernel_width, shape.pool_window)

    @classmethod
    def seeded(cls, shape: ModelShape, seed: int) -> "GraphClassifier":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(shape)

    def forward(self, X: torch.Tensor, adj: Adjacency) -> tuple[torch.Tensor, PropagationTrace]:
        """Scores of shape (graphs, 2) and the trace over the whole batch."""
        if X.shape[1] != self.shape.feature_dim:
            raise DimensionError(f"features have width {X.shape[1]}, model expects {self.shape.feature_dim}")
        trace = self.ggnn(pad_to_state_dim(X, self.shape.state_dim), adj)
        scores = [self.readout(trace.final[a:b], X[a:b]) for a, b in adj.slices]
        return torch.stack(scores), trace
