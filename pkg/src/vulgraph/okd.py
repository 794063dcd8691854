"""Online knowledge distillation between peer GGNN students.

Each student's propagation snapshots serve as its layers. For every node with
at least one neighbor, a layer defines a local structure: the softmax over
neighbors of a kernel similarity between node states. Student ``k`` at layer
``i`` is pulled towards every peer's structure at layer ``i + 1`` (wrapping from
the last layer back to the first) with a KL divergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import AlignmentError, ConfigError, DimensionError, DivergenceError
from .ggnn import Adjacency, GraphClassifier, ModelShape, PropagationTrace

KERNELS = ("euclidean", "linear", "poly", "rbf")
CE_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    poly_c: float = 1.0
    poly_degree: int = 2
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigError(f"kernel must be one of {KERNELS}, got {self.kind!r}")
        if not self.sigma > 0:
            raise ConfigError("kernel sigma must be > 0")
        if self.poly_degree < 1:
            raise ConfigError("poly_degree must be >= 1")


@dataclass(frozen=True)
class KdConfig:
    alpha: float = 1.0
    kernel: KernelSpec = KernelSpec()
    students: int = 2

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError("kd.alpha must be >= 0")
        if self.students < 1:
            raise ConfigError("kd.students must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.students > 1 and self.alpha > 0


def pairwise_kernel(zi: torch.Tensor, zj: torch.Tensor, spec: KernelSpec) -> torch.Tensor:
    """Row-wise kernel between two equally shaped (..., dim) tensors."""
    if zi.shape != zj.shape:
        raise DimensionError(f"kernel operands differ in shape: {tuple(zi.shape)} vs {tuple(zj.shape)}")
    if spec.kind == "euclidean":
        return ((zi - zj) ** 2).sum(-1)
    if spec.kind == "linear":
        return (zi * zj).sum(-1)
    if spec.kind == "poly":
        return ((zi * zj).sum(-1) + spec.poly_c) ** spec.poly_degree
    return torch.exp(-((zi - zj) ** 2).sum(-1) / (2 * spec.sigma))


def kernel_similarity(z_i, z_j, spec: KernelSpec) -> float:
    zi = torch.as_tensor(np.asarray(z_i, dtype=np.float64))
    zj = torch.as_tensor(np.asarray(z_j, dtype=np.float64))
    if zi.shape != zj.shape:
        raise DimensionError(f"vectors of length {zi.numel()} and {zj.numel()}")
    return float(pairwise_kernel(zi, zj, spec))


@dataclass
class LocalStructure:
    node: int
    neighbors: tuple[int, ...]
    probs: np.ndarray


def local_structure(node: int, state, neighbor_ids: Sequence[int], neighbor_states,
                    spec: KernelSpec) -> LocalStructure | None:
    """Softmax of kernel similarities over the node's neighbors, ascending by id.

    Returns ``None`` for an isolated node.
    """
    if len(neighbor_ids) == 0:
        return None
    order = np.argsort(np.asarray(neighbor_ids), kind="stable")
    nbr = torch.as_tensor(np.asarray(neighbor_states, dtype=np.float64))[order]
    center = torch.as_tensor(np.asarray(state, dtype=np.float64)).expand_as(nbr)
    probs = torch.softmax(pairwise_kernel(center, nbr, spec), dim=0)
    return LocalStructure(node, tuple(int(neighbor_ids[i]) for i in order), probs.numpy())


def lsp_divergence(target: LocalStructure, learner: LocalStructure) -> float:
    """KL(target ‖ learner); zero-probability target terms contribute nothing."""
    if target.node != learner.node or tuple(target.neighbors) != tuple(learner.neighbors):
        raise AlignmentError(
            f"structures disagree: node {target.node} {target.neighbors} vs node {learner.node} {learner.neighbors}"
        )
    t = np.asarray(target.probs, dtype=np.float64)
    q = np.asarray(learner.probs, dtype=np.float64)
    mask = t > 0
    return float(np.sum(t[mask] * (np.log(t[mask]) - np.log(q[mask]))))


def structure_log_probs(H: torch.Tensor, adj: Adjacency, spec: KernelSpec) -> torch.Tensor:
    """Log local-structure probabilities for every ``adj.pairs`` entry, batched.

    The per-center max shift is detached; it cancels out of the result.
    """
    centers, nbrs = adj.pairs
    D = pairwise_kernel(H[centers], H[nbrs], spec)
    shift = torch.full((adj.num_nodes,), -math.inf, dtype=D.dtype)
    shift = shift.scatter_reduce(0, centers, D.detach(), reduce="amax")[centers]
    shifted = D - shift
    totals = torch.zeros(adj.num_nodes, dtype=D.dtype).index_add(0, centers, torch.exp(shifted))
    return shifted - torch.log(totals[centers])


def counted_nodes(adj: Adjacency) -> int:
    return int((adj.degree() > 0).sum())


def wrap_layer(i: int, layers: int) -> int:
    """0-based index of the peer layer that layer ``i`` aligns against."""
    return (i + 1) % layers


def cross_layer_loss(own: PropagationTrace, peers: Sequence[PropagationTrace], adj: Adjacency,
                     spec: KernelSpec) -> torch.Tensor:
    """Structure-preserving loss of one student against all peers.

    Peer traces are treated as constants. ``N`` counts nodes with at least one
    neighbor across the whole batch.
    """
    if not peers:
        raise AlignmentError("cross-layer loss needs at least one peer")
    layers = len(own)
    for p, tr in enumerate(peers):
        if len(tr) != layers:
            raise AlignmentError(f"peer {p} has {len(tr)} layers, expected {layers}")
    n = counted_nodes(adj)
    total = own.states[0].new_zeros(())
    if n == 0:
        return total
    peer_logp = [[structure_log_probs(h.detach(), adj, spec) for h in tr.states] for tr in peers]
    for i in range(layers):
        learner = structure_log_probs(own.states[i], adj, spec)
        j = wrap_layer(i, layers)
        for logp in peer_logp:
            # log-probs are finite (max-shifted), so identical structures give exactly 0
            total = total + (torch.exp(logp[j]) * (logp[j] - learner)).sum()
    return total / (len(peers) * n)


def total_student_loss(ce, structure, alpha: float):
    return ce + alpha * structure


def cross_entropy(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log max(p_true, 1e-12)`` over a (batch, classes) score tensor."""
    logp = torch.log_softmax(scores, dim=-1).clamp_min(math.log(CE_FLOOR))
    return -logp.gather(1, labels.view(-1, 1)).mean()


# -- ensemble training -------------------------------------------------------


def student_seed(seed: int, k: int) -> int:
    return seed * 1009 + k


@dataclass
class StudentEnsemble:
    students: list[GraphClassifier]

    @classmethod
    def create(cls, shape: ModelShape, count: int, seed: int) -> "StudentEnsemble":
        return cls([GraphClassifier.seeded(shape, student_seed(seed, k)) for k in range(count)])

    def __len__(self):
        return len(self.students)

    @property
    def layers(self) -> int:
        return self.students[0].shape.steps


@dataclass
class Batch:
    """Adjacency and labels for a batch plus a way to get its node features.

    ``featurize`` is called once per student phase so that gradients can reach
    a trainable provider; when it is ``None`` the fixed ``X`` is used.
    """

    adj: Adjacency
    labels: torch.Tensor
    X: torch.Tensor | None = None
    featurize: Callable[[], torch.Tensor] | None = None

    def node_features(self) -> torch.Tensor:
        return self.featurize() if self.featurize is not None else self.X


def student_loss(ensemble: StudentEnsemble, k: int, X: torch.Tensor, batch: Batch, config: KdConfig,
                 peer_traces: Sequence[PropagationTrace] | None = None,
                 extra_loss: Callable | None = None) -> tuple[torch.Tensor, dict]:
    """Total loss of student ``k`` with peers' traces held fixed."""
    student = ensemble.students[k]
    scores, trace = student(X, batch.adj)
    ce = cross_entropy(scores, batch.labels)
    if config.enabled and len(ensemble) > 1:
        if peer_traces is None:
            with torch.no_grad():
                peer_traces = [s(X.detach(), batch.adj)[1]
                               for p, s in enumerate(ensemble.students) if p != k]
        structure = cross_layer_loss(trace, peer_traces, batch.adj, config.kernel)
    else:
        structure = ce.new_zeros(())
    total = total_student_loss(ce, structure, config.alpha)
    if extra_loss is not None:
        total = total + extra_loss(scores, batch.labels, trace)
    return total, {"ce": ce.item(), "str": structure.item(), "total": total.item()}


def alternating_train_step(ensemble: StudentEnsemble, batch: Batch, config: KdConfig,
                           optimizers: Sequence[torch.optim.Optimizer],
                           extra_loss: Callable | None = None) -> list[dict]:
    """Update each student in index order while every other student stays fixed.

    Peer traces are recomputed at the start of each phase, so student ``k`` sees
    the already-updated students ``0..k-1``.
    """
    if len(optimizers) != len(ensemble):
        raise ValueError("one optimizer per student is required")
    losses = []
    for k in range(len(ensemble)):
        X = batch.node_features()
        total, parts = student_loss(ensemble, k, X, batch, config, extra_loss=extra_loss)
        if not math.isfinite(parts["total"]):
            raise DivergenceError(f"student {k} loss is {parts['total']}")
        opt = optimizers[k]
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        losses.append(parts)
    return losses


def select_inference_student(f1_scores: Sequence[float]) -> int:
    """Index of the best validation F1; the lowest index wins ties."""
    if not f1_scores:
        raise ValueError("no validation scores")
    best = max(f1_scores)
    return list(f1_scores).index(best)
