"""Joint training of the provider and the student ensemble, and interpolated prediction.

Training runs in two stages. The implicit stage alternates OKD updates over
the students; a trainable provider joins every student's optimizer, so node
content embeddings are learned jointly. The explicit stage then freezes the
provider and fits the auxiliary sequence head ``W`` on whole-function
embeddings. At prediction time the selected student's distribution and
``softmax(W E)`` are mixed with weight ``lambda``.
"""

from __future__ import annotations

import copy
import logging
import math
import random
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .config import TrainConfig
from .cpg import CodePropertyGraph, CorpusRecord, filter_by_node_count, prune_nonleaf_properties
from .errors import ConfigError, DataError, DimensionError, DivergenceError, RejectedInput
from .featurize import DTYPE, EmbeddingProvider, TypeVocabulary, make_provider, node_features
from .ggnn import Adjacency, GraphClassifier, GraphLogits, ModelShape, NUM_CLASSES
from .metrics import MetricsReport, compute_metrics
from .okd import (
    CE_FLOOR,
    Batch,
    StudentEnsemble,
    alternating_train_step,
    select_inference_student,
)

logger = logging.getLogger(__name__)


# -- losses and heads ---------------------------------------------------------


def implicit_loss(logits: GraphLogits | torch.Tensor, label: int) -> float:
    """Cross-entropy of one graph's class distribution; ``p`` is floored at 1e-12."""
    probs = logits.probabilities if isinstance(logits, GraphLogits) else torch.as_tensor(logits)
    return -math.log(max(float(probs[int(label)]), CE_FLOOR))


def auxiliary_seq_logits(E: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """``softmax(W E)`` for one embedding (d_s,) or a batch (n, d_s)."""
    if E.shape[-1] != W.shape[1]:
        raise DimensionError(f"sequence embedding width {E.shape[-1]} != head width {W.shape[1]}")
    return torch.softmax(E @ W.T, dim=-1)


def interpolate_predictions(p_graph, p_seq, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    p_graph = np.asarray(p_graph, dtype=np.float64)
    p_seq = np.asarray(p_seq, dtype=np.float64)
    if lam == 1.0:
        return p_graph.copy()
    if lam == 0.0:
        return p_seq.copy()
    return lam * p_graph + (1.0 - lam) * p_seq


def decide(p_final) -> int:
    """Argmax over (safe, vulnerable); an exact tie goes to vulnerable."""
    p = np.asarray(p_final)
    return int(p[..., 1] >= p[..., 0]) if p.ndim == 1 else (p[:, 1] >= p[:, 0]).astype(int)


@dataclass
class PredictionPair:
    p_graph: np.ndarray
    p_seq: np.ndarray
    p_final: np.ndarray
    lam: float

    @property
    def decision(self) -> int:
        return decide(self.p_final)

    def as_dict(self) -> dict:
        return {
            "p_graph": self.p_graph.tolist(),
            "p_seq": self.p_seq.tolist(),
            "p_final": self.p_final.tolist(),
            "lambda": self.lam,
            "decision": self.decision,
        }


# Optional extra loss terms (Algorithm inputs like triplet or regularization
# weights). No formula ships; register a callable under the hook's config key
# and give it a weight in ``TrainConfig.hooks`` to enable it.
LossHook = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]
LOSS_HOOKS: dict[str, LossHook] = {}


def register_loss_hook(name: str, fn: LossHook) -> None:
    LOSS_HOOKS[name] = fn


def _active_hooks(config: TrainConfig) -> list[tuple[float, LossHook]]:
    active = []
    for name, weight in config.hooks.items():
        if weight is None or name == "margin":
            continue
        if name not in LOSS_HOOKS:
            raise ConfigError(f"hooks.{name} is set but no loss is registered for it (register_loss_hook)")
        active.append((float(weight), LOSS_HOOKS[name]))
    return active


# -- the assembled model -------------------------------------------------------


class DetectorModel:
    """Vocabulary, provider, students and auxiliary head, ready for inference."""

    def __init__(self, config: TrainConfig, vocab: TypeVocabulary, provider: EmbeddingProvider,
                 ensemble: StudentEnsemble, aux_W: torch.Tensor, selected: int = 0):
        self.config = config
        self.vocab = vocab
        self.provider = provider
        self.ensemble = ensemble
        self.aux_W = aux_W
        self.selected = selected

    @property
    def shape(self) -> ModelShape:
        return self.ensemble.students[0].shape

    @property
    def student(self) -> GraphClassifier:
        return self.ensemble.students[self.selected]

    def features(self, g: CodePropertyGraph) -> torch.Tensor:
        X = node_features(g, self.vocab, self.provider)
        if X.shape[1] != self.shape.feature_dim:
            raise DimensionError(
                f"graph {g.function_id!r} featurizes to width {X.shape[1]}, "
                f"checkpoint expects {self.shape.feature_dim}"
            )
        return X

    @torch.no_grad()
    def graph_probs(self, graphs: Sequence[CodePropertyGraph], student: int | None = None) -> np.ndarray:
        model = self.ensemble.students[self.selected if student is None else student]
        out = np.zeros((len(graphs), NUM_CLASSES))
        for i, g in enumerate(graphs):
            scores, _ = model(self.features(g), Adjacency.from_graph(g))
            out[i] = torch.softmax(scores[0], -1).numpy()
        return out

    @torch.no_grad()
    def seq_probs(self, graphs: Sequence[CodePropertyGraph]) -> np.ndarray:
        if not graphs:
            return np.zeros((0, NUM_CLASSES))
        E = self.provider.embed_sequences([g.source_code for g in graphs])
        return auxiliary_seq_logits(E, self.aux_W).numpy()

    def to_checkpoint(self, best_valid_f1: float = 0.0) -> Checkpoint:
        provider_state = dict(self.provider.state_dict()) if self.provider.trainable else {}
        return Checkpoint(
            config=self.config,
            vocab=self.vocab.to_list(),
            shape=self.shape,
            students=[dict(s.state_dict()) for s in self.ensemble.students],
            aux_W=self.aux_W.detach().clone(),
            provider_spec=self.provider.spec(),
            provider_state=provider_state,
            selected_student=self.selected,
            best_valid_f1=best_valid_f1,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DetectorModel":
        provider = make_provider(ckpt.provider_spec, ckpt.config.content_dim, seed=ckpt.config.seed)
        if ckpt.provider_state:
            provider.load_state_dict(ckpt.provider_state)
        students = []
        for state in ckpt.students:
            s = GraphClassifier(ckpt.shape)
            s.load_state_dict(state)
            students.append(s)
        return cls(ckpt.config, TypeVocabulary.from_list(ckpt.vocab), provider,
                   StudentEnsemble(students), ckpt.aux_W.clone(), ckpt.selected_student)


def predict(model: DetectorModel | Checkpoint, g: CodePropertyGraph) -> PredictionPair:
    """Interpolated prediction for one function; size-filtered and pruned like ingestion."""
    if isinstance(model, Checkpoint):
        model = DetectorModel.from_checkpoint(model)
    if filter_by_node_count(g, model.config.max_nodes) is None:
        raise RejectedInput(f"graph has {g.num_nodes} nodes, limit is {model.config.max_nodes}")
    g = prune_nonleaf_properties(g)
    p_graph = model.graph_probs([g])[0]
    p_seq = model.seq_probs([g])[0]
    lam = model.config.lam
    return PredictionPair(p_graph, p_seq, interpolate_predictions(p_graph, p_seq, lam), lam)


@dataclass
class BranchProbabilities:
    """Cached per-record branch outputs; interpolation over them is post hoc."""

    p_graph: np.ndarray
    p_seq: np.ndarray
    labels: np.ndarray
    cwe_tags: list[tuple[str, ...]] = field(default_factory=list)

    def final(self, lam: float) -> np.ndarray:
        return interpolate_predictions(self.p_graph, self.p_seq, lam)

    def metrics(self, lam: float) -> MetricsReport:
        return compute_metrics(decide(self.final(lam)).tolist(), self.labels.tolist())


def branch_probabilities(model: DetectorModel, graphs: Sequence[CodePropertyGraph]) -> BranchProbabilities:
    return BranchProbabilities(
        model.graph_probs(graphs),
        model.seq_probs(graphs),
        np.array([g.label for g in graphs], dtype=int),
        [g.cwe_tags for g in graphs],
    )


# -- training ------------------------------------------------------------------


@dataclass
class FinetuneResult:
    state: dict
    losses: list[float]


def finetune_provider(provider: EmbeddingProvider, corpus: Sequence[CorpusRecord | CodePropertyGraph],
                      epochs: int, lr: float = 1e-2, seed: int = 0) -> FinetuneResult:
    """Fit the provider on sequence classification over the train split, full batch.

    A throwaway linear head sits on the sequence embedding. Non-trainable
    providers are left alone with a warning.
    """
    if not provider.trainable:
        warnings.warn(f"provider {provider.spec()!r} is not trainable; fine-tuning skipped", stacklevel=2)
        return FinetuneResult(provider.state_dict(), [])
    graphs = [r.graph if isinstance(r, CorpusRecord) else r for r in corpus
              if not isinstance(r, CorpusRecord) or r.split == "train"]
    if epochs <= 0 or not graphs:
        return FinetuneResult(provider.state_dict(), [])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = torch.nn.Linear(provider.sequence_dim, NUM_CLASSES, dtype=DTYPE)
    opt = torch.optim.Adam(list(provider.parameters()) + list(head.parameters()), lr=lr)
    labels = torch.tensor([g.label for g in graphs])
    codes = [g.source_code for g in graphs]
    losses = []
    provider.train()
    for _ in range(epochs):
        loss = F.cross_entropy(head(provider.embed_sequences(codes)), labels)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    provider.eval()
    return FinetuneResult(provider.state_dict(), losses)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: DetectorModel
    log: list[dict]


def _split(corpus: Sequence[CorpusRecord], name: str) -> list[CodePropertyGraph]:
    return [r.graph for r in corpus if r.split == name]


def _snapshot(model: DetectorModel) -> dict:
    return {
        "students": [copy.deepcopy(s.state_dict()) for s in model.ensemble.students],
        "provider": copy.deepcopy(model.provider.state_dict()),
        "selected": model.selected,
    }


def _restore(model: DetectorModel, snap: dict) -> None:
    for s, state in zip(model.ensemble.students, snap["students"]):
        s.load_state_dict(state)
    model.provider.load_state_dict(snap["provider"])
    model.selected = snap["selected"]


def _fit_aux_head(model: DetectorModel, graphs: Sequence[CodePropertyGraph], epochs: int, lr: float) -> None:
    with torch.no_grad():
        E = model.provider.embed_sequences([g.source_code for g in graphs])
    labels = torch.tensor([g.label for g in graphs])
    W = torch.zeros(NUM_CLASSES, model.provider.sequence_dim, dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([W], lr=lr)
    for _ in range(epochs):
        loss = F.cross_entropy(E @ W.T, labels)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.aux_W = W.detach()


def build_model(config: TrainConfig, train_graphs: Sequence[CodePropertyGraph]) -> DetectorModel:
    """Fresh, untrained model whose vocabulary is fit on ``train_graphs``."""
    vocab = TypeVocabulary.fit(train_graphs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        provider = make_provider(config.provider, config.content_dim, seed=config.seed)
    feature_dim = vocab.width + provider.content_dim
    g = config.ggnn
    shape = ModelShape(
        feature_dim=feature_dim,
        state_dim=config.state_dim if config.state_dim is not None else feature_dim + 16,
        steps=g.steps, conv_layers=g.conv_layers, kernel_width=g.kernel_width,
        pool_window=g.pool_window, propagator=g.propagator,
    )
    ensemble = StudentEnsemble.create(shape, config.kd.students, config.seed)
    aux_W = torch.zeros(NUM_CLASSES, provider.sequence_dim, dtype=DTYPE)
    return DetectorModel(config, vocab, provider, ensemble, aux_W)


def make_optimizers(model: DetectorModel, lr: float) -> list[torch.optim.Optimizer]:
    shared = list(model.provider.parameters()) if model.provider.trainable else []
    return [torch.optim.Adam(list(s.parameters()) + shared, lr=lr) for s in model.ensemble.students]


def evaluate_students(model: DetectorModel, graphs: Sequence[CodePropertyGraph]) -> list[MetricsReport]:
    labels = [g.label for g in graphs]
    return [compute_metrics(decide(model.graph_probs(graphs, student=k)).tolist(), labels)
            for k in range(len(model.ensemble))]


def train(config: TrainConfig, corpus: Sequence[CorpusRecord],
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Implicit OKD stage with early stopping on validation F1, then the explicit head fit.

    The returned model holds the parameters from the epoch with the best
    validation F1 of the selected student.
    """
    train_graphs = _split(corpus, "train")
    valid_graphs = _split(corpus, "valid")
    if not train_graphs:
        raise DataError("corpus has no train records")
    if not valid_graphs:
        raise DataError("corpus has no valid records")
    hooks = _active_hooks(config)

    model = build_model(config, train_graphs)
    if config.provider_finetune_epochs > 0:
        finetune_provider(model.provider, train_graphs, config.provider_finetune_epochs, seed=config.seed)
    optimizers = make_optimizers(model, config.lr)
    provider = model.provider
    adjs = [Adjacency.from_graph(g) for g in train_graphs]
    fixed_X = None
    if not provider.trainable:
        with torch.no_grad():
            fixed_X = [model.features(g) for g in train_graphs]

    extra = None
    if hooks:
        def extra(scores, labels, trace):
            return sum(w * fn(scores, labels, trace) for w, fn in hooks)

    def make_batch(idx: list[int]) -> Batch:
        adj = Adjacency.batch([adjs[i] for i in idx])
        labels = torch.tensor([train_graphs[i].label for i in idx])
        if fixed_X is not None:
            return Batch(adj, labels, X=torch.cat([fixed_X[i] for i in idx]))
        return Batch(adj, labels, featurize=lambda: torch.cat([model.features(train_graphs[i]) for i in idx]))

    rng = random.Random(config.seed)
    log: list[dict] = []
    best_f1, best_snap, bad_epochs = -1.0, _snapshot(model), 0
    last_good = best_snap
    for epoch in range(config.max_epochs):
        order = list(range(len(train_graphs)))
        rng.shuffle(order)
        sums = [{"ce": 0.0, "str": 0.0, "total": 0.0} for _ in model.ensemble.students]
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                step = alternating_train_step(model.ensemble, make_batch(idx), config.kd, optimizers,
                                              extra_loss=extra)
                for acc, parts in zip(sums, step):
                    for key in acc:
                        acc[key] += parts[key] * len(idx)
        except DivergenceError as exc:
            _restore(model, last_good)
            raise DivergenceError(f"epoch {epoch}: {exc}", model.to_checkpoint()) from exc
        n = len(order)
        reports = evaluate_students(model, valid_graphs)
        model.selected = select_inference_student([r.f1 for r in reports])
        last_good = _snapshot(model)
        chosen = reports[model.selected]
        entry = {
            "epoch": epoch,
            "loss": [s["total"] / n for s in sums],
            "ce": [s["ce"] / n for s in sums],
            "str": [s["str"] / n for s in sums],
            "valid_f1_students": [r.f1 for r in reports],
            "selected": model.selected,
            "valid": {"acc": chosen.accuracy, "precision": chosen.precision,
                      "recall": chosen.recall, "f1": chosen.f1},
        }
        log.append(entry)
        logger.info("epoch %d loss %s valid f1 %.4f", epoch, entry["loss"], chosen.f1)
        if on_epoch is not None:
            on_epoch(entry)
        if chosen.f1 > best_f1:
            best_f1, best_snap, bad_epochs = chosen.f1, last_good, 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    _restore(model, best_snap)
    _fit_aux_head(model, train_graphs, config.aux_epochs, config.aux_lr)
    best_f1 = max(best_f1, 0.0)
    return TrainResult(model.to_checkpoint(best_f1), model, log)
