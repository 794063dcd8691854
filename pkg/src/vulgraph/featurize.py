"""Initial node features: one-hot node type concatenated with a content embedding.

Content embeddings come from an :class:`EmbeddingProvider`. Three ship here:

* :class:`HashingProvider` -- seedless signed feature hashing, no parameters.
* :class:`LookupTableProvider` -- a trainable bag-of-hashed-tokens table.
* :class:`PretrainedProvider` -- wraps a Hugging Face encoder (optional extra).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .cpg import CodePropertyGraph
from .errors import ConfigError, DimensionError, ProviderError

DTYPE = torch.float64
DEFAULT_CONTENT_DIM = 64
STATE_PADDING = 16

_TOKEN = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+(?:\.\d+)?|\S")


def tokenize(text: str) -> list[str]:
    """Split on whitespace and punctuation; identifiers and numbers stay whole."""
    return _TOKEN.findall(text)


class TypeVocabulary:
    """Dense node-type index with a trailing UNK slot."""

    UNK = "<unk>"

    def __init__(self, types: Iterable[str] = ()):
        self.index: dict[str, int] = {t: i for i, t in enumerate(sorted(set(types)))}
        self.frozen = False

    @classmethod
    def fit(cls, graphs: Iterable[CodePropertyGraph]) -> "TypeVocabulary":
        vocab = cls(n.node_type for g in graphs for n in g.nodes)
        vocab.frozen = True
        return vocab

    @property
    def unk_index(self) -> int:
        return len(self.index)

    @property
    def width(self) -> int:
        return len(self.index) + 1

    def lookup(self, node_type: str) -> int:
        return self.index.get(node_type, self.unk_index)

    def to_list(self) -> list[str]:
        return sorted(self.index, key=self.index.__getitem__)

    @classmethod
    def from_list(cls, types: Sequence[str]) -> "TypeVocabulary":
        vocab = cls()
        vocab.index = {t: i for i, t in enumerate(types)}
        vocab.frozen = True
        return vocab


def encode_node_type(node_type: str, vocab: TypeVocabulary) -> torch.Tensor:
    if not vocab.frozen:
        raise ValueError("vocabulary must be frozen (fit on the training split) before encoding")
    out = torch.zeros(vocab.width, dtype=DTYPE)
    out[vocab.lookup(node_type)] = 1.0
    return out


# -- providers ---------------------------------------------------------------


class EmbeddingProvider(nn.Module):
    """Maps code fragments and whole functions to fixed-width vectors.

    Subclasses implement :meth:`_embed_fragments` and :meth:`_embed_sequences`.
    Empty fragments always embed to zeros; that rule lives here so no provider
    can get it wrong.
    """

    name = "provider"
    trainable = False

    def __init__(self, content_dim: int, sequence_dim: int):
        super().__init__()
        self.content_dim = int(content_dim)
        self.sequence_dim = int(sequence_dim)

    def spec(self) -> str:
        return self.name

    def embed_fragments(self, fragments: Sequence[str]) -> torch.Tensor:
        out = torch.zeros(len(fragments), self.content_dim, dtype=DTYPE)
        live = [i for i, f in enumerate(fragments) if f.strip()]
        if live:
            emb = self._embed_fragments([fragments[i] for i in live])
            out = out.index_copy(0, torch.tensor(live), emb.to(DTYPE))
        return out

    def embed_sequences(self, codes: Sequence[str]) -> torch.Tensor:
        return self._embed_sequences(list(codes)).to(DTYPE)

    def _embed_fragments(self, fragments: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def _embed_sequences(self, codes: list[str]) -> torch.Tensor:
        raise NotImplementedError


def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


class HashingProvider(EmbeddingProvider):
    """Signed feature hashing of tokens, L2-normalized. Deterministic and parameter-free."""

    name = "hashing"

    def __init__(self, content_dim: int = DEFAULT_CONTENT_DIM, sequence_dim: int | None = None):
        super().__init__(content_dim, sequence_dim or content_dim)

    @staticmethod
    def hash_tokens(tokens: Sequence[str], dim: int) -> np.ndarray:
        vec = np.zeros(dim)
        for tok in tokens:
            h = _hash64(tok)
            vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def _embed_fragments(self, fragments):
        return torch.from_numpy(np.stack([self.hash_tokens(tokenize(f), self.content_dim) for f in fragments]))

    def _embed_sequences(self, codes):
        if not codes:
            return torch.zeros(0, self.sequence_dim, dtype=DTYPE)
        return torch.from_numpy(np.stack([self.hash_tokens(tokenize(c), self.sequence_dim) for c in codes]))


class LookupTableProvider(EmbeddingProvider):
    """Trainable table of token vectors, indexed by hashed token and mean-pooled."""

    name = "lookup"
    trainable = True

    def __init__(self, content_dim: int = DEFAULT_CONTENT_DIM, buckets: int = 1024, seed: int = 0):
        super().__init__(content_dim, content_dim)
        self.buckets = buckets
        gen = torch.Generator().manual_seed(seed)
        self.table = nn.Parameter(torch.randn(buckets, content_dim, generator=gen, dtype=DTYPE) * 0.1)

    def spec(self) -> str:
        return f"lookup:{self.buckets}"

    def _pool(self, texts):
        rows = []
        for text in texts:
            ids = torch.tensor([_hash64(t) % self.buckets for t in tokenize(text)], dtype=torch.long)
            rows.append(self.table[ids].mean(0) if len(ids) else torch.zeros(self.content_dim, dtype=DTYPE))
        return torch.stack(rows) if rows else torch.zeros(0, self.content_dim, dtype=DTYPE)

    def _embed_fragments(self, fragments):
        return self._pool(fragments)

    def _embed_sequences(self, codes):
        return self._pool(codes)


class PretrainedProvider(EmbeddingProvider):
    """Adapter over a Hugging Face encoder.

    Fragment and sequence vectors pool the final hidden layer, either by
    masked mean (default) or by taking the first token.
    """

    name = "pretrained"
    trainable = True

    def __init__(self, model, tokenizer, model_name: str = "custom", pooling: str = "mean",
                 max_length: int = 512):
        hidden = model.config.hidden_size
        super().__init__(hidden, hidden)
        if pooling not in ("mean", "cls"):
            raise ConfigError(f"unknown pooling {pooling!r}")
        self.model = model.to(DTYPE)
        self.tokenizer = tokenizer
        self.model_name = model_name
        self.pooling = pooling
        self.max_length = max_length

    @classmethod
    def from_name(cls, model_name: str, **kwargs) -> "PretrainedProvider":
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise ProviderError(f"pretrained:{model_name}", "transformers is not installed") from exc
        return cls(AutoModel.from_pretrained(model_name), AutoTokenizer.from_pretrained(model_name),
                   model_name=model_name, **kwargs)

    def spec(self) -> str:
        return f"pretrained:{self.model_name}"

    def _encode(self, texts):
        batch = self.tokenizer(texts, padding=True, truncation=True, max_length=self.max_length,
                               return_tensors="pt")
        hidden = self.model(**batch).last_hidden_state
        if self.pooling == "cls":
            return hidden[:, 0]
        mask = batch["attention_mask"].unsqueeze(-1).to(hidden.dtype)
        return (hidden * mask).sum(1) / mask.sum(1).clamp_min(1.0)

    def _embed_fragments(self, fragments):
        return self._encode(fragments)

    def _embed_sequences(self, codes):
        return self._encode(codes)


def make_provider(spec: str, content_dim: int = DEFAULT_CONTENT_DIM, seed: int = 0) -> EmbeddingProvider:
    """Build a provider from a config string: ``hashing``, ``lookup[:buckets]`` or ``pretrained:<model>``."""
    kind, _, arg = spec.partition(":")
    if kind == "hashing":
        return HashingProvider(content_dim)
    if kind == "lookup":
        return LookupTableProvider(content_dim, buckets=int(arg) if arg else 1024, seed=seed)
    if kind == "pretrained":
        if not arg:
            raise ConfigError("pretrained provider needs a model name: pretrained:<model-name>")
        return PretrainedProvider.from_name(arg)
    raise ConfigError(f"unknown provider {spec!r}")


def embed_node_content(fragment: str, provider: EmbeddingProvider) -> torch.Tensor:
    try:
        vec = provider.embed_fragments([fragment])[0]
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(provider.spec(), f"embedding failed: {exc}") from exc
    if not torch.isfinite(vec).all():
        raise ProviderError(provider.spec(), "non-finite embedding")
    return vec


def build_node_feature(type_vec: torch.Tensor, content_vec: torch.Tensor) -> torch.Tensor:
    if type_vec.numel() == 0:
        raise ValueError("type encoding must not be empty")
    return torch.cat([type_vec.reshape(-1), content_vec.reshape(-1)])


def pad_to_state_dim(X: torch.Tensor, z: int) -> torch.Tensor:
    n, d = X.shape
    if z < d:
        raise DimensionError(f"state width {z} is smaller than feature width {d}")
    return torch.cat([X, X.new_zeros(n, z - d)], dim=1)


@dataclass
class NodeFeatureMatrix:
    node_ids: list[int]
    X: torch.Tensor
    H1: torch.Tensor

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def state_dim(self) -> int:
        return self.H1.shape[1]


def default_state_dim(feature_dim: int) -> int:
    return feature_dim + STATE_PADDING


def node_features(g: CodePropertyGraph, vocab: TypeVocabulary, provider: EmbeddingProvider) -> torch.Tensor:
    """Rows in ascending node-id order. Differentiable w.r.t. trainable providers."""
    if not vocab.frozen:
        raise ValueError("vocabulary must be frozen before featurizing")
    types = torch.zeros(g.num_nodes, vocab.width, dtype=DTYPE)
    types[torch.arange(g.num_nodes), torch.tensor([vocab.lookup(n.node_type) for n in g.nodes], dtype=torch.long)] = 1.0
    try:
        content = provider.embed_fragments([n.code_fragment for n in g.nodes])
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(provider.spec(), f"embedding failed: {exc}") from exc
    if content.shape != (g.num_nodes, provider.content_dim):
        raise DimensionError(f"provider returned {tuple(content.shape)}, expected ({g.num_nodes}, {provider.content_dim})")
    return torch.cat([types, content], dim=1)


def featurize_graph(g: CodePropertyGraph, vocab: TypeVocabulary, provider: EmbeddingProvider,
                    state_dim: int | None = None) -> NodeFeatureMatrix:
    X = node_features(g, vocab, provider)
    z = state_dim if state_dim is not None else default_state_dim(X.shape[1])
    return NodeFeatureMatrix(g.node_ids(), X, pad_to_state_dim(X, z))


def dump_features(nfm: NodeFeatureMatrix, path: str | Path) -> None:
    """Write ``<path>.npy`` with the feature matrix and ``<path>.json`` listing node ids and dims."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), nfm.X.detach().numpy())
    sidecar = {"node_ids": nfm.node_ids, "feature_dim": nfm.feature_dim, "state_dim": nfm.state_dim}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_features(path: str | Path) -> NodeFeatureMatrix:
    path = Path(path)
    X = torch.from_numpy(np.load(path.with_suffix(".npy")))
    meta = json.loads(path.with_suffix(".json").read_text())
    if X.shape != (len(meta["node_ids"]), meta["feature_dim"]):
        raise DimensionError(f"feature dump {path} has shape {tuple(X.shape)}, sidecar disagrees")
    return NodeFeatureMatrix(meta["node_ids"], X, pad_to_state_dim(X, meta["state_dim"]))
