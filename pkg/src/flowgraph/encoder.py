"""Deterministic text embedding via signed n-gram feature hashing.

Stands in for a learned sentence encoder: tokenize, hash n-grams into a
fixed number of buckets with a sign bit, L2-normalize. Pure functions of
(text, config), bit-identical across runs and platforms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kg import Graph
from .mdp import Action, State

_TOKEN_RE = re.compile(r"[^0-9a-z]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 1024
    ngram_orders: tuple[int, ...] = (1, 2)
    doc_cutoff: int = 400
    window_size: int = 3
    depth_cutoff: int = 6
    hash_seed: int = 0x5EED

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError("dim must be >= 8")
        if self.doc_cutoff < 1:
            raise ValueError("doc_cutoff must be >= 1")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "ngram_orders": list(self.ngram_orders),
            "doc_cutoff": self.doc_cutoff,
            "window_size": self.window_size,
            "depth_cutoff": self.depth_cutoff,
            "hash_seed": self.hash_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(dim=d["dim"], ngram_orders=tuple(d["ngram_orders"]),
                   doc_cutoff=d["doc_cutoff"], window_size=d["window_size"],
                   depth_cutoff=d["depth_cutoff"], hash_seed=d["hash_seed"])


def fnv1a_64(data: bytes, seed: int = 0) -> int:
    """Seeded 64-bit FNV-1a over raw bytes."""
    h = (_FNV_OFFSET ^ (seed & _MASK64)) & _MASK64
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from heterogeneous parts (ints, strings)."""
    return fnv1a_64("|".join(str(p) for p in parts).encode("utf-8"))


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def embed_tokens(tokens: list[str], cfg: EncoderConfig) -> np.ndarray:
    """Hash-accumulate n-grams of an already-tokenized text. No truncation."""
    vec = np.zeros(cfg.dim, dtype=np.float64)
    for order in sorted(cfg.ngram_orders):
        if order < 1:
            raise ValueError("ngram orders must be >= 1")
        for i in range(len(tokens) - order + 1):
            gram = "\x1f".join(tokens[i:i + order])
            h = fnv1a_64(gram.encode("utf-8"), seed=cfg.hash_seed)
            bucket = h % cfg.dim
            sign = 1.0 if (h >> 63) == 0 else -1.0
            vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


@lru_cache(maxsize=65536)
def _embed_cached(text: str, cfg: EncoderConfig) -> np.ndarray:
    vec = embed_tokens(tokenize(text)[:cfg.doc_cutoff], cfg)
    vec.flags.writeable = False
    return vec


def embed(text: str, cfg: EncoderConfig) -> np.ndarray:
    """Embed a text: lowercase, split on non-alphanumeric, truncate to
    doc_cutoff tokens, signed-hash all configured n-gram orders, normalize."""
    return _embed_cached(text, cfg)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    # Embeddings are unit-norm or all-zero, so the dot product is the cosine.
    return float(np.dot(a, b))


def rank_by_similarity(query: str, graph: Graph, top_k: int,
                       cfg: EncoderConfig) -> list[str]:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if graph.num_nodes == 0:
        raise ValueError("empty graph")
    qv = embed(query, cfg)
    scored = sorted(
        ((-cosine(qv, embed(rec.text, cfg)), nid)
         for nid, rec in graph.nodes.items()))
    return [nid for _, nid in scored[:top_k]]


def seed_nodes(query: str, graph: Graph, top_k: int,
               cfg: EncoderConfig) -> list[str]:
    """Nodes ranked by descending query-document cosine, id breaks ties."""
    return rank_by_similarity(query, graph, top_k, cfg)


def dense_retrieve(query: str, graph: Graph, k: int,
                   cfg: EncoderConfig) -> list[str]:
    """Similarity-ranked top-k nodes; the non-agentic retrieval baseline."""
    return rank_by_similarity(query, graph, k, cfg)


def _history_tokens(graph: Graph, state: State, cfg: EncoderConfig) -> list[str]:
    tokens: list[str] = []
    for nid in state.path[-cfg.window_size:]:
        tokens.extend(tokenize(graph.node_text(nid))[:cfg.doc_cutoff])
    return tokens


def featurize_state(graph: Graph, state: State, cfg: EncoderConfig) -> np.ndarray:
    """query embedding + windowed-history embedding + normalized depth.

    Length 2*dim + 1. Only the last window_size documents of the path are
    featurized, each truncated to doc_cutoff tokens.
    """
    qv = embed(state.query_text, cfg)
    hv = embed_tokens(_history_tokens(graph, state, cfg), cfg)
    depth = state.depth / cfg.depth_cutoff
    return np.concatenate([qv, hv, [depth]])


def featurize_action(graph: Graph, state: State, action: Action,
                     cfg: EncoderConfig,
                     state_feats: np.ndarray | None = None) -> np.ndarray:
    """State features + candidate-document embedding + relation embedding
    + self-loop flag. Length 4*dim + 2."""
    if state_feats is None:
        state_feats = featurize_state(graph, state, cfg)
    if action.is_stop:
        doc = graph.node_text(state.node)
        rel = ""
        flag = 1.0
    else:
        doc = graph.node_text(action.target)
        rel = action.relation
        flag = 0.0
    return np.concatenate([state_feats, embed(doc, cfg), embed(rel, cfg),
                           [flag]])


def state_feature_dim(cfg: EncoderConfig) -> int:
    return 2 * cfg.dim + 1


def action_feature_dim(cfg: EncoderConfig) -> int:
    return 4 * cfg.dim + 2
