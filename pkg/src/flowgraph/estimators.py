"""Scikit-learn-style estimator wrappers around the pipeline.

Hyperparameters live in __init__ (so get_params/set_params and cloning
work); fit takes the graph and query set, predict returns ranked node
lists per query."""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .encoder import EncoderConfig, cosine, dense_retrieve, embed
from .kg import Graph, QuerySet
from .mdp import RewardSpec, BINARY_REWARD
from .sampler import RetrievalResult, retrieve
from .trainer import TrainConfig, train


def check_graph(graph) -> Graph:
    if not isinstance(graph, Graph):
        raise TypeError(f"expected a Graph, got {type(graph).__name__}")
    if graph.num_nodes == 0:
        raise ValueError("graph has no nodes")
    return graph


def check_queries(queries) -> QuerySet:
    if isinstance(queries, QuerySet):
        return queries
    try:
        return QuerySet(list(queries))
    except TypeError:
        raise TypeError("expected a QuerySet or iterable of Query")


class FlowRetriever(BaseEstimator):
    """Trains the flow-matching retrieval policy and samples ranked
    results. `objective` selects the training loss; the dble default is
    the flow-matching objective, sft/prm are the baselines."""

    def __init__(self, objective: str = "dble", dim: int = 1024,
                 depth_cutoff: int = 6, num_exploration: int = 4,
                 lr: float = 1e-3, epochs: int = 1,
                 max_steps: int | None = None, eval_ratio: float = 0.8,
                 n_samples: int = 20, temperature: float = 1.0,
                 seed: int = 0):
        self.objective = objective
        self.dim = dim
        self.depth_cutoff = depth_cutoff
        self.num_exploration = num_exploration
        self.lr = lr
        self.epochs = epochs
        self.max_steps = max_steps
        self.eval_ratio = eval_ratio
        self.n_samples = n_samples
        self.temperature = temperature
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            objective=self.objective, depth_cutoff=self.depth_cutoff,
            num_exploration=self.num_exploration, lr=self.lr,
            epochs=self.epochs, max_steps=self.max_steps,
            eval_ratio=self.eval_ratio, seed=self.seed,
            encoder=EncoderConfig(dim=self.dim,
                                  depth_cutoff=self.depth_cutoff))

    def fit(self, graph: Graph, queries,
            reward_spec: RewardSpec = BINARY_REWARD) -> "FlowRetriever":
        graph = check_graph(graph)
        queries = check_queries(queries)
        cfg = self._config()
        result = train(graph, queries, cfg, reward_spec=reward_spec)
        self.model_ = result.model
        self.train_log_ = result.log
        self.graph_ = graph
        self.encoder_cfg_ = cfg.encoder
        return self

    def predict(self, queries) -> list[RetrievalResult]:
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted")
        queries = check_queries(queries)
        return [retrieve(self.model_, self.graph_, q, n=self.n_samples,
                         cfg=self.encoder_cfg_, global_seed=self.seed,
                         temperature=self.temperature)
                for q in queries]


class DenseRetriever(BaseEstimator):
    """Similarity-only baseline: ranks nodes by hashed-ngram cosine
    similarity to the query text. No training."""

    def __init__(self, dim: int = 1024, top_k: int = 20):
        self.dim = dim
        self.top_k = top_k

    def fit(self, graph: Graph, queries=None) -> "DenseRetriever":
        self.graph_ = check_graph(graph)
        self.encoder_cfg_ = EncoderConfig(dim=self.dim)
        return self

    def predict(self, queries) -> list[RetrievalResult]:
        if not hasattr(self, "graph_"):
            raise RuntimeError("estimator is not fitted")
        queries = check_queries(queries)
        results = []
        for q in queries:
            qvec = embed(q.text, self.encoder_cfg_)
            top = dense_retrieve(q.text, self.graph_, self.top_k,
                                 self.encoder_cfg_)
            ranked = tuple(
                (node,
                 cosine(qvec, embed(self.graph_.node_text(node),
                                    self.encoder_cfg_)),
                 1)
                for node in top)
            results.append(RetrievalResult(qid=q.qid, ranked=ranked,
                                           samples=()))
        return results
