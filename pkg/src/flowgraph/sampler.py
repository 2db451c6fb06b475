"""Run a trained policy to sample retrieval trajectories and aggregate
them into ranked results."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, derive_seed, featurize_action, seed_nodes
from .kg import Graph, Query
from .mdp import State, Trajectory, apply_action, candidate_actions, \
    initial_state
from .model import Model, policy_probs


@dataclass(frozen=True)
class RetrievalResult:
    qid: str
    ranked: tuple[tuple[str, float, int], ...]  # (node_id, score, count)
    samples: tuple[Trajectory, ...]
    rerank_applied: bool = False

    def ranked_nodes(self) -> list[str]:
        return [node for node, _, _ in self.ranked]

    def sample_nodes(self) -> list[str]:
        return [t.terminal_node for t in self.samples]


def sample_trajectory(model: Model, graph: Graph, query: Query,
                      cfg: EncoderConfig, rng_seed: int,
                      temperature: float = 1.0,
                      seed_node: str | None = None) -> Trajectory:
    """Roll out the softmax policy from the top-1 similarity seed node.
    Stop terminates; the depth cutoff forces it."""
    rng = np.random.default_rng(rng_seed)
    if seed_node is None:
        seed_node = seed_nodes(query.text, graph, 1, cfg)[0]
    state = initial_state(query.qid, query.text, seed_node, graph)
    path = [seed_node]
    actions = []
    while True:
        cands = candidate_actions(graph, state, cfg.depth_cutoff)
        feats = np.stack([featurize_action(graph, state, a, cfg)
                          for a in cands])
        probs = policy_probs(model.policy_head(feats), temperature)
        action = cands[int(rng.choice(len(cands), p=probs))]
        actions.append(action)
        state = apply_action(graph, state, action)
        if state.stopped:
            break
        path.append(state.node)
    return Trajectory(qid=query.qid, query_text=query.text,
                      path=tuple(path), actions=tuple(actions))


def retrieve(model: Model, graph: Graph, query: Query, n: int = 20,
             cfg: EncoderConfig | None = None, global_seed: int = 0,
             temperature: float = 1.0) -> RetrievalResult:
    """n independent policy samples, ranked by terminal-node frequency.

    Per-sample seeds are derived from (global_seed, qid, sample index), so
    parallel or out-of-order execution cannot change the output."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or EncoderConfig()
    seed_node = seed_nodes(query.text, graph, 1, cfg)[0]
    samples = [
        sample_trajectory(model, graph, query, cfg,
                          derive_seed(global_seed, query.qid, i),
                          temperature, seed_node=seed_node)
        for i in range(n)]
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    for i, traj in enumerate(samples):
        node = traj.terminal_node
        counts[node] = counts.get(node, 0) + 1
        first_seen.setdefault(node, i)
    order = sorted(counts, key=lambda v: (-counts[v], first_seen[v], v))
    ranked = tuple((v, counts[v] / n, counts[v]) for v in order)
    return RetrievalResult(qid=query.qid, ranked=ranked,
                           samples=tuple(samples))


def rerank(model: Model, result: RetrievalResult,
           graph: Graph, cfg: EncoderConfig) -> RetrievalResult:
    """Reorder the ranked list by the stop-action score of each node's
    first sampled trajectory's terminal state. Pure permutation: no
    candidates are added or removed."""
    first_traj: dict[str, Trajectory] = {}
    for traj in result.samples:
        first_traj.setdefault(traj.terminal_node, traj)
    rescore: dict[str, float] = {}
    for node, _, _ in result.ranked:
        traj = first_traj[node]
        # The pre-stop state: full path, not yet stopped.
        state = State(qid=traj.qid, query_text=traj.query_text,
                      path=traj.path, stopped=False)
        stop = candidate_actions(graph, state, cfg.depth_cutoff)[0]
        feats = featurize_action(graph, state, stop, cfg)
        rescore[node] = float(model.policy_head(feats[None, :])[0])
    counts = {node: count for node, _, count in result.ranked}
    order = sorted(rescore, key=lambda v: (-rescore[v], -counts[v], v))
    ranked = tuple((v, rescore[v], counts[v]) for v in order)
    return RetrievalResult(qid=result.qid, ranked=ranked,
                           samples=result.samples, rerank_applied=True)


def save_results(results: list[RetrievalResult], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "qid": r.qid,
                "ranked": [{"node": v, "score": s, "count": c}
                           for v, s, c in r.ranked],
                "sample_terminals": r.sample_nodes(),
                "sample_paths": [list(t.path) for t in r.samples],
                "rerank_applied": r.rerank_applied,
            }) + "\n")


def load_results(path: str) -> list[dict]:
    """Reads result rows back as plain dicts (trajectories are not
    reconstructed; evaluation only needs ranked lists and terminals)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
