"""Synthetic text-attributed graphs: micro fixtures with known exact
distributions, and a desk-scale benchmark generator with controllable
difficulty.

Generated query text repeats the planted topic tokens of its target set,
so hashing-based similarity identifies the intended seed node by
construction and benchmark results exercise the policy, not the encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .kg import Graph, NodeRecord, Query, QuerySet, build_graph, neighbors
from .mdp import RewardSpec, BINARY_REWARD


@dataclass(frozen=True)
class Fixture:
    name: str
    graph: Graph
    queries: QuerySet
    reward_spec: RewardSpec
    depth_cutoff: int
    seed_node: str  # the node the query's text is built to match

    @property
    def query(self) -> Query:
        return self.queries[0]


def _graph(name: str, nodes: list[tuple[str, str, str]],
           edges: list[tuple[str, str, str]]) -> Graph:
    return build_graph([NodeRecord(id=i, text=t, node_type=ty)
                        for i, t, ty in nodes], edges, name=name)


def fixture_suite() -> dict[str, Fixture]:
    """Fixed micro-graphs used throughout the tests.

    Depth cutoffs are chosen per fixture so that stopping anywhere except
    a target is reward-floored rather than structurally forbidden, while
    keeping the trajectory tree small enough for exact analysis."""
    suite: dict[str, Fixture] = {}

    g = _graph("isolated-node",
               [("iso", "solitary outpost beacon", "entity")], [])
    q = Query(qid="q-iso", text="solitary outpost beacon",
              targets=frozenset({"iso"}))
    suite["isolated-node"] = Fixture("isolated-node", g, QuerySet([q]),
                                     BINARY_REWARD, 6, "iso")

    g = _graph("chain-3", [
        ("a", "alpha station gateway entrance", "entity"),
        ("b", "bravo relay midpoint", "entity"),
        ("c", "charlie archive vault", "entity"),
    ], [("a", "b", "links"), ("b", "c", "links")])
    q = Query(qid="q-chain", text="alpha station gateway entrance",
              targets=frozenset({"c"}))
    suite["chain-3"] = Fixture("chain-3", g, QuerySet([q]),
                               BINARY_REWARD, 3, "a")

    g = _graph("diamond", [
        ("s", "source harbor origin dock", "entity"),
        ("m1", "middle east passage", "entity"),
        ("m2", "middle west passage", "entity"),
        ("t", "treasure island destination", "entity"),
    ], [("s", "m1", "links"), ("s", "m2", "links"),
        ("m1", "t", "links"), ("m2", "t", "links")])
    q = Query(qid="q-diamond", text="source harbor origin dock",
              targets=frozenset({"t"}))
    suite["diamond"] = Fixture("diamond", g, QuerySet([q]),
                               BINARY_REWARD, 2, "s")

    g = _graph("star-2-targets", [
        ("hub", "central plaza junction square", "entity"),
        ("t1", "north quarter market", "entity"),
        ("t2", "south quarter garden", "entity"),
    ], [("hub", "t1", "links"), ("hub", "t2", "links")])
    q = Query(qid="q-star2", text="central plaza junction square",
              targets=frozenset({"t1", "t2"}))
    suite["star-2-targets"] = Fixture("star-2-targets", g, QuerySet([q]),
                                      BINARY_REWARD, 1, "hub")

    g = _graph("star-3-graded", [
        ("hub", "grand terminal concourse atrium", "entity"),
        ("l1", "minor annex wing", "entity"),
        ("l2", "major pavilion hall", "entity"),
        ("l3", "prime gallery chamber", "entity"),
    ], [("hub", "l1", "links"), ("hub", "l2", "links"),
        ("hub", "l3", "links")])
    q = Query(qid="q-star3", text="grand terminal concourse atrium",
              targets=frozenset({"l1", "l2", "l3"}))
    graded = RewardSpec(mode="table",
                        table=(("l1", 1.0), ("l2", 2.0), ("l3", 3.0)))
    suite["star-3-graded"] = Fixture("star-3-graded", g, QuerySet([q]),
                                     graded, 1, "hub")

    g = _graph("binary-tree-depth-2", [
        ("r", "root canopy crown top", "entity"),
        ("c1", "left bough branch", "entity"),
        ("c2", "right bough branch", "entity"),
        ("g1", "left outer leaf", "entity"),
        ("g2", "left inner leaf", "entity"),
        ("g3", "right inner leaf", "entity"),
        ("g4", "right outer leaf", "entity"),
    ], [("r", "c1", "links"), ("r", "c2", "links"),
        ("c1", "g1", "links"), ("c1", "g2", "links"),
        ("c2", "g3", "links"), ("c2", "g4", "links")])
    q = Query(qid="q-tree", text="root canopy crown top",
              targets=frozenset({"g1", "g2", "g3", "g4"}))
    suite["binary-tree-depth-2"] = Fixture("binary-tree-depth-2", g,
                                           QuerySet([q]), BINARY_REWARD, 2,
                                           "r")
    return suite


@dataclass(frozen=True)
class SynthConfig:
    num_queries: int = 60
    bin_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    # target-count ranges per difficulty bin
    bin_ranges: tuple = ((1, 5), (6, 10), (11, 15), (16, 20))
    # share of targets behind the mid node in the hardest bin; lower bins
    # scale this down linearly (bin 1 has no indirection at all)
    cluster_fraction: float = 0.6
    distractors_per_query: int = 8
    filler_tokens_per_doc: int = 4
    vocab_size: int = 400
    depth_cutoff: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.num_queries < 1:
            raise ValueError("num_queries must be positive")
        if abs(sum(self.bin_weights) - 1.0) > 1e-9:
            raise ValueError("bin weights must sum to 1")
        if not 0.0 <= self.cluster_fraction <= 1.0:
            raise ValueError("cluster_fraction must be in [0, 1]")
        if self.distractors_per_query < 0:
            raise ValueError("invalid structure counts")


def _bin_allocation(cfg: SynthConfig) -> list[int]:
    """Deterministic largest-remainder allocation of queries to bins;
    returns a bin index (1..4) per query, in order."""
    raw = [w * cfg.num_queries for w in cfg.bin_weights]
    counts = [int(x) for x in raw]
    remainders = sorted(range(4), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(cfg.num_queries - sum(counts)):
        counts[remainders[i % 4]] += 1
    return [b + 1 for b, c in enumerate(counts) for _ in range(c)]


def generate(cfg: SynthConfig) -> tuple[Graph, QuerySet, dict]:
    """Hub-and-branch topic graphs: one hub per query whose document
    equals the query text. Part of each query's targets fans out behind a
    single non-target mid node (depth 2); the rest hang directly off the
    hub (depth 1), next to topic-sharing distractors. The clustered share
    grows with the difficulty bin (none in bin 1, cluster_fraction in
    bin 4), so harder queries combine more targets with more structural
    indirection. The skewed branch sizes make per-branch sampling
    proportions matter: policies that oversharpen toward the heavy branch
    retrieve duplicates instead of the singleton targets."""
    rng = np.random.default_rng(cfg.seed)
    vocab = [f"tok{i}" for i in range(cfg.vocab_size)]

    def filler() -> str:
        idx = rng.choice(cfg.vocab_size, size=cfg.filler_tokens_per_doc,
                         replace=False)
        return " ".join(vocab[i] for i in sorted(idx))

    nodes: list[NodeRecord] = []
    edges: list[tuple[str, str, str]] = []
    queries: list[Query] = []
    manifest_queries = []
    for qi, bin_idx in enumerate(_bin_allocation(cfg)):
        topic = f"topic{qi}"
        lo, hi = cfg.bin_ranges[bin_idx - 1]
        m = int(rng.integers(lo, hi + 1))
        hub = f"q{qi}-hub"
        query_text = f"{topic} hub locate every item"
        nodes.append(NodeRecord(id=hub, text=query_text, node_type="hub"))
        targets = []
        distances = {}
        bin_cluster = cfg.cluster_fraction * (bin_idx - 1) / 3.0
        n_cluster = int(round(m * bin_cluster)) if m > 1 else 0
        n_mids = min(bin_idx - 1, n_cluster)
        if n_cluster:
            # Split clustered targets over the bin's mid nodes with skewed
            # sizes (roughly 2:1 between consecutive groups, each >= 1).
            weights = [2.0 ** -g for g in range(n_mids)]
            total = sum(weights)
            sizes = [max(1, int(round(n_cluster * w / total)))
                     for w in weights]
            while sum(sizes) > n_cluster:
                sizes[sizes.index(max(sizes))] -= 1
            sizes[0] += n_cluster - sum(sizes)
            ci = 0
            for g, size in enumerate(sizes):
                mid = f"q{qi}-mid{g}"
                nodes.append(NodeRecord(
                    id=mid, text=f"{topic} group index {filler()}",
                    node_type="group"))
                edges.append((hub, mid, "groups"))
                for _ in range(size):
                    nid = f"q{qi}-c{ci}"
                    ci += 1
                    nodes.append(NodeRecord(
                        id=nid, text=f"{topic} item record {filler()}",
                        node_type="item"))
                    edges.append((mid, nid, "mentions"))
                    targets.append(nid)
                    distances[nid] = 2
        for j in range(m - n_cluster):
            nid = f"q{qi}-t{j}"
            nodes.append(NodeRecord(
                id=nid, text=f"{topic} item record {filler()}",
                node_type="item"))
            edges.append((hub, nid, "mentions"))
            targets.append(nid)
            distances[nid] = 1
        # Distractor count also scales with difficulty (quarter of the
        # configured maximum in bin 1, all of it in bin 4).
        n_distract = int(round(cfg.distractors_per_query * bin_idx / 4.0))
        for di in range(n_distract):
            nid = f"q{qi}-d{di}"
            nodes.append(NodeRecord(
                id=nid, text=f"{topic} aside note {filler()}",
                node_type="item"))
            edges.append((hub, nid, "mentions"))
        query = Query(qid=f"q{qi}", text=query_text,
                      targets=frozenset(targets))
        queries.append(query)
        manifest_queries.append({
            "qid": query.qid, "bin": bin_idx, "seed_node": hub,
            "num_targets": m,
            "target_distances": distances,
        })
    graph = build_graph(nodes, edges, name=f"synth-{cfg.seed}")
    # Solvability guarantee: every target within depth_cutoff of the hub.
    for i, entry in enumerate(manifest_queries):
        bad = [t for t, d in entry["target_distances"].items()
               if d > cfg.depth_cutoff]
        if bad:
            raise ValueError(f"query {i}: targets beyond depth cutoff: {bad}")
    manifest = {"config": asdict(cfg), "num_nodes": graph.num_nodes,
                "num_edges": graph.num_edges, "queries": manifest_queries}
    return graph, QuerySet(queries), manifest


def save_manifest(manifest: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
