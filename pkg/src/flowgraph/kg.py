"""Text-attributed knowledge graph storage: load, validate, persist, serve.

Graphs are JSONL files with one object per line:
    {"kind": "node", "id": str, "text": str, "type": str}
    {"kind": "edge", "src": str, "dst": str, "rel": str}
Query sets are JSONL with {"qid": str, "text": str, "targets": [str, ...]}.

Edges are stored directed but traversed in both directions; the reverse
direction carries a marker suffix on the relation label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

REVERSE_MARKER = "⁻¹"  # superscript -1 appended to reversed relations


class GraphFormatError(ValueError):
    """Raised for malformed or inconsistent graph / query files."""


@dataclass(frozen=True)
class NodeRecord:
    id: str
    text: str
    node_type: str = ""

    def __post_init__(self):
        if not self.id:
            raise GraphFormatError("node id must be a non-empty string")


@dataclass
class Graph:
    """Immutable after construction; adjacency is sorted for determinism."""

    nodes: dict[str, NodeRecord]
    adjacency: dict[str, tuple[tuple[str, str], ...]]
    edges: list[tuple[str, str, str]]
    name: str = ""

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def has_node(self, node_id: str) -> bool:
        return node_id in self.nodes

    def node_text(self, node_id: str) -> str:
        return self.nodes[node_id].text


@dataclass
class Query:
    qid: str
    text: str
    targets: frozenset[str]


@dataclass
class QuerySet:
    queries: list[Query]

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def __getitem__(self, i: int) -> Query:
        return self.queries[i]

    def by_qid(self, qid: str) -> Query:
        for q in self.queries:
            if q.qid == qid:
                return q
        raise KeyError(qid)


@dataclass
class ValidationReport:
    valid: bool
    issues: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)


def build_graph(nodes: list[NodeRecord], edges: list[tuple[str, str, str]],
                name: str = "") -> Graph:
    """Assemble a Graph from node records and (src, dst, rel) triples."""
    node_map: dict[str, NodeRecord] = {}
    for rec in nodes:
        if rec.id in node_map:
            raise GraphFormatError(f"duplicate node id {rec.id!r}")
        node_map[rec.id] = rec
    adj: dict[str, list[tuple[str, str]]] = {nid: [] for nid in node_map}
    for src, dst, rel in edges:
        for endpoint in (src, dst):
            if endpoint not in node_map:
                raise GraphFormatError(f"unknown node {endpoint!r} in edge "
                                       f"{src!r}->{dst!r}")
        adj[src].append((rel, dst))
        adj[dst].append((rel + REVERSE_MARKER, src))
    adjacency = {nid: tuple(sorted(entries)) for nid, entries in adj.items()}
    return Graph(nodes=node_map, adjacency=adjacency, edges=list(edges),
                 name=name)


def load_graph(path: str) -> Graph:
    """Load a JSONL graph file, validating structure line by line."""
    nodes: list[NodeRecord] = []
    edges: list[tuple[str, str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{path}:{lineno}: malformed JSON: {exc}")
            kind = obj.get("kind")
            if kind == "node":
                try:
                    nodes.append(NodeRecord(id=obj["id"], text=obj["text"],
                                            node_type=obj.get("type", "")))
                except KeyError as exc:
                    raise GraphFormatError(
                        f"{path}:{lineno}: node missing field {exc}")
            elif kind == "edge":
                try:
                    edges.append((obj["src"], obj["dst"], obj["rel"]))
                except KeyError as exc:
                    raise GraphFormatError(
                        f"{path}:{lineno}: edge missing field {exc}")
            else:
                raise GraphFormatError(
                    f"{path}:{lineno}: unknown kind {kind!r}")
    return build_graph(nodes, edges, name=path)


def save_graph(graph: Graph, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for nid in sorted(graph.nodes):
            rec = graph.nodes[nid]
            fh.write(json.dumps({"kind": "node", "id": rec.id,
                                 "text": rec.text, "type": rec.node_type},
                                ensure_ascii=False) + "\n")
        for src, dst, rel in graph.edges:
            fh.write(json.dumps({"kind": "edge", "src": src, "dst": dst,
                                 "rel": rel}, ensure_ascii=False) + "\n")


def neighbors(graph: Graph, node: str) -> tuple[tuple[str, str], ...]:
    """Sorted (relation, neighbor) pairs; raises KeyError for unknown nodes."""
    if node not in graph.nodes:
        raise KeyError(f"unknown node {node!r}")
    return graph.adjacency[node]


def validate_graph(graph: Graph) -> ValidationReport:
    issues: list[str] = []
    warnings: list[str] = []
    for nid in graph.adjacency:
        if nid not in graph.nodes:
            issues.append(f"adjacency references unknown node {nid!r}")
    # Cross-check adjacency against the raw edge list.
    rebuilt: dict[str, list[tuple[str, str]]] = {n: [] for n in graph.nodes}
    for src, dst, rel in graph.edges:
        if src not in graph.nodes or dst not in graph.nodes:
            issues.append(f"edge {src!r}->{dst!r} has dangling endpoint")
            continue
        rebuilt[src].append((rel, dst))
        rebuilt[dst].append((rel + REVERSE_MARKER, src))
    for nid, entries in rebuilt.items():
        if tuple(sorted(entries)) != graph.adjacency.get(nid, ()):
            issues.append(f"adjacency for node {nid!r} inconsistent with edges")
    empty_docs = sum(1 for rec in graph.nodes.values() if not rec.text)
    if empty_docs:
        warnings.append(f"{empty_docs} node(s) have empty documents")
    degrees = [len(graph.adjacency.get(n, ())) for n in graph.nodes]
    stats = {
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "empty_documents": empty_docs,
        "degree_min": min(degrees) if degrees else 0,
        "degree_max": max(degrees) if degrees else 0,
        "degree_mean": (sum(degrees) / len(degrees)) if degrees else 0.0,
    }
    return ValidationReport(valid=not issues, issues=issues,
                            warnings=warnings, stats=stats)


def load_queries(path: str, graph: Graph) -> QuerySet:
    """Load a JSONL query file and validate targets against the graph."""
    queries: list[Query] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"{path}:{lineno}: malformed JSON: {exc}")
            qid = obj.get("qid")
            if not qid:
                raise GraphFormatError(f"{path}:{lineno}: missing qid")
            if qid in seen:
                raise GraphFormatError(f"{path}:{lineno}: duplicate qid {qid!r}")
            seen.add(qid)
            targets = obj.get("targets", [])
            if not targets:
                raise GraphFormatError(f"{path}:{lineno}: empty target list")
            for t in targets:
                if not graph.has_node(t):
                    raise GraphFormatError(
                        f"{path}:{lineno}: unknown target {t!r}")
            queries.append(Query(qid=qid, text=obj.get("text", ""),
                                 targets=frozenset(targets)))
    return QuerySet(queries=queries)


def save_queries(queries: QuerySet, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            fh.write(json.dumps({"qid": q.qid, "text": q.text,
                                 "targets": sorted(q.targets)},
                                ensure_ascii=False) + "\n")
