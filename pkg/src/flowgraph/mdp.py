"""The retrieval decision process: states, actions, transitions, rewards.

States carry the full visited path, so the reachable state space is a tree
and every state has a unique parent. A trajectory ends with a self-loop
stop action (chosen, or forced at the depth cutoff).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .kg import Graph, neighbors


@dataclass(frozen=True)
class Action:
    relation: str | None
    target: str | None
    is_stop: bool

    @classmethod
    def move(cls, relation: str, target: str) -> "Action":
        return cls(relation=relation, target=target, is_stop=False)

    @classmethod
    def stop(cls) -> "Action":
        return cls(relation=None, target=None, is_stop=True)


STOP = Action.stop()


@dataclass(frozen=True)
class State:
    qid: str
    query_text: str
    path: tuple[str, ...]
    stopped: bool = False

    def __post_init__(self):
        if not self.path:
            raise ValueError("state path must be non-empty")

    @property
    def node(self) -> str:
        return self.path[-1]

    @property
    def depth(self) -> int:
        return len(self.path) - 1


@dataclass(frozen=True)
class Trajectory:
    qid: str
    query_text: str
    path: tuple[str, ...]           # visited nodes, in order
    actions: tuple[Action, ...]     # moves followed by the final stop
    reward: float = 0.0

    def __post_init__(self):
        if not self.actions or not self.actions[-1].is_stop:
            raise ValueError("trajectory must end with a stop action")
        if self.reward < 0:
            raise ValueError("reward must be non-negative")

    @property
    def terminal_node(self) -> str:
        return self.path[-1]

    def states(self) -> list[State]:
        """States s_0 .. s_T; the last one is the stopped terminal state."""
        out = [State(self.qid, self.query_text, self.path[:i + 1])
               for i in range(len(self.path))]
        out.append(State(self.qid, self.query_text, self.path, stopped=True))
        return out


@dataclass(frozen=True)
class RewardSpec:
    """Binary: 1 for target terminals, else 0. Table: per-node positive
    values, 0 for unlisted nodes (targets ignored)."""

    mode: str = "binary"
    table: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in ("binary", "table"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        for node, value in self.table:
            if value <= 0:
                raise ValueError(f"table reward for {node!r} must be > 0")

    def node_reward(self, node: str, targets: frozenset[str]) -> float:
        if self.mode == "binary":
            return 1.0 if node in targets else 0.0
        return dict(self.table).get(node, 0.0)


BINARY_REWARD = RewardSpec()


def initial_state(qid: str, query_text: str, seed: str, graph: Graph) -> State:
    if not graph.has_node(seed):
        raise KeyError(f"unknown seed node {seed!r}")
    return State(qid=qid, query_text=query_text, path=(seed,))


def candidate_actions(graph: Graph, state: State,
                      depth_cutoff: int) -> list[Action]:
    """Stop first, then moves in deterministic neighbor order; at the depth
    cutoff only stop remains."""
    if state.stopped:
        raise ValueError("no actions at a stopped state")
    if state.depth >= depth_cutoff:
        return [STOP]
    return [STOP] + [Action.move(rel, nbr)
                     for rel, nbr in neighbors(graph, state.node)]


def apply_action(graph: Graph, state: State, action: Action) -> State:
    if state.stopped:
        raise ValueError("cannot act on a stopped state")
    if action.is_stop:
        return State(state.qid, state.query_text, state.path, stopped=True)
    if (action.relation, action.target) not in neighbors(graph, state.node):
        raise ValueError(f"action {action} not applicable at {state.node!r}")
    return State(state.qid, state.query_text, state.path + (action.target,))


def trajectory_reward(trajectory: Trajectory, targets: frozenset[str],
                      spec: RewardSpec = BINARY_REWARD) -> float:
    return spec.node_reward(trajectory.terminal_node, targets)
