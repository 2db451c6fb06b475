"""Brute-force ground truth for small graphs: full trajectory
enumeration, exact state flows on the path tree, the exact
detailed-balance policy, and distances against empirical samples.

States carry their whole path, so the state space is a tree and the
backward policy is identically 1; the flow of a state is exactly the
total reward of the terminals beneath it.
"""

from __future__ import annotations

import json

from .kg import Graph, Query
from .mdp import (Action, RewardSpec, State, Trajectory, BINARY_REWARD,
                  apply_action, candidate_actions, initial_state)


class BudgetExceededError(RuntimeError):
    pass


def enumerate_trajectories(graph: Graph, query: Query, seed: str,
                           depth_cutoff: int,
                           reward_spec: RewardSpec = BINARY_REWARD,
                           node_budget: int = 100_000
                           ) -> list[tuple[Trajectory, float]]:
    """Every trajectory from the seed node (a stop at each reachable path
    prefix of length <= depth_cutoff), exactly once, depth-first in
    candidate order, with its reward."""
    out: list[tuple[Trajectory, float]] = []
    visited = 0

    def walk(state: State, actions: tuple[Action, ...]):
        nonlocal visited
        visited += 1
        if visited > node_budget:
            raise BudgetExceededError(
                f"state tree exceeds node budget {node_budget}")
        for action in candidate_actions(graph, state, depth_cutoff):
            nxt = apply_action(graph, state, action)
            if nxt.stopped:
                traj = Trajectory(qid=query.qid, query_text=query.text,
                                  path=state.path,
                                  actions=actions + (action,))
                reward = reward_spec.node_reward(nxt.node, query.targets)
                out.append((traj, reward))
            else:
                walk(nxt, actions + (action,))

    walk(initial_state(query.qid, query.text, seed, graph), ())
    return out


class FlowTable:
    """Exact flows F(s) on the path tree: F(s) = R_stop(s) + sum over
    move children F(c). Z = F(root)."""

    def __init__(self, flows: dict[tuple[str, ...], float],
                 stop_rewards: dict[tuple[str, ...], float],
                 children: dict[tuple[str, ...], list[tuple[str, ...]]],
                 trajectory_probs: list[tuple[Trajectory, float]]):
        self.flows = flows
        self.stop_rewards = stop_rewards
        self.children = children
        self.trajectory_probs = trajectory_probs
        root = min(flows, key=len)
        self.root = root
        self.partition = flows[root]

    def flow(self, path: tuple[str, ...]) -> float:
        return self.flows[path]

    def conservation_residuals(self) -> list[float]:
        return [abs(self.flows[p] - self.stop_rewards[p]
                    - sum(self.flows[c] for c in self.children[p]))
                for p in self.flows]


def exact_flows(enumeration: list[tuple[Trajectory, float]]) -> FlowTable:
    """Bottom-up flow accumulation, cross-checked against direct
    summation of enumerated terminal rewards (must agree to 1e-12)."""
    stop_rewards: dict[tuple[str, ...], float] = {}
    children: dict[tuple[str, ...], set] = {}
    for traj, reward in enumeration:
        stop_rewards[traj.path] = reward
        children.setdefault(traj.path, set())
        for i in range(1, len(traj.path)):
            children.setdefault(traj.path[:i], set()).add(traj.path[:i + 1])
    # Bottom-up: longest paths first.
    flows: dict[tuple[str, ...], float] = {}
    for path in sorted(children, key=len, reverse=True):
        flows[path] = stop_rewards.get(path, 0.0) + sum(
            flows[c] for c in children[path])
    # Cross-check against direct summation over terminals.
    direct: dict[tuple[str, ...], float] = {p: 0.0 for p in children}
    for traj, reward in enumeration:
        for i in range(1, len(traj.path) + 1):
            direct[traj.path[:i]] += reward
    for path, f in flows.items():
        if abs(f - direct[path]) > 1e-12:
            raise AssertionError(
                f"flow cross-check failed at {path}: {f} vs {direct[path]}")
    z = flows[min(flows, key=len)]
    if z <= 0.0:
        raise ValueError("no positive-reward trajectory: Z = 0")
    trajectory_probs = [(traj, reward / z) for traj, reward in enumeration]
    return FlowTable(flows=flows, stop_rewards=stop_rewards,
                     children={p: sorted(cs) for p, cs in children.items()},
                     trajectory_probs=trajectory_probs)


def exact_policy(table: FlowTable, graph: Graph, state: State,
                 depth_cutoff: int) -> list[tuple[Action, float]]:
    """P(stop) = R_stop/F, P(move to c) = F(c)/F(s); a valid simplex
    whenever F(s) > 0."""
    f = table.flows.get(state.path, 0.0)
    if f <= 0.0:
        raise ValueError(f"state {state.path} has zero flow")
    probs = []
    for action in candidate_actions(graph, state, depth_cutoff):
        if action.is_stop:
            probs.append((action, table.stop_rewards.get(state.path, 0.0) / f))
        else:
            child = state.path + (action.target,)
            probs.append((action, table.flows.get(child, 0.0) / f))
    total = sum(p for _, p in probs)
    if abs(total - 1.0) > 1e-12:
        raise AssertionError(f"policy at {state.path} sums to {total}")
    return probs


def terminal_distribution(table: FlowTable) -> dict[str, float]:
    """P* marginalized to terminal nodes."""
    dist: dict[str, float] = {}
    for traj, p in table.trajectory_probs:
        node = traj.terminal_node
        dist[node] = dist.get(node, 0.0) + p
    return dist


def distribution_distance(empirical: dict[str, float],
                          table: FlowTable) -> tuple[float, float]:
    """(total variation, L1) between an empirical terminal-node frequency
    map and the exact terminal distribution."""
    total = sum(empirical.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"empirical frequencies sum to {total}")
    exact = terminal_distribution(table)
    support = set(empirical) | set(exact)
    l1 = sum(abs(empirical.get(v, 0.0) - exact.get(v, 0.0))
             for v in support)
    return l1 / 2.0, l1


def save_oracle_dump(table: FlowTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "partition": table.partition,
            "trajectories": [
                {"path": list(traj.path), "reward": table.stop_rewards[traj.path],
                 "prob": p}
                for traj, p in table.trajectory_probs],
            "terminal_distribution": terminal_distribution(table),
        }, fh, indent=2, sort_keys=True)
