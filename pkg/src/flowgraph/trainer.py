"""Training-data construction and the optimization loop.

Data flow: for every (query, target) pair, sample one shortest path from
the similarity seed node to the target (uniform over shortest paths),
append the stop action, then expand each state of the trajectory with up
to k exploratory candidate transitions. The chosen objective consumes
either the transition batches or the featurized trajectories.

Terminal rewards are normalized per query by the total reward mass of the
query's targets, so the flow leaving the initial state sums to one on
fixtures where each target is reached by a single path.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .encoder import (EncoderConfig, derive_seed, featurize_action,
                      featurize_state, seed_nodes)
from .kg import Graph, QuerySet, neighbors
from .mdp import (Action, RewardSpec, State, Trajectory, BINARY_REWARD,
                  candidate_actions, apply_action, trajectory_reward)
from .model import (HiddenSpec, Model, OptState, adam_step, add_grads,
                    init_model, scale_grads, zero_grads)
from .objectives import (PreferencePair, TrajectoryFeatures, TransitionBatch,
                         dble_loss, prm_loss, sft_loss,
                         subtb_loss, tb_loss)

OBJECTIVES = ("dble", "tb", "subtb", "sft", "prm")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    objective: str = "dble"
    num_exploration: int = 4
    depth_cutoff: int = 6
    batch_size: int = 1
    accumulation_steps: int = 2
    lr: float = 1e-3
    log_z_lr: float | None = None
    epochs: int = 1
    max_steps: int | None = None
    target_loss: float | None = None  # early stop once the windowed
    # training loss at a logging step falls at or below this value
    # Flow-matching only: additionally anchor transition batches at
    # exploratory child states, recursively to this depth. 0 keeps the
    # plain scheme (anchors only at visited trajectory states); larger
    # values ground off-path flows, pinning the policy at every state of
    # small fixtures at the cost of extra batches.
    exploration_anchor_depth: int = 0
    eval_ratio: float = 0.8
    eval_step: int = 100
    boundary_const: float = 0.0
    reward_floor: float = 1e-4
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden_sizes: tuple[int, ...] = (128, 128)
    activation: str = "tanh"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.num_exploration < 0:
            raise ValueError("num_exploration must be >= 0")
        if not 0.0 < self.eval_ratio < 1.0:
            raise ValueError("eval_ratio must be in (0, 1)")
        if self.encoder.depth_cutoff != self.depth_cutoff:
            # Featurization normalizes depth by the same cutoff the MDP uses.
            self.encoder = EncoderConfig(
                dim=self.encoder.dim, ngram_orders=self.encoder.ngram_orders,
                doc_cutoff=self.encoder.doc_cutoff,
                window_size=self.encoder.window_size,
                depth_cutoff=self.depth_cutoff,
                hash_seed=self.encoder.hash_seed)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class CollectionResult:
    trajectories: list[Trajectory]
    skipped: list[tuple[str, str, str]]  # (qid, target, reason)
    seeds: dict[str, str]                # qid -> seed node

    @property
    def coverage(self) -> float:
        total = len(self.trajectories) + len(self.skipped)
        return len(self.trajectories) / total if total else 0.0


def _shortest_path_data(graph: Graph, source: str):
    """BFS distances and shortest-path counts from the source node."""
    dist = {source: 0}
    count = {source: 1}
    frontier = [source]
    while frontier:
        nxt = []
        for u in frontier:
            for _, v in neighbors(graph, u):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    count[v] = 0
                    nxt.append(v)
                if dist[v] == dist[u] + 1:
                    count[v] += count[u]
        frontier = nxt
    return dist, count


def _sample_shortest_path(graph: Graph, source: str, target: str,
                          dist: dict, count: dict,
                          rng: np.random.Generator) -> list[str]:
    """Uniform sample over shortest source->target paths, walking backward
    with probability proportional to the shortest-path count of each
    predecessor."""
    path = [target]
    node = target
    while node != source:
        d = dist[node]
        preds = sorted({v for _, v in neighbors(graph, node)
                        if dist.get(v) == d - 1})
        weights = np.array([count[p] for p in preds], dtype=np.float64)
        node = preds[rng.choice(len(preds), p=weights / weights.sum())]
        path.append(node)
    path.reverse()
    return path


def _hop_relation(graph: Graph, src: str, dst: str) -> str:
    rels = [rel for rel, nbr in neighbors(graph, src) if nbr == dst]
    return rels[0]  # adjacency is sorted, so this is deterministic


def collect_trajectories(graph: Graph, queries: QuerySet, cfg: TrainConfig,
                         seed: int | None = None,
                         reward_spec: RewardSpec = BINARY_REWARD
                         ) -> CollectionResult:
    """One trajectory per (query, target): a uniformly sampled shortest
    path from the top-1 similarity seed node, ending with a stop at the
    target. Targets beyond the depth cutoff are skipped and reported."""
    seed = cfg.seed if seed is None else seed
    trajectories: list[Trajectory] = []
    skipped: list[tuple[str, str, str]] = []
    seeds: dict[str, str] = {}
    for query in queries:
        source = seed_nodes(query.text, graph, 1, cfg.encoder)[0]
        seeds[query.qid] = source
        dist, count = _shortest_path_data(graph, source)
        for target in sorted(query.targets):
            if target not in dist:
                skipped.append((query.qid, target, "unreachable"))
                continue
            if dist[target] > cfg.depth_cutoff:
                skipped.append((query.qid, target, "beyond depth cutoff"))
                continue
            rng = np.random.default_rng(
                derive_seed(seed, "collect", query.qid, target))
            path = _sample_shortest_path(graph, source, target, dist, count,
                                         rng)
            actions = tuple(
                Action.move(_hop_relation(graph, path[i], path[i + 1]),
                            path[i + 1])
                for i in range(len(path) - 1)) + (Action.stop(),)
            traj = Trajectory(qid=query.qid, query_text=query.text,
                              path=tuple(path), actions=actions)
            reward = trajectory_reward(
                Trajectory(qid=traj.qid, query_text=traj.query_text,
                           path=traj.path, actions=traj.actions),
                query.targets, reward_spec)
            trajectories.append(Trajectory(qid=traj.qid,
                                           query_text=traj.query_text,
                                           path=traj.path,
                                           actions=traj.actions,
                                           reward=reward))
    return CollectionResult(trajectories=trajectories, skipped=skipped,
                            seeds=seeds)


def _reward_mass(targets: frozenset[str], spec: RewardSpec) -> float:
    return sum(spec.node_reward(t, targets) for t in targets)


def _log_norm_reward(node: str, targets: frozenset[str], spec: RewardSpec,
                     mass: float, floor: float) -> float:
    r = spec.node_reward(node, targets) / mass
    return math.log(max(r, floor))


class _StateFeaturizer:
    """Caches per-state and per-(state, action) feature vectors."""

    def __init__(self, graph: Graph, cfg: EncoderConfig):
        self.graph = graph
        self.cfg = cfg
        self._states: dict[State, np.ndarray] = {}

    def state(self, state: State) -> np.ndarray:
        if state not in self._states:
            self._states[state] = featurize_state(self.graph, state, self.cfg)
        return self._states[state]

    def action(self, state: State, action: Action) -> np.ndarray:
        return featurize_action(self.graph, state, action, self.cfg,
                                state_feats=self.state(state))


def expand_local_exploration(graph: Graph, trajectory: Trajectory, k: int,
                             seed: int, *, cfg: TrainConfig,
                             targets: frozenset[str],
                             reward_spec: RewardSpec = BINARY_REWARD,
                             featurizer: _StateFeaturizer | None = None
                             ) -> list[TransitionBatch]:
    """One batch per trajectory state (terminal included): the taken action
    at index 0 plus up to k exploratory candidates sampled uniformly
    without replacement from the remaining actions."""
    featurizer = featurizer or _StateFeaturizer(graph, cfg.encoder)
    mass = _reward_mass(targets, reward_spec)
    rng = np.random.default_rng(
        derive_seed(seed, "explore", trajectory.qid, trajectory.terminal_node,
                    "/".join(trajectory.path)))
    states = trajectory.states()
    batches: list[TransitionBatch] = []

    def make_batch(anchor: State, taken) -> TransitionBatch:
        available = candidate_actions(graph, anchor, cfg.depth_cutoff)
        if taken is None:  # off-path anchor: the stop action leads
            taken, others = available[0], available[1:]
        else:
            others = [a for a in available if a != taken]
        n_extra = min(k, len(others))
        if n_extra:
            idx = sorted(rng.choice(len(others), size=n_extra, replace=False))
            extras = [others[i] for i in idx]
        else:
            extras = []
        actions = [taken] + extras
        next_states = [apply_action(graph, anchor, a) for a in actions]
        action_feats = np.stack([featurizer.action(anchor, a)
                                 for a in actions])
        sdim = featurizer.state(anchor).shape[0]
        next_feats = np.zeros((len(actions), sdim))
        next_stopped = np.zeros(len(actions), dtype=bool)
        next_pinned = np.zeros(len(actions), dtype=bool)
        next_log_reward = np.zeros(len(actions))
        for i, ns in enumerate(next_states):
            if ns.stopped or ns.depth >= cfg.depth_cutoff:
                # At the cutoff the only action is Stop, so the state's
                # flow equals its stop reward in closed form.
                next_stopped[i] = ns.stopped
                next_pinned[i] = True
                next_log_reward[i] = _log_norm_reward(
                    ns.node, targets, reward_spec, mass, cfg.reward_floor)
            else:
                next_feats[i] = featurizer.state(ns)
        return TransitionBatch(
            anchor=anchor, actions=actions, next_states=next_states,
            anchor_is_initial=(anchor.depth == 0),
            anchor_feats=featurizer.state(anchor),
            action_feats=action_feats, next_feats=next_feats,
            next_stopped=next_stopped, next_log_reward=next_log_reward,
            next_pinned=next_pinned)

    def anchor_children(batch: TransitionBatch, remaining: int,
                        skip_first: bool) -> None:
        if remaining <= 0:
            return
        start = 1 if skip_first else 0
        for i, ns in enumerate(batch.next_states[start:], start=start):
            if batch.next_pinned[i]:
                continue
            child = make_batch(ns, None)
            batches.append(child)
            anchor_children(child, remaining - 1, skip_first=False)

    for t, taken in enumerate(trajectory.actions):
        batch = make_batch(states[t], taken)
        batches.append(batch)
        # Off-path children revisit the trajectory's own next state only
        # via exploration, so skip index 0 (the taken transition).
        anchor_children(batch, cfg.exploration_anchor_depth, skip_first=True)
    return batches


def featurize_trajectory(graph: Graph, trajectory: Trajectory, *,
                         cfg: TrainConfig, targets: frozenset[str],
                         reward_spec: RewardSpec = BINARY_REWARD,
                         featurizer: _StateFeaturizer | None = None
                         ) -> TrajectoryFeatures:
    """Full candidate sets (no exploration subset) for path objectives."""
    featurizer = featurizer or _StateFeaturizer(graph, cfg.encoder)
    mass = _reward_mass(targets, reward_spec)
    states = trajectory.states()
    step_feats = []
    taken_idx = []
    for t, taken in enumerate(trajectory.actions):
        anchor = states[t]
        available = candidate_actions(graph, anchor, cfg.depth_cutoff)
        taken_idx.append(available.index(taken))
        step_feats.append(np.stack([featurizer.action(anchor, a)
                                    for a in available]))
    state_feats = np.stack([featurizer.state(s) for s in states[:-1]])
    log_reward = _log_norm_reward(trajectory.terminal_node, targets,
                                  reward_spec, mass, cfg.reward_floor)
    return TrajectoryFeatures(qid=trajectory.qid, state_feats=state_feats,
                              step_action_feats=step_feats, taken=taken_idx,
                              log_reward=log_reward)


def make_preference_pairs(batches: list[TransitionBatch]
                          ) -> list[PreferencePair]:
    """Ground-truth action vs. each exploratory action of every batch."""
    pairs = []
    for batch in batches:
        for i in range(1, batch.size):
            pairs.append(PreferencePair(
                state=batch.anchor, positive=batch.actions[0],
                negative=batch.actions[i],
                positive_feats=batch.action_feats[0],
                negative_feats=batch.action_feats[i]))
    return pairs


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "transition_loss", "start_loss", "end_loss",
               "total_loss", "eval_loss", "eval_policy_acc")

    def append(self, **row) -> None:
        self.rows.append({c: row.get(c, 0.0) for c in self.COLUMNS})

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    @property
    def final_total_loss(self) -> float:
        return self.rows[-1]["total_loss"] if self.rows else float("nan")


@dataclass
class TrainResult:
    model: Model
    log: TrainingLog
    collection: CollectionResult
    config_digest: str


def _split_train_eval(keys: list, eval_ratio: float, seed: int):
    """Deterministic per-trajectory split: a trajectory's batches all land
    on the same side."""
    train_idx, eval_idx = [], []
    for i, key in enumerate(keys):
        u = derive_seed(seed, "split", *key) / 2.0 ** 64
        (train_idx if u < eval_ratio else eval_idx).append(i)
    if not train_idx:  # tiny fixtures: never leave the train side empty
        train_idx, eval_idx = eval_idx, []
    return train_idx, eval_idx


def _item_loss(model: Model, objective: str, item, cfg: TrainConfig):
    if objective == "dble":
        return dble_loss(model, item, cfg.boundary_const)
    if objective == "sft":
        return sft_loss(model, item)
    if objective == "prm":
        return prm_loss(model, item)
    if objective == "tb":
        return tb_loss(model, item)
    if objective == "subtb":
        traj, i, j = item
        return subtb_loss(model, traj, i, j, cfg.boundary_const)
    raise ValueError(objective)


def _eval_pass(model: Model, objective: str, eval_items, eval_batches,
               cfg: TrainConfig) -> tuple[float, float]:
    eval_loss = 0.0
    if eval_items:
        eval_loss = float(np.mean([
            _item_loss(model, objective, item, cfg)[0]
            for item in eval_items]))
    acc = 0.0
    if eval_batches:
        hits = 0
        for batch in eval_batches:
            scores = model.policy_head(batch.action_feats)
            hits += int(np.argmax(scores) == 0)
        acc = hits / len(eval_batches)
    return eval_loss, acc


def train(graph: Graph, queries: QuerySet, cfg: TrainConfig,
          reward_spec: RewardSpec = BINARY_REWARD,
          model: Model | None = None) -> TrainResult:
    """Run the full pipeline: collect, expand, split, optimize with Adam
    and gradient accumulation. Deterministic in cfg.seed."""
    collection = collect_trajectories(graph, queries, cfg,
                                      reward_spec=reward_spec)
    kept = [t for t in collection.trajectories if t.reward > 0.0]
    if not kept:
        raise ValueError("no positive-reward trajectories collected")
    featurizer = _StateFeaturizer(graph, cfg.encoder)
    targets_by_qid = {q.qid: q.targets for q in queries}

    # Off-path anchor batches label the stop action as "taken", which only
    # the flow-matching residual can consume; other objectives get the
    # plain per-state expansion.
    expand_cfg = cfg if cfg.objective == "dble" else replace(
        cfg, exploration_anchor_depth=0)
    per_traj_batches = [
        expand_local_exploration(graph, traj, cfg.num_exploration, cfg.seed,
                                 cfg=expand_cfg,
                                 targets=targets_by_qid[traj.qid],
                                 reward_spec=reward_spec,
                                 featurizer=featurizer)
        for traj in kept]
    keys = [(t.qid, t.terminal_node, i) for i, t in enumerate(kept)]
    train_idx, eval_idx = _split_train_eval(keys, cfg.eval_ratio, cfg.seed)

    eval_batches = [b for i in eval_idx for b in per_traj_batches[i]]
    if cfg.objective in ("dble", "sft"):
        train_items = [b for i in train_idx for b in per_traj_batches[i]]
        eval_items = eval_batches
    elif cfg.objective == "prm":
        train_items = make_preference_pairs(
            [b for i in train_idx for b in per_traj_batches[i]])
        eval_items = make_preference_pairs(eval_batches)
    else:  # tb / subtb
        trajs = {i: featurize_trajectory(
            graph, kept[i], cfg=cfg, targets=targets_by_qid[kept[i].qid],
            reward_spec=reward_spec, featurizer=featurizer)
            for i in train_idx + eval_idx}
        if cfg.objective == "tb":
            train_items = [trajs[i] for i in train_idx]
            eval_items = [trajs[i] for i in eval_idx]
        else:
            def spans(tf):
                w = cfg.encoder.window_size
                return [(tf, i, j) for i in range(tf.num_steps)
                        for j in range(i + 1, min(i + w, tf.num_steps) + 1)]
            train_items = [s for i in train_idx for s in spans(trajs[i])]
            eval_items = [s for i in eval_idx for s in spans(trajs[i])]
    if not train_items:
        raise ValueError("no training items after split")

    if model is None:
        model = init_model(cfg.encoder,
                           HiddenSpec(sizes=tuple(cfg.hidden_sizes),
                                      activation=cfg.activation),
                           seed=cfg.seed)
    else:
        model = model.copy()  # optimizer steps mutate in place
    opt = OptState.for_model(model, lr=cfg.lr, log_z_lr=cfg.log_z_lr)
    log = TrainingLog()
    rng = np.random.default_rng(derive_seed(cfg.seed, "order"))

    chunk = max(1, cfg.batch_size)
    step = 0
    window = {"transition": 0.0, "start": 0.0, "end": 0.0, "total": 0.0,
              "count": 0}

    def item_stream():
        for _ in range(cfg.epochs):
            for i in rng.permutation(len(train_items)):
                yield train_items[int(i)]

    acc_grads = zero_grads(model)
    acc_count = 0
    micro = 0
    for item in item_stream():
        loss, grads = _item_loss(model, cfg.objective, item, cfg)
        if not np.isfinite(loss):
            _dump_divergence(model, cfg, step, loss)
            raise TrainingDivergedError(f"non-finite loss at step {step}")
        add_grads(acc_grads, grads)
        acc_count += 1
        window["total"] += loss
        window["count"] += 1
        if cfg.objective == "dble":
            tr, st, en = grads["breakdown"]
            window["transition"] += tr
            window["start"] += st
            window["end"] += en
        else:
            window["transition"] += loss
        if acc_count % chunk:
            continue
        micro += 1
        if micro % cfg.accumulation_steps:
            continue
        scale_grads(acc_grads, 1.0 / acc_count)
        model, opt = adam_step(model, acc_grads, opt, inplace=True)
        scale_grads(acc_grads, 0.0)
        acc_count = 0
        step += 1
        if step % cfg.eval_step == 0:
            _flush_log(log, step, window, model, cfg.objective,
                       eval_items, eval_batches, cfg)
            if (cfg.target_loss is not None
                    and log.rows[-1]["total_loss"] <= cfg.target_loss):
                break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    else:
        if acc_count:
            scale_grads(acc_grads, 1.0 / acc_count)
            model, opt = adam_step(model, acc_grads, opt, inplace=True)
            step += 1
    if window["count"]:
        _flush_log(log, step, window, model, cfg.objective, eval_items,
                   eval_batches, cfg)
    return TrainResult(model=model, log=log, collection=collection,
                       config_digest=cfg.digest())


def _flush_log(log: TrainingLog, step: int, window: dict, model: Model,
               objective: str, eval_items, eval_batches,
               cfg: TrainConfig) -> None:
    n = max(1, window["count"])
    eval_loss, acc = _eval_pass(model, objective, eval_items, eval_batches,
                                cfg)
    log.append(step=step,
               transition_loss=window["transition"] / n,
               start_loss=window["start"] / n,
               end_loss=window["end"] / n,
               total_loss=window["total"] / n,
               eval_loss=eval_loss,
               eval_policy_acc=acc)
    for key in ("transition", "start", "end", "total"):
        window[key] = 0.0
    window["count"] = 0


def _dump_divergence(model: Model, cfg: TrainConfig, step: int,
                     loss: float) -> None:
    try:
        with open("training_divergence.json", "w", encoding="utf-8") as fh:
            json.dump({"step": step, "loss": repr(loss),
                       "objective": cfg.objective,
                       "config_digest": cfg.digest()}, fh)
    except OSError:
        pass
