"""Training losses with exact analytic gradients.

Five objectives over featurized training items:
  - detailed-balance with local exploration (squared per-candidate terms)
  - trajectory balance and subtrajectory balance (squared path terms)
  - behavior-cloning cross-entropy
  - pairwise preference (softplus of the score margin)

Boundary convention for the squared flow objectives: the log-flow of the
initial state is the constant `boundary_const`; the log-flow of a stopped
state is `boundary_const` plus the log of its (normalized, floored)
terminal reward. For the binary single-target trajectories used in
training this terminal term is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import Action, State
from .model import Model


@dataclass
class TransitionBatch:
    """One anchor state with its ground-truth transition (index 0) and up
    to k exploratory candidate transitions, featurized."""

    anchor: State
    actions: list[Action]
    next_states: list[State]
    anchor_is_initial: bool
    anchor_feats: np.ndarray        # (state_dim,)
    action_feats: np.ndarray        # (k+1, action_dim)
    next_feats: np.ndarray          # (k+1, state_dim); zero rows if stopped
    next_stopped: np.ndarray        # (k+1,) bool
    next_log_reward: np.ndarray     # (k+1,) log normalized reward at stops
    # True where the next state's log-flow is known in closed form: stopped
    # states, and states at the depth cutoff (their only action is Stop, so
    # F(s) = R_stop(s) exactly). Defaults to next_stopped.
    next_pinned: np.ndarray | None = None

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("empty candidate list")
        if self.next_pinned is None:
            self.next_pinned = self.next_stopped.copy()
        for act, nxt in zip(self.actions, self.next_states):
            if act.is_stop != nxt.stopped:
                raise ValueError("candidate action/state mismatch")

    @property
    def size(self) -> int:
        return len(self.actions)


@dataclass
class PreferencePair:
    state: State
    positive: Action
    negative: Action
    positive_feats: np.ndarray
    negative_feats: np.ndarray


@dataclass
class TrajectoryFeatures:
    """A full trajectory featurized for path-level objectives: per step the
    scores of every candidate action and the index taken."""

    qid: str
    state_feats: np.ndarray             # (T, state_dim) for s_0 .. s_{T-1}
    step_action_feats: list[np.ndarray]  # length T, each (n_t, action_dim)
    taken: list[int]                    # index of the taken action per step
    log_reward: float                   # log normalized terminal reward

    @property
    def num_steps(self) -> int:
        return len(self.taken)


def _log_softmax(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = scores - scores.max()
    e = np.exp(z)
    total = e.sum()
    return z - np.log(total), e / total


def dble_terms(log_flow_anchor: float, log_flow_next: np.ndarray,
               scores: np.ndarray) -> np.ndarray:
    """Per-candidate residuals of the detailed-balance objective."""
    log_probs, _ = _log_softmax(np.asarray(scores, dtype=np.float64))
    return log_flow_anchor - np.asarray(log_flow_next, dtype=np.float64) \
        + log_probs


def dble_loss(model: Model, batch: TransitionBatch,
              boundary_const: float = 0.0) -> tuple[float, dict]:
    """Sum of squared detailed-balance residuals over the k+1 candidates.

    The returned gradient dict also carries a "breakdown" entry with the
    (transition, start, end) contributions for training logs; optimizer
    helpers ignore it.
    """
    scores, pcache = model.policy_head.forward(batch.action_feats)
    n = batch.size

    learned_rows = [batch.anchor_feats] if not batch.anchor_is_initial else []
    next_learned_idx = [i for i in range(n) if not batch.next_pinned[i]]
    learned_rows.extend(batch.next_feats[i] for i in next_learned_idx)
    if learned_rows:
        flows, fcache = model.flow_head.forward(np.stack(learned_rows))
    else:
        flows, fcache = np.zeros(0), None

    pos = 0
    if batch.anchor_is_initial:
        lf_anchor = boundary_const
    else:
        lf_anchor = float(flows[pos])
        pos += 1
    lf_next = np.empty(n)
    for i in range(n):
        if batch.next_pinned[i]:
            lf_next[i] = boundary_const + batch.next_log_reward[i]
        else:
            lf_next[i] = flows[pos]
            pos += 1

    log_probs, probs = _log_softmax(scores)
    resid = lf_anchor - lf_next + log_probs
    loss = float(np.dot(resid, resid))
    sq = resid * resid
    if batch.anchor_is_initial:
        breakdown = (0.0, float(sq.sum()), 0.0)
    else:
        end = float(sq[batch.next_stopped].sum())
        breakdown = (float(sq.sum()) - end, 0.0, end)

    # d loss / d score_j = 2 r_j - 2 p_j * sum(r)
    dscores = 2.0 * resid - 2.0 * probs * resid.sum()
    gw, gb = model.policy_head.backward(pcache, dscores)
    grads = {"policy": (gw, gb), "flow": None, "log_z": 0.0,
             "breakdown": breakdown}
    if fcache is not None:
        dflows = np.zeros(len(flows))
        pos = 0
        if not batch.anchor_is_initial:
            dflows[pos] = 2.0 * resid.sum()
            pos += 1
        for i in next_learned_idx:
            dflows[pos] = -2.0 * resid[i]
            pos += 1
        fw, fb = model.flow_head.backward(fcache, dflows)
        grads["flow"] = (fw, fb)
    return loss, grads


def dble_components(model: Model, batch: TransitionBatch,
                    boundary_const: float = 0.0) -> tuple[float, float, float]:
    """(transition, start, end) contributions, for training logs only."""
    scores = model.policy_head(batch.action_feats)
    if batch.anchor_is_initial:
        lf_anchor = boundary_const
    else:
        lf_anchor = float(model.flow_head(batch.anchor_feats)[0])
    log_probs, _ = _log_softmax(scores)
    transition = start = end = 0.0
    for i in range(batch.size):
        if batch.next_pinned[i]:
            lf_next = boundary_const + batch.next_log_reward[i]
        else:
            lf_next = float(model.flow_head(batch.next_feats[i])[0])
        term = (lf_anchor - lf_next + log_probs[i]) ** 2
        if batch.anchor_is_initial:
            start += term
        elif batch.next_stopped[i]:
            end += term
        else:
            transition += term
    return transition, start, end


def _forward_log_prob(model: Model, traj: TrajectoryFeatures):
    """log P of the taken action per step, with softmax caches for backprop."""
    log_p = np.empty(traj.num_steps)
    caches = []
    for t, feats in enumerate(traj.step_action_feats):
        scores, cache = model.policy_head.forward(feats)
        lp, probs = _log_softmax(scores)
        log_p[t] = lp[traj.taken[t]]
        caches.append((cache, probs))
    return log_p, caches


def _policy_path_grads(model: Model, traj: TrajectoryFeatures, caches,
                       dresid: float) -> tuple[list, list]:
    gw = [np.zeros_like(w) for w in model.policy_head.weights]
    gb = [np.zeros_like(b) for b in model.policy_head.biases]
    for t, (cache, probs) in enumerate(caches):
        dscores = -dresid * probs
        dscores[traj.taken[t]] += dresid
        w, b = model.policy_head.backward(cache, dscores)
        for a, g in zip(gw, w):
            a += g
        for a, g in zip(gb, b):
            a += g
    return gw, gb


def tb_loss(model: Model, traj: TrajectoryFeatures,
            log_z: float | None = None) -> tuple[float, dict]:
    """Squared full-path balance residual; log_z defaults to the model's
    learnable scalar. Rejects zero-reward trajectories upstream (log
    undefined)."""
    if not np.isfinite(traj.log_reward):
        raise ValueError("trajectory reward must be positive for this loss")
    z = model.log_z if log_z is None else log_z
    log_p, caches = _forward_log_prob(model, traj)
    resid = float(log_p.sum()) - traj.log_reward + z
    loss = resid * resid
    grads = {"policy": _policy_path_grads(model, traj, caches, 2.0 * resid),
             "flow": None, "log_z": 2.0 * resid}
    return loss, grads


def subtb_loss(model: Model, traj: TrajectoryFeatures, i: int, j: int,
               boundary_const: float = 0.0) -> tuple[float, dict]:
    """Squared balance residual over the subpath s_i .. s_j (0 <= i < j <= T).

    Flow values at the span ends come from the flow head, except the
    initial state (constant) and the stopped terminal state (constant plus
    log reward), matching the detailed-balance boundary convention.
    """
    T = traj.num_steps
    if not (0 <= i < j <= T):
        raise ValueError(f"invalid span ({i}, {j}) for {T} steps")
    log_p, caches = _forward_log_prob(model, traj)

    ends = []
    if i != 0:
        ends.append(traj.state_feats[i])
    if j != T:
        ends.append(traj.state_feats[j])
    flows = model.flow_head.forward(np.stack(ends)) if ends else (np.zeros(0), None)
    fvals, fcache = flows
    pos = 0
    if i == 0:
        lf_i = boundary_const
    else:
        lf_i = float(fvals[pos])
        pos += 1
    if j == T:
        lf_j = boundary_const + traj.log_reward
    else:
        lf_j = float(fvals[pos])

    resid = float(log_p[i:j].sum()) - lf_j + lf_i
    loss = resid * resid
    span = TrajectoryFeatures(qid=traj.qid, state_feats=traj.state_feats,
                              step_action_feats=traj.step_action_feats[i:j],
                              taken=traj.taken[i:j],
                              log_reward=traj.log_reward)
    grads = {"policy": _policy_path_grads(model, span, caches[i:j], 2.0 * resid),
             "flow": None, "log_z": 0.0}
    if fcache is not None:
        dflows = np.zeros(len(fvals))
        pos = 0
        if i != 0:
            dflows[pos] = 2.0 * resid
            pos += 1
        if j != T:
            dflows[pos] = -2.0 * resid
        fw, fb = model.flow_head.backward(fcache, dflows)
        grads["flow"] = (fw, fb)
    return loss, grads


def sft_loss(model: Model, batch: TransitionBatch) -> tuple[float, dict]:
    """Cross-entropy of the ground-truth candidate (index 0) among all
    candidates: plain behavior cloning."""
    scores, cache = model.policy_head.forward(batch.action_feats)
    log_probs, probs = _log_softmax(scores)
    loss = -float(log_probs[0])
    dscores = probs.copy()
    dscores[0] -= 1.0
    grads = {"policy": model.policy_head.backward(cache, dscores),
             "flow": None, "log_z": 0.0}
    return loss, grads


def prm_loss(model: Model, pair: PreferencePair) -> tuple[float, dict]:
    """Numerically stable softplus(-(r+ - r-)): pushes the preferred action
    score above the rejected one."""
    feats = np.stack([pair.positive_feats, pair.negative_feats])
    scores, cache = model.policy_head.forward(feats)
    margin = float(scores[0] - scores[1])
    loss = float(np.logaddexp(0.0, -margin))
    # d loss / d margin = -sigmoid(-margin)
    dmargin = -1.0 / (1.0 + np.exp(margin))
    grads = {"policy": model.policy_head.backward(
        cache, np.array([dmargin, -dmargin])), "flow": None, "log_z": 0.0}
    return loss, grads
