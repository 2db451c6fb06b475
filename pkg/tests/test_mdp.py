import pytest

from flowgraph.kg import NodeRecord, build_graph
from flowgraph.mdp import (Action, BINARY_REWARD, RewardSpec, STOP, State,
                           Trajectory, apply_action, candidate_actions,
                           initial_state, trajectory_reward)


def chain_graph():
    return build_graph(
        [NodeRecord("a", "doc a"), NodeRecord("b", "doc b"),
         NodeRecord("c", "doc c")],
        [("a", "b", "links"), ("b", "c", "links")])


def test_initial_state():
    g = chain_graph()
    s = initial_state("q1", "text", "a", g)
    assert s.node == "a"
    assert s.depth == 0
    assert not s.stopped
    with pytest.raises(KeyError):
        initial_state("q1", "text", "ghost", g)


def test_candidate_actions_stop_first():
    g = chain_graph()
    s = initial_state("q", "t", "b", g)
    acts = candidate_actions(g, s, depth_cutoff=6)
    assert acts[0] == STOP
    assert acts[1:] == [Action.move("links", "c"),
                        Action.move("links⁻¹", "a")]


def test_candidate_actions_only_stop_at_cutoff():
    g = chain_graph()
    s = State("q", "t", ("a", "b"))
    assert candidate_actions(g, s, depth_cutoff=1) == [STOP]


def test_candidate_actions_rejects_stopped_state():
    g = chain_graph()
    s = State("q", "t", ("a",), stopped=True)
    with pytest.raises(ValueError):
        candidate_actions(g, s, 6)


def test_apply_action_move_and_stop():
    g = chain_graph()
    s = initial_state("q", "t", "a", g)
    s2 = apply_action(g, s, Action.move("links", "b"))
    assert s2.path == ("a", "b")
    assert s2.depth == 1
    s3 = apply_action(g, s2, STOP)
    assert s3.stopped and s3.node == "b"
    with pytest.raises(ValueError):
        apply_action(g, s3, STOP)
    with pytest.raises(ValueError):
        apply_action(g, s, Action.move("links", "c"))  # not a neighbor of a


def test_state_is_path_addressed():
    # Same node via different paths is a different state: the state space
    # is a tree.
    s1 = State("q", "t", ("a", "b"))
    s2 = State("q", "t", ("c", "b"))
    assert s1.node == s2.node == "b"
    assert s1 != s2


def test_trajectory_validation_and_states():
    traj = Trajectory("q", "t", ("a", "b"),
                      (Action.move("links", "b"), STOP), reward=1.0)
    assert traj.terminal_node == "b"
    states = traj.states()
    assert [s.path for s in states] == [("a",), ("a", "b"), ("a", "b")]
    assert [s.stopped for s in states] == [False, False, True]
    with pytest.raises(ValueError):
        Trajectory("q", "t", ("a",), (Action.move("links", "b"),))
    with pytest.raises(ValueError):
        Trajectory("q", "t", ("a",), (STOP,), reward=-1.0)


def test_binary_reward():
    traj = Trajectory("q", "t", ("a", "b"),
                      (Action.move("links", "b"), STOP))
    assert trajectory_reward(traj, frozenset({"b"})) == 1.0
    assert trajectory_reward(traj, frozenset({"c"})) == 0.0


def test_table_reward():
    spec = RewardSpec(mode="table", table=(("b", 2.5),))
    traj = Trajectory("q", "t", ("a", "b"),
                      (Action.move("links", "b"), STOP))
    assert trajectory_reward(traj, frozenset(), spec) == 2.5
    traj2 = Trajectory("q", "t", ("a",), (STOP,))
    assert trajectory_reward(traj2, frozenset(), spec) == 0.0


def test_reward_spec_validation():
    with pytest.raises(ValueError):
        RewardSpec(mode="mystery")
    with pytest.raises(ValueError):
        RewardSpec(mode="table", table=(("b", 0.0),))
    assert BINARY_REWARD.mode == "binary"
