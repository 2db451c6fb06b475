import numpy as np
import pytest

from flowgraph.encoder import EncoderConfig, action_feature_dim
from flowgraph.model import (HiddenSpec, MLP, OptState, action_scores,
                             adam_step, add_grads, grad_check, init_model,
                             load_checkpoint, log_flow, policy_probs,
                             save_checkpoint, scale_grads, zero_grads)

CFG = EncoderConfig(dim=16)
SPEC = HiddenSpec(sizes=(8,), activation="tanh")


def tiny_model(seed=0):
    return init_model(CFG, SPEC, seed=seed)


def test_init_deterministic():
    a, b = tiny_model(), tiny_model()
    for wa, wb in zip(a.policy_head.weights, b.policy_head.weights):
        np.testing.assert_array_equal(wa, wb)
    c = tiny_model(seed=1)
    assert not np.array_equal(a.policy_head.weights[0],
                              c.policy_head.weights[0])


def test_hidden_spec_validation():
    with pytest.raises(ValueError):
        HiddenSpec(activation="sigmoid")
    with pytest.raises(ValueError):
        HiddenSpec(sizes=(0,))


def test_mlp_forward_shape_check():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.policy_head(np.zeros(7))


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    mlp = MLP.init(5, HiddenSpec(sizes=(4, 3)), rng)
    x = rng.normal(size=(2, 5))
    dout = np.array([1.0, -2.0])
    out, cache = mlp.forward(x)
    gw, gb = mlp.backward(cache, dout)
    h = 1e-6
    for arrs, grads in ((mlp.weights, gw), (mlp.biases, gb)):
        for arr, grad in zip(arrs, grads):
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for idx in range(0, flat.size, max(1, flat.size // 5)):
                orig = flat[idx]
                flat[idx] = orig + h
                up = float(np.dot(dout, mlp.forward(x)[0]))
                flat[idx] = orig - h
                down = float(np.dot(dout, mlp.forward(x)[0]))
                flat[idx] = orig
                assert gflat[idx] == pytest.approx((up - down) / (2 * h),
                                                   abs=1e-4)


def test_relu_activation_backward():
    rng = np.random.default_rng(1)
    mlp = MLP.init(3, HiddenSpec(sizes=(4,), activation="relu"), rng)
    x = rng.normal(size=(1, 3))
    out, cache = mlp.forward(x)
    gw, _ = mlp.backward(cache, np.ones(1))
    h = 1e-6
    w = mlp.weights[0]
    orig = w[0, 0]
    w[0, 0] = orig + h
    up = mlp.forward(x)[0][0]
    w[0, 0] = orig - h
    down = mlp.forward(x)[0][0]
    w[0, 0] = orig
    assert gw[0][0, 0] == pytest.approx((up - down) / (2 * h), abs=1e-5)


def test_policy_probs():
    p = policy_probs(np.array([0.0, 0.0]))
    np.testing.assert_allclose(p, [0.5, 0.5])
    p = policy_probs(np.array([1000.0, 0.0]))  # overflow-safe
    assert p[0] == pytest.approx(1.0)
    pt = policy_probs(np.array([1.0, 0.0]), temperature=1e9)
    np.testing.assert_allclose(pt, [0.5, 0.5], atol=1e-6)
    with pytest.raises(ValueError):
        policy_probs(np.array([]))
    with pytest.raises(ValueError):
        policy_probs(np.array([np.nan, 0.0]))


def test_action_scores_and_log_flow_shapes():
    model = tiny_model()
    feats = np.zeros((3, action_feature_dim(CFG)))
    assert action_scores(model, feats).shape == (3,)
    assert isinstance(log_flow(model, np.zeros((1, 2 * CFG.dim + 1))), float)


def _reference_adam(p, g_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam recomputed independently of the implementation."""
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adam_step_matches_hand_computation():
    model = tiny_model()
    opt = OptState.for_model(model, lr=0.01)
    p0 = float(model.policy_head.weights[0][0, 0])
    g_seq = [3.0, -1.5, 0.5]
    cur, cur_opt = model, opt
    for g in g_seq:
        grads = zero_grads(cur)
        grads["policy"][0][0][0, 0] = g
        cur, cur_opt = adam_step(cur, grads, cur_opt)
    expected = _reference_adam(p0, g_seq, lr=0.01)
    assert float(cur.policy_head.weights[0][0, 0]) == pytest.approx(
        expected, abs=1e-12)
    # Untouched parameters stay exactly put.
    assert float(cur.policy_head.weights[0][0, 1]) == \
        float(model.policy_head.weights[0][0, 1])
    assert cur_opt.step == 3


def test_adam_step_log_z_uses_own_lr():
    model = tiny_model()
    opt = OptState.for_model(model, lr=0.01, log_z_lr=0.1)
    grads = zero_grads(model)
    grads["log_z"] = 2.0
    new_model, _ = adam_step(model, grads, opt)
    assert new_model.log_z == pytest.approx(
        _reference_adam(0.0, [2.0], lr=0.1), abs=1e-12)


def test_adam_step_copy_vs_inplace():
    model = tiny_model()
    opt = OptState.for_model(model, lr=0.01)
    grads = zero_grads(model)
    grads["policy"][0][0][0, 0] = 1.0
    before = model.policy_head.weights[0][0, 0]
    new_model, _ = adam_step(model, grads, opt)
    assert model.policy_head.weights[0][0, 0] == before  # original untouched
    assert new_model.policy_head.weights[0][0, 0] != before

    model2, opt2 = adam_step(model, grads, opt, inplace=True)
    assert model2 is model and opt2 is opt
    assert model.policy_head.weights[0][0, 0] != before


def test_adam_step_rejects_non_finite():
    model = tiny_model()
    opt = OptState.for_model(model)
    grads = zero_grads(model)
    grads["policy"][0][0][0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        adam_step(model, grads, opt)


def test_grad_tree_helpers_tolerate_none_heads():
    model = tiny_model()
    acc = zero_grads(model)
    partial = {"policy": None, "flow": None, "log_z": 1.5}
    add_grads(acc, partial)
    assert acc["log_z"] == 1.5
    scale_grads(partial, 2.0)
    assert partial["log_z"] == 3.0
    # adam_step accepts a grads dict with None heads.
    _, opt = adam_step(model, partial, OptState.for_model(model))
    assert opt.step == 1


def test_grad_check_detects_correct_and_wrong_gradients():
    model = tiny_model()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, action_feature_dim(CFG)))

    def good_loss(m):
        scores, cache = m.policy_head.forward(x)
        gw, gb = m.policy_head.backward(cache, 2.0 * scores)
        return float(np.dot(scores, scores)), \
            {"policy": (gw, gb), "flow": None, "log_z": 0.0}

    assert grad_check(model, good_loss, num_params=120, seed=0) < 1e-6

    def bad_loss(m):
        loss, grads = good_loss(m)
        grads["policy"][0][0] *= 1.5  # corrupt one gradient block
        return loss, grads

    assert grad_check(model, bad_loss, num_params=400, seed=0) > 1e-2


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = tiny_model()
    model.log_z = 0.37
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    save_checkpoint(model, str(p1), train_config_digest="abc123")
    loaded = load_checkpoint(str(p1))
    for wa, wb in zip(model.policy_head.weights, loaded.policy_head.weights):
        np.testing.assert_array_equal(wa, wb)
    for wa, wb in zip(model.flow_head.weights, loaded.flow_head.weights):
        np.testing.assert_array_equal(wa, wb)
    assert loaded.log_z == model.log_z
    assert loaded.encoder_cfg == model.encoder_cfg
    assert loaded.hidden_spec == model.hidden_spec
    save_checkpoint(loaded, str(p2), train_config_digest="abc123")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_version_check(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.json"
    save_checkpoint(model, str(path))
    import json
    payload = json.loads(path.read_text())
    payload["version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(str(path))
