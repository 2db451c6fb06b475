"""Trainable heads: a policy scorer over state-action features and a
log-flow estimator over state features, with hand-written backprop, an
Adam optimizer, a finite-difference gradient checker, and a versioned
JSON checkpoint format.

All arithmetic is double precision. Head evaluation is pure.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, action_feature_dim, state_feature_dim

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0),
             lambda y: (y > 0.0).astype(np.float64)),
}


@dataclass(frozen=True)
class HiddenSpec:
    sizes: tuple[int, ...] = (128, 128)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if any(s < 1 for s in self.sizes):
            raise ValueError("hidden sizes must be positive")


class MLP:
    """Feed-forward net with scalar output. Layers: [n_in, *hidden, 1]."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 activation: str):
        self.weights = weights
        self.biases = biases
        self.activation = activation

    @classmethod
    def init(cls, n_in: int, spec: HiddenSpec, rng: np.random.Generator) -> "MLP":
        sizes = [n_in, *spec.sizes, 1]
        weights, biases = [], []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fi + fo))
            weights.append(rng.uniform(-bound, bound, size=(fi, fo)))
            biases.append(np.zeros(fo))
        return cls(weights, biases, spec.activation)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    def forward(self, x: np.ndarray):
        """x: (n, n_in) -> (outputs (n,), cache for backward)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_in:
            raise ValueError(f"feature length mismatch: got {x.shape[1]}, "
                             f"expected {self.n_in}")
        act, _ = _ACTIVATIONS[self.activation]
        activations = [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = act(h @ w + b)
            activations.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out[:, 0], activations

    def backward(self, activations: list[np.ndarray], dout: np.ndarray):
        """Gradients of sum(dout * outputs) w.r.t. weights and biases."""
        _, dact = _ACTIVATIONS[self.activation]
        grads_w = [np.zeros_like(w) for w in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]
        delta = np.atleast_2d(np.asarray(dout, dtype=np.float64)).T
        if delta.shape[0] != activations[0].shape[0]:
            delta = delta.T
        grads_w[-1] = activations[-1].T @ delta
        grads_b[-1] = delta.sum(axis=0)
        upstream = delta @ self.weights[-1].T
        for layer in range(len(self.weights) - 2, -1, -1):
            upstream = upstream * dact(activations[layer + 1])
            grads_w[layer] = activations[layer].T @ upstream
            grads_b[layer] = upstream.sum(axis=0)
            upstream = upstream @ self.weights[layer].T
        return grads_w, grads_b

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


@dataclass
class Model:
    encoder_cfg: EncoderConfig
    hidden_spec: HiddenSpec
    policy_head: MLP
    flow_head: MLP
    init_seed: int
    log_z: float = 0.0  # learnable scalar used by the trajectory objective

    def copy(self) -> "Model":
        return Model(
            encoder_cfg=self.encoder_cfg,
            hidden_spec=self.hidden_spec,
            policy_head=MLP([w.copy() for w in self.policy_head.weights],
                            [b.copy() for b in self.policy_head.biases],
                            self.policy_head.activation),
            flow_head=MLP([w.copy() for w in self.flow_head.weights],
                          [b.copy() for b in self.flow_head.biases],
                          self.flow_head.activation),
            init_seed=self.init_seed,
            log_z=self.log_z,
        )


def init_model(encoder_cfg: EncoderConfig,
               hidden_spec: HiddenSpec = HiddenSpec(),
               seed: int = 0) -> Model:
    """Scaled-uniform init (bound sqrt(6/(fan_in+fan_out))), zero biases,
    deterministic in seed."""
    rng = np.random.default_rng(seed)
    policy = MLP.init(action_feature_dim(encoder_cfg), hidden_spec, rng)
    flow = MLP.init(state_feature_dim(encoder_cfg), hidden_spec, rng)
    return Model(encoder_cfg=encoder_cfg, hidden_spec=hidden_spec,
                 policy_head=policy, flow_head=flow, init_seed=seed)


def action_scores(model: Model, action_feats: np.ndarray) -> np.ndarray:
    """Per-action policy scores; rows of action_feats are candidates."""
    return model.policy_head(action_feats)


def policy_probs(scores: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("need at least one score")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite policy scores")
    z = scores / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_flow(model: Model, state_feats: np.ndarray) -> float:
    return float(model.flow_head(state_feats)[0])


# ---------------------------------------------------------------------------
# Parameter trees: gradients mirror the model parameter structure.

def zero_grads(model: Model) -> dict:
    return {
        "policy": ([np.zeros_like(w) for w in model.policy_head.weights],
                   [np.zeros_like(b) for b in model.policy_head.biases]),
        "flow": ([np.zeros_like(w) for w in model.flow_head.weights],
                 [np.zeros_like(b) for b in model.flow_head.biases]),
        "log_z": 0.0,
    }


def add_grads(acc: dict, grads: dict) -> None:
    """Accumulate into acc; a head entry of None means all-zero gradients."""
    for key in ("policy", "flow"):
        if grads[key] is None:
            continue
        for a, g in zip(acc[key][0], grads[key][0]):
            a += g
        for a, g in zip(acc[key][1], grads[key][1]):
            a += g
    acc["log_z"] += grads["log_z"]


def scale_grads(grads: dict, factor: float) -> None:
    for key in ("policy", "flow"):
        if grads[key] is None:
            continue
        for g in grads[key][0]:
            g *= factor
        for g in grads[key][1]:
            g *= factor
    grads["log_z"] *= factor


def _fill_none_grads(model: Model, grads: dict) -> dict:
    """Replace None head entries with explicit zero gradients."""
    if grads["policy"] is not None and grads["flow"] is not None:
        return grads
    zeros = zero_grads(model)
    return {"policy": grads["policy"] or zeros["policy"],
            "flow": grads["flow"] or zeros["flow"],
            "log_z": grads["log_z"]}


def _param_arrays(model: Model) -> list[np.ndarray]:
    return (model.policy_head.weights + model.policy_head.biases
            + model.flow_head.weights + model.flow_head.biases)


def _grad_arrays(grads: dict) -> list[np.ndarray]:
    return (grads["policy"][0] + grads["policy"][1]
            + grads["flow"][0] + grads["flow"][1])


# ---------------------------------------------------------------------------
# Adam

@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_z_lr: float | None = None  # defaults to lr
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    m_log_z: float = 0.0
    v_log_z: float = 0.0

    @classmethod
    def for_model(cls, model: Model, lr: float = 1e-3,
                  log_z_lr: float | None = None, **kwargs) -> "OptState":
        params = _param_arrays(model)
        return cls(lr=lr, log_z_lr=log_z_lr,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kwargs)


def adam_step(model: Model, grads: dict, opt: OptState,
              inplace: bool = False) -> tuple[Model, OptState]:
    """Standard Adam with bias correction. Returns updated copies by
    default; with inplace=True mutates and returns the given objects."""
    grads = _fill_none_grads(model, grads)
    garrs = _grad_arrays(grads)
    for g in garrs:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    if not np.isfinite(grads["log_z"]):
        raise FloatingPointError("non-finite log_z gradient")
    new_model = model if inplace else model.copy()
    new_opt = opt if inplace else copy.deepcopy(opt)
    new_opt.step += 1
    t = new_opt.step
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    params = _param_arrays(new_model)
    if len(params) != len(new_opt.m):
        raise ValueError("optimizer state does not match model shape")
    for p, g, m, v in zip(params, garrs, new_opt.m, new_opt.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    gz = grads["log_z"]
    new_opt.m_log_z = opt.beta1 * new_opt.m_log_z + (1.0 - opt.beta1) * gz
    new_opt.v_log_z = opt.beta2 * new_opt.v_log_z + (1.0 - opt.beta2) * gz * gz
    zlr = opt.log_z_lr if opt.log_z_lr is not None else opt.lr
    new_model.log_z -= zlr * (new_opt.m_log_z / bc1) / (
        np.sqrt(new_opt.v_log_z / bc2) + opt.eps)
    return new_model, new_opt


# ---------------------------------------------------------------------------
# Finite-difference gradient checking

def grad_check(model: Model, loss_fn, h: float = 1e-5,
               num_params: int = 100, seed: int = 0,
               check_log_z: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients
    at >= num_params randomly sampled parameters.

    loss_fn(model) must return (loss, grads).
    """
    loss, grads = loss_fn(model)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    params = _param_arrays(model)
    garrs = _grad_arrays(_fill_none_grads(model, grads))
    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    n = min(num_params, total)
    flat_idx = rng.choice(total, size=n, replace=False)
    offsets = np.cumsum([0] + sizes)
    max_rel = 0.0
    work = model.copy()
    wparams = _param_arrays(work)
    for fi in flat_idx:
        ai = int(np.searchsorted(offsets, fi, side="right") - 1)
        li = int(fi - offsets[ai])
        p = wparams[ai].reshape(-1)
        orig = p[li]
        p[li] = orig + h
        lp, _ = loss_fn(work)
        p[li] = orig - h
        lm, _ = loss_fn(work)
        p[li] = orig
        numeric = (lp - lm) / (2.0 * h)
        analytic = garrs[ai].reshape(-1)[li]
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        max_rel = max(max_rel, rel)
    if check_log_z:
        work = model.copy()
        work.log_z = model.log_z + h
        lp, _ = loss_fn(work)
        work.log_z = model.log_z - h
        lm, _ = loss_fn(work)
        numeric = (lp - lm) / (2.0 * h)
        analytic = grads["log_z"]
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# Checkpoints

def _mlp_to_json(mlp: MLP) -> dict:
    return {
        "weights": [w.reshape(-1).tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
        "shapes": [list(w.shape) for w in mlp.weights],
        "activation": mlp.activation,
    }


def _mlp_from_json(d: dict) -> MLP:
    weights = [np.array(w, dtype=np.float64).reshape(shape)
               for w, shape in zip(d["weights"], d["shapes"])]
    biases = [np.array(b, dtype=np.float64) for b in d["biases"]]
    return MLP(weights, biases, d["activation"])


def save_checkpoint(model: Model, path: str,
                    train_config_digest: str = "") -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "encoder_cfg": model.encoder_cfg.to_dict(),
        "hidden_spec": {"sizes": list(model.hidden_spec.sizes),
                        "activation": model.hidden_spec.activation},
        "policy_head": _mlp_to_json(model.policy_head),
        "flow_head": _mlp_to_json(model.flow_head),
        "log_z": model.log_z,
        "init_seed": model.init_seed,
        "train_config_digest": train_config_digest,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str) -> Model:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version "
                         f"{payload.get('version')!r}")
    spec = HiddenSpec(sizes=tuple(payload["hidden_spec"]["sizes"]),
                      activation=payload["hidden_spec"]["activation"])
    return Model(
        encoder_cfg=EncoderConfig.from_dict(payload["encoder_cfg"]),
        hidden_spec=spec,
        policy_head=_mlp_from_json(payload["policy_head"]),
        flow_head=_mlp_from_json(payload["flow_head"]),
        init_seed=payload["init_seed"],
        log_z=payload["log_z"],
    )
