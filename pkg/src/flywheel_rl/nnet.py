"""Small numpy MLP stack with hand-written reverse-mode gradients.

Parameters live in one flat float64 array per network (a "param vector");
:meth:`MlpSpec.layout` maps slices of it onto per-layer weights and biases.
Hidden layers use tanh, the output layer is affine.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .envworld import GRID, N_ACTIONS, OBS_CHANNELS, OBS_DIM, ROBOT_DIM, EnvBatch
from .errors import ContractViolation, NumericalError

LOG_PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"FLYWHEEL-PARAMS v1\n"


class LayerSlot(NamedTuple):
    layer: int
    kind: str  # "W" or "b"
    start: int
    shape: tuple[int, ...]

    @property
    def stop(self) -> int:
        return self.start + math.prod(self.shape)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ContractViolation(f"all MLP dims must be >= 1, got {dims}")
        if self.activation != "tanh":
            raise ContractViolation("only tanh activations are supported")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def layout(self) -> list[LayerSlot]:
        return list(_layout(self.dims))

    @property
    def n_params(self) -> int:
        return self.layout()[-1].stop

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "output_dim": self.output_dim,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> MlpSpec:
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["output_dim"]), d.get("activation", "tanh"))


@lru_cache(maxsize=None)
def _layout(dims: tuple[int, ...]) -> tuple[LayerSlot, ...]:
    slots, offset = [], 0
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        slots.append(LayerSlot(i, "W", offset, (a, b)))
        offset += a * b
        slots.append(LayerSlot(i, "b", offset, (b,)))
        offset += b
    return tuple(slots)


def _layers(spec: MlpSpec, params: np.ndarray):
    slots = spec.layout()
    for i in range(0, len(slots), 2):
        w, b = slots[i], slots[i + 1]
        yield params[w.start : w.stop].reshape(w.shape), params[b.start : b.stop]


def init_params(spec: MlpSpec, rng: np.random.Generator, output_scale: float = 1.0) -> np.ndarray:
    params = np.zeros(spec.n_params)
    slots = spec.layout()
    n_layers = len(spec.dims) - 1
    for s in slots:
        if s.kind == "W":
            scale = 1.0 / np.sqrt(s.shape[0])
            if s.layer == n_layers - 1:
                scale *= output_scale
            params[s.start : s.stop] = rng.normal(0.0, scale, size=s.shape).ravel()
    return params


@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # inputs to each layer, then the output


def mlp_forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != spec.input_dim or params.shape != (spec.n_params,):
        raise ContractViolation(
            f"dimension mismatch: input {x.shape[1]} vs {spec.input_dim}, params {params.shape} vs {spec.n_params}"
        )
    acts = [x]
    layers = list(_layers(spec, params))
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, ForwardCache(acts)


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Forward pass; a 1-D input gives a 1-D output."""
    out, _ = mlp_forward_cached(spec, params, x)
    return out[0] if np.ndim(x) == 1 else out


def backprop_gradients(
    spec: MlpSpec, params: np.ndarray, cache: ForwardCache, upstream: np.ndarray, need_input_grad: bool = False
) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradient of ``sum(upstream * output)`` w.r.t. the params (and optionally the input)."""
    grad = np.zeros_like(params)
    layers = list(_layers(spec, params))
    slots = spec.layout()
    g = np.atleast_2d(upstream)
    n_layers = len(layers)
    for i in range(n_layers - 1, -1, -1):
        w, _ = layers[i]
        a_in = cache.activations[i]
        ws, bs = slots[2 * i], slots[2 * i + 1]
        grad[ws.start : ws.stop] = (a_in.T @ g).ravel()
        grad[bs.start : bs.stop] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ w.T
            if i > 0:
                g = g * (1.0 - a_in * a_in)
    return grad, (g if need_input_grad else None)


def action_distribution(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_prob(probabilities: np.ndarray, action: int) -> float:
    p = np.asarray(probabilities, dtype=float)
    if not 0 <= action < p.shape[-1]:
        raise ContractViolation(f"action {action} out of range")
    if not np.isfinite(p[action]):
        raise NumericalError("non-finite probability")
    return float(np.log(max(p[action], LOG_PROB_FLOOR)))


def selected_log_probs(logits: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(log p(a), probs, clamped_mask)`` with the probability floor applied."""
    lsm = log_softmax(logits)
    lp = lsm[np.arange(len(actions)), actions]
    floor = np.log(LOG_PROB_FLOOR)
    clamped = lp < floor
    return np.where(clamped, floor, lp), np.exp(lsm), clamped


def finite_diff_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params: np.ndarray, h: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - numeric| / (|numeric| + 1e-8).

    ``fn(params)`` returns ``(loss, analytic_gradient)``.
    """
    if h <= 0:
        raise ContractViolation("h must be positive")
    params = np.array(params, dtype=float)
    _, analytic = fn(params)
    worst = 0.0
    for k in range(params.size):
        old = params[k]
        params[k] = old + h
        up, _ = fn(params)
        params[k] = old - h
        down, _ = fn(params)
        params[k] = old
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic[k] - numeric) / (abs(numeric) + 1e-8))
    return worst


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ContractViolation("adam_step: length mismatch")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def clip_gradients(grad: np.ndarray | list[np.ndarray], max_norm: float):
    """Global-L2-norm clipping. Accepts one array or a list clipped jointly."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    arrays = grad if isinstance(grad, list) else [grad]
    norm = float(np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in arrays)))
    if norm > max_norm:
        arrays = [g * (max_norm / norm) for g in arrays]
    return arrays if isinstance(grad, list) else arrays[0]


# --------------------------------------------------------------------------- policies


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(probs))
    cum = np.cumsum(probs, axis=1)
    return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def choose_actions(probs: np.ndarray, rng: np.random.Generator | None, deterministic: bool) -> np.ndarray:
    if deterministic:
        return probs.argmax(axis=1)
    return _sample(probs, rng)


@dataclass
class StatePolicy:
    """Actor-critic over privileged state features; separate parameter vectors."""

    actor_spec: MlpSpec
    critic_spec: MlpSpec
    actor_params: np.ndarray
    critic_params: np.ndarray
    kind: str = field(default="state", init=False)

    @classmethod
    def create(cls, feature_dim: int, hidden=(64, 64), seed: int = 0) -> StatePolicy:
        rng = np.random.default_rng(seed)
        a = MlpSpec(feature_dim, tuple(hidden), N_ACTIONS)
        c = MlpSpec(feature_dim, tuple(hidden), 1)
        return cls(a, c, init_params(a, rng, output_scale=0.01), init_params(c, rng))

    def copy(self) -> StatePolicy:
        return StatePolicy(self.actor_spec, self.critic_spec, self.actor_params.copy(), self.critic_params.copy())

    def logits(self, features: np.ndarray) -> np.ndarray:
        return mlp_forward_cached(self.actor_spec, self.actor_params, features)[0]

    def probs(self, features: np.ndarray) -> np.ndarray:
        return action_distribution(self.logits(features))

    def value(self, features: np.ndarray) -> np.ndarray:
        return mlp_forward_cached(self.critic_spec, self.critic_params, features)[0][:, 0]

    def act(self, batch: EnvBatch, idx: np.ndarray, rng, deterministic: bool) -> np.ndarray:
        return choose_actions(self.probs(batch.features(idx)), rng, deterministic)


GRID_FLAT = OBS_CHANNELS * GRID * GRID


@dataclass
class GeneralistPolicy:
    """Observation policy: encoder(grid) -> embedding, head(embedding ++ robot state) -> logits."""

    encoder_spec: MlpSpec
    head_spec: MlpSpec
    encoder_params: np.ndarray
    head_params: np.ndarray
    freeze_encoder: bool = False
    kind: str = field(default="generalist", init=False)

    @classmethod
    def create(cls, embed_dim: int = 64, encoder_hidden=(), head_hidden=(64, 64), seed: int = 0) -> GeneralistPolicy:
        rng = np.random.default_rng(seed)
        enc = MlpSpec(GRID_FLAT, tuple(encoder_hidden), embed_dim)
        head = MlpSpec(embed_dim + ROBOT_DIM, tuple(head_hidden), N_ACTIONS)
        return cls(enc, head, init_params(enc, rng), init_params(head, rng, output_scale=0.01))

    def copy(self) -> GeneralistPolicy:
        return replace(self, encoder_params=self.encoder_params.copy(), head_params=self.head_params.copy())

    def forward(self, obs: np.ndarray):
        obs = np.atleast_2d(obs)
        if obs.shape[1] != OBS_DIM:
            raise ContractViolation(f"observation width {obs.shape[1]} != {OBS_DIM}")
        emb, enc_cache = mlp_forward_cached(self.encoder_spec, self.encoder_params, obs[:, :GRID_FLAT])
        head_in = np.concatenate([emb, obs[:, GRID_FLAT:]], axis=1)
        logits, head_cache = mlp_forward_cached(self.head_spec, self.head_params, head_in)
        return logits, (enc_cache, head_cache)

    def logits(self, obs: np.ndarray) -> np.ndarray:
        return self.forward(obs)[0]

    def probs(self, obs: np.ndarray) -> np.ndarray:
        return action_distribution(self.logits(obs))

    def backward(self, caches, upstream: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
        """Param gradients ``(encoder or None when frozen, head)`` for d(loss)/d(logits) = upstream."""
        enc_cache, head_cache = caches
        g_head, g_in = backprop_gradients(
            self.head_spec, self.head_params, head_cache, upstream, need_input_grad=not self.freeze_encoder
        )
        if self.freeze_encoder:
            return None, g_head
        g_emb = g_in[:, : self.encoder_spec.output_dim]
        g_enc, _ = backprop_gradients(self.encoder_spec, self.encoder_params, enc_cache, g_emb)
        return g_enc, g_head

    def act(self, batch: EnvBatch, idx: np.ndarray, rng, deterministic: bool) -> np.ndarray:
        return choose_actions(self.probs(batch.render(idx=idx)), rng, deterministic)


# --------------------------------------------------------------------------- checkpoints


def _networks(policy) -> list[tuple[str, MlpSpec, np.ndarray]]:
    if isinstance(policy, StatePolicy):
        return [("actor", policy.actor_spec, policy.actor_params), ("critic", policy.critic_spec, policy.critic_params)]
    if isinstance(policy, GeneralistPolicy):
        return [("encoder", policy.encoder_spec, policy.encoder_params), ("head", policy.head_spec, policy.head_params)]
    raise TypeError(f"cannot checkpoint {type(policy).__name__}")


def save_policy(policy, path: str | Path) -> None:
    """Write a checkpoint: magic line, u32 header length, JSON header, raw little-endian float64."""
    nets = _networks(policy)
    header = {
        "kind": policy.kind,
        "networks": [{"name": n, "spec": s.to_dict(), "n_params": int(p.size)} for n, s, p in nets],
    }
    if isinstance(policy, GeneralistPolicy):
        header["freeze_encoder"] = policy.freeze_encoder
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, _, p in nets:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_policy(path: str | Path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"{path}: not a parameter checkpoint (bad magic)")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        arrays = {}
        for net in header["networks"]:
            arrays[net["name"]] = (
                MlpSpec.from_dict(net["spec"]),
                np.frombuffer(fh.read(8 * net["n_params"]), dtype="<f8").astype(float),
            )
    if header["kind"] == "state":
        (a_spec, a), (c_spec, c) = arrays["actor"], arrays["critic"]
        return StatePolicy(a_spec, c_spec, a, c)
    (e_spec, e), (h_spec, h) = arrays["encoder"], arrays["head"]
    return GeneralistPolicy(e_spec, h_spec, e, h, freeze_encoder=bool(header.get("freeze_encoder", False)))
