"""Branching dueling Q-network in plain numpy (float64).

Architecture: a two-layer ReLU trunk feeds a value head (hidden -> 1) and
K advantage heads (hidden -> n_actions) of identical shape. Each branch
aggregates as Q_k(s, a) = V(s) + A_k(s, a) - mean_a' A_k(s, a').

Advantage-head weights are stacked along a leading branch axis so all
heads run as one batched matmul.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wv1", "bv1", "Wv2", "bv2", "Wa1", "ba1", "Wa2", "ba2")


class ShapeError(ValueError):
    pass


@dataclass
class BranchingNetParams:
    arrays: dict[str, np.ndarray]

    @property
    def n_branches(self) -> int:
        return self.arrays["Wa2"].shape[0]

    @property
    def n_actions(self) -> int:
        return self.arrays["Wa2"].shape[2]

    @property
    def input_dim(self) -> int:
        return self.arrays["W1"].shape[0]

    def copy(self) -> "BranchingNetParams":
        return BranchingNetParams({k: v.copy() for k, v in self.arrays.items()})

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def init_params(
    input_dim: int,
    n_branches: int = 5,
    n_actions: int = 4,
    trunk: tuple[int, int] = (512, 256),
    value_hidden: int = 128,
    adv_hidden: int = 128,
    seed: int = 0,
) -> BranchingNetParams:
    """He-style uniform fan-in initialisation, zero biases."""
    rng = np.random.default_rng(seed)

    def he(fan_in, shape):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    h1, h2 = trunk
    arrays = {
        "W1": he(input_dim, (input_dim, h1)),
        "b1": np.zeros(h1),
        "W2": he(h1, (h1, h2)),
        "b2": np.zeros(h2),
        "Wv1": he(h2, (h2, value_hidden)),
        "bv1": np.zeros(value_hidden),
        "Wv2": he(value_hidden, (value_hidden, 1)),
        "bv2": np.zeros(1),
        "Wa1": he(h2, (n_branches, h2, adv_hidden)),
        "ba1": np.zeros((n_branches, adv_hidden)),
        "Wa2": he(adv_hidden, (n_branches, adv_hidden, n_actions)),
        "ba2": np.zeros((n_branches, n_actions)),
    }
    return BranchingNetParams(arrays)


@dataclass
class QOutput:
    V: np.ndarray  # (B,)
    A: np.ndarray  # (B, K, n_actions)
    Q: np.ndarray  # (B, K, n_actions)
    cache: dict = field(default_factory=dict, repr=False)


def forward(params: BranchingNetParams, obs: np.ndarray) -> QOutput:
    """Batched forward pass; a 1-D ``obs`` is treated as a batch of one."""
    p = params.arrays
    x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"observation dim {x.shape[-1]} != network input {params.input_dim}")
    z1 = x @ p["W1"] + p["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ p["W2"] + p["b2"]
    h2 = np.maximum(z2, 0.0)
    zv = h2 @ p["Wv1"] + p["bv1"]
    hv = np.maximum(zv, 0.0)
    V = (hv @ p["Wv2"])[:, 0] + p["bv2"][0]
    # (K, B, M) layout for the branch heads
    za = np.matmul(h2[None], p["Wa1"]) + p["ba1"][:, None, :]
    ha = np.maximum(za, 0.0)
    A = (np.matmul(ha, p["Wa2"]) + p["ba2"][:, None, :]).transpose(1, 0, 2)
    Q = V[:, None, None] + (A - A.mean(axis=2, keepdims=True))
    cache = {"x": x, "z1": z1, "h1": h1, "z2": z2, "h2": h2, "zv": zv, "hv": hv, "za": za, "ha": ha}
    return QOutput(V, A, Q, cache)


def backward(params: BranchingNetParams, out: QOutput, gQ: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. all parameters, given dL/dQ."""
    p, c = params.arrays, out.cache
    n_actions = gQ.shape[2]
    gV = gQ.sum(axis=(1, 2))
    gA = (gQ - gQ.sum(axis=2, keepdims=True) / n_actions).transpose(1, 0, 2)  # (K, B, n)

    g = {}
    g["Wa2"] = np.matmul(c["ha"].transpose(0, 2, 1), gA)
    g["ba2"] = gA.sum(axis=1)
    gza = np.matmul(gA, p["Wa2"].transpose(0, 2, 1)) * (c["za"] > 0)
    g["Wa1"] = np.matmul(c["h2"].T[None], gza)
    g["ba1"] = gza.sum(axis=1)
    gh2 = np.matmul(gza, p["Wa1"].transpose(0, 2, 1)).sum(axis=0)

    g["Wv2"] = c["hv"].T @ gV[:, None]
    g["bv2"] = np.array([gV.sum()])
    gzv = (gV[:, None] * p["Wv2"][:, 0][None, :]) * (c["zv"] > 0)
    g["Wv1"] = c["h2"].T @ gzv
    g["bv1"] = gzv.sum(axis=0)
    gh2 = gh2 + gzv @ p["Wv1"].T

    gz2 = gh2 * (c["z2"] > 0)
    g["W2"] = c["h1"].T @ gz2
    g["b2"] = gz2.sum(axis=0)
    gz1 = (gz2 @ p["W2"].T) * (c["z1"] > 0)
    g["W1"] = c["x"].T @ gz1
    g["b1"] = gz1.sum(axis=0)
    return g


def _check_batch(actions, targets, mask, batch: int, k: int):
    actions = np.asarray(actions, dtype=np.int64).reshape(batch, k)
    mask = np.asarray(mask, dtype=bool).reshape(batch, k)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = np.repeat(targets[:, None], k, axis=1)
    if targets.shape != (batch, k):
        raise ShapeError(f"targets shape {targets.shape} != {(batch, k)}")
    if not mask.any(axis=1).all():
        raise ValueError("every sample needs at least one activated branch")
    return actions, targets, mask


def masked_loss(Q: np.ndarray, actions, targets, mask) -> tuple[float, np.ndarray]:
    """Mean over samples of the per-sample mean squared TD error over
    activated branches; also returns dL/dQ."""
    batch, k, _ = Q.shape
    actions, targets, mask = _check_batch(actions, targets, mask, batch, k)
    rows = np.arange(batch)[:, None]
    cols = np.arange(k)[None, :]
    q_taken = Q[rows, cols, actions]
    n_active = mask.sum(axis=1)
    err = np.where(mask, targets - q_taken, 0.0)
    loss = float(np.mean((err**2).sum(axis=1) / n_active))
    gQ = np.zeros_like(Q)
    gQ[rows, cols, actions] = -2.0 * err / (n_active[:, None] * batch)
    return loss, gQ


def loss_and_gradients(
    params: BranchingNetParams, obs, actions, targets, mask
) -> tuple[float, dict[str, np.ndarray]]:
    out = forward(params, obs)
    loss, gQ = masked_loss(out.Q, actions, targets, mask)
    return loss, backward(params, out, gQ)


def loss_only(params: BranchingNetParams, obs, actions, targets, mask) -> float:
    out = forward(params, obs)
    return masked_loss(out.Q, actions, targets, mask)[0]


def finite_difference_gradient(
    params: BranchingNetParams,
    batch: tuple,
    epsilon: float = 1e-5,
    loss_fn: Callable[..., float] = loss_only,
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn(params, *batch)`` for every parameter.

    Touches each scalar twice, so only practical on small networks.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads = {}
    for name, arr in params.arrays.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = loss_fn(params, *batch)
            flat[i] = old - epsilon
            down = loss_fn(params, *batch)
            flat[i] = old
            gflat[i] = (up - down) / (2 * epsilon)
        grads[name] = g
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: BranchingNetParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def adam_step(
    params: BranchingNetParams, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[BranchingNetParams, AdamState]:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    if set(grads) != set(params.arrays):
        raise ShapeError("gradient keys do not match parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, w in params.arrays.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def soft_update(target: BranchingNetParams, online: BranchingNetParams, tau: float) -> BranchingNetParams:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for name, w in target.arrays.items():
        src = online.arrays[name]
        if src.shape != w.shape:
            raise ShapeError(f"{name}: {src.shape} vs {w.shape}")
        w *= 1.0 - tau
        w += tau * src
    return target


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, online: BranchingNetParams, target: BranchingNetParams | None = None,
                    adam: AdamState | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    payload: dict[str, np.ndarray] = {"format_version": np.array(CHECKPOINT_VERSION)}
    for k, v in online.arrays.items():
        payload[f"online/{k}"] = v
    if target is not None:
        for k, v in target.arrays.items():
            payload[f"target/{k}"] = v
    if adam is not None:
        payload["adam/t"] = np.array(adam.t)
        payload["adam/hyper"] = np.array([adam.beta1, adam.beta2, adam.eps])
        for k in adam.m:
            payload[f"adam/m/{k}"] = adam.m[k]
            payload[f"adam/v/{k}"] = adam.v[k]
    for k, v in (extra or {}).items():
        payload[f"extra/{k}"] = np.asarray(v)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> dict:
    with np.load(io.BytesIO(Path(path).read_bytes())) as data:
        files = {k: data[k] for k in data.files}
    version = int(files.pop("format_version"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in files.items() if k.startswith(prefix)}

    out: dict = {"online": BranchingNetParams(group("online/"))}
    tgt = group("target/")
    out["target"] = BranchingNetParams(tgt) if tgt else None
    if "adam/t" in files:
        b1, b2, eps = files["adam/hyper"]
        out["adam"] = AdamState(group("adam/m/"), group("adam/v/"), int(files["adam/t"]),
                                float(b1), float(b2), float(eps))
    else:
        out["adam"] = None
    out["extra"] = group("extra/")
    return out
