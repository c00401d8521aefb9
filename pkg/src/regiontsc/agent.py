"""Regional agent: observations, epsilon-greedy joint actions, replay memory
and the masked (activated-branch) double-estimation learning step.

All regions share one agent (one parameter set, one replay memory); each
region contributes its own transitions and its own branch mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .neural import (
    AdamState,
    BranchingNetParams,
    adam_step,
    forward,
    init_params,
    loss_and_gradients,
    soft_update,
)
from .partition import FICTITIOUS, N_SLOTS, Region
from .sim import SimState, intersection_reward, observe, state_dim

PLACEHOLDER_ACTION = 0


@dataclass
class AgentConfig:
    gamma: float = 0.9
    lr: float = 1e-4
    buffer_size: int = 200_000
    batch_size: int = 32
    tau: float = 0.001
    eps_max: float = 1.0
    eps_min: float = 0.001
    eps_decay_steps: int = 20_000
    warmup: int = 1000
    trunk: tuple[int, int] = (512, 256)
    value_hidden: int = 128
    adv_hidden: int = 128
    seed: int = 0
    masked: bool = True  # False: plain BDQ (idle branches count in target and loss)
    double: bool = True  # False: target net also picks the greedy next action
    obs_scale: float = 1.0  # network input = observation * obs_scale; replay keeps raw counts

    def __post_init__(self) -> None:
        self.trunk = tuple(self.trunk)

    @classmethod
    def from_dict(cls, data: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["trunk"] = list(self.trunk)
        return d


@dataclass
class EpsilonSchedule:
    eps_max: float = 1.0
    eps_min: float = 0.001
    decay_steps: int = 20_000

    def __call__(self, step: int) -> float:
        frac = min(step, self.decay_steps) / self.decay_steps
        # convex form so both endpoints come out exactly
        return (1.0 - frac) * self.eps_max + frac * self.eps_min


# -- observations and rewards ------------------------------------------------


def region_state_dim(state: SimState) -> int:
    dims = {state_dim(state.net, v) for v in state.ids}
    if len(dims) != 1:
        raise ValueError(f"intersections disagree on state size: {sorted(dims)}")
    return dims.pop()


def build_observation(state: SimState, region: Region) -> np.ndarray:
    """Slot states concatenated in [centre, N, E, S, W] order; fictitious
    slots are zero vectors."""
    dim = region_state_dim(state)
    parts = [np.zeros(dim) if u is FICTITIOUS else observe(state, u) for u in region.slots]
    return np.concatenate(parts)


def regional_reward(state: SimState, region: Region) -> float:
    return float(sum(intersection_reward(state, u) for u in region.members))


# -- action selection --------------------------------------------------------


def greedy_actions(Q: np.ndarray, mask) -> np.ndarray:
    """Per-branch argmax (first maximum wins); idle branches get the placeholder."""
    acts = np.argmax(Q, axis=-1)
    return np.where(np.asarray(mask, dtype=bool), acts, PLACEHOLDER_ACTION)


def select_joint_action(
    qnet: BranchingNetParams, obs: np.ndarray, mask, eps: float, rng: np.random.Generator
) -> np.ndarray:
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    mask = np.asarray(mask, dtype=bool)
    if eps > 0.0 and rng.random() < eps:
        acts = rng.integers(0, qnet.n_actions, size=qnet.n_branches)
        return np.where(mask, acts, PLACEHOLDER_ACTION)
    return greedy_actions(forward(qnet, obs).Q[0], mask)


# -- replay ------------------------------------------------------------------


class ReplayBuffer:
    """Ring buffer of (obs, actions, reward, next_obs, mask).

    Observations are stored as float32; they are small integer counts and
    one-hot flags, which float32 holds exactly.
    """

    def __init__(self, capacity: int, obs_dim: int, n_branches: int = N_SLOTS, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.n_branches = n_branches
        self.rng = np.random.default_rng(seed)
        self._alloc = 0
        self._grow(min(capacity, 4096))
        self.size = 0
        self.ptr = 0

    def _grow(self, n: int) -> None:
        def resize(arr, shape, dtype):
            new = np.zeros((n, *shape), dtype=dtype)
            if arr is not None:
                new[: arr.shape[0]] = arr
            return new

        get = lambda name: getattr(self, name, None)  # noqa: E731
        self.obs = resize(get("obs"), (self.obs_dim,), np.float32)
        self.next_obs = resize(get("next_obs"), (self.obs_dim,), np.float32)
        self.actions = resize(get("actions"), (self.n_branches,), np.int64)
        self.rewards = resize(get("rewards"), (), np.float64)
        self.masks = resize(get("masks"), (self.n_branches,), bool)
        self._alloc = n

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, reward: float, next_obs, mask) -> None:
        if self.ptr >= self._alloc:
            self._grow(min(self.capacity, 2 * self._alloc))
        i = self.ptr
        self.obs[i] = obs
        self.actions[i] = actions
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.masks[i] = mask
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        idx = self.rng.choice(self.size, size=batch_size, replace=False)
        return {
            "obs": self.obs[idx].astype(np.float64),
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_obs": self.next_obs[idx].astype(np.float64),
            "masks": self.masks[idx],
        }


# -- learning ----------------------------------------------------------------


def compute_targets(
    target_net: BranchingNetParams,
    online_net: BranchingNetParams,
    batch: dict[str, np.ndarray],
    gamma: float,
    masked: bool = True,
    double: bool = True,
) -> np.ndarray:
    """One scalar TD target per sample, shared by its activated branches.

    Next actions are chosen branch-wise by the online net and evaluated by
    the target net (``double=False`` lets the target net choose too). The
    bootstrap term averages only activated branches; ``masked=False``
    averages all branches. No terminal masking: episodes end on a time
    limit.
    """
    mask = np.asarray(batch["masks"], dtype=bool)
    if not masked:
        mask = np.ones_like(mask)
    if not mask.any(axis=1).all():
        raise ValueError("every sample needs at least one activated branch")
    q_target = forward(target_net, batch["next_obs"]).Q
    chooser = forward(online_net, batch["next_obs"]).Q if double else q_target
    a_next = np.argmax(chooser, axis=2)
    q_next = np.take_along_axis(q_target, a_next[..., None], axis=2)[..., 0]
    boot = (q_next * mask).sum(axis=1) / mask.sum(axis=1)
    return np.asarray(batch["rewards"], dtype=np.float64) + gamma * boot


@dataclass
class ABDQAgent:
    cfg: AgentConfig
    obs_dim: int
    n_branches: int = N_SLOTS
    n_actions: int = 4
    online: BranchingNetParams = field(init=False)
    target: BranchingNetParams = field(init=False)
    adam: AdamState = field(init=False)
    buffer: ReplayBuffer = field(init=False)
    schedule: EpsilonSchedule = field(init=False)
    rng: np.random.Generator = field(init=False, repr=False)
    env_steps: int = 0
    learn_steps: int = 0

    def __post_init__(self) -> None:
        c = self.cfg
        seeds = np.random.SeedSequence(c.seed).spawn(3)
        self.online = init_params(
            self.obs_dim, self.n_branches, self.n_actions, c.trunk, c.value_hidden, c.adv_hidden,
            seed=int(seeds[0].generate_state(1)[0]),
        )
        self.target = self.online.copy()
        self.adam = AdamState.for_params(self.online)
        self.buffer = ReplayBuffer(c.buffer_size, self.obs_dim, self.n_branches,
                                   seed=int(seeds[1].generate_state(1)[0]))
        self.schedule = EpsilonSchedule(c.eps_max, c.eps_min, c.eps_decay_steps)
        self.rng = np.random.default_rng(seeds[2])

    @property
    def epsilon(self) -> float:
        return self.schedule(self.env_steps)

    def act(self, obs: np.ndarray, mask, eps: float | None = None) -> np.ndarray:
        eps = self.epsilon if eps is None else eps
        return select_joint_action(self.online, obs * self.cfg.obs_scale, mask, eps, self.rng)

    def store(self, obs, actions, reward, next_obs, mask) -> None:
        self.buffer.add(obs, actions, reward, next_obs, mask)

    def learn_step(self) -> float | None:
        """One Adam step on a sampled batch plus a soft target update.

        Returns the loss, or None (and changes nothing) while the buffer
        is below the warm-up size.
        """
        c = self.cfg
        if len(self.buffer) < max(c.warmup, c.batch_size):
            return None
        batch = self.buffer.sample(c.batch_size)
        if c.obs_scale != 1.0:
            batch["obs"] = batch["obs"] * c.obs_scale
            batch["next_obs"] = batch["next_obs"] * c.obs_scale
        y = compute_targets(self.target, self.online, batch, c.gamma, c.masked, c.double)
        mask = batch["masks"] if c.masked else np.ones_like(batch["masks"])
        loss, grads = loss_and_gradients(self.online, batch["obs"], batch["actions"], y, mask)
        adam_step(self.online, grads, self.adam, c.lr)
        soft_update(self.target, self.online, c.tau)
        self.learn_steps += 1
        return loss
