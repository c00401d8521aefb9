"""Training and evaluation pipeline, baseline controllers, metric logs."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import net as netmod
from .agent import ABDQAgent, AgentConfig, build_observation, regional_reward, region_state_dim
from .net import Phase, RoadNetwork
from .neural import load_checkpoint, save_checkpoint
from .partition import (
    RegionConfiguration,
    assignment_order,
    configuration_from_dict,
    configuration_to_dict,
    construct_regions,
    load_configuration,
    solve_min_dominating_set,
    validate_configuration,
)
from .sim import FlowSpec, SimConfig, SimState, done, flow_from_dict, pressure, reset, step
from .sim import metrics as sim_metrics

log = logging.getLogger(__name__)


def episode_seed(base: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([base, stream, index]).generate_state(1)[0])


TRAIN_STREAM, EVAL_STREAM = 1, 2


# -- controllers -------------------------------------------------------------


class Controller(Protocol):
    def reset(self, state: SimState) -> None: ...

    def act(self, state: SimState) -> dict[str, Phase]: ...


class FixedTimeController:
    """Every intersection runs the same cycle in lockstep, no offsets."""

    def __init__(self, cycle: Sequence[tuple[Phase, int]] | None = None):
        cycle = list(cycle) if cycle is not None else [(p, 1) for p in Phase]
        if not cycle:
            raise ValueError("fixed-time cycle must not be empty")
        if any(d < 1 for _, d in cycle):
            raise ValueError("phase durations must be at least one interval")
        self.sequence = [Phase(p) for p, d in cycle for _ in range(d)]
        self._k = 0

    def reset(self, state: SimState) -> None:
        self._k = 0

    def act(self, state: SimState) -> dict[str, Phase]:
        phase = self.sequence[self._k % len(self.sequence)]
        self._k += 1
        return {v: phase for v in state.ids}


class MaxPressureController:
    def reset(self, state: SimState) -> None:
        pass

    def act(self, state: SimState) -> dict[str, Phase]:
        # max() keeps the first maximum, so ties go to enum order
        return {v: max(Phase, key=lambda p: pressure(state, v, p)) for v in state.ids}


class RandomController:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, state: SimState) -> None:
        self.rng = np.random.default_rng([self.seed, state.cfg.seed])

    def act(self, state: SimState) -> dict[str, Phase]:
        picks = self.rng.integers(0, len(Phase), size=len(state.ids))
        return {v: Phase(int(p)) for v, p in zip(state.ids, picks)}


class RegionalController:
    """Concatenates per-region joint actions into a network phase map."""

    def __init__(self, agent: ABDQAgent, config: RegionConfiguration, eps: float | None = 0.0):
        self.agent = agent
        self.config = config
        self.eps = eps

    def reset(self, state: SimState) -> None:
        pass

    def joint_actions(self, state: SimState, observations=None) -> list[np.ndarray]:
        if observations is None:
            observations = [build_observation(state, r) for r in self.config.regions]
        return [self.agent.act(o, r.mask, self.eps) for o, r in zip(observations, self.config.regions)]

    def act(self, state: SimState, actions=None) -> dict[str, Phase]:
        if actions is None:
            actions = self.joint_actions(state)
        return phase_map(self.config, actions)


def phase_map(config: RegionConfiguration, actions: Sequence[np.ndarray]) -> dict[str, Phase]:
    phases: dict[str, Phase] = {}
    for region, acts in zip(config.regions, actions):
        for slot, a in zip(region.slots, acts):
            if slot is not None:
                if slot in phases:
                    raise RuntimeError(f"{slot!r} controlled by two regions")
                phases[slot] = Phase(int(a))
    return phases


# -- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    network: dict
    flow: dict
    sim: dict = field(default_factory=dict)
    partition: dict = field(default_factory=lambda: {"source": "solve"})
    agent: dict = field(default_factory=dict)
    episodes: int = 200
    eval_every: int = 0
    eval_episodes: int = 10
    checkpoint_every: int = 0
    seed: int = 0
    out_dir: str | None = None
    store_step_rewards: bool = True

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


def build_network(spec: Mapping, base_dir: Path | None = None) -> RoadNetwork:
    if "file" in spec:
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return netmod.load_roadnet(path)
    if "grid" in spec:
        g = spec["grid"]
        return netmod.make_grid(g["rows"], g["cols"], g.get("ns_length", 300.0),
                                g.get("ew_length", 300.0), g.get("lanes", 3))
    if "cross" in spec:
        c = spec["cross"]
        return netmod.make_cross(c.get("length", 300.0), c.get("lanes", 3))
    raise ValueError(f"network spec needs one of file/grid/cross: {dict(spec)}")


def build_flow(spec: Mapping, base_dir: Path | None = None) -> FlowSpec:
    if "file" in spec:
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return flow_from_dict(json.loads(path.read_text()))
    return flow_from_dict(spec)


def build_regions(net: RoadNetwork, spec: Mapping) -> RegionConfiguration:
    source = spec.get("source", "solve")
    if source == "config":
        cfg = spec["config"]
        config = load_configuration(cfg) if isinstance(cfg, str) else configuration_from_dict(cfg)
    else:
        if source == "solve":
            w = solve_min_dominating_set(net, time_limit=spec.get("time_limit", 60.0))
        elif source == "set":
            w = frozenset(spec["set"])
        else:
            raise ValueError(f"unknown partition source {source!r}")
        centers, nbrs = assignment_order(net, w, spec.get("order_seed"))
        config = construct_regions(net, w, centers, nbrs)
    problems = validate_configuration(net, config)
    if problems:
        raise ValueError("invalid region configuration: " + "; ".join(problems))
    return config


# -- records -----------------------------------------------------------------


@dataclass
class EpisodeRecord:
    episode: int
    reward: float
    att: float | None
    aql: float
    tp: int
    epsilon: float
    loss: float | None = None
    wall_time: float = 0.0

    def log_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


def emit_metrics(records: Sequence[EpisodeRecord], path: str | Path) -> None:
    """One JSON object per line. Wall time is left out so identical runs
    give byte-identical files."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.log_dict(), sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def episode_reward(step_rewards: np.ndarray) -> float:
    """(1/|V|) * sum over steps and intersections of r_v^t; rows are steps."""
    arr = np.asarray(step_rewards, dtype=np.float64)
    return float(arr.sum() / arr.shape[1]) if arr.size else 0.0


# -- episodes ----------------------------------------------------------------


@dataclass
class EpisodeResult:
    reward: float
    metrics: dict
    step_rewards: np.ndarray  # (T, |V|)
    losses: list[float]


def run_episode(
    net: RoadNetwork,
    flow: FlowSpec,
    sim_cfg: SimConfig,
    controller: Controller,
    agent: ABDQAgent | None = None,
    regions: RegionConfiguration | None = None,
) -> EpisodeResult:
    """Roll out one episode. With ``agent`` and ``regions`` given, the
    controller must be a RegionalController and every step stores one
    transition per region (in region order) and runs one learn step."""
    state = reset(net, flow, sim_cfg)
    controller.reset(state)
    learning = agent is not None
    rows, losses = [], []
    if learning:
        obs = [build_observation(state, r) for r in regions.regions]
    while not done(state):
        if learning:
            actions = controller.joint_actions(state, obs)
            phases = controller.act(state, actions)
        else:
            phases = controller.act(state)
        state, rewards = step(state, phases)
        rows.append([rewards[v] for v in state.ids])
        if learning:
            next_obs = [build_observation(state, r) for r in regions.regions]
            for r, o, a, o2 in zip(regions.regions, obs, actions, next_obs):
                agent.store(o, a, regional_reward(state, r), o2, r.mask)
            loss = agent.learn_step()
            if loss is not None:
                losses.append(loss)
            agent.env_steps += 1
            obs = next_obs
    step_rewards = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(state.ids))
    return EpisodeResult(episode_reward(step_rewards), sim_metrics(state), step_rewards, losses)


def _summary(values: list) -> dict | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def evaluate(
    controller: Controller,
    net: RoadNetwork,
    flow: FlowSpec,
    sim_cfg: SimConfig,
    episodes: int = 10,
    base_seed: int = 0,
) -> dict:
    """Mean and std of episode reward, ATT, AQL and TP over seeded episodes.

    Episode i uses the flow/simulator seed ``episode_seed(base_seed, EVAL, i)``
    so every controller sees the same traffic.
    """
    runs = []
    for i in range(episodes):
        cfg = SimConfig(**{**asdict(sim_cfg), "seed": episode_seed(base_seed, EVAL_STREAM, i)})
        runs.append(run_episode(net, flow, cfg, controller))
    return {
        "episodes": episodes,
        "reward": _summary([r.reward for r in runs]),
        "att": _summary([r.metrics["att"] for r in runs]),
        "aql": _summary([r.metrics["aql"] for r in runs]),
        "tp": _summary([r.metrics["tp"] for r in runs]),
        "per_episode": [
            {"reward": r.reward, "att": r.metrics["att"], "aql": r.metrics["aql"], "tp": r.metrics["tp"]}
            for r in runs
        ],
    }


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    records: list[EpisodeRecord]
    agent: ABDQAgent | None
    regions: RegionConfiguration
    network: RoadNetwork
    flow: FlowSpec
    sim_cfg: SimConfig
    step_rewards: list[np.ndarray]


def make_agent(cfg: ExperimentConfig, net: RoadNetwork, flow: FlowSpec, sim_cfg: SimConfig) -> ABDQAgent:
    agent_cfg = AgentConfig.from_dict({"seed": cfg.seed, **cfg.agent})
    probe = reset(net, flow, sim_cfg)
    return ABDQAgent(agent_cfg, 5 * region_state_dim(probe))


def train(cfg: ExperimentConfig, base_dir: Path | None = None) -> TrainResult:
    net = build_network(cfg.network, base_dir)
    flow = build_flow(cfg.flow, base_dir)
    sim_cfg = SimConfig(**cfg.sim)
    regions = build_regions(net, cfg.partition)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        (out / "regions.json").write_text(json.dumps(configuration_to_dict(regions), indent=1))
        (out / "metrics.jsonl").write_text("")
    records: list[EpisodeRecord] = []
    all_rewards: list[np.ndarray] = []
    if cfg.episodes <= 0:
        return TrainResult(records, None, regions, net, flow, sim_cfg, all_rewards)

    agent = make_agent(cfg, net, flow, sim_cfg)
    controller = RegionalController(agent, regions, eps=None)
    step_fh = open(out / "step_rewards.jsonl", "w") if out is not None and cfg.store_step_rewards else None
    evals = []
    try:
        for ep in range(cfg.episodes):
            t0 = time.perf_counter()
            ep_cfg = SimConfig(**{**asdict(sim_cfg), "seed": episode_seed(cfg.seed, TRAIN_STREAM, ep)})
            res = run_episode(net, flow, ep_cfg, controller, agent, regions)
            rec = EpisodeRecord(
                ep, res.reward, res.metrics["att"], res.metrics["aql"], res.metrics["tp"],
                agent.epsilon, float(np.mean(res.losses)) if res.losses else None,
                time.perf_counter() - t0,
            )
            records.append(rec)
            all_rewards.append(res.step_rewards)
            log.info("episode %d reward %.2f aql %.3f eps %.3f", ep, rec.reward, rec.aql, rec.epsilon)
            if out is not None:
                with open(out / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(rec.log_dict(), sort_keys=True) + "\n")
                with open(out / "timing.jsonl", "a") as fh:
                    fh.write(json.dumps({"episode": ep, "wall_time": rec.wall_time}) + "\n")
                if step_fh is not None:
                    step_fh.write(json.dumps({"episode": ep, "intersections": net.intersections,
                                              "rewards": res.step_rewards.tolist()}) + "\n")
                if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                    save_agent(agent, out / f"checkpoint_{ep + 1}.bin")
            if cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
                ev = evaluate(RegionalController(agent, regions, 0.0), net, flow, sim_cfg,
                              cfg.eval_episodes, cfg.seed)
                evals.append({"episode": ep + 1, **{k: ev[k] for k in ("reward", "att", "aql", "tp")}})
                if out is not None:
                    (out / "eval_curve.json").write_text(json.dumps(evals, indent=1))
    finally:
        if step_fh is not None:
            step_fh.close()
    if out is not None:
        save_agent(agent, out / "checkpoint_final.bin")
    return TrainResult(records, agent, regions, net, flow, sim_cfg, all_rewards)


def save_agent(agent: ABDQAgent, path: str | Path) -> None:
    save_checkpoint(
        path, agent.online, agent.target, agent.adam,
        extra={"env_steps": np.array(agent.env_steps), "learn_steps": np.array(agent.learn_steps),
               "obs_dim": np.array(agent.obs_dim)},
    )


def load_agent(path: str | Path, agent_cfg: AgentConfig) -> ABDQAgent:
    data = load_checkpoint(path)
    online = data["online"]
    obs_dim = int(data["extra"].get("obs_dim", online.input_dim))
    agent = ABDQAgent(agent_cfg, obs_dim, online.n_branches, online.n_actions)
    for name, arr in online.arrays.items():
        if agent.online.arrays[name].shape != arr.shape:
            raise ValueError(f"checkpoint {name} shape {arr.shape} does not match the configured network "
                             f"{agent.online.arrays[name].shape}")
    agent.online = online
    agent.target = data["target"] if data["target"] is not None else online.copy()
    if data["adam"] is not None:
        agent.adam = data["adam"]
    agent.env_steps = int(data["extra"].get("env_steps", 0))
    agent.learn_steps = int(data["extra"].get("learn_steps", 0))
    return agent


def make_controller(name: str, seed: int = 0) -> Controller:
    if name == "fixed":
        return FixedTimeController()
    if name == "maxpressure":
        return MaxPressureController()
    if name == "random":
        return RandomController(seed)
    raise ValueError(f"unknown controller {name!r}")
