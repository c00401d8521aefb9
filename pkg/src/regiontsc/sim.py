"""Deterministic queue-based simulator for signalised grid networks.

Vehicles are points: after entering a lane they travel at free-flow speed
for the lane length, then join a FIFO vertical queue at the stop line. The
head of a queue may discharge (up to the saturation rate per tick) when its
movement is released by the current phase and the downstream lane it picks
has room. Vehicles that discharge into a boundary exit arm complete their
trip.

Per tick: (1) scheduled arrivals enter their boundary arm when the entry
lane has room, otherwise they wait in a FIFO at the arm; (2) in-flight
vehicles whose traversal time is over join their lane's queue; (3) queue
heads discharge; (4) exits are recorded.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .net import (
    DIRECTIONS,
    Phase,
    RoadNetwork,
    Turn,
    UnknownIntersectionError,
    id_sort_key,
    out_direction,
    permits,
)

DEFAULT_TURN_RATIOS = (0.1, 0.6, 0.3)  # left, straight, right
TURN_DRAWS = 32
N_PHASES = len(Phase)


class SimError(ValueError):
    pass


class SimInvariantError(AssertionError):
    pass


@dataclass
class SimConfig:
    tick: float = 1.0
    action_interval: float = 10.0
    episode_length: float = 4000.0
    saturation: int = 1  # vehicles per tick per lane
    free_flow_speed: float = 11.0  # m/s
    vehicle_spacing: float = 7.0  # m
    seed: int = 0
    debug_checks: bool = False

    def __post_init__(self) -> None:
        if self.tick <= 0 or self.action_interval <= 0 or self.episode_length <= 0:
            raise SimError("tick, action_interval and episode_length must be positive")
        ratio = self.action_interval / self.tick
        if abs(ratio - round(ratio)) > 1e-9:
            raise SimError("action_interval must be an integer multiple of tick")
        steps = self.episode_length / self.action_interval
        if abs(steps - round(steps)) > 1e-9:
            raise SimError("episode_length must be an integer multiple of action_interval")
        if self.saturation < 1 or self.free_flow_speed <= 0 or self.vehicle_spacing <= 0:
            raise SimError("saturation, speed and spacing must be positive")

    @property
    def ticks_per_step(self) -> int:
        return round(self.action_interval / self.tick)

    @property
    def n_steps(self) -> int:
        return round(self.episode_length / self.action_interval)


@dataclass
class GeneratorSpec:
    """Gaussian arrivals: network-wide rate ``mean`` and ``std`` in veh/s.

    Every window of ``window`` seconds draws a count from
    N(mean*w, std*sqrt(w)) truncated at zero and rounded, i.e. the sum of
    w independent per-second rates. Arrivals are spread uniformly over the
    window's ticks and assigned to entry arms by ``weights``.
    """

    mean: float
    std: float = 0.0
    arms: list[str] | None = None
    weights: list[float] | None = None
    window: float | None = None
    start: float = 0.0
    end: float | None = None


@dataclass
class FlowSpec:
    vehicles: list[tuple[float, str]] | None = None
    generator: GeneratorSpec | None = None
    turn_ratios: tuple[float, float, float] = DEFAULT_TURN_RATIOS
    turn_ratios_at: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if (self.vehicles is None) == (self.generator is None):
            raise SimError("flow needs exactly one of an explicit vehicle list or a generator")
        for ratios in [self.turn_ratios, *self.turn_ratios_at.values()]:
            if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
                raise SimError(f"turn ratios must be three non-negative numbers summing to 1: {ratios}")
        if self.generator is not None and (self.generator.mean < 0 or self.generator.std < 0):
            raise SimError("arrival rates must be non-negative")


def flow_from_dict(data: Mapping) -> FlowSpec:
    turn = data.get("turn_ratios", DEFAULT_TURN_RATIOS)
    if isinstance(turn, Mapping):
        turn = (turn["left"], turn["straight"], turn["right"])
    at = {k: tuple(v) for k, v in data.get("turn_ratios_at", {}).items()}
    if "vehicles" in data:
        vehicles = [(float(v["depart"]), str(v["origin"])) for v in data["vehicles"]]
        return FlowSpec(vehicles=vehicles, turn_ratios=tuple(turn), turn_ratios_at=at)
    g = dict(data["generator"])
    if "turn_ratios" in g:
        t = g.pop("turn_ratios")
        turn = (t["left"], t["straight"], t["right"]) if isinstance(t, Mapping) else tuple(t)
    return FlowSpec(generator=GeneratorSpec(**g), turn_ratios=tuple(turn), turn_ratios_at=at)


def flow_to_dict(flow: FlowSpec) -> dict:
    out: dict = {"turn_ratios": list(flow.turn_ratios)}
    if flow.turn_ratios_at:
        out["turn_ratios_at"] = {k: list(v) for k, v in flow.turn_ratios_at.items()}
    if flow.vehicles is not None:
        out["vehicles"] = [{"depart": d, "origin": o} for d, o in flow.vehicles]
    else:
        g = flow.generator
        out["generator"] = {k: getattr(g, k) for k in GeneratorSpec.__dataclass_fields__}
    return out


def load_flow(path: str | Path) -> FlowSpec:
    return flow_from_dict(json.loads(Path(path).read_text()))


def sample_schedule(net: RoadNetwork, flow: FlowSpec, cfg: SimConfig) -> list[tuple[int, str]]:
    """Full arrival schedule as (depart tick, origin arm), sorted by tick."""
    entries = net.entry_arms()
    if flow.vehicles is not None:
        sched = []
        for depart, origin in flow.vehicles:
            if origin not in entries:
                raise SimError(f"unknown origin arm {origin!r}")
            sched.append((int(math.floor(depart / cfg.tick + 1e-9)), origin))
        sched.sort(key=lambda x: x[0])
        return sched
    g = flow.generator
    arms = g.arms if g.arms is not None else sorted(entries, key=id_sort_key)
    bad = [a for a in arms if a not in entries]
    if bad:
        raise SimError(f"unknown origin arms {bad}")
    weights = np.ones(len(arms)) if g.weights is None else np.asarray(g.weights, dtype=float)
    if len(weights) != len(arms) or weights.min() < 0 or weights.sum() <= 0:
        raise SimError("generator weights must be non-negative, one per arm")
    weights = weights / weights.sum()
    rng = np.random.default_rng([cfg.seed, 0])
    window = g.window if g.window is not None else cfg.action_interval
    w_ticks = max(1, round(window / cfg.tick))
    start = round(g.start / cfg.tick)
    end = round((g.end if g.end is not None else cfg.episode_length) / cfg.tick)
    sched = []
    for t0 in range(start, end, w_ticks):
        span = min(w_ticks, end - t0)
        secs = span * cfg.tick
        count = int(round(max(0.0, rng.normal(g.mean * secs, g.std * math.sqrt(secs)))))
        if count == 0:
            continue
        ticks = np.sort(rng.integers(0, span, size=count)) + t0
        origins = rng.choice(len(arms), size=count, p=weights)
        sched.extend((int(t), arms[int(o)]) for t, o in zip(ticks, origins))
    return sched


class SimState:
    """Mutable simulator state; build it with :func:`reset`."""

    def __init__(self, net: RoadNetwork, flow: FlowSpec, cfg: SimConfig):
        self.net = net
        self.flow = flow
        self.cfg = cfg
        self.clock = 0  # ticks elapsed
        self.ids = net.intersections
        self.index = {v: i for i, v in enumerate(self.ids)}
        self.phase = [Phase.NS] * len(self.ids)

        n_lanes = len(net.lanes)
        self.queue: list[deque[int]] = [deque() for _ in range(n_lanes)]
        self.flight: list[deque[tuple[int, int]]] = [deque() for _ in range(n_lanes)]
        self.cap = [max(1, int(math.floor(l.length_m / cfg.vehicle_spacing + 1e-9))) for l in net.lanes]
        self.fft = [max(1, math.ceil(l.length_m / cfg.free_flow_speed / cfg.tick - 1e-9))
                    for l in net.lanes]
        self.lane_node = [self.index[l.approach[1]] for l in net.lanes]
        self.lane_dir = [net.approaches[l.approach].direction for l in net.lanes]
        self.lane_turns = [l.turns for l in net.lanes]
        self.entering = [net.entering_lanes[v] for v in self.ids]

        # lanes grouped by (approach, turn) and the exits of each movement
        self._lanes_for: dict[tuple[tuple[str, str], Turn], list[int]] = {}
        for l in net.lanes:
            for t in l.turns:
                self._lanes_for.setdefault((l.approach, t), []).append(l.index)
        self._move_target: dict[tuple[int, str, Turn], tuple[str, str] | None] = {}
        self._avail: dict[tuple[int, str], list[Turn]] = {}
        for v in self.ids:
            i = self.index[v]
            for d in DIRECTIONS:
                if net.incoming(v, d) is None:
                    continue
                options = []
                for t in Turn:
                    out = net.outgoing(v, out_direction(d, t))
                    if out is not None:
                        self._move_target[(i, d, t)] = out.key if out.kind == "internal" else None
                        options.append(t)
                if not options:
                    raise SimError(f"intersection {v!r}: traffic from {d} has no way out")
                self._avail[(i, d)] = options
        # permitted[phase][lane] -> turns released
        self._permitted = [
            [frozenset(t for t in self.lane_turns[k] if permits(p, self.lane_dir[k], t))
             for k in range(n_lanes)]
            for p in Phase
        ]
        cum = {}
        for v in self.ids:
            pl, ps, _ = flow.turn_ratios_at.get(v, flow.turn_ratios)
            cum[self.index[v]] = (pl, pl + ps)
        self._cum = cum

        # vehicles
        self.veh_depart: list[int] = []
        self.veh_arrive: list[int | None] = []
        self.veh_turn: list[Turn | None] = []
        self.veh_pending: list[Turn | None] = []
        self.veh_draws: list[list[float]] = []
        self.veh_ndraw: list[int] = []
        self.veh_origin: list[str | None] = []

        self.schedule = sample_schedule(net, flow, cfg)
        self._sched_ptr = 0
        self._turn_rng = np.random.default_rng([cfg.seed, 1])
        self._manual_rng = np.random.default_rng([cfg.seed, 2])
        self._turn_u = self._turn_rng.random((len(self.schedule), TURN_DRAWS))
        self.pending: dict[str, deque[int]] = {a: deque() for a in net.entry_arms()}
        self._entry_approach = {a.src: a for a in net.approaches.values() if a.kind == "entry"}

        self.n_due = 0
        self.n_in_network = 0
        self.n_deferred = 0
        self.n_completed = 0
        self.travel_time_sum = 0.0
        self.queue_sum = 0.0  # sum over ticks of mean wait per lane

    # -- observables ----------------------------------------------------------

    @property
    def time(self) -> float:
        return self.clock * self.cfg.tick

    def wait(self, lane: int) -> int:
        return len(self.queue[lane])

    def wave(self, lane: int) -> int:
        return len(self.queue[lane]) + len(self.flight[lane])

    def node(self, v: str) -> int:
        if v not in self.index:
            raise UnknownIntersectionError(v)
        return self.index[v]

    # -- vehicles -------------------------------------------------------------

    def _new_vehicle(self, depart: int, origin: str | None, draws) -> int:
        vid = len(self.veh_depart)
        self.veh_depart.append(depart)
        self.veh_arrive.append(None)
        self.veh_turn.append(None)
        self.veh_pending.append(None)
        self.veh_draws.append(draws)
        self.veh_ndraw.append(0)
        self.veh_origin.append(origin)
        return vid

    def _draw_turn(self, vid: int, node: int, from_dir: str) -> Turn:
        draws = self.veh_draws[vid]
        u = draws[self.veh_ndraw[vid] % len(draws)]
        self.veh_ndraw[vid] += 1
        pl, ps = self._cum[node]
        t = Turn.LEFT if u < pl else Turn.STRAIGHT if u < ps else Turn.RIGHT
        options = self._avail[(node, from_dir)]
        if t in options:
            return t
        for alt in (Turn.STRAIGHT, Turn.RIGHT, Turn.LEFT):
            if alt in options:
                return alt
        raise AssertionError("unreachable: every incoming arm has an exit")

    def _pick_lane(self, approach: tuple[str, str], turn: Turn) -> int:
        lanes = self._lanes_for[(approach, turn)]
        if len(lanes) == 1:
            return lanes[0]
        return min(lanes, key=lambda k: (self.wave(k), k))

    def add_vehicle(self, lane: int, turn: Turn, queued: bool = True, depart: float | None = None) -> int:
        """Place a vehicle directly on ``lane`` (scenario setup and tests).

        It counts as due immediately, with the given departure time
        (default: now).
        """
        if turn not in self.lane_turns[lane]:
            raise SimError(f"lane {lane} does not serve {turn.name}")
        if self.wave(lane) >= self.cap[lane]:
            raise SimError(f"lane {lane} is full")
        dep = self.clock if depart is None else int(math.floor(depart / self.cfg.tick + 1e-9))
        vid = self._new_vehicle(dep, None, self._manual_rng.random(TURN_DRAWS).tolist())
        self.veh_turn[vid] = turn
        if queued:
            self.queue[lane].append(vid)
        else:
            self.flight[lane].append((self.clock + self.fft[lane], vid))
        self.n_due += 1
        self.n_in_network += 1
        return vid

    # -- dynamics -------------------------------------------------------------

    def _inject(self, t: int) -> None:
        sched = self.schedule
        while self._sched_ptr < len(sched) and sched[self._sched_ptr][0] <= t:
            depart, origin = sched[self._sched_ptr]
            vid = self._new_vehicle(depart, origin, self._turn_u[self._sched_ptr].tolist())
            self.pending[origin].append(vid)
            self._sched_ptr += 1
            self.n_due += 1
            self.n_deferred += 1
        for arm, waiting in self.pending.items():
            if not waiting:
                continue
            appr = self._entry_approach[arm]
            node = self.index[appr.dst]
            while waiting:
                vid = waiting[0]
                if self.veh_pending[vid] is None:
                    self.veh_pending[vid] = self._draw_turn(vid, node, appr.direction)
                lane = self._pick_lane(appr.key, self.veh_pending[vid])
                if self.wave(lane) >= self.cap[lane]:
                    break
                waiting.popleft()
                self.veh_turn[vid] = self.veh_pending[vid]
                self.veh_pending[vid] = None
                self.flight[lane].append((t + self.fft[lane], vid))
                self.n_deferred -= 1
                self.n_in_network += 1

    def _arrive_at_queues(self, t: int) -> None:
        for lane, fl in enumerate(self.flight):
            q = self.queue[lane]
            while fl and fl[0][0] <= t:
                q.append(fl.popleft()[1])

    def _discharge(self, t: int) -> None:
        sat = self.cfg.saturation
        for node, lanes in enumerate(self.entering):
            permitted = self._permitted[self.phase[node]]
            for lane in lanes:
                q = self.queue[lane]
                allowed = permitted[lane]
                moved = 0
                while q and moved < sat:
                    vid = q[0]
                    turn = self.veh_turn[vid]
                    if turn not in allowed:
                        break
                    target = self._move_target[(node, self.lane_dir[lane], turn)]
                    if target is None:
                        q.popleft()
                        self.veh_arrive[vid] = t
                        self.n_in_network -= 1
                        self.n_completed += 1
                        self.travel_time_sum += (t - self.veh_depart[vid]) * self.cfg.tick
                        moved += 1
                        continue
                    down_node = self.index[target[1]]
                    down_dir = self.net.approaches[target].direction
                    if self.veh_pending[vid] is None:
                        self.veh_pending[vid] = self._draw_turn(vid, down_node, down_dir)
                    nxt = self._pick_lane(target, self.veh_pending[vid])
                    if self.wave(nxt) >= self.cap[nxt]:
                        break
                    q.popleft()
                    self.veh_turn[vid] = self.veh_pending[vid]
                    self.veh_pending[vid] = None
                    self.flight[nxt].append((t + self.fft[nxt], vid))
                    moved += 1

    def tick(self) -> None:
        t = self.clock
        self._inject(t)
        self._arrive_at_queues(t)
        self._discharge(t)
        self.clock += 1
        n_lanes = len(self.queue)
        self.queue_sum += sum(len(q) for q in self.queue) / n_lanes
        if self.n_due != self.n_in_network + self.n_completed + self.n_deferred:
            raise SimInvariantError(
                f"vehicle conservation broken at tick {t}: due={self.n_due} "
                f"in_network={self.n_in_network} completed={self.n_completed} "
                f"deferred={self.n_deferred}"
            )
        if self.cfg.debug_checks:
            self.check_invariants()

    def check_invariants(self) -> None:
        total = 0
        for lane in range(len(self.queue)):
            w, wv = self.wait(lane), self.wave(lane)
            if not 0 <= w <= wv <= self.cap[lane]:
                raise SimInvariantError(f"lane {lane}: wait={w} wave={wv} cap={self.cap[lane]}")
            total += wv
        if total != self.n_in_network:
            raise SimInvariantError(f"in-network count {self.n_in_network} != lane total {total}")
        if self.n_deferred != sum(len(p) for p in self.pending.values()):
            raise SimInvariantError("deferred count disagrees with arm queues")


def reset(net: RoadNetwork, flow: FlowSpec, cfg: SimConfig) -> SimState:
    return SimState(net, flow, cfg)


def step(state: SimState, phases: Mapping[str, Phase]) -> tuple[SimState, dict[str, float]]:
    """Hold ``phases`` for one action interval; rewards are sampled at its end.

    The state is advanced in place and returned for convenience.
    """
    missing = [v for v in state.ids if v not in phases]
    if missing:
        raise SimError(f"no phase given for {missing}")
    for v in state.ids:
        state.phase[state.index[v]] = Phase(phases[v])
    for _ in range(state.cfg.ticks_per_step):
        state.tick()
    return state, {v: intersection_reward(state, v) for v in state.ids}


def done(state: SimState) -> bool:
    return state.clock >= state.cfg.n_steps * state.cfg.ticks_per_step


def observe(state: SimState, u: str) -> np.ndarray:
    """[wait per entering lane, wave per entering lane, one-hot phase]."""
    i = state.node(u)
    lanes = state.entering[i]
    vec = np.zeros(2 * len(lanes) + N_PHASES)
    for j, lane in enumerate(lanes):
        vec[j] = len(state.queue[lane])
        vec[len(lanes) + j] = len(state.queue[lane]) + len(state.flight[lane])
    vec[2 * len(lanes) + int(state.phase[i])] = 1.0
    return vec


def state_dim(net: RoadNetwork, u: str) -> int:
    return 2 * len(net.entering_lanes[u]) + N_PHASES


def intersection_reward(state: SimState, u: str) -> float:
    return -float(sum(len(state.queue[lane]) for lane in state.entering[state.node(u)]))


def pressure(state: SimState, u: str, p: Phase) -> float:
    """Sum over lanes with a released movement of (queue - downstream queue).

    The downstream queue of a movement is the mean queue over the lanes of
    its outgoing approach (zero for exit arms); a lane releasing several
    movements is counted once against the mean of their downstream queues.
    """
    i = state.node(u)
    permitted = state._permitted[Phase(p)]
    total = 0.0
    for lane in state.entering[i]:
        turns = permitted[lane]
        if not turns:
            continue
        downs = []
        for t in sorted(turns):
            target = state._move_target.get((i, state.lane_dir[lane], t))
            if target is None:
                downs.append(0.0)
            else:
                lanes = state.net.lanes_of(target)
                downs.append(sum(len(state.queue[k]) for k in lanes) / len(lanes))
        total += len(state.queue[lane]) - sum(downs) / len(downs)
    return total


def metrics(state: SimState) -> dict:
    """ATT (completed trips only, None before the first), AQL and TP."""
    tp = state.n_completed
    return {
        "att": state.travel_time_sum / tp if tp else None,
        "aql": state.queue_sum / state.clock if state.clock else 0.0,
        "tp": tp,
        "in_network": state.n_in_network,
        "deferred": state.n_deferred,
    }
