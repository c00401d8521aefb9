"""Road-network graph: intersections, compass slots, approaches and lanes.

Intersections carry four compass slots (N, E, S, W). A slot holds either a
neighbouring intersection id or nothing; boundary arms (virtual source/sink
endpoints) hang off empty slots. Boundary endpoints are part of the edge
set so the simulator can route vehicles in and out, but they never appear
in the intersection set, in neighbourhoods, or in any partitioning math.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping

DIRECTIONS = ("N", "E", "S", "W")
OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
MAX_DEGREE = 4


class NetworkError(ValueError):
    """Malformed road-net input or a broken network invariant."""


class UnknownIntersectionError(KeyError):
    pass


class Phase(IntEnum):
    NS = 0
    NSL = 1
    EW = 2
    EWL = 3


class Turn(IntEnum):
    LEFT = 0
    STRAIGHT = 1
    RIGHT = 2


# Incoming arms (by the compass slot the traffic comes from) and the turn
# each phase releases. Right turns are released under every phase.
PHASE_MOVEMENTS: dict[Phase, frozenset[tuple[str, Turn]]] = {
    Phase.NS: frozenset({("N", Turn.STRAIGHT), ("S", Turn.STRAIGHT)}),
    Phase.NSL: frozenset({("N", Turn.LEFT), ("S", Turn.LEFT)}),
    Phase.EW: frozenset({("E", Turn.STRAIGHT), ("W", Turn.STRAIGHT)}),
    Phase.EWL: frozenset({("E", Turn.LEFT), ("W", Turn.LEFT)}),
}


def permits(phase: Phase, from_dir: str, turn: Turn) -> bool:
    return turn == Turn.RIGHT or (from_dir, turn) in PHASE_MOVEMENTS[phase]


def out_direction(from_dir: str, turn: Turn) -> str:
    """Compass slot a vehicle leaves through, given the slot it came from."""
    heading = (DIRECTIONS.index(from_dir) + 2) % 4
    if turn == Turn.LEFT:
        heading = (heading - 1) % 4
    elif turn == Turn.RIGHT:
        heading = (heading + 1) % 4
    return DIRECTIONS[heading]


def lane_turns(n_lanes: int) -> list[frozenset[Turn]]:
    """Turns served by each lane of an approach, innermost (left) lane first."""
    if n_lanes < 1:
        raise NetworkError("an approach needs at least one lane")
    if n_lanes == 1:
        return [frozenset(Turn)]
    if n_lanes == 2:
        return [frozenset({Turn.LEFT}), frozenset({Turn.STRAIGHT, Turn.RIGHT})]
    middle = [frozenset({Turn.STRAIGHT})] * (n_lanes - 2)
    return [frozenset({Turn.LEFT}), *middle, frozenset({Turn.RIGHT})]


def boundary_id(intersection: str, direction: str) -> str:
    return f"{intersection}/{direction}"


def id_sort_key(node_id: str) -> tuple:
    """Natural ordering: "2-1" sorts before "10-1"."""
    parts = re.split(r"(\d+)", node_id)
    return tuple((0, int(p)) if p.isdigit() else (1, p) for p in parts if p != "")


@dataclass(frozen=True)
class Approach:
    """Directed road segment ending at (or leaving from) an intersection.

    For boundary entries ``src`` is a virtual endpoint id; for boundary
    exits ``dst`` is. ``direction`` is the compass slot of ``dst`` through
    which the approach enters (for exits: the slot of ``src`` it leaves by).
    """

    src: str
    dst: str
    length_m: float
    lanes: int
    direction: str
    kind: str = "internal"  # internal | entry | exit

    @property
    def key(self) -> tuple[str, str]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class Lane:
    index: int
    approach: tuple[str, str]
    position: int
    turns: frozenset[Turn]
    length_m: float


@dataclass
class RoadNetwork:
    slots: dict[str, dict[str, str | None]]
    approaches: dict[tuple[str, str], Approach]
    lanes: list[Lane] = field(init=False)
    entering_lanes: dict[str, list[int]] = field(init=False)

    def __post_init__(self) -> None:
        self.lanes = []
        self.entering_lanes = {}
        for v in self.intersections:
            self.entering_lanes[v] = []
            for d in DIRECTIONS:
                appr = self.incoming(v, d)
                if appr is None:
                    continue
                for pos, turns in enumerate(lane_turns(appr.lanes)):
                    lane = Lane(len(self.lanes), appr.key, pos, turns, appr.length_m)
                    self.lanes.append(lane)
                    self.entering_lanes[v].append(lane.index)
        self._lanes_by_approach: dict[tuple[str, str], list[int]] = {}
        for lane in self.lanes:
            self._lanes_by_approach.setdefault(lane.approach, []).append(lane.index)

    @property
    def intersections(self) -> list[str]:
        return list(self.slots)

    def __contains__(self, v: object) -> bool:
        return v in self.slots

    def __len__(self) -> int:
        return len(self.slots)

    def _check(self, v: str) -> None:
        if v not in self.slots:
            raise UnknownIntersectionError(v)

    def incoming(self, v: str, direction: str) -> Approach | None:
        """Approach entering ``v`` through compass slot ``direction``."""
        u = self.slots[v][direction]
        src = u if u is not None else boundary_id(v, direction)
        return self.approaches.get((src, v))

    def outgoing(self, v: str, direction: str) -> Approach | None:
        u = self.slots[v][direction]
        dst = u if u is not None else boundary_id(v, direction)
        return self.approaches.get((v, dst))

    def lanes_of(self, approach: tuple[str, str]) -> list[int]:
        return self._lanes_by_approach.get(approach, [])

    def entry_arms(self) -> list[str]:
        return [a.src for a in self.approaches.values() if a.kind == "entry"]

    def direction_of(self, center: str, other: str) -> str | None:
        for d in DIRECTIONS:
            if self.slots[center][d] == other:
                return d
        return None


def neighbors(net: RoadNetwork, v: str) -> set[str]:
    net._check(v)
    return {u for u in net.slots[v].values() if u is not None}


def degree(net: RoadNetwork, v: str) -> int:
    return len(neighbors(net, v))


def hop_distance(net: RoadNetwork, v: str, u: str) -> float:
    """Breadth-first hop count; ``math.inf`` when ``u`` is unreachable."""
    net._check(v)
    net._check(u)
    if v == u:
        return 0
    seen = {v}
    frontier = deque([(v, 0)])
    while frontier:
        x, d = frontier.popleft()
        for y in net.slots[x].values():
            if y is None or y in seen:
                continue
            if y == u:
                return d + 1
            seen.add(y)
            frontier.append((y, d + 1))
    return math.inf


def validate_network(net: RoadNetwork) -> None:
    for v, slots in net.slots.items():
        if set(slots) != set(DIRECTIONS):
            raise NetworkError(f"intersection {v!r}: slots must be exactly {DIRECTIONS}")
        nbrs = [u for u in slots.values() if u is not None]
        if len(nbrs) != len(set(nbrs)):
            raise NetworkError(f"intersection {v!r}: a neighbour occupies two slots")
        if len(nbrs) > MAX_DEGREE:
            raise NetworkError(f"intersection {v!r}: degree {len(nbrs)} exceeds {MAX_DEGREE}")
        for d, u in slots.items():
            if u is None:
                continue
            if u == v:
                raise NetworkError(f"intersection {v!r}: self loop")
            if u not in net.slots:
                raise NetworkError(f"intersection {v!r}: unknown neighbour {u!r}")
            if net.slots[u][OPPOSITE[d]] != v:
                raise NetworkError(
                    f"intersection {v!r}: slot {d} holds {u!r} but {u!r} slot {OPPOSITE[d]} "
                    f"holds {net.slots[u][OPPOSITE[d]]!r}"
                )
    for key, appr in net.approaches.items():
        if appr.lanes < 1 or appr.length_m <= 0:
            raise NetworkError(f"approach {key}: needs lanes >= 1 and length > 0")
        if appr.kind == "internal":
            a, b = key
            if a not in net.slots or b not in net.slots or a == b:
                raise NetworkError(f"approach {key}: must join two distinct intersections")
            if b not in net.slots[a].values():
                raise NetworkError(f"approach {key}: endpoints are not compass neighbours")
    for v in net.slots:
        expected = []
        for d in DIRECTIONS:
            appr = net.incoming(v, d)
            if appr is not None:
                expected.extend(net.lanes_of(appr.key))
        if sorted(expected) != sorted(net.entering_lanes[v]):
            raise NetworkError(f"intersection {v!r}: entering lanes inconsistent")


def build_network(
    slots: Mapping[str, Mapping[str, str | None]],
    approaches: Iterable[Approach],
) -> RoadNetwork:
    net = RoadNetwork(
        {v: {d: s.get(d) for d in DIRECTIONS} for v, s in slots.items()},
        {a.key: a for a in approaches},
    )
    validate_network(net)
    return net


def _grid_id(r: int, c: int) -> str:
    return f"{r}-{c}"


def make_grid(
    rows: int,
    cols: int,
    ns_length: float = 300.0,
    ew_length: float = 300.0,
    lanes_per_approach: int = 3,
) -> RoadNetwork:
    """Grid with row 1 at the north edge and column 1 at the west edge.

    Every perimeter slot gets a boundary arm that is both an entry and an
    exit; boundary arm lengths follow the grid spacing in that direction.
    """
    if rows < 1 or cols < 1 or lanes_per_approach < 1:
        raise NetworkError("rows, cols and lanes_per_approach must be positive")
    if ns_length <= 0 or ew_length <= 0:
        raise NetworkError("road lengths must be positive")
    slots: dict[str, dict[str, str | None]] = {}
    for r in range(1, rows + 1):
        for c in range(1, cols + 1):
            slots[_grid_id(r, c)] = {
                "N": _grid_id(r - 1, c) if r > 1 else None,
                "E": _grid_id(r, c + 1) if c < cols else None,
                "S": _grid_id(r + 1, c) if r < rows else None,
                "W": _grid_id(r, c - 1) if c > 1 else None,
            }
    return build_network(slots, _approaches_for(slots, ns_length, ew_length, lanes_per_approach))


def make_cross(length: float = 300.0, lanes_per_approach: int = 3) -> RoadNetwork:
    """Star K(1,4): one centre with a leaf in every compass slot."""
    slots: dict[str, dict[str, str | None]] = {
        "C": {"N": "N", "E": "E", "S": "S", "W": "W"},
    }
    for d in DIRECTIONS:
        s: dict[str, str | None] = {x: None for x in DIRECTIONS}
        s[OPPOSITE[d]] = "C"
        slots[d] = s
    return build_network(slots, _approaches_for(slots, length, length, lanes_per_approach))


def _approaches_for(slots, ns_length, ew_length, lanes) -> list[Approach]:
    out = []
    for v, s in slots.items():
        for d in DIRECTIONS:
            length = ns_length if d in ("N", "S") else ew_length
            u = s[d]
            if u is None:
                arm = boundary_id(v, d)
                out.append(Approach(arm, v, length, lanes, d, "entry"))
                out.append(Approach(v, arm, length, lanes, d, "exit"))
            else:
                out.append(Approach(u, v, length, lanes, d, "internal"))
    return out


# -- file format -------------------------------------------------------------


def _require(obj: Mapping, key: str, where: str):
    if key not in obj:
        raise NetworkError(f"{where}: missing field {key!r}")
    return obj[key]


def network_from_dict(data: Mapping) -> RoadNetwork:
    if not isinstance(data, Mapping):
        raise NetworkError("road-net root must be a JSON object")
    slots: dict[str, dict[str, str | None]] = {}
    for i, item in enumerate(_require(data, "intersections", "road-net")):
        where = f"intersections[{i}]"
        v = _require(item, "id", where)
        if v in slots:
            raise NetworkError(f"{where}: duplicate id {v!r}")
        unknown = set(item) - {"id", *DIRECTIONS}
        if unknown:
            raise NetworkError(f"{where}: unknown fields {sorted(unknown)}")
        slots[v] = {d: item.get(d) for d in DIRECTIONS}
    raw_approaches = _require(data, "approaches", "road-net")
    partners: dict[str, set[str]] = {v: {u for u in s.values() if u is not None}
                                     for v, s in slots.items()}
    for item in raw_approaches:
        src, dst = item.get("from"), item.get("to")
        if src in slots and dst in slots:
            partners[src].add(dst)
            partners[dst].add(src)
    for v, ps in partners.items():
        if len(ps) > MAX_DEGREE:
            raise NetworkError(f"intersection {v!r}: degree {len(ps)} exceeds {MAX_DEGREE}")
    approaches = []
    for i, item in enumerate(raw_approaches):
        where = f"approaches[{i}]"
        src = _require(item, "from", where)
        dst = _require(item, "to", where)
        if dst not in slots:
            raise NetworkError(f"{where}: unknown intersection {dst!r}")
        direction = next((d for d in DIRECTIONS if slots[dst][d] == src), None)
        if direction is None:
            raise NetworkError(f"{where}: {src!r} is not a compass neighbour of {dst!r}")
        approaches.append(
            Approach(src, dst, float(_require(item, "length_m", where)),
                     int(_require(item, "lanes", where)), direction)
        )
    for i, item in enumerate(data.get("boundary", [])):
        where = f"boundary[{i}]"
        v = _require(item, "intersection", where)
        d = _require(item, "direction", where)
        if v not in slots or d not in DIRECTIONS:
            raise NetworkError(f"{where}: bad intersection/direction {v!r}/{d!r}")
        if slots[v][d] is not None:
            raise NetworkError(f"{where}: slot {d} of {v!r} is occupied by an intersection")
        length = float(_require(item, "length_m", where))
        lanes = int(_require(item, "lanes", where))
        arm = boundary_id(v, d)
        if item.get("entry", True):
            approaches.append(Approach(arm, v, length, lanes, d, "entry"))
        if item.get("exit", True):
            approaches.append(Approach(v, arm, length, lanes, d, "exit"))
    return build_network(slots, approaches)


def network_to_dict(net: RoadNetwork) -> dict:
    boundary: dict[tuple[str, str], dict] = {}
    internal = []
    for appr in net.approaches.values():
        if appr.kind == "internal":
            internal.append({"from": appr.src, "to": appr.dst,
                             "length_m": appr.length_m, "lanes": appr.lanes})
            continue
        v = appr.dst if appr.kind == "entry" else appr.src
        rec = boundary.setdefault(
            (v, appr.direction),
            {"intersection": v, "direction": appr.direction, "length_m": appr.length_m,
             "lanes": appr.lanes, "entry": False, "exit": False},
        )
        rec[appr.kind] = True
    return {
        "intersections": [{"id": v, **s} for v, s in net.slots.items()],
        "approaches": internal,
        "boundary": list(boundary.values()),
    }


def load_roadnet(path: str | Path) -> RoadNetwork:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    try:
        return network_from_dict(data)
    except (TypeError, AttributeError) as exc:
        raise NetworkError(f"{path}: malformed road-net: {exc}") from exc


def save_roadnet(net: RoadNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1))
