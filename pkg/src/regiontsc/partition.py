"""Star-region partitioning built on a minimum dominating set.

Each centre of a dominating set seeds one region; every other intersection
joins exactly one adjacent centre. A region is stored as five slots in the
fixed order [centre, N, E, S, W]; empty slots are fictitious intersections.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .net import DIRECTIONS, RoadNetwork, hop_distance, id_sort_key, neighbors

FICTITIOUS = None
SLOT_NAMES = ("C", *DIRECTIONS)
N_SLOTS = len(SLOT_NAMES)
BRUTE_FORCE_LIMIT = 20


class PartitionError(ValueError):
    pass


class SolverTimeout(RuntimeError):
    """Raised when the search exceeds its time budget.

    ``incumbent`` holds the best dominating set found so far (not certified).
    """

    def __init__(self, message: str, incumbent: frozenset[str]):
        super().__init__(message)
        self.incumbent = incumbent


def is_dominating(net: RoadNetwork, w: Iterable[str]) -> bool:
    w = set(w)
    return all(v in w or neighbors(net, v) & w for v in net.intersections)


# -- bitmask helpers ---------------------------------------------------------


def _closed_masks(net: RoadNetwork) -> tuple[list[str], list[int]]:
    ids = sorted(net.intersections, key=id_sort_key)
    index = {v: i for i, v in enumerate(ids)}
    masks = []
    for v in ids:
        m = 1 << index[v]
        for u in neighbors(net, v):
            m |= 1 << index[u]
        masks.append(m)
    return ids, masks


def _bits(mask: int) -> Iterable[int]:
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def brute_force_min_dominating_set(net: RoadNetwork) -> tuple[int, list[frozenset[str]]]:
    """Domination number and every minimum dominating set, by enumeration."""
    n = len(net)
    if n > BRUTE_FORCE_LIMIT:
        raise PartitionError(f"brute force limited to {BRUTE_FORCE_LIMIT} nodes, got {n}")
    if n == 0:
        return 0, [frozenset()]
    ids, masks = _closed_masks(net)
    full = (1 << n) - 1
    for k in range(1, n + 1):
        found = []
        for combo in itertools.combinations(range(n), k):
            cover = 0
            for i in combo:
                cover |= masks[i]
            if cover == full:
                found.append(frozenset(ids[i] for i in combo))
        if found:
            return k, found
    raise AssertionError("the full vertex set always dominates")


# -- branch and bound --------------------------------------------------------


class _Search:
    """0/1 search over x_v (0 = centre, 1 = leaf) maximising the leaf count.

    A node fixes some variables to 0 (``centers``) and some to 1
    (``leaves``). The leaf constraint sum_{u in NB_v} x_u + x_v <= |NB_v|
    is equivalent to: every vertex has a centre in its closed
    neighbourhood. The bound counts undominated vertices whose open
    candidate sets are pairwise disjoint; each needs its own new centre.
    """

    def __init__(self, masks: list[int], degree: list[int], deadline: float | None):
        self.masks = masks
        self.n = len(masks)
        self.full = (1 << self.n) - 1
        self.degree = degree
        self.deadline = deadline
        self.nodes = 0
        self.best_size = self.n + 1
        self.best: int | None = None
        self.stop_at_first = False

    def lower_bound(self, undominated: int, free: int) -> int:
        cands = sorted(
            ((self.masks[u] & free, u) for u in _bits(undominated)),
            key=lambda t: (bin(t[0]).count("1"), t[1]),
        )
        used = 0
        bound = 0
        for cand, _ in cands:
            if cand & used == 0:
                used |= cand
                bound += 1
        return bound

    def run(self, centers: int, leaves: int) -> None:
        self.nodes += 1
        if self.deadline is not None and self.nodes % 256 == 0 and time.monotonic() > self.deadline:
            raise TimeoutError
        dominated = 0
        for c in _bits(centers):
            dominated |= self.masks[c]
        undominated = self.full & ~dominated
        size = bin(centers).count("1")
        if undominated == 0:
            if size < self.best_size:
                self.best_size, self.best = size, centers
            return
        free = self.full & ~(centers | leaves)
        # pick the undominated vertex with fewest remaining candidates
        pick_cands, pick_count = 0, self.n + 1
        for u in _bits(undominated):
            cands = self.masks[u] & free
            cnt = bin(cands).count("1")
            if cnt == 0:
                return
            if cnt < pick_count:
                pick_cands, pick_count = cands, cnt
        if size + self.lower_bound(undominated, free) >= self.best_size:
            return
        # branch variable: highest-degree candidate, lowest index on ties
        var = max(_bits(pick_cands), key=lambda i: (self.degree[i], -i))
        self.run(centers | (1 << var), leaves)
        if self.stop_at_first and self.best is not None:
            return
        self.run(centers, leaves | (1 << var))


def _greedy_cover(masks: list[int], full: int) -> int:
    covered, chosen = 0, 0
    while covered != full:
        i = max(range(len(masks)), key=lambda j: (bin(masks[j] & ~covered).count("1"), -j))
        chosen |= 1 << i
        covered |= masks[i]
    return chosen


@dataclass
class SolveStats:
    size: int
    nodes: int
    certified: bool
    seconds: float


def solve_min_dominating_set(
    net: RoadNetwork, time_limit: float | None = 60.0, stats: list | None = None
) -> frozenset[str]:
    """Exact minimum dominating set by branch and bound.

    Among all optimal sets the one that is lexicographically smallest
    (under the natural id order) is returned. Pass a list as ``stats`` to
    receive a :class:`SolveStats` record.
    """
    t0 = time.monotonic()
    deadline = None if time_limit is None else t0 + time_limit
    ids, masks = _closed_masks(net)
    n = len(ids)
    if n == 0:
        return frozenset()
    degree = [bin(m).count("1") - 1 for m in masks]
    search = _Search(masks, degree, deadline)
    search.best = _greedy_cover(masks, search.full)
    search.best_size = bin(search.best).count("1")

    def as_set(mask: int) -> frozenset[str]:
        return frozenset(ids[i] for i in _bits(mask))

    try:
        search.run(0, 0)
        gamma = search.best_size
        # fix variables in id order to extract the lexicographically smallest optimum
        forced_in, forced_out = 0, 0
        for i in range(n):
            if bin(forced_in).count("1") == gamma:
                break
            probe = _Search(masks, degree, deadline)
            probe.best_size = gamma + 1
            probe.stop_at_first = True
            probe.run(forced_in | (1 << i), forced_out)
            if probe.best is not None:
                forced_in |= 1 << i
            else:
                forced_out |= 1 << i
        nodes = search.nodes
    except TimeoutError:
        raise SolverTimeout(
            f"dominating-set search exceeded {time_limit}s", as_set(search.best)
        ) from None
    result = as_set(forced_in)
    assert len(result) == gamma and is_dominating(net, result)
    if stats is not None:
        stats.append(SolveStats(gamma, nodes, True, time.monotonic() - t0))
    return result


# -- regions -----------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    center: str
    slots: tuple[str | None, ...]

    def __post_init__(self) -> None:
        if len(self.slots) != N_SLOTS:
            raise PartitionError(f"region {self.center!r}: expected {N_SLOTS} slots")

    @property
    def mask(self) -> tuple[bool, ...]:
        return tuple(s is not FICTITIOUS for s in self.slots)

    @property
    def members(self) -> frozenset[str]:
        return frozenset(s for s in self.slots if s is not FICTITIOUS)

    @property
    def leaves(self) -> frozenset[str]:
        return self.members - {self.center}

    @property
    def n_fictitious(self) -> int:
        return sum(1 for s in self.slots if s is FICTITIOUS)


@dataclass(frozen=True)
class RegionConfiguration:
    regions: tuple[Region, ...]
    owner: Mapping[str, str] = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.regions, key=lambda r: id_sort_key(r.center)))
        object.__setattr__(self, "regions", ordered)
        owner: dict[str, str] = {}
        for reg in ordered:
            for m in reg.members:
                owner.setdefault(m, reg.center)
        object.__setattr__(self, "owner", owner)

    @property
    def centers(self) -> frozenset[str]:
        return frozenset(r.center for r in self.regions)

    def region(self, center: str) -> Region:
        for r in self.regions:
            if r.center == center:
                return r
        raise KeyError(center)


def _region_from_members(net: RoadNetwork, center: str, leaves: Iterable[str]) -> Region:
    slots: list[str | None] = [center] + [FICTITIOUS] * len(DIRECTIONS)
    for u in leaves:
        d = net.direction_of(center, u)
        if d is None:
            raise PartitionError(f"{u!r} is not adjacent to centre {center!r}")
        slots[1 + DIRECTIONS.index(d)] = u
    return Region(center, tuple(slots))


def assignment_order(
    net: RoadNetwork, w: Iterable[str], seed: int | None
) -> tuple[list[str], dict[str, list[str]]]:
    """Iteration order over centres and each centre's neighbours.

    ``seed=None`` gives the canonical order (natural id order for centres,
    compass order for neighbours); an integer seed shuffles both.
    """
    centers = sorted(w, key=id_sort_key)
    nbr_order = {v: [u for u in net.slots[v].values() if u is not None] for v in centers}
    if seed is not None:
        rng = np.random.default_rng(seed)
        centers = [centers[i] for i in rng.permutation(len(centers))]
        for v in centers:
            lst = nbr_order[v]
            nbr_order[v] = [lst[i] for i in rng.permutation(len(lst))]
    return centers, nbr_order


def construct_regions(
    net: RoadNetwork,
    w: Iterable[str],
    center_order: Sequence[str] | None = None,
    neighbor_order: Mapping[str, Sequence[str]] | None = None,
) -> RegionConfiguration:
    w = frozenset(w)
    unknown = w - set(net.intersections)
    if unknown:
        raise PartitionError(f"centres not in network: {sorted(unknown, key=id_sort_key)}")
    default_centers, default_nbrs = assignment_order(net, w, None)
    centers = list(center_order) if center_order is not None else default_centers
    if sorted(centers, key=id_sort_key) != sorted(w, key=id_sort_key):
        raise PartitionError("center_order must be a permutation of the dominating set")
    assigned = {v: v in w for v in net.intersections}
    members: dict[str, list[str]] = {v: [] for v in centers}
    for v in centers:
        order = (neighbor_order or {}).get(v, default_nbrs[v])
        if set(order) != neighbors(net, v):
            raise PartitionError(f"neighbour order for {v!r} is not a permutation of its neighbours")
        for u in order:
            if not assigned[u]:
                members[v].append(u)
                assigned[u] = True
    missing = [v for v, ok in assigned.items() if not ok]
    if missing:
        raise PartitionError(
            f"not a dominating set; unassigned: {sorted(missing, key=id_sort_key)}"
        )
    return RegionConfiguration(tuple(_region_from_members(net, v, members[v]) for v in centers))


def check_uniqueness(net: RoadNetwork, w: Iterable[str]) -> bool:
    """True when every pair of centres is at least three hops apart.

    Domination is not checked here; the distance test applies to any set.
    """
    w = sorted(w, key=id_sort_key)
    unknown = [v for v in w if v not in net]
    if unknown:
        raise PartitionError(f"centres not in network: {unknown}")
    return all(hop_distance(net, a, b) >= 3 for a, b in itertools.combinations(w, 2))


def unique_center_neighbors(net: RoadNetwork, w: Iterable[str]) -> bool:
    """Every non-centre has exactly one centre among its neighbours."""
    w = set(w)
    return all(len(neighbors(net, z) & w) == 1 for z in net.intersections if z not in w)


def reassign_leaf(
    net: RoadNetwork, config: RegionConfiguration, z: str, from_center: str, to_center: str
) -> RegionConfiguration:
    centers = config.centers
    if from_center not in centers:
        raise PartitionError(f"{from_center!r} is not a region centre")
    if to_center not in centers:
        raise PartitionError(f"{to_center!r} is not a region centre")
    if from_center == to_center:
        raise PartitionError("source and destination regions coincide")
    src = config.region(from_center)
    if z not in src.leaves:
        raise PartitionError(f"{z!r} is not a leaf of region {from_center!r}")
    if to_center not in neighbors(net, z):
        raise PartitionError(f"{z!r} is not adjacent to {to_center!r}")
    dst = config.region(to_center)
    new_src = _region_from_members(net, from_center, src.leaves - {z})
    new_dst = _region_from_members(net, to_center, dst.leaves | {z})
    rest = tuple(r for r in config.regions if r.center not in (from_center, to_center))
    return RegionConfiguration(rest + (new_src, new_dst))


def validate_configuration(net: RoadNetwork, config: RegionConfiguration) -> list[str]:
    problems = []
    seen: dict[str, str] = {}
    for reg in config.regions:
        if len(reg.slots) != N_SLOTS:
            problems.append(f"region {reg.center!r}: {len(reg.slots)} slots, expected {N_SLOTS}")
            continue
        if reg.slots[0] != reg.center:
            problems.append(f"region {reg.center!r}: slot 0 must hold the centre")
        if reg.center not in net:
            problems.append(f"region {reg.center!r}: centre not in network")
            continue
        for d, s in zip(DIRECTIONS, reg.slots[1:]):
            if s is FICTITIOUS:
                continue
            if s not in net:
                problems.append(f"region {reg.center!r}: unknown intersection {s!r}")
            elif s not in neighbors(net, reg.center):
                problems.append(f"star topology: {s!r} is not adjacent to centre {reg.center!r}")
            elif net.slots[reg.center][d] != s:
                problems.append(f"slot mismatch: {s!r} sits in slot {d} of {reg.center!r}")
        for m in (s for s in reg.slots if s is not FICTITIOUS):
            if m in seen:
                problems.append(f"disjointness: {m!r} in regions {seen[m]!r} and {reg.center!r}")
            else:
                seen[m] = reg.center
    for v in net.intersections:
        if v not in seen:
            problems.append(f"coverage: {v!r} belongs to no region")
    return problems


# -- serialization -----------------------------------------------------------


def configuration_to_dict(config: RegionConfiguration) -> dict:
    return {
        "slot_order": list(SLOT_NAMES),
        "regions": [
            {"center": r.center, "slots": list(r.slots), "mask": list(r.mask)}
            for r in config.regions
        ],
    }


def configuration_from_dict(data: Mapping) -> RegionConfiguration:
    regions = []
    for i, item in enumerate(data["regions"]):
        reg = Region(item["center"], tuple(item["slots"]))
        if "mask" in item and tuple(item["mask"]) != reg.mask:
            raise PartitionError(f"regions[{i}]: mask disagrees with slots")
        regions.append(reg)
    return RegionConfiguration(tuple(regions))


def save_configuration(config: RegionConfiguration, path: str | Path) -> None:
    Path(path).write_text(json.dumps(configuration_to_dict(config), indent=1))


def load_configuration(path: str | Path) -> RegionConfiguration:
    return configuration_from_dict(json.loads(Path(path).read_text()))
