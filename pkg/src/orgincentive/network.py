"""Road network, BPR link performance and route enumeration."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BPR_ALPHA = 0.15
BPR_POWER = 4


class NetworkError(ValueError):
    """Invalid network file or network construction."""


class UnreachableODError(NetworkError):
    pass


@dataclass(frozen=True)
class Link:
    id: int
    source: str
    target: str
    free_flow_time: float  # hours
    capacity: float  # vehicles per period
    length: float = 0.0  # miles, metadata only

    def __post_init__(self):
        if not self.free_flow_time > 0:
            raise NetworkError(f"link {self.id}: free_flow_time must be > 0, got {self.free_flow_time}")
        if not self.capacity > 0:
            raise NetworkError(f"link {self.id}: capacity must be > 0, got {self.capacity}")
        if self.source == self.target:
            raise NetworkError(f"link {self.id}: self-loop at node {self.source}")


@dataclass(frozen=True)
class Horizon:
    num_periods: int
    period_length: float  # minutes
    analysis_periods: int | None = None

    def __post_init__(self):
        if self.analysis_periods is None:
            object.__setattr__(self, "analysis_periods", self.num_periods)
        if not self.period_length > 0:
            raise ValueError("period_length must be positive")
        if not self.num_periods >= self.analysis_periods >= 1:
            raise ValueError("need num_periods >= analysis_periods >= 1")

    @property
    def period_hours(self) -> float:
        return self.period_length / 60.0


class Network:
    """Directed road graph with dense link ids 0..|E|-1.

    ``calibration`` optionally maps ``"free_flow_time"`` / ``"capacity"`` to
    arrays of shape (num_periods, |E|) holding per-period BPR parameters.
    Without it every period uses the link's constant pair.
    """

    def __init__(self, nodes: Iterable[str], links: Sequence[Link], calibration: dict | None = None):
        self.nodes = tuple(dict.fromkeys(nodes))
        node_set = set(self.nodes)
        self.links = tuple(links)
        if not self.links:
            raise NetworkError("network has no links")
        for k, link in enumerate(self.links):
            if link.id != k:
                raise NetworkError(f"link ids must be 0..n-1 in order; position {k} has id {link.id}")
            for end in (link.source, link.target):
                if end not in node_set:
                    raise NetworkError(f"link {link.id} references unknown node {end}")
        self.out_links: dict[str, tuple[int, ...]] = {v: () for v in self.nodes}
        for link in self.links:
            self.out_links[link.source] += (link.id,)
        self.calibration = calibration

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def free_flow_times(self) -> np.ndarray:
        return np.array([link.free_flow_time for link in self.links])

    @property
    def capacities(self) -> np.ndarray:
        return np.array([link.capacity for link in self.links])

    def link_params(self, num_periods: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-period (free-flow time, capacity), each shaped (num_periods, |E|)."""
        theta0 = np.tile(self.free_flow_times, (num_periods, 1))
        cap = np.tile(self.capacities, (num_periods, 1))
        if self.calibration:
            if "free_flow_time" in self.calibration:
                theta0 = _per_period(self.calibration["free_flow_time"], num_periods, self.num_links)
            if "capacity" in self.calibration:
                cap = _per_period(self.calibration["capacity"], num_periods, self.num_links)
        return theta0, cap

    def with_capacities(self, capacities: Sequence[float]) -> "Network":
        links = [
            Link(l.id, l.source, l.target, l.free_flow_time, float(c), l.length)
            for l, c in zip(self.links, capacities)
        ]
        return Network(self.nodes, links, self.calibration)

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "links": [
                {
                    "id": l.id,
                    "from": l.source,
                    "to": l.target,
                    "free_flow_time_h": l.free_flow_time,
                    "capacity": l.capacity,
                    "length_mi": l.length,
                }
                for l in self.links
            ],
        }


def _per_period(values, num_periods: int, num_links: int) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = np.tile(arr, (num_periods, 1))
    if arr.shape != (num_periods, num_links):
        raise NetworkError(f"calibration array has shape {arr.shape}, expected {(num_periods, num_links)}")
    return arr


def load_network(path: str | Path) -> Network:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    return network_from_dict(data, source=str(path))


def network_from_dict(data: dict, source: str = "<network>") -> Network:
    if not isinstance(data, dict) or "nodes" not in data or "links" not in data:
        raise NetworkError(f"{source}: expected an object with 'nodes' and 'links'")
    links = []
    for k, raw in enumerate(data["links"]):
        try:
            links.append(
                Link(
                    id=int(raw["id"]),
                    source=str(raw["from"]),
                    target=str(raw["to"]),
                    free_flow_time=float(raw["free_flow_time_h"]),
                    capacity=float(raw["capacity"]),
                    length=float(raw.get("length_mi", 0.0)),
                )
            )
        except KeyError as exc:
            raise NetworkError(f"{source}: link #{k} missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, NetworkError):
                raise
            raise NetworkError(f"{source}: link #{k}: {exc}") from exc
    return Network([str(v) for v in data["nodes"]], links, data.get("calibration"))


def bpr_travel_time(free_flow_time, capacity, volume):
    """BPR link time theta0 * (1 + 0.15 (v/w)^4); works elementwise on arrays.

    ``free_flow_time`` may also be a :class:`Link`, in which case ``capacity``
    is ignored.
    """
    if isinstance(free_flow_time, Link):
        free_flow_time, capacity = free_flow_time.free_flow_time, free_flow_time.capacity
    volume = np.asarray(volume, dtype=float)
    if np.any(volume < 0):
        raise ValueError("volume must be nonnegative")
    out = free_flow_time * (1.0 + BPR_ALPHA * (volume / capacity) ** BPR_POWER)
    return float(out) if np.ndim(out) == 0 else out


def bpr_derivative(free_flow_time, capacity, volume):
    volume = np.asarray(volume, dtype=float)
    return free_flow_time * BPR_ALPHA * BPR_POWER * volume ** (BPR_POWER - 1) / capacity**BPR_POWER


@dataclass(frozen=True)
class Route:
    od: tuple[str, str]
    link_ids: tuple[int, ...]
    num_links: int = field(default=0, compare=False)

    @property
    def edge_vector(self) -> np.ndarray:
        return route_vector(self, self.num_links)


def route_vector(route: Route, num_links: int | None = None) -> np.ndarray:
    size = route.num_links if num_links is None else num_links
    vec = np.zeros(size, dtype=int)
    vec[list(route.link_ids)] = 1
    return vec


def _shortest_path(network: Network, origin: str, destination: str, banned: set[int]) -> tuple[int, ...] | None:
    # Labels are (time, link sequence); comparing tuples breaks time ties by
    # the lexicographically smallest link-id sequence.
    best: dict[str, tuple[float, tuple[int, ...]]] = {origin: (0.0, ())}
    heap = [(0.0, (), origin)]
    done = set()
    while heap:
        dist, seq, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == destination:
            return seq
        for lid in network.out_links[node]:
            if lid in banned:
                continue
            link = network.links[lid]
            nxt = link.target
            if nxt in done:
                continue
            label = (round(dist + link.free_flow_time, 12), seq + (lid,))
            if nxt not in best or label < best[nxt]:
                best[nxt] = label
                heapq.heappush(heap, (label[0], label[1], nxt))
    return None


def enumerate_routes(network: Network, od: tuple[str, str], k: int = 3) -> list[Route]:
    """Up to ``k`` routes by repeated free-flow shortest path with link deletion.

    After each route is found its links are deleted before searching again,
    except links that every origin-destination path must use (removing one of
    those alone disconnects the pair); they stay available to later routes.
    """
    origin, destination = od
    if origin == destination:
        raise ValueError("origin and destination must differ")
    if k < 1:
        raise ValueError("k must be >= 1")
    for v in od:
        if v not in network.out_links:
            raise NetworkError(f"unknown node {v}")
    first = _shortest_path(network, origin, destination, set())
    if first is None:
        raise UnreachableODError(f"OD pair unreachable: {origin} -> {destination}")
    mandatory = {lid for lid in first if _shortest_path(network, origin, destination, {lid}) is None}
    paths = [first]
    banned: set[int] = set()
    while len(paths) < k:
        banned |= set(paths[-1]) - mandatory
        nxt = _shortest_path(network, origin, destination, banned)
        if nxt is None or nxt in paths:
            break
        paths.append(nxt)
    return [Route((origin, destination), p, network.num_links) for p in paths]
