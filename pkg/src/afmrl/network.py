"""Road network, intersection geometry, phases and flow snapshots.

Geometry conventions
--------------------
Approaches and headings share the clockwise order N, E, S, W (0..3). A vehicle
on the N approach arrives from the north, so it is heading south. Each
approach has three lanes (left, straight, right); lane index is
``approach * 3 + kind``. Grid rows grow southward, columns eastward.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

APPROACHES = ("N", "E", "S", "W")
LANE_KINDS = ("left", "straight", "right")
N_LANES = 12
N_PHASES = 8

LEFT, STRAIGHT, RIGHT = 0, 1, 2

# heading -> (drow, dcol)
_HEADING_STEP = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}


def lane_index(approach: int | str, kind: int | str) -> int:
    if isinstance(approach, str):
        approach = APPROACHES.index(approach)
    if isinstance(kind, str):
        kind = LANE_KINDS.index(kind)
    return approach * 3 + kind


def exit_heading(approach: int, kind: int) -> int:
    """Heading a vehicle leaves with after taking ``kind`` from ``approach``."""
    heading = (approach + 2) % 4
    if kind == LEFT:
        return (heading - 1) % 4
    if kind == RIGHT:
        return (heading + 1) % 4
    return heading


@dataclass(frozen=True)
class Phase:
    id: int
    name: str
    allowed_movements: frozenset  # of (approach, kind) pairs, right turns included


def _phase(pid: int, name: str, movements: Iterable[tuple[str, str]]) -> Phase:
    allowed = {(a, "right") for a in APPROACHES}
    allowed.update(movements)
    return Phase(pid, name, frozenset(allowed))


PHASES: tuple[Phase, ...] = (
    _phase(0, "NS-straight", [("N", "straight"), ("S", "straight")]),
    _phase(1, "EW-straight", [("E", "straight"), ("W", "straight")]),
    _phase(2, "NS-left", [("N", "left"), ("S", "left")]),
    _phase(3, "EW-left", [("E", "left"), ("W", "left")]),
    _phase(4, "N-straight-left", [("N", "straight"), ("N", "left")]),
    _phase(5, "S-straight-left", [("S", "straight"), ("S", "left")]),
    _phase(6, "E-straight-left", [("E", "straight"), ("E", "left")]),
    _phase(7, "W-straight-left", [("W", "straight"), ("W", "left")]),
)


def _phase_mask() -> np.ndarray:
    mask = np.zeros((N_PHASES, N_LANES), dtype=np.bool_)
    for ph in PHASES:
        for a, k in ph.allowed_movements:
            mask[ph.id, lane_index(a, k)] = True
    return mask


PHASE_MASK = _phase_mask()
PHASE_MASK.setflags(write=False)

# lane -> exit heading
LANE_EXIT_HEADING = np.array([exit_heading(l // 3, l % 3) for l in range(N_LANES)], dtype=np.int64)


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    capacity: int = 40
    length: float = 300.0


@dataclass
class TrafficNetwork:
    """Directed intersection graph.

    ``neighbors[i, h]`` is the intersection reached from ``i`` heading ``h``
    (-1 at the boundary); it is ``None`` for networks without geometry, which
    can be partitioned but not simulated.
    """

    vertices: list[int]
    edges: list[Edge]
    neighbors: np.ndarray | None = None
    shape: tuple[int, int] | None = None
    adjacency: np.ndarray = field(init=False, repr=False)
    capacity: np.ndarray = field(init=False, repr=False)
    length: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.vertices)
        if list(self.vertices) != list(range(n)):
            raise ValueError("vertices must be 0..n-1")
        self.adjacency = np.zeros((n, n), dtype=np.bool_)
        self.capacity = np.zeros((n, n), dtype=np.int64)
        self.length = np.zeros((n, n), dtype=np.float64)
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                raise ValueError(f"edge {e} references unknown vertex")
            if e.src == e.dst:
                raise ValueError(f"self edge at {e.src}")
            if self.adjacency[e.src, e.dst]:
                raise ValueError(f"duplicate edge {e.src}->{e.dst}")
            if e.capacity < 1:
                raise ValueError("capacity must be >= 1")
            self.adjacency[e.src, e.dst] = True
            self.capacity[e.src, e.dst] = e.capacity
            self.length[e.src, e.dst] = e.length
        if n > 1:
            touched = self.adjacency.any(axis=0) | self.adjacency.any(axis=1)
            if not touched.all():
                raise ValueError(f"isolated intersections: {np.flatnonzero(~touched).tolist()}")
        self.adjacency.setflags(write=False)
        if self.neighbors is not None:
            self.neighbors = np.asarray(self.neighbors, dtype=np.int64)
            for i in range(n):
                for h in range(4):
                    j = self.neighbors[i, h]
                    if j >= 0 and not self.adjacency[i, j]:
                        raise ValueError(f"neighbor {i}->{j} heading {APPROACHES[h]} has no edge")

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def undirected(self) -> np.ndarray:
        return self.adjacency | self.adjacency.T

    def neighbor_masks(self) -> np.ndarray:
        """Bitmask of undirected neighbours per vertex (n <= 63)."""
        if self.n > 63:
            raise ValueError("bitmask partitions support at most 63 intersections")
        und = self.undirected
        masks = np.zeros(self.n, dtype=np.int64)
        for i in range(self.n):
            for j in np.flatnonzero(und[i]):
                masks[i] |= np.int64(1) << np.int64(j)
        return masks

    def to_dict(self) -> dict:
        out = {
            "vertices": list(self.vertices),
            "edges": [
                {"from": e.src, "to": e.dst, "capacity": e.capacity, "length": e.length} for e in self.edges
            ],
        }
        if self.neighbors is not None:
            out["neighbors"] = self.neighbors.tolist()
        return out


def build_grid(rows: int, cols: int, capacity: int = 40, length: float = 300.0) -> TrafficNetwork:
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    edges = []
    neighbors = -np.ones((rows * cols, 4), dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            for h, (dr, dc) in _HEADING_STEP.items():
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    j = rr * cols + cc
                    neighbors[i, h] = j
                    edges.append(Edge(i, j, capacity, length))
    return TrafficNetwork(list(range(rows * cols)), edges, neighbors, shape=(rows, cols))


def _neighbors_from_coords(n: int, edges: list[Edge], coords: list[tuple[float, float]]) -> np.ndarray:
    # coords are (x, y) with y pointing north
    neighbors = -np.ones((n, 4), dtype=np.int64)
    for e in edges:
        dx = coords[e.dst][0] - coords[e.src][0]
        dy = coords[e.dst][1] - coords[e.src][1]
        if abs(dy) >= abs(dx):
            h = 0 if dy > 0 else 2
        else:
            h = 1 if dx > 0 else 3
        if neighbors[e.src, h] >= 0:
            raise ValueError(f"two edges leave {e.src} heading {APPROACHES[h]}")
        neighbors[e.src, h] = e.dst
    return neighbors


def network_from_dict(spec: Mapping) -> TrafficNetwork:
    """Build a network from the scenario-file description.

    Accepts either ``{"grid": {"rows", "cols", "capacity", "length"}}`` or
    explicit ``vertices`` / ``edges`` lists. Explicit vertices may carry
    ``x``/``y`` coordinates, which give the approach geometry.
    """
    if "grid" in spec:
        g = spec["grid"]
        return build_grid(int(g["rows"]), int(g["cols"]), int(g.get("capacity", 40)), float(g.get("length", 300.0)))
    raw_vertices = spec["vertices"]
    ids = [v["id"] if isinstance(v, Mapping) else v for v in raw_vertices]
    index = {vid: k for k, vid in enumerate(ids)}
    edges = [
        Edge(index[e["from"]], index[e["to"]], int(e.get("capacity", 40)), float(e.get("length", 300.0)))
        for e in spec["edges"]
    ]
    neighbors = None
    if "neighbors" in spec:
        neighbors = np.asarray(spec["neighbors"], dtype=np.int64)
    elif raw_vertices and all(isinstance(v, Mapping) and "x" in v and "y" in v for v in raw_vertices):
        coords = [(float(v["x"]), float(v["y"])) for v in raw_vertices]
        neighbors = _neighbors_from_coords(len(ids), edges, coords)
    return TrafficNetwork(list(range(len(ids))), edges, neighbors)


def load_network(path: str | Path) -> TrafficNetwork:
    with open(path, encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))


@dataclass(frozen=True)
class FlowSnapshot:
    time: int
    density: np.ndarray  # n x n, density[i, j] = queue(i->j) / capacity(i->j)

    def symmetrized(self) -> np.ndarray:
        return self.density + self.density.T


def snapshot_flow(net: TrafficNetwork, queues, t: int = 0) -> FlowSnapshot:
    """Densities from per-edge queue counts.

    ``queues`` is either an ``n x n`` array or a mapping ``{(i, j): count}``.
    """
    n = net.n
    if isinstance(queues, Mapping):
        q = np.zeros((n, n), dtype=np.float64)
        for (i, j), v in queues.items():
            if not net.adjacency[i, j]:
                raise ValueError(f"no edge {i}->{j}")
            q[i, j] = v
    else:
        q = np.asarray(queues, dtype=np.float64)
        if q.shape != (n, n):
            raise ValueError(f"queue matrix shape {q.shape} != {(n, n)}")
        if np.any(q[~net.adjacency] != 0):
            raise ValueError("queue on a non-edge")
    if np.any(q < 0):
        raise ValueError("negative queue")
    if np.any(q > net.capacity):
        raise ValueError("queue exceeds edge capacity")
    density = np.zeros((n, n), dtype=np.float64)
    adj = net.adjacency
    density[adj] = q[adj] / net.capacity[adj]
    density.setflags(write=False)
    return FlowSnapshot(int(t), density)
