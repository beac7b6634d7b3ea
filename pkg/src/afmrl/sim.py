"""Point-queue multi-intersection simulator and rule-based controllers.

Each lane is a point queue discharging at most one vehicle per control step.
Vehicles travel a link in ``tau`` steps, join a lane queue at the downstream
intersection (lane picked by the turn model when they enter the link), and
leave the network when they discharge towards the boundary.

Vehicles are exchangeable, so the state keeps counts rather than vehicle
records. Travel time is accumulated as vehicle-steps spent in the system,
which equals the per-vehicle sum of (exit - entry), with vehicles still inside
at the horizon charged (horizon - entry).
"""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .kernels import sim_step_kernel
from .network import (
    LANE_EXIT_HEADING,
    N_LANES,
    N_PHASES,
    PHASE_MASK,
    FlowSnapshot,
    TrafficNetwork,
    network_from_dict,
)

DEFAULT_TURN = (0.2, 0.6, 0.2)  # left, straight, right


@dataclass
class ArrivalProcess:
    """Boundary demand.

    ``rate`` is vehicles/hour/lane; every entry link has three lanes.
    ``weights`` (n x 4) scales the rate per boundary approach; it defaults to
    one on every boundary approach. ``schedule`` is a list of
    ``(start_step, weights)`` segments used by the ``schedule`` kind.
    """

    kind: str = "gaussian"  # gaussian | constant | schedule
    rate: float = 500.0
    rel_std: float = 0.1
    weights: np.ndarray | None = None
    schedule: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("gaussian", "constant", "schedule"):
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        if self.rate < 0:
            raise ValueError("rate must be >= 0")

    def per_step_mean(self, delta: float) -> float:
        return self.rate * 3.0 * delta / 3600.0


@dataclass
class Scenario:
    network: TrafficNetwork
    arrivals: ArrivalProcess = field(default_factory=ArrivalProcess)
    horizon: int = 720
    delta: float = 5.0
    speed: float = 15.0  # m/s, free-flow
    entry_capacity: int = 40
    entry_length: float = 300.0
    turn_probs: tuple[float, float, float] = DEFAULT_TURN
    turn_overrides: dict = field(default_factory=dict)  # {(i, approach): (l, s, r)}
    seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if self.network.neighbors is None:
            raise ValueError("simulation needs a network with approach geometry")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def travel_steps(self, length: float) -> int:
        return max(1, math.ceil(length / (self.speed * self.delta) - 1e-9))

    def boundary_mask(self) -> np.ndarray:
        """(n, 4) True where an approach is fed from outside the network."""
        # approach a of i is fed by the neighbour lying in heading a
        return self.network.neighbors < 0


@dataclass
class SimState:
    queue: np.ndarray  # (n, 12) vehicles per lane
    transit: np.ndarray  # (n, 4, 3, depth) vehicles on the link feeding (i, approach), by lane and remaining steps
    backlog: np.ndarray  # (n, 4) generated but waiting to enter
    phase: np.ndarray  # (n,)
    phase_age: np.ndarray  # (n,) steps the current phase has been held
    clock: int
    delta: float
    spawned: int = 0
    entered: int = 0
    exited: int = 0
    vehicle_steps: int = 0
    local_steps: np.ndarray | None = None  # (n,) queued vehicle-steps per intersection
    credit: np.ndarray | None = None
    rates: np.ndarray | None = None
    rng: np.random.Generator | None = None
    # static layout
    neighbors: np.ndarray | None = None
    link_capacity: np.ndarray | None = None
    link_tau: np.ndarray | None = None
    turn_cdf: np.ndarray | None = None
    boundary: np.ndarray | None = None
    scenario: Scenario | None = None

    @property
    def n(self) -> int:
        return self.queue.shape[0]

    def in_network(self) -> int:
        return int(self.queue.sum() + self.transit.sum())

    def conserved(self) -> bool:
        return (self.entered == self.in_network() + self.exited
                and self.spawned == self.entered + int(self.backlog.sum()))

    def copy(self) -> "SimState":
        return copy.deepcopy(self)


def _turn_cdf(turn) -> np.ndarray:
    p = np.asarray(turn, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError(f"turn probabilities must be 3 non-negative values summing to 1, got {turn}")
    return np.cumsum(p)


def reset(scenario: Scenario, seed: int | None = None) -> SimState:
    net = scenario.network
    n = net.n
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    boundary = scenario.boundary_mask()
    link_capacity = np.zeros((n, 4), dtype=np.int64)
    link_tau = np.zeros((n, 4), dtype=np.int64)
    for i in range(n):
        for a in range(4):
            up = net.neighbors[i, a]
            if up < 0:
                link_capacity[i, a] = scenario.entry_capacity
                link_tau[i, a] = scenario.travel_steps(scenario.entry_length)
            else:
                link_capacity[i, a] = net.capacity[up, i]
                link_tau[i, a] = scenario.travel_steps(net.length[up, i])
    turn_cdf = np.empty((n, 4, 3))
    turn_cdf[:, :] = _turn_cdf(scenario.turn_probs)
    for (i, a), p in scenario.turn_overrides.items():
        turn_cdf[i, a] = _turn_cdf(p)
    turn_cdf[:, :, 2] = np.inf  # guards float round-off on the last bucket
    depth = int(link_tau.max())

    arr = scenario.arrivals
    weights = boundary.astype(np.float64) if arr.weights is None else np.asarray(arr.weights, dtype=np.float64) * boundary
    rates = weights * arr.rate
    if arr.kind == "gaussian":
        rates = np.clip(rng.normal(rates, arr.rel_std * rates), 0.0, None) * boundary
    state = SimState(
        queue=np.zeros((n, N_LANES), dtype=np.int64),
        transit=np.zeros((n, 4, 3, depth), dtype=np.int64),
        backlog=np.zeros((n, 4), dtype=np.int64),
        phase=np.zeros(n, dtype=np.int64),
        phase_age=np.zeros(n, dtype=np.int64),
        clock=0,
        delta=scenario.delta,
        local_steps=np.zeros(n, dtype=np.int64),
        credit=np.zeros((n, 4)),
        rates=rates,
        rng=rng,
        neighbors=np.ascontiguousarray(net.neighbors),
        link_capacity=link_capacity,
        link_tau=link_tau,
        turn_cdf=turn_cdf,
        boundary=boundary,
        scenario=scenario,
    )
    return state


def _draw_arrivals(state: SimState) -> np.ndarray:
    arr = state.scenario.arrivals
    scale = 3.0 * state.delta / 3600.0
    if arr.kind == "schedule":
        weights = None
        for start, w in arr.schedule:
            if state.clock >= start:
                weights = w
        if weights is None:
            return np.zeros_like(state.backlog)
        mean = np.asarray(weights, dtype=np.float64) * state.boundary * arr.rate * scale
        return state.rng.poisson(mean).astype(np.int64)
    mean = state.rates * scale
    if arr.kind == "constant":
        state.credit += mean
        counts = np.floor(state.credit + 1e-12)
        state.credit -= counts
        return counts.astype(np.int64)
    return state.rng.poisson(mean).astype(np.int64)


def step(state: SimState, joint_phases, arrivals: np.ndarray | None = None) -> tuple[SimState, np.ndarray]:
    """One control step of ``state.delta`` seconds; mutates and returns ``state``.

    Returns the per-intersection reward ``-sum(queue)`` evaluated after the
    step. ``arrivals`` overrides the arrival process for this step.
    """
    phases = np.asarray(joint_phases, dtype=np.int64)
    if phases.shape != (state.n,):
        raise ValueError(f"need one phase per intersection, got shape {phases.shape}")
    if np.any((phases < 0) | (phases >= N_PHASES)):
        raise ValueError("phase id out of range")
    state.vehicle_steps += state.in_network() + int(state.backlog.sum())
    if arrivals is None:
        arrivals = _draw_arrivals(state)
    else:
        arrivals = np.asarray(arrivals, dtype=np.int64) * state.boundary
    u_dis = state.rng.random((state.n, N_LANES))
    u_ent = state.rng.random((state.n, 4, 3))
    state.spawned += int(arrivals.sum())
    before = int(state.backlog.sum()) + int(arrivals.sum())
    exited = sim_step_kernel(
        state.queue, state.transit, state.backlog, state.neighbors, phases, PHASE_MASK,
        LANE_EXIT_HEADING, state.link_capacity, state.link_tau, state.turn_cdf, arrivals, u_dis, u_ent,
    )
    state.entered += before - int(state.backlog.sum())
    state.exited += int(exited)
    same = phases == state.phase
    state.phase_age = np.where(same, state.phase_age + 1, 1)
    state.phase = phases.copy()
    state.clock += 1
    per_node = state.queue.sum(axis=1)
    state.local_steps += per_node
    return state, -per_node.astype(np.float64)


def observe(state: SimState, i: int) -> np.ndarray:
    """12 lane queues of intersection ``i`` in (N, E, S, W) x (left, straight, right) order."""
    if not 0 <= i < state.n:
        raise IndexError(f"unknown intersection {i}")
    return state.queue[i].copy()


def observe_all(state: SimState) -> np.ndarray:
    return state.queue.copy()


def edge_queues(state: SimState) -> np.ndarray:
    """n x n matrix of queued vehicles per directed edge (queue at the downstream approach)."""
    n = state.n
    q = np.zeros((n, n), dtype=np.int64)
    nb = state.neighbors
    for j in range(n):
        for b in range(4):
            up = nb[j, b]
            if up >= 0:
                q[up, j] = state.queue[j, b * 3:(b + 1) * 3].sum()
    return q


def flow_snapshot(state: SimState) -> FlowSnapshot:
    q = edge_queues(state)
    net = state.scenario.network
    dens = np.zeros(q.shape)
    adj = net.adjacency
    dens[adj] = q[adj] / net.capacity[adj]
    dens.setflags(write=False)
    return FlowSnapshot(state.clock, dens)


def downstream_index(neighbors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(n, 12) downstream intersection and approach fed by every lane (-1 at exits)."""
    node = neighbors[:, LANE_EXIT_HEADING]
    app = np.broadcast_to((LANE_EXIT_HEADING + 2) % 4, node.shape).copy()
    app[node < 0] = -1
    return node, app


def downstream_lane_sum(state: SimState) -> np.ndarray:
    """(n, 12) total queue of the approach each movement feeds (0 at exits)."""
    node, app = downstream_index(state.neighbors)
    per_app = state.queue.reshape(state.n, 4, 3).sum(axis=2)
    out = per_app[np.maximum(node, 0), np.maximum(app, 0)]
    out[node < 0] = 0
    return out


# ---------------------------------------------------------------------------
# rule-based controllers


def fixed_time_controller(clock: int, cycle: Sequence[tuple[int, int]]) -> int:
    if not cycle:
        raise ValueError("empty cycle")
    if any(d <= 0 for _, d in cycle):
        raise ValueError("durations must be > 0")
    pos = clock % sum(d for _, d in cycle)
    for phase, dur in cycle:
        if pos < dur:
            return phase
        pos -= dur
    raise AssertionError("unreachable")


def _pressure3(state: SimState) -> np.ndarray:
    # 3 x (upstream lane queue - mean downstream lane queue), kept integral so ties are exact
    return 3 * state.queue - downstream_lane_sum(state)


def phase_pressures(state: SimState, i: int) -> np.ndarray:
    """Pressure of each phase: sum over its movements of upstream minus mean downstream lane queue."""
    return (PHASE_MASK.astype(np.int64) @ _pressure3(state)[i]) / 3.0


def maxpressure_controller(state: SimState, i: int) -> int:
    # argmax returns the first maximum, i.e. the lowest phase id on ties
    return int(np.argmax(PHASE_MASK.astype(np.int64) @ _pressure3(state)[i]))


def _phase_demand(queue_row: np.ndarray) -> np.ndarray:
    # right turns are served by every phase, so only left/straight count as demand
    served = PHASE_MASK.copy()
    served[:, 2::3] = False
    return served.astype(np.int64) @ queue_row


def sotl_controller(state: SimState, i: int, threshold: int = 8, min_green: int = 2) -> int:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    current = int(state.phase[i])
    if state.phase_age[i] < min_green:
        return current
    demand = _phase_demand(state.queue[i])
    if demand[current] >= threshold:
        return current
    competing = demand.copy()
    competing[current] = -1
    best = int(np.argmax(competing))
    if competing[best] >= threshold:
        return best
    return current


class FixedTime:
    def __init__(self, cycle: Sequence[tuple[int, int]] | None = None):
        self.cycle = list(cycle) if cycle is not None else [(0, 6), (2, 3), (1, 6), (3, 3)]

    def __call__(self, state: SimState) -> np.ndarray:
        return np.full(state.n, fixed_time_controller(state.clock, self.cycle), dtype=np.int64)


class MaxPressure:
    def __call__(self, state: SimState) -> np.ndarray:
        return np.argmax(_pressure3(state) @ PHASE_MASK.T.astype(np.int64), axis=1).astype(np.int64)


class SOTL:
    def __init__(self, threshold: int = 8, min_green: int = 2):
        self.threshold = threshold
        self.min_green = min_green

    def __call__(self, state: SimState) -> np.ndarray:
        return np.array([sotl_controller(state, i, self.threshold, self.min_green) for i in range(state.n)],
                        dtype=np.int64)


# ---------------------------------------------------------------------------
# episodes and metrics


@dataclass
class EpisodeMetrics:
    average_travel_time: float
    average_queue_length: float
    queue_trace: np.ndarray  # (horizon,) total queued vehicles after each step
    node_queue_trace: np.ndarray  # (horizon, n)
    local_travel_time: np.ndarray  # (n,) seconds
    spawned: int
    exited: int

    def summary(self) -> dict:
        return {
            "average_travel_time": self.average_travel_time,
            "average_queue_length": self.average_queue_length,
            "spawned": self.spawned,
            "exited": self.exited,
        }


def average_travel_time(state: SimState) -> float:
    if state.spawned == 0:
        return 0.0
    return state.vehicle_steps * state.delta / state.spawned


def finalize_metrics(state: SimState, node_trace: np.ndarray) -> EpisodeMetrics:
    node_trace = np.asarray(node_trace, dtype=np.float64)
    return EpisodeMetrics(
        average_travel_time=average_travel_time(state),
        average_queue_length=float(node_trace.sum(axis=1).mean() / (state.n * N_LANES)) if len(node_trace) else 0.0,
        queue_trace=node_trace.sum(axis=1),
        node_queue_trace=node_trace,
        local_travel_time=state.local_steps * state.delta,
        spawned=state.spawned,
        exited=state.exited,
    )


def run_episode(controller: Callable[[SimState], np.ndarray], scenario: Scenario, horizon: int | None = None,
                seed: int | None = None, check_conservation: bool = False) -> EpisodeMetrics:
    horizon = scenario.horizon if horizon is None else horizon
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = reset(scenario, seed)
    trace = np.zeros((horizon, state.n))
    for t in range(horizon):
        step(state, controller(state))
        trace[t] = state.queue.sum(axis=1)
        if check_conservation and not state.conserved():
            raise AssertionError(f"vehicle conservation violated at step {state.clock}")
    return finalize_metrics(state, trace)


def write_metrics_csv(metrics: EpisodeMetrics, path: str | Path, delta: float = 5.0) -> None:
    path = Path(path)
    n = metrics.node_queue_trace.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["clock", "total_queue"] + [f"q{i}" for i in range(n)])
        for t, row in enumerate(metrics.node_queue_trace):
            w.writerow([t + 1, int(row.sum())] + [int(x) for x in row])
        w.writerow(["summary", f"avg_travel_time={metrics.average_travel_time:.6f}",
                    f"avg_queue={metrics.average_queue_length:.6f}"])


# ---------------------------------------------------------------------------
# scenario files


def _weights_from(spec, n: int) -> np.ndarray | None:
    if spec is None:
        return None
    w = np.zeros((n, 4))
    if isinstance(spec, Mapping):
        for key, val in spec.items():
            i, a = key.split(":")
            w[int(i), "NESW".index(a)] = float(val)
        return w
    return np.asarray(spec, dtype=np.float64).reshape(n, 4)


def scenario_from_dict(spec: Mapping, base_dir: Path | None = None) -> Scenario:
    """Scenario JSON: ``network`` (inline dict or path), ``arrivals``, ``horizon``,
    ``delta``, ``turn_probs``, ``seed``."""
    net_spec = spec.get("network", {"grid": {"rows": 4, "cols": 4}})
    if isinstance(net_spec, str):
        from .network import load_network

        p = Path(net_spec)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        net = load_network(p)
    else:
        net = network_from_dict(net_spec)
    a = dict(spec.get("arrivals", {}))
    weights = _weights_from(a.get("weights"), net.n)
    schedule = [(int(seg["start"]), _weights_from(seg["weights"], net.n)) for seg in a.get("schedule", [])]
    arrivals = ArrivalProcess(kind=a.get("kind", "gaussian"), rate=float(a.get("rate", 500.0)),
                              rel_std=float(a.get("rel_std", 0.1)), weights=weights, schedule=schedule)
    overrides = {}
    for key, val in spec.get("turn_overrides", {}).items():
        i, ap = key.split(":")
        overrides[(int(i), "NESW".index(ap))] = tuple(val)
    return Scenario(
        network=net,
        arrivals=arrivals,
        horizon=int(spec.get("horizon", 720)),
        delta=float(spec.get("delta", 5.0)),
        speed=float(spec.get("speed", 15.0)),
        turn_probs=tuple(spec.get("turn_probs", DEFAULT_TURN)),
        turn_overrides=overrides,
        seed=int(spec.get("seed", 0)),
        name=str(spec.get("name", "scenario")),
    )
