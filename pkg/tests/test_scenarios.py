import numpy as np
import pytest

from afmrl.mcts import MCTS, SearchConfig
from afmrl.network import build_grid
from afmrl.partition import PartitionSpace, ncut, quadrant_partition
from afmrl.scenarios import corridor_phases, crossing_edges, demand_phase, shifting_demand_scenario
from afmrl.sim import FixedTime, flow_snapshot, reset, step


def test_phase_zero_loads_top_rows():
    sc = shifting_demand_scenario()
    start, w = sc.arrivals.schedule[0]
    assert start == 0
    heavy = w > 0.5 + 1e-9  # above background
    rows = {int(i) // 4 for i in np.flatnonzero(heavy.any(axis=1))}
    assert rows == {0, 1}
    assert [demand_phase(t) for t in (0, 59, 60, 119, 120, 239, 240)] == [0, 0, 1, 1, 2, 3, 0]


def test_schedule_cycles_through_phases():
    sc = shifting_demand_scenario(horizon=600)
    masks = corridor_phases(4, 4, 2.5)
    for k, (start, w) in enumerate(sc.arrivals.schedule):
        assert start == 60 * k
        np.testing.assert_array_equal(w - 0.5 * (sc.network.neighbors < 0), masks[k % 4])
    with pytest.raises(ValueError):
        corridor_phases(3, 4)


def test_crossing_edges():
    cross = crossing_edges()
    net = build_grid(4, 4)
    assert cross.sum() == 16  # 8 undirected boundary edges, both directions
    assert np.all(net.adjacency[cross])


def _phase_snapshots(seed, phase=1, every=10):
    sc = shifting_demand_scenario()
    state = reset(sc, seed)
    ctrl = FixedTime()
    snaps = []
    for t in range(sc.horizon):
        step(state, ctrl(state))
        if demand_phase(t) == phase and t % every == 0:
            snaps.append(flow_snapshot(state).density)
    return snaps


def test_phase_one_boundary_density_exceeds_intra():
    cross = crossing_edges()
    net = build_grid(4, 4)
    intra = net.adjacency & ~cross
    snaps = [F for s in range(3) for F in _phase_snapshots(s)]
    assert np.mean([F[cross].mean() for F in snaps]) > np.mean([F[intra].mean() for F in snaps])


def test_phase_one_quadrant_ncut_exceeds_search():
    space = PartitionSpace(build_grid(4, 4), 4, 2)
    quad = quadrant_partition(4, 4)
    snaps = _phase_snapshots(0, every=30)
    q = np.mean([ncut(F, quad) for F in snaps])
    m = np.mean([ncut(F, MCTS(space, SearchConfig(eval_budget=1000)).search(F).partition) for F in snaps])
    assert q > m
