"""Built-in scenarios."""
from __future__ import annotations

import numpy as np

from .network import APPROACHES, build_grid
from .partition import quadrant_partition
from .sim import ArrivalProcess, Scenario

_A = {a: k for k, a in enumerate(APPROACHES)}


def _entry(weights: np.ndarray, cols: int, r: int, c: int, approach: str, w: float):
    weights[r * cols + c, _A[approach]] = w


def corridor_phases(rows: int = 4, cols: int = 4, heavy: float = 1.0) -> list[np.ndarray]:
    """Boundary weight masks for the heavy flow, one per demand phase.

    0: two-way east-west traffic on rows 0-1 (top half)
    1: a pinwheel of one-way flows around the centre; each flow crosses a
       quadrant boundary just before the centre node where it meets the next
    2: two-way east-west traffic on rows 2-3 (bottom half)
    3: the pinwheel turning the other way
    """
    if rows < 4 or cols < 4:
        raise ValueError("corridor phases need at least a 4x4 grid")
    r1, r2 = rows // 2 - 1, rows // 2
    c1, c2 = cols // 2 - 1, cols // 2
    phases = []
    for band in ((0, r1), (r2, rows - 1)):
        w = np.zeros((rows * cols, 4))
        for r in band:
            _entry(w, cols, r, 0, "W", heavy)
            _entry(w, cols, r, cols - 1, "E", heavy)
        phases.append(w)
    pin_cw = np.zeros((rows * cols, 4))
    _entry(pin_cw, cols, r1, 0, "W", heavy)  # eastbound on the upper centre row
    _entry(pin_cw, cols, 0, c2, "N", heavy)  # southbound on the right centre column
    _entry(pin_cw, cols, r2, cols - 1, "E", heavy)  # westbound on the lower centre row
    _entry(pin_cw, cols, rows - 1, c1, "S", heavy)  # northbound on the left centre column
    pin_ccw = np.zeros((rows * cols, 4))
    _entry(pin_ccw, cols, r2, 0, "W", heavy)
    _entry(pin_ccw, cols, 0, c1, "N", heavy)
    _entry(pin_ccw, cols, r1, cols - 1, "E", heavy)
    _entry(pin_ccw, cols, rows - 1, c2, "S", heavy)
    return [phases[0], pin_cw, phases[1], pin_ccw]


def shifting_demand_scenario(rows: int = 4, cols: int = 4, rate: float = 100.0, heavy: float = 2.5,
                             background: float = 0.5, phase_steps: int = 60, horizon: int = 360,
                             turn_probs=(0.1, 0.8, 0.1), seed: int = 0) -> Scenario:
    """A grid whose dominant flow relocates every ``phase_steps`` steps.

    Background demand ``background * rate`` enters on every boundary
    approach; the active corridor adds ``heavy * rate`` on its entries.
    Phases cycle through :func:`corridor_phases`.
    """
    net = build_grid(rows, cols)
    base = net.neighbors < 0
    masks = corridor_phases(rows, cols, heavy)
    schedule = []
    for k, start in enumerate(range(0, horizon, phase_steps)):
        schedule.append((start, background * base + masks[k % len(masks)]))
    arrivals = ArrivalProcess(kind="schedule", rate=rate, schedule=schedule)
    return Scenario(net, arrivals, horizon=horizon, turn_probs=tuple(turn_probs), seed=seed,
                    name=f"shifting_{rows}x{cols}")


def demand_phase(step: int, phase_steps: int = 60, n_phases: int = 4) -> int:
    return (step // phase_steps) % n_phases


def crossing_edges(rows: int = 4, cols: int = 4) -> np.ndarray:
    """(n, n) True for grid edges whose ends lie in different quadrants."""
    labels = quadrant_partition(rows, cols).labels()
    net = build_grid(rows, cols)
    return net.adjacency & (labels[:, None] != labels[None, :])
