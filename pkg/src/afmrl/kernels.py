"""Hot inner loops.

Every kernel is written in numba-compatible loop style. With numba disabled
(``AFMRL_DISABLE_NUMBA=1``) the loop kernels run interpreted, and the kernels
that have a natural array formulation dispatch to a vectorised numpy version
instead. Integer kernels agree exactly across the two paths and float
kernels to rounding; ``tests/test_kernels.py`` checks both.
"""
from __future__ import annotations

import numpy as np

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# queue simulation


@njit
def sim_step_kernel(queue, transit, backlog, neighbors, phases, phase_mask, lane_exit,
                    link_capacity, link_tau, turn_cdf, arrivals, u_discharge, u_entry):
    """Advance the point-queue model by one control step, in place.

    Order within a step: in-transit vehicles advance (those finishing join
    their lane queue), lane heads allowed by the phase discharge one vehicle,
    then new arrivals are admitted from the boundary backlog.

    Returns the number of vehicles that left the network.
    """
    n = queue.shape[0]
    depth = transit.shape[3]
    # (a) advance
    for j in range(n):
        for b in range(4):
            for k in range(3):
                queue[j, b * 3 + k] += transit[j, b, k, 0]
                for s in range(depth - 1):
                    transit[j, b, k, s] = transit[j, b, k, s + 1]
                transit[j, b, k, depth - 1] = 0
    # (b) discharge, saturation 1 vehicle / lane / step
    exited = 0
    for i in range(n):
        ph = phases[i]
        for lane in range(12):
            if not phase_mask[ph, lane] or queue[i, lane] <= 0:
                continue
            h = lane_exit[lane]
            j = neighbors[i, h]
            if j < 0:
                queue[i, lane] -= 1
                exited += 1
                continue
            b = (h + 2) % 4
            occ = 0
            for k in range(3):
                occ += queue[j, b * 3 + k]
                for s in range(depth):
                    occ += transit[j, b, k, s]
            if occ >= link_capacity[j, b]:
                continue
            u = u_discharge[i, lane]
            k = 0
            while k < 2 and u >= turn_cdf[j, b, k]:
                k += 1
            transit[j, b, k, link_tau[j, b] - 1] += 1
            queue[i, lane] -= 1
    # (c) arrivals enter from the boundary backlog, at most 3 per entry link per step
    for i in range(n):
        for a in range(4):
            backlog[i, a] += arrivals[i, a]
            if backlog[i, a] <= 0:
                continue
            occ = 0
            for k in range(3):
                occ += queue[i, a * 3 + k]
                for s in range(depth):
                    occ += transit[i, a, k, s]
            room = link_capacity[i, a] - occ
            admit = min(3, backlog[i, a], room)
            for e in range(admit):
                u = u_entry[i, a, e]
                k = 0
                while k < 2 and u >= turn_cdf[i, a, k]:
                    k += 1
                transit[i, a, k, link_tau[i, a] - 1] += 1
            if admit > 0:
                backlog[i, a] -= admit
    return exited


# ---------------------------------------------------------------------------
# normalized cut over label vectors


@njit
def _ncut_batch_loop(F, labels, m):
    B, n = labels.shape
    out = np.zeros(B)
    cut = np.zeros((m, m))
    assoc = np.zeros(m)
    for b in range(B):
        cut[:, :] = 0.0
        assoc[:] = 0.0
        for u in range(n):
            p = labels[b, u]
            for v in range(n):
                f = F[u, v]
                if f != 0.0:
                    assoc[p] += f
                    q = labels[b, v]
                    if q != p:
                        cut[p, q] += f
        total = 0.0
        for p in range(m):
            if assoc[p] > 0.0:
                for q in range(m):
                    if q != p:
                        total += cut[p, q] / assoc[p]
        out[b] = total
    return out


def _ncut_batch_numpy(F, labels, m):
    onehot = (labels[:, :, None] == np.arange(m)[None, None, :]).astype(np.float64)
    cut = np.einsum("bup,uv,bvq->bpq", onehot, F, onehot, optimize=True)
    assoc = onehot.transpose(0, 2, 1) @ F.sum(axis=1)
    off = cut.sum(axis=2) - np.einsum("bpp->bp", cut)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(assoc > 0, off / np.where(assoc > 0, assoc, 1.0), 0.0)
    return terms.sum(axis=1)


def ncut_batch(F: np.ndarray, labels: np.ndarray, m: int) -> np.ndarray:
    """Ncut of every label row in ``labels`` (B x n, values in 0..m-1)."""
    F = np.ascontiguousarray(F, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[None, :]
    if USE_NUMBA:
        return _ncut_batch_loop(F, labels, m)
    return _ncut_batch_numpy(F, labels, m)


# ---------------------------------------------------------------------------
# connected bipartitions over bitmask regions


@njit
def _is_connected(mask, nbr, n):
    if mask == 0:
        return False
    start = -1
    for i in range(n):
        if (mask >> i) & 1:
            start = i
            break
    seen = np.int64(1) << start
    frontier = seen
    while frontier != 0:
        nxt = np.int64(0)
        for i in range(n):
            if (frontier >> i) & 1:
                nxt |= nbr[i]
        nxt &= mask
        nxt &= ~seen
        seen |= nxt
        frontier = nxt
    return seen == mask


@njit
def _popcount(x):
    c = 0
    while x != 0:
        x &= x - 1
        c += 1
    return c


@njit
def connected_split_masks(mask, nbr, n, min_size):
    """All unordered splits of ``mask`` into two connected parts of size >= ``min_size``.

    Each split is reported once, as the part that holds the lowest member.
    """
    low = mask & -mask
    rest = mask ^ low
    out = []
    sub = rest
    while True:
        a = sub | low
        b = mask ^ a
        if b != 0 and _popcount(a) >= min_size and _popcount(b) >= min_size:
            if _is_connected(a, nbr, n) and _is_connected(b, nbr, n):
                out.append(a)
        if sub == 0:
            break
        sub = (sub - 1) & rest
    res = np.empty(len(out), dtype=np.int64)
    for i in range(len(out)):
        res[i] = out[i]
    return res


def is_connected_mask(mask: int, nbr: np.ndarray, n: int) -> bool:
    return bool(_is_connected(np.int64(mask), nbr, n))
