"""Partitions of the intersection set, normalized-cut scoring and enumeration.

A partition is stored as a tuple of region bitmasks sorted by lowest member,
so equal partitions have equal (hashable) encodings.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kernels import connected_split_masks, is_connected_mask, ncut_batch
from .network import FlowSnapshot, TrafficNetwork

ENUM_MAX_NODES = 16


def _mask(members: Iterable[int]) -> int:
    m = 0
    for v in members:
        m |= 1 << int(v)
    return m


def _members(mask: int) -> list[int]:
    out, i = [], 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def _lowbit(mask: int) -> int:
    return mask & -mask


@dataclass(frozen=True, eq=False)
class Partition:
    n: int
    masks: tuple[int, ...]

    def __post_init__(self):
        full = (1 << self.n) - 1
        seen = 0
        for m in self.masks:
            if m == 0:
                raise ValueError("empty region")
            if seen & m:
                raise ValueError("regions overlap")
            seen |= m
        if seen != full:
            raise ValueError("regions do not cover all intersections")
        if list(self.masks) != sorted(self.masks, key=_lowbit):
            object.__setattr__(self, "masks", tuple(sorted(self.masks, key=_lowbit)))
        object.__setattr__(self, "_hash", hash(self.masks))

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        return isinstance(other, Partition) and self.masks == other.masks and self.n == other.n

    @classmethod
    def from_regions(cls, regions: Iterable[Iterable[int]], n: int | None = None) -> "Partition":
        regions = [list(r) for r in regions]
        if n is None:
            n = sum(len(r) for r in regions)
        return cls(n, tuple(_mask(r) for r in regions))

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "Partition":
        labels = np.asarray(labels)
        return cls(len(labels), tuple(_mask(np.flatnonzero(labels == k)) for k in np.unique(labels)))

    @classmethod
    def single(cls, n: int) -> "Partition":
        return cls(n, ((1 << n) - 1,))

    @property
    def m(self) -> int:
        return len(self.masks)

    @property
    def regions(self) -> list[list[int]]:
        return [_members(m) for m in self.masks]

    def labels(self) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int64)
        for k, m in enumerate(self.masks):
            out[_members(m)] = k
        return out

    def assignment(self, n_p: int | None = None) -> np.ndarray:
        """Hard n x n_p assignment matrix; columns beyond ``m`` are empty regions."""
        n_p = self.m if n_p is None else n_p
        if n_p < self.m:
            raise ValueError(f"partition has {self.m} regions, more than n_p={n_p}")
        M = np.zeros((self.n, n_p))
        M[np.arange(self.n), self.labels()] = 1.0
        return M

    def split(self, k: int, part: int) -> "Partition":
        """Replace region ``k`` by ``part`` and its complement within the region."""
        region = self.masks[k]
        if part & ~region or part == 0 or part == region:
            raise ValueError("not a proper split of the region")
        return Partition(self.n, self.masks[:k] + self.masks[k + 1:] + (part, region ^ part))

    def to_json(self) -> str:
        return json.dumps(self.regions)

    @classmethod
    def from_json(cls, text: str, n: int | None = None) -> "Partition":
        return cls.from_regions(json.loads(text), n)

    def __repr__(self) -> str:
        return f"Partition({self.regions})"


@dataclass(frozen=True)
class PartitionScore:
    ncut: float
    cuts: np.ndarray  # m x m
    assoc: np.ndarray  # m

    def recompute(self) -> float:
        total = 0.0
        for i in range(len(self.assoc)):
            if self.assoc[i] > 0:
                total += (self.cuts[i].sum() - self.cuts[i, i]) / self.assoc[i]
        return total


def _flow(F) -> np.ndarray:
    return F.density if isinstance(F, FlowSnapshot) else np.asarray(F, dtype=np.float64)


def cut(F, p_i: Iterable[int], p_j: Iterable[int]) -> float:
    """Total flow from region ``p_i`` into region ``p_j``."""
    f = _flow(F)
    a, b = sorted(set(p_i)), sorted(set(p_j))
    if set(a) & set(b):
        raise ValueError("regions overlap")
    if not a or not b:
        return 0.0
    return float(f[np.ix_(a, b)].sum())


def assoc(F, p_i: Iterable[int]) -> float:
    """Total flow leaving the nodes of ``p_i`` towards any node."""
    f = _flow(F)
    a = sorted(set(p_i))
    if not a:
        raise ValueError("empty region")
    return float(f[a].sum())


def score(F, P: Partition) -> PartitionScore:
    f = _flow(F)
    M = P.assignment()
    cuts = M.T @ f @ M
    np.fill_diagonal(cuts, 0.0)
    asc = M.T @ f.sum(axis=1)
    return PartitionScore(ncut(f, P), cuts, asc)


def ncut(F, P: Partition) -> float:
    """Normalized cut; regions with zero outgoing flow contribute nothing."""
    return float(ncut_batch(_flow(F), P.labels(), P.m)[0])


def ncut_many(F, partitions: Sequence[Partition]) -> np.ndarray:
    if not partitions:
        return np.zeros(0)
    m = max(p.m for p in partitions)
    labels = np.stack([p.labels() for p in partitions])
    return ncut_batch(_flow(F), labels, m)


class PartitionSpace:
    """Connected partitions of one network under region-count and size limits.

    Split lists depend only on topology, so they are cached per region mask
    and shared by every search over this network.
    """

    def __init__(self, net: TrafficNetwork, m_max: int = 4, min_region: int = 2):
        if m_max < 1 or min_region < 1:
            raise ValueError("m_max and min_region must be >= 1")
        self.net = net
        self.n = net.n
        self.m_max = m_max
        self.min_region = min_region
        self._nbr = net.neighbor_masks()
        self._splits: dict[int, tuple[int, ...]] = {}
        self._children: dict[Partition, tuple[Partition, ...]] = {}
        self._enum: dict[bool, list[Partition]] = {}

    def root(self) -> Partition:
        return Partition.single(self.n)

    def splits(self, mask: int) -> tuple[int, ...]:
        out = self._splits.get(mask)
        if out is None:
            if bin(mask).count("1") < 2 * self.min_region:
                out = ()
            else:
                out = tuple(int(x) for x in connected_split_masks(np.int64(mask), self._nbr, self.n, self.min_region))
            self._splits[mask] = out
        return out

    def children(self, P: Partition) -> tuple[Partition, ...]:
        """Distinct partitions obtained by one connected bipartition of one region, canonical order."""
        out = self._children.get(P)
        if out is not None:
            return out
        if P.m >= self.m_max:
            out = ()
        else:
            kids = set()
            for k, region in enumerate(P.masks):
                for part in self.splits(region):
                    kids.add(P.split(k, part))
            out = tuple(sorted(kids, key=lambda p: p.masks))
        if len(self._children) < 200_000:
            self._children[P] = out
        return out

    def is_terminal(self, P: Partition) -> bool:
        return not self.children(P)

    def enumerate(self, terminal_only: bool = False) -> list[Partition]:
        if self.n > ENUM_MAX_NODES:
            raise ValueError(f"enumeration guard: {self.n} intersections > {ENUM_MAX_NODES}")
        if terminal_only in self._enum:
            return self._enum[terminal_only]
        root = self.root()
        if not is_connected_mask(root.masks[0], self._nbr, self.n) or self.n < self.min_region:
            raise ValueError("network must be connected with at least min_region intersections")
        seen = {root}
        frontier = [root]
        while frontier:
            nxt = []
            for P in frontier:
                for c in self.children(P):
                    if c not in seen:
                        seen.add(c)
                        nxt.append(c)
            frontier = nxt
        allp = sorted(seen, key=lambda p: (p.m, p.masks))
        self._enum[False] = allp
        self._enum[True] = [p for p in allp if self.is_terminal(p)]
        return self._enum[terminal_only]


def connected_bipartitions(net: TrafficNetwork, region: Iterable[int],
                           min_region: int = 1) -> list[tuple[frozenset, frozenset]]:
    """Unordered splits of ``region`` into two parts, each connected within the region."""
    region = sorted(set(region))
    if len(region) < 2:
        return []
    mask = _mask(region)
    nbr = net.neighbor_masks()
    parts = connected_split_masks(np.int64(mask), nbr, net.n, min_region)
    return [(frozenset(_members(int(a))), frozenset(_members(mask ^ int(a)))) for a in parts]


def enumerate_partitions(net: TrafficNetwork, m_max: int, min_region: int = 1,
                         terminal_only: bool = False) -> list[Partition]:
    """Every partition into at most ``m_max`` connected regions of size >= ``min_region``."""
    return PartitionSpace(net, m_max, min_region).enumerate(terminal_only)


def quadrant_partition(rows: int, cols: int) -> Partition:
    """Four blocks split at the middle row and column (fewer for thin grids)."""
    r_cut, c_cut = rows // 2, cols // 2
    regions: dict[tuple[bool, bool], list[int]] = {}
    for r in range(rows):
        for c in range(cols):
            regions.setdefault((r >= r_cut, c >= c_cut), []).append(r * cols + c)
    return Partition.from_regions(regions.values(), rows * cols)
