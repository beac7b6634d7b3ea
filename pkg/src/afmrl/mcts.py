"""Monte Carlo tree search over the bipartition tree of a traffic network.

The root holds the single all-intersections region. Each child replaces one
region of its parent by a connected bipartition of it. Node values blend the
normalized-cut heuristic with a learned partition value:

    value(P) = (alpha - 1) * ncut(P) + alpha * learned(P)

With alpha = 0 the root always scores 0, the best possible value, so by
default only terminal partitions (no further split allowed) compete for the
answer. ``candidates="all"`` lets every tree node compete.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .network import FlowSnapshot
from .partition import Partition, PartitionSpace, ncut, ncut_many

NEG_INF = -math.inf


@dataclass
class SearchConfig:
    eval_budget: Optional[int] = None  # distinct partitions evaluated; None = unlimited
    iterations: Optional[int] = None
    c: float = math.sqrt(2.0)
    m_max: int = 4
    min_region: int = 2
    alpha: float = 0.0
    candidates: str = "terminal"  # or "all"

    def __post_init__(self):
        if self.eval_budget is not None and self.eval_budget < 1:
            raise ValueError("eval_budget must be >= 1")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.candidates not in ("terminal", "all"):
            raise ValueError(f"unknown candidate set {self.candidates!r}")


@dataclass
class AlphaSchedule:
    """Linear ramp of the learned-value weight from 0 to ``alpha_max``."""

    alpha_max: float = 0.5
    ramp: int = 100  # episodes

    def __post_init__(self):
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError("alpha_max must be in [0, 1]")
        if self.ramp < 1:
            raise ValueError("ramp must be >= 1 episode")

    def __call__(self, episode: int) -> float:
        return self.alpha_max * min(1.0, max(episode, 0) / self.ramp)


def ucb1(value: float, visits: int, parent_visits: int, c: float) -> float:
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1")
    if visits == 0:
        return math.inf
    return value + c * math.sqrt(math.log(parent_visits) / visits)


def node_value(P: Partition, F, obs=None, alpha: float = 0.0, valuer=None) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    v = (alpha - 1.0) * ncut(F, P)
    if alpha > 0.0:
        if valuer is None:
            raise ValueError("alpha > 0 needs a partition valuer")
        v += alpha * float(valuer.values(F, obs, [P])[0])
    return v


class Evaluator:
    """Caches node values and enforces the evaluation budget.

    The budget counts distinct partitions whose value was computed; cache
    hits are free. A batch larger than the remaining budget is evaluated
    in canonical order up to the budget.
    """

    def __init__(self, F, obs=None, alpha: float = 0.0, valuer=None, budget: Optional[int] = None):
        self.F = F.density if isinstance(F, FlowSnapshot) else np.asarray(F, dtype=np.float64)
        self.obs = obs
        self.alpha = alpha
        self.valuer = valuer
        self.budget = budget
        self.cache: dict[Partition, float] = {}
        if alpha > 0.0 and valuer is None:
            raise ValueError("alpha > 0 needs a partition valuer")

    @property
    def evaluations(self) -> int:
        return len(self.cache)

    @property
    def remaining(self) -> float:
        return math.inf if self.budget is None else self.budget - len(self.cache)

    def values(self, parts: Sequence[Partition]) -> list[Optional[float]]:
        """Values for ``parts``; ``None`` where the budget ran out first."""
        todo = [p for p in dict.fromkeys(parts) if p not in self.cache]
        room = self.remaining
        if room < len(todo):
            todo = todo[:max(int(room), 0)]
        if todo:
            v = (self.alpha - 1.0) * ncut_many(self.F, todo)
            if self.alpha > 0.0:
                v = v + self.alpha * np.asarray(self.valuer.values(self.F, self.obs, todo), dtype=np.float64)
            for p, x in zip(todo, v):
                self.cache[p] = float(x)
        return [self.cache.get(p) for p in parts]

    def value(self, P: Partition) -> Optional[float]:
        return self.values([P])[0]


@dataclass(eq=False)
class SearchNode:
    partition: Partition
    parent: Optional["SearchNode"] = None
    value: float = NEG_INF  # own node value (NEG_INF when not a candidate)
    visits: int = 0
    best: float = NEG_INF  # incumbent value V'
    best_partition: Optional[Partition] = None
    rollout_value: float = NEG_INF
    rollout_partition: Optional[Partition] = None
    children: list["SearchNode"] = field(default_factory=list)
    untried: Optional[list[Partition]] = None
    exhausted: bool = False

    def recompute_best(self) -> tuple[float, Optional[Partition]]:
        """V' from scratch: own value, rollout value and the children's V'."""
        best, arg = self.value, (self.partition if self.value > NEG_INF else None)
        if self.rollout_value > best:
            best, arg = self.rollout_value, self.rollout_partition
        for ch in self.children:
            b, a = ch.recompute_best()
            if b > best:
                best, arg = b, a
        return best, arg

    def walk(self):
        yield self
        for ch in self.children:
            yield from ch.walk()


@dataclass
class SearchResult:
    partition: Optional[Partition]
    value: float
    evaluations: int
    iterations: int
    root: SearchNode
    exhausted: bool


def _argmax(parts: Sequence[Partition], vals: Sequence[Optional[float]]):
    """Best evaluated entry; ties go to the earliest (canonically smallest)."""
    best, arg = NEG_INF, None
    for p, v in zip(parts, vals):
        if v is not None and (arg is None or v > best):
            best, arg = v, p
    return arg, best


class MCTS:
    def __init__(self, space: PartitionSpace, config: SearchConfig):
        if space.m_max != config.m_max or space.min_region != config.min_region:
            raise ValueError("partition space limits differ from the search config")
        self.space = space
        self.config = config

    def _is_candidate(self, P: Partition) -> bool:
        return self.config.candidates == "all" or self.space.is_terminal(P)

    def _candidate_value(self, P: Partition, v: Optional[float]) -> float:
        return v if v is not None and self._is_candidate(P) else NEG_INF

    def rollout(self, start: Partition, ev: Evaluator) -> tuple[float, Optional[Partition]]:
        """Greedy descent by node value; best candidate value on the trace."""
        cur = start
        best, arg = self._candidate_value(cur, ev.value(cur)), cur
        while True:
            kids = self.space.children(cur)
            if not kids:
                break
            nxt, v = _argmax(kids, ev.values(kids))
            if nxt is None:
                break
            cur = nxt
            cv = self._candidate_value(cur, v)
            if cv > best:
                best, arg = cv, cur
        return best, (arg if best > NEG_INF else None)

    def _expand(self, node: SearchNode, ev: Evaluator) -> Optional[SearchNode]:
        if node.untried is None:
            kids = list(self.space.children(node.partition))
            vals = ev.values(kids)
            # highest own value first, canonical order on ties and for unevaluated
            order = sorted(range(len(kids)), key=lambda k: (vals[k] is None, -(vals[k] or 0.0), k))
            node.untried = [kids[k] for k in order]
        while node.untried:
            P = node.untried[0]
            v = ev.value(P)
            if v is None:
                return None
            node.untried.pop(0)
            child = SearchNode(P, parent=node, value=self._candidate_value(P, v))
            node.children.append(child)
            return child
        return None

    def _select(self, root: SearchNode) -> SearchNode:
        node = root
        while node.untried is not None and not node.untried:
            open_kids = [ch for ch in node.children if not ch.exhausted]
            if not open_kids:
                break
            # inlined ucb1; every child in the tree has been visited at least once
            bonus = self.config.c * math.sqrt(math.log(max(node.visits, 1)))
            best, pick = NEG_INF, open_kids[0]
            for ch in open_kids:
                u = ch.best + bonus / math.sqrt(ch.visits)
                if u > best:
                    best, pick = u, ch
            node = pick
        return node

    @staticmethod
    def _backpropagate(node: SearchNode, value: float, partition: Optional[Partition]):
        while node is not None:
            node.visits += 1
            if value > node.best:
                node.best, node.best_partition = value, partition
            node = node.parent

    def _refresh_exhausted(self, node: SearchNode):
        while node is not None:
            done = (node.untried is not None and not node.untried
                    and all(ch.exhausted for ch in node.children))
            if not done or node.exhausted:
                return
            node.exhausted = True
            node = node.parent

    def search(self, F, obs=None, valuer=None, evaluator: Optional[Evaluator] = None) -> SearchResult:
        cfg = self.config
        ev = evaluator or Evaluator(F, obs, cfg.alpha, valuer, cfg.eval_budget)
        root_p = self.space.root()
        rv = ev.value(root_p)
        root = SearchNode(root_p, value=self._candidate_value(root_p, rv))
        if rv is None:
            return SearchResult(None, NEG_INF, ev.evaluations, 0, root, False)
        rb, rp = self.rollout(root_p, ev)
        root.rollout_value, root.rollout_partition = rb, rp
        root.visits = 1
        root.best, root.best_partition = max((root.value, root_p if root.value > NEG_INF else None), (rb, rp),
                                             key=lambda t: t[0])
        if self.space.is_terminal(root_p):
            root.untried = []
            root.exhausted = True
        it = 0
        while not root.exhausted and (cfg.iterations is None or it < cfg.iterations):
            leaf = self._select(root)
            child = self._expand(leaf, ev)
            if child is None:
                if leaf.untried is not None and not leaf.untried:
                    self._refresh_exhausted(leaf)
                    continue
                break  # budget spent
            it += 1
            b, p = self.rollout(child.partition, ev)
            child.rollout_value, child.rollout_partition = b, p
            own = (child.value, child.partition if child.value > NEG_INF else None)
            value, part = max(own, (b, p), key=lambda t: t[0])
            if self.space.is_terminal(child.partition):
                child.untried = []
                child.exhausted = True
            self._backpropagate(child, value, part)
            child.best, child.best_partition = value, part
            self._refresh_exhausted(child)
        return SearchResult(root.best_partition, root.best, ev.evaluations, it, root, root.exhausted)


def search(F, obs=None, config: Optional[SearchConfig] = None, valuer=None,
           space: Optional[PartitionSpace] = None, net=None) -> SearchResult:
    """One fresh tree search on a flow snapshot."""
    config = config or SearchConfig()
    if space is None:
        if net is None:
            raise ValueError("need a PartitionSpace or a network")
        space = PartitionSpace(net, config.m_max, config.min_region)
    return MCTS(space, config).search(F, obs, valuer)


def exhaustive_best(space: PartitionSpace, F, obs=None, alpha: float = 0.0, valuer=None,
                    candidates: str = "terminal") -> tuple[Partition, float, int]:
    """Best candidate by full enumeration. Returns (partition, value, space size)."""
    allp = space.enumerate()
    parts = space.enumerate(terminal_only=True) if candidates == "terminal" else allp
    ev = Evaluator(F, obs, alpha, valuer)
    vals = ev.values(parts)
    arg, best = _argmax(parts, vals)
    return arg, best, len(allp)

