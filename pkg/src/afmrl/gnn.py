"""Graph networks over the flow graph: agent embedding, soft pooling into
regions, region coarsening and the partition-value head.

Message passing is X' = act((row_normalize(F) + I) X W) with no bias, so an
all-zero input row with no incoming weight stays zero.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .nn import MLP, Module, RMSProp, Tensor, as_tensor, glorot, mse, no_grad
from .partition import Partition


def propagate(F, X, W, activation: str = "relu") -> Tensor:
    F, X = as_tensor(F), as_tensor(X)
    if F.shape[-1] != F.shape[-2]:
        raise ValueError(f"flow matrix must be square, got {F.shape}")
    if X.shape[-2] != F.shape[-1]:
        raise ValueError(f"feature rows {X.shape[-2]} do not match {F.shape[-1]} nodes")
    agg = F.row_normalize() @ X + X
    out = agg @ W
    return out.relu() if activation == "relu" else out


class GraphEmbed(Module):
    """Stack of message-passing layers, ReLU after each unless ``last_linear``."""

    def __init__(self, d_in: int, d: int = 64, layers: int = 2, d_out: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, last_linear: bool = False):
        rng = rng or np.random.default_rng(0)
        dims = [d_in] + [d] * (layers - 1) + [d if d_out is None else d_out]
        self.weights = [Tensor(glorot(rng, a, b), requires_grad=True) for a, b in zip(dims[:-1], dims[1:])]
        self.last_linear = last_linear
        self.d_in = d_in
        self.d_out = dims[-1]

    def named_parameters(self, prefix: str = ""):
        return [(f"{prefix}weights.{k}", w) for k, w in enumerate(self.weights)]

    def __call__(self, F, X) -> Tensor:
        X = as_tensor(X)
        if X.shape[-1] != self.d_in:
            raise ValueError(f"expected {self.d_in} input features, got {X.shape[-1]}")
        for k, W in enumerate(self.weights):
            last = k == len(self.weights) - 1
            X = propagate(F, X, W, "identity" if (last and self.last_linear) else "relu")
        return X


def gnn_embed(F, X, model: GraphEmbed) -> Tensor:
    return model(F, X)


class GraphPool(Module):
    """Soft assignment of agents to ``n_p`` regions: row-softmax of a graph stack."""

    def __init__(self, d_in: int, n_p: int = 4, d: int = 64, rng: Optional[np.random.Generator] = None):
        self.n_p = n_p
        self.gnn = GraphEmbed(d_in, d, 2, d_out=n_p, rng=rng, last_linear=True)

    def __call__(self, F, obs) -> Tensor:
        return self.gnn(F, obs).softmax(-1)


def gnn_pool(F, obs, model: GraphPool) -> Tensor:
    return model(F, obs)


def harden(M) -> tuple[Partition, np.ndarray]:
    """Row-argmax regions (ties to the lowest column) and the one-hot matrix.

    The one-hot matrix keeps all ``n_p`` columns, so empty regions stay as
    zero columns; the Partition drops them.
    """
    M = M.data if isinstance(M, Tensor) else np.asarray(M)
    labels = np.argmax(M, axis=-1)
    hard = np.zeros_like(M, dtype=np.float64)
    hard[np.arange(M.shape[0]), labels] = 1.0
    return Partition.from_labels(labels), hard


def coarsen(M, F, Xa, refine: Optional[GraphEmbed] = None) -> tuple[Tensor, Tensor, Tensor]:
    """Region flow M^T F M, pooled features M^T Xa and their one-step refinement."""
    M, F, Xa = as_tensor(M), as_tensor(F), as_tensor(Xa)
    if M.shape[-2] != F.shape[-1] or Xa.shape[-2] != M.shape[-2]:
        raise ValueError(f"shape mismatch: M {M.shape}, F {F.shape}, X {Xa.shape}")
    Mt = M.transpose()
    Fc = Mt @ F @ M
    Xp = Mt @ Xa
    Xhat = refine(Fc, Xp) if refine is not None else Xp
    return Fc, Xp, Xhat


def aux_link_loss(M, A) -> Tensor:
    """Frobenius norm of A - M M^T."""
    M = as_tensor(M)
    return (as_tensor(A) - M @ M.transpose()).frobenius()


def assignment_batch(parts: Sequence[Partition], n_p: int) -> np.ndarray:
    n = parts[0].n
    out = np.zeros((len(parts), n, n_p))
    rows = np.arange(n)
    for b, P in enumerate(parts):
        out[b, rows, P.labels()] = 1.0
    return out


class RegionEncoder(Module):
    """Agent embedding followed by coarsening into region embeddings."""

    def __init__(self, d_obs: int = 12, d: int = 64, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.embed = GraphEmbed(d_obs, d, 2, rng=rng)
        self.refine = GraphEmbed(d, d, 1, rng=rng)
        self.d = d

    def agents(self, F, obs) -> Tensor:
        return self.embed(F, obs)

    def regions(self, M, F, Xa) -> Tensor:
        return coarsen(M, F, Xa, self.refine)[2]


class PartitionValueNet(Module):
    """Learned value of a partition under the current flow and observations."""

    def __init__(self, d_obs: int = 12, d: int = 64, hidden: int = 32, n_p: int = 4,
                 rng: Optional[np.random.Generator] = None, lr: float = 5e-4):
        rng = rng or np.random.default_rng(0)
        self.encoder = RegionEncoder(d_obs, d, rng)
        self.head = MLP([d, hidden, 1], rng=rng)
        self.n_p = n_p
        self.opt = RMSProp(self.parameters(), lr=lr)

    def forward(self, F, obs, M) -> Tensor:
        """Values for a batch of assignments ``M`` of shape (B, n, n_p)."""
        Xa = self.encoder.agents(F, obs)
        Xhat = self.encoder.regions(M, F, Xa)  # B x n_p x d
        live = (np.asarray(M.data if isinstance(M, Tensor) else M).sum(axis=-2) > 0).astype(np.float64)
        pooled = (Xhat * live[..., None]).sum(axis=-2) / live.sum(axis=-1, keepdims=True)
        return self.head(pooled).reshape(-1)

    def values(self, F, obs, parts: Sequence[Partition]) -> np.ndarray:
        if max(p.m for p in parts) > self.n_p:
            raise ValueError(f"partition has more than n_p={self.n_p} regions")
        with no_grad():
            return self.forward(np.asarray(F), obs, assignment_batch(parts, self.n_p)).data.copy()

    def value(self, P: Partition, F, obs) -> float:
        return float(self.values(F, obs, [P])[0])

    def fit_batch(self, samples: Sequence[tuple]) -> float:
        """One RMSProp step of MSE regression on (F, obs, partition, target) samples."""
        F = np.stack([np.asarray(x[0], dtype=np.float64) for x in samples])
        obs = np.stack([np.asarray(x[1], dtype=np.float64) for x in samples])
        M = assignment_batch([x[2] for x in samples], self.n_p)
        target = np.array([x[3] for x in samples], dtype=np.float64)
        self.opt.zero_grad()
        loss = mse(self.forward(F, obs, M), target)
        loss.backward()
        self.opt.step()
        return loss.item()

    def fit(self, samples: Sequence[tuple], steps: int = 1) -> float:
        """MSE regression on (F, obs, partition, target) samples."""
        loss = None
        for _ in range(steps):
            self.opt.zero_grad()
            total = None
            for F, obs, P, target in samples:
                pred = self.forward(F, obs, assignment_batch([P], self.n_p))
                term = mse(pred, np.array([target]))
                total = term if total is None else total + term
            loss = total * (1.0 / len(samples))
            loss.backward()
            self.opt.step()
        return loss.item()


def partition_value(P: Partition, F, obs, net: PartitionValueNet) -> float:
    return net.value(P, F, obs)
