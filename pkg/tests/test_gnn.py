import numpy as np
import pytest

from afmrl.gnn import (
    GraphEmbed,
    GraphPool,
    PartitionValueNet,
    RegionEncoder,
    assignment_batch,
    aux_link_loss,
    coarsen,
    gnn_embed,
    gnn_pool,
    harden,
)
from afmrl.network import build_grid
from afmrl.nn import Tensor, no_grad
from afmrl.partition import Partition, PartitionSpace

from oracles import finite_difference_grad, random_flow


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


def _zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def test_embed_examples():
    rng = np.random.default_rng(0)
    g = GraphEmbed(5, 8, rng=rng)
    _zero(g)
    assert not gnn_embed(np.zeros((4, 4)), rng.normal(size=(4, 5)), g).data.any()
    # single node: (0 + I) X W twice, a plain two-layer ReLU MLP without bias
    g = GraphEmbed(3, 4, rng=rng)
    x = rng.normal(size=(1, 3))
    W0, W1 = g.weights[0].data, g.weights[1].data
    expected = np.maximum(np.maximum(x @ W0, 0) @ W1, 0)
    np.testing.assert_allclose(g(np.zeros((1, 1)), x).data, expected, atol=1e-14)
    with pytest.raises(ValueError):
        g(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        g(np.zeros((2, 2)), np.zeros((3, 3)))


def test_embed_matches_direct_formula():
    rng = np.random.default_rng(1)
    g = GraphEmbed(3, 5, rng=rng)
    F, X = rng.random((4, 4)), rng.normal(size=(4, 3))
    Ft = F / F.sum(axis=1, keepdims=True)
    h = X
    for W in g.weights:
        h = np.maximum((Ft + np.eye(4)) @ h @ W.data, 0)
    np.testing.assert_allclose(g(F, X).data, h, atol=1e-13)


def test_embed_permutation_equivariance():
    rng = np.random.default_rng(2)
    g = GraphEmbed(6, 8, rng=rng)
    for _ in range(10):
        F, X = rng.random((7, 7)) * (rng.random((7, 7)) < 0.5), rng.normal(size=(7, 6))
        perm = rng.permutation(7)
        a = g(F, X).data[perm]
        b = g(F[np.ix_(perm, perm)], X[perm]).data
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_pool_examples():
    rng = np.random.default_rng(3)
    pool = GraphPool(12, 4, 16, rng)
    F, obs = rng.random((6, 6)), rng.integers(0, 5, size=(6, 12)).astype(float)
    M = gnn_pool(F, obs, pool).data
    np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(M, gnn_pool(F, obs, pool).data)
    _zero(pool)
    np.testing.assert_array_equal(gnn_pool(F, obs, pool).data, np.full((6, 4), 0.25))


def test_harden_examples():
    P, hard = harden(np.eye(2))
    assert P == Partition.from_regions([[0], [1]])
    P, hard = harden(np.full((3, 4), 0.25))
    assert P == Partition.single(3) and hard[:, 0].all() and not hard[:, 1:].any()
    rng = np.random.default_rng(4)
    for _ in range(20):
        M = rng.dirichlet(np.ones(4), size=9)
        P, hard = harden(M)
        for a in range(9):
            best = max(range(4), key=lambda k: (M[a, k], -k))
            assert hard[a, best] == 1.0 and hard[a].sum() == 1.0
        assert sum(len(r) for r in P.regions) == 9


def test_coarsen_examples():
    rng = np.random.default_rng(5)
    F, Xa = rng.random((4, 4)), rng.normal(size=(4, 3))
    Fc, Xp, _ = coarsen(np.eye(4), F, Xa)
    assert np.array_equal(Fc.data, F) and np.array_equal(Xp.data, Xa)
    # two blocks with no flow between them
    F = np.zeros((4, 4))
    F[0, 1], F[1, 0], F[2, 3] = 0.5, 0.2, 0.7
    M = assignment_batch([Partition.from_regions([[0, 1], [2, 3]])], 2)[0]
    Fc, _, _ = coarsen(M, F, Xa)
    assert Fc.data[0, 1] == 0.0 and Fc.data[1, 0] == 0.0
    assert Fc.data[0, 0] == pytest.approx(0.7) and Fc.data[1, 1] == pytest.approx(0.7)
    with pytest.raises(ValueError):
        coarsen(np.eye(3), F, Xa)


def test_coarsen_conserves_flow_and_zeroes_empty_regions():
    rng = np.random.default_rng(6)
    enc = RegionEncoder(12, 8, rng)
    net = build_grid(3, 3)
    for _ in range(20):
        F = random_flow(net, rng)
        labels = rng.integers(0, 3, size=9)  # region 3 stays empty
        M = np.zeros((9, 4))
        M[np.arange(9), labels] = 1.0
        Xa = enc.agents(F, rng.normal(size=(9, 12)))
        Fc, Xp, Xhat = coarsen(M, F, Xa, enc.refine)
        assert abs(Fc.data.sum() - F.sum()) <= 1e-12
        empty = M.sum(axis=0) == 0
        assert not Xhat.data[empty].any() and not Xp.data[empty].any()


def test_aux_link_loss():
    M = np.eye(2)
    assert aux_link_loss(M, M @ M.T).item() == 0.0
    assert aux_link_loss(M, np.eye(2)).item() == 0.0
    rng = np.random.default_rng(7)
    for _ in range(10):
        M, A = rng.random((5, 3)), (rng.random((5, 5)) < 0.4).astype(float)
        D = A - M @ M.T
        assert aux_link_loss(M, A).item() == pytest.approx(np.sqrt((D ** 2).sum()), abs=1e-12)


def test_value_net_zero_and_symmetry():
    rng = np.random.default_rng(8)
    net = build_grid(2, 3)
    vn = PartitionValueNet(12, 16, 8, 4, rng)
    F, obs = random_flow(net, rng), rng.integers(0, 6, size=(6, 12)).astype(float)
    parts = PartitionSpace(net, 4, 1).enumerate()[:40]
    v = vn.values(F, obs, parts)
    assert v.shape == (40,) and np.all(np.isfinite(v))
    # batched and one-at-a-time agree
    np.testing.assert_allclose(v[:5], [vn.value(p, F, obs) for p in parts[:5]], atol=1e-12)
    # relabeling agents consistently in (P, F, obs) leaves the value unchanged
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    for P in parts[:10]:
        Pp = Partition.from_labels(P.labels()[perm])
        a = vn.value(P, F, obs)
        b = vn.value(Pp, F[np.ix_(perm, perm)], obs[perm])
        assert a == pytest.approx(b, abs=1e-12)
    assert np.array_equal(inv[perm], np.arange(6))
    zero = PartitionValueNet(12, 16, 8, 4, rng)
    _zero(zero)
    assert not zero.values(F, obs, parts).any()


def test_value_net_training_sanity():
    rng = np.random.default_rng(9)
    net = build_grid(2, 2)
    parts = PartitionSpace(net, 4, 1).enumerate()
    F, obs = random_flow(net, rng), rng.integers(0, 6, size=(4, 12)).astype(float)
    table = {P: float(rng.normal()) for P in parts}
    vn = PartitionValueNet(12, 16, 16, 4, rng, lr=3e-3)
    samples = [(F, obs, P, r) for P, r in table.items()]

    def err():
        return float(np.mean((vn.values(F, obs, parts) - np.array([table[p] for p in parts])) ** 2))

    start = err()
    vn.fit(samples, steps=500)
    assert err() <= 0.2 * start


def _grad_check(loss_fn, params, tol=1e-4):
    for p in params:
        p.grad = None
    loss_fn().backward()
    for p in params:
        num = finite_difference_grad(lambda: loss_fn().item(), p.data, eps=1e-6)
        assert _rel_err(p.grad, num) < tol


def test_pooling_path_gradients():
    rng = np.random.default_rng(10)
    net = build_grid(2, 2)
    for _ in range(3):
        pool = GraphPool(12, 3, 6, rng)
        enc = RegionEncoder(12, 6, rng)
        F, obs = random_flow(net, rng), rng.normal(size=(4, 12))
        A = net.undirected.astype(float)

        def loss():
            M = pool(F, obs)
            Xhat = enc.regions(M, F, enc.agents(F, obs))
            return (Xhat * Xhat).sum() * 0.01 + aux_link_loss(M, A)

        _grad_check(loss, pool.parameters() + enc.parameters())


def test_value_path_gradients():
    rng = np.random.default_rng(11)
    net = build_grid(2, 3)
    parts = PartitionSpace(net, 4, 1).enumerate()
    for _ in range(3):
        vn = PartitionValueNet(12, 6, 5, 4, rng)
        F, obs = random_flow(net, rng), rng.normal(size=(6, 12))
        M = assignment_batch([parts[k] for k in rng.choice(len(parts), 4)], 4)
        target = rng.normal(size=4)

        def loss():
            d = vn.forward(F, obs, M) - target
            return (d * d).mean()

        _grad_check(loss, vn.parameters())


def test_soft_assignment_gradient_reaches_flow_through_coarsening():
    rng = np.random.default_rng(12)
    M = Tensor(rng.dirichlet(np.ones(3), size=4), requires_grad=True)
    F = rng.random((4, 4))
    enc = RegionEncoder(2, 4, rng)
    Xa = rng.normal(size=(4, 4))

    def loss():
        return (enc.regions(M, F, Xa) ** 2).sum()

    M.grad = None
    loss().backward()
    num = finite_difference_grad(lambda: loss().item(), M.data)
    assert _rel_err(M.grad, num) < 1e-4
    with no_grad():
        assert not loss().requires_grad
