"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed as the tests run (visible with ``-s``) and repeated in
the terminal summary by ``conftest.py``.
"""
import copy
import time

import numpy as np
import pytest

from afmrl import cli
from afmrl.feudal import FeudalConfig, ManagerNet, ManagerTransition, MixingNetwork, qmix_loss, train, \
    train_a2c_reference
from afmrl.gnn import GraphEmbed, GraphPool, PartitionValueNet, RegionEncoder, aux_link_loss, coarsen, propagate
from afmrl.mcts import MCTS, SearchConfig
from afmrl.network import build_grid
from afmrl.nn import MLP, Dense, Tensor, mse
from afmrl.partition import Partition, PartitionSpace, ncut
from afmrl.sim import ArrivalProcess, FixedTime, Scenario, reset, run_episode, step, write_metrics_csv

from oracles import brute_connected_partitions, direct_ncut, finite_difference_grad, is_terminal, random_flow

RESULTS = []


def report(k: int, ok: bool, detail: str):
    line = f"CRITERION {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _random_graph(rng, n):
    """Random connected undirected graph on n nodes, as a grid-free network."""
    from afmrl.network import Edge, TrafficNetwork

    order = rng.permutation(n)
    pairs = {tuple(sorted((int(order[k]), int(order[rng.integers(0, k)])))) for k in range(1, n)}
    for _ in range(rng.integers(0, n + 1)):
        a, b = rng.choice(n, size=2, replace=False)
        pairs.add(tuple(sorted((int(a), int(b)))))
    edges = [Edge(a, b) for a, b in sorted(pairs)] + [Edge(b, a) for a, b in sorted(pairs)]
    return TrafficNetwork(list(range(n)), edges, None)


# ---------------------------------------------------------------------------
# 1


def test_criterion_1_ncut_oracle_equivalence():
    rng = np.random.default_rng(101)
    cases = []
    for _ in range(200):
        n = int(rng.integers(2, 9))
        net = _random_graph(rng, n)
        F = random_flow(net, rng, density=float(rng.uniform(0.3, 1.0)))
        labels = rng.integers(0, int(rng.integers(1, n + 1)), size=n)
        cases.append((F, Partition.from_labels(labels)))
    ncut(cases[0][0], cases[0][1])  # compile the kernel outside the timed loop
    tic = time.perf_counter()
    worst = 0.0
    for F, P in cases:
        worst = max(worst, abs(ncut(F, P) - direct_ncut(F, P.regions)))
    secs = time.perf_counter() - tic
    report(1, worst <= 1e-12 and secs < 1.0, f"200 triples, max |diff| {worst:.1e}, {secs:.3f} s")


# ---------------------------------------------------------------------------
# 2


def test_criterion_2_mcts_exact_with_unlimited_budget():
    nets = [(f"path{n}", build_grid(1, n)) for n in range(2, 9)]
    nets += [(f"grid{r}x{c}", build_grid(r, c)) for r, c in ((2, 2), (2, 3), (2, 4))]
    settings = [(4, 1), (4, 2), (3, 1)]
    rng = np.random.default_rng(202)
    tic = time.perf_counter()
    mismatches, checked = [], 0
    for name, net in nets:
        und = net.adjacency | net.adjacency.T
        parts_all = brute_connected_partitions(net, 4, 1)
        for m_max, min_region in settings:
            cands = [r for r in parts_all if len(r) <= m_max and min(len(x) for x in r) >= min_region
                     and is_terminal(r, und, m_max, min_region)]
            if not cands:
                continue
            space = PartitionSpace(net, m_max, min_region)
            cand_p = [Partition.from_regions(r, net.n) for r in cands]
            for _ in range(20):
                F = random_flow(net, rng, density=float(rng.uniform(0.4, 1.0)))
                oracle = max(-ncut(F, P) for P in cand_p)
                oracle_direct = max(-direct_ncut(F, r) for r in cands)
                res = MCTS(space, SearchConfig(m_max=m_max, min_region=min_region)).search(F)
                checked += 1
                if res.value != oracle or abs(res.value - oracle_direct) > 1e-12 or not res.exhausted:
                    mismatches.append((name, m_max, min_region, res.value, oracle))
    secs = time.perf_counter() - tic
    report(2, not mismatches and secs < 30.0,
           f"{checked} searches on {len(nets)} networks, {len(mismatches)} mismatches, {secs:.1f} s")


# ---------------------------------------------------------------------------
# 3


def test_criterion_3_mcts_budget_efficiency():
    scenario = Scenario(build_grid(4, 4), ArrivalProcess(rate=300), horizon=100)
    tic = time.perf_counter()
    rows = cli.bench_partition(scenario, budgets=(0.25,), count=10, seed=303, warmup=60, source="sim", gnn=False)
    secs = time.perf_counter() - tic
    mc = [r for r in rows if r["method"] == "mcts@0.25"]
    hits = sum(r["ratio"] >= 0.95 for r in mc)
    within = all(r["evaluations"] <= r["budget"] for r in mc)
    budget = mc[0]["budget"]
    enum_evals = [r for r in rows if r["method"] == "enum"][0]["evaluations"]
    report(3, hits >= 9 and within and secs < 120.0,
           f"budget {budget}/{enum_evals} evaluations, >=95% of optimum on {hits}/10, "
           f"mean ratio {np.mean([r['ratio'] for r in mc]):.4f}, {secs:.1f} s")


# ---------------------------------------------------------------------------
# 4


def _rel_err(g, num):
    """Norm-wise relative error of one parameter tensor's gradient."""
    g = np.zeros_like(num) if g is None else g
    scale = np.linalg.norm(g) + np.linalg.norm(num)
    return float(np.linalg.norm(g - num) / scale) if scale > 0 else 0.0


def _jiggle(module, rng, scale=0.1):
    # move zero-initialised biases off ReLU kinks
    for p in module.parameters():
        p.data += rng.normal(size=p.data.shape) * scale


def _case_dense(rng):
    act = rng.choice(["identity", "relu", "tanh", "elu"])
    layer = Dense(int(rng.integers(1, 5)), int(rng.integers(1, 5)), act, rng=rng)
    _jiggle(layer, rng)
    x = Tensor(rng.normal(size=(3, layer.W.shape[0])), requires_grad=True)
    w = rng.normal(size=(3, layer.W.shape[1]))
    return f"dense-{act}", lambda: (layer(x) * w).sum(), layer.parameters() + [x]


def _case_mlp(rng):
    sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(2, 5)))]
    net = MLP(sizes, activation=rng.choice(["relu", "tanh", "elu"]), rng=rng)
    _jiggle(net, rng)
    x = rng.normal(size=(4, sizes[0]))
    y = rng.normal(size=(4, sizes[-1]))
    return "mlp", lambda: mse(net(x), y), net.parameters()


def _case_ops(rng):
    a = Tensor(rng.normal(size=(3, 4)) + 0.1, requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

    def f():
        return ((a.softmax(-1) * b).sum() + a.log_softmax(-1).sum() * 0.3 + b.sqrt().sum() + b.log().sum()
                + (a * b).row_normalize().sum() + a.frobenius() + a.abs().exp().mean())
    return "tensor-ops", f, [a, b]


def _case_propagate(rng):
    n, d_in, d_out = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    F = np.where(rng.random((n, n)) < 0.5, rng.random((n, n)), 0.0)
    X = Tensor(rng.normal(size=(n, d_in)), requires_grad=True)
    W = Tensor(rng.normal(size=(d_in, d_out)), requires_grad=True)
    w = rng.normal(size=(n, d_out))
    return "propagate", lambda: (propagate(F, X, W) * w).sum(), [X, W]


def _case_pool_path(rng):
    n, d_obs, n_p = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
    F = np.where(rng.random((n, n)) < 0.6, rng.random((n, n)), 0.0)
    obs = rng.normal(size=(n, d_obs))
    pool = GraphPool(d_obs, n_p, d=4, rng=rng)
    enc = RegionEncoder(d_obs, 3, rng=rng)
    A = (rng.random((n, n)) < 0.4).astype(float)
    w = rng.normal(size=(n_p, 3))

    def f():
        M = pool(F, obs)
        Xa = enc.agents(F, obs)
        Fc, _, Xhat = coarsen(M, F, Xa, enc.refine)
        return (Xhat * w).sum() + Fc.sum() * 0.1 + aux_link_loss(M, A)
    return "pooling-path", f, pool.parameters() + enc.parameters()


def _case_value_path(rng):
    n = int(rng.integers(3, 7))
    net = PartitionValueNet(d_obs=5, d=4, hidden=3, n_p=3, rng=rng)
    _jiggle(net, rng)
    F = np.where(rng.random((n, n)) < 0.6, rng.random((n, n)), 0.0)
    obs = rng.normal(size=(n, 5))
    M = np.zeros((2, n, 3))
    for b in range(2):
        M[b, np.arange(n), rng.integers(0, 3, size=n)] = 1.0
    y = rng.normal(size=2)
    return "value-path", lambda: mse(net.forward(F, obs, M), y), net.parameters()


def _case_qmix_path(rng):
    n, n_p = int(rng.integers(3, 6)), int(rng.integers(2, 4))
    gnn_mode = bool(rng.integers(0, 2))
    net = ManagerNet(n, n_p, d=3, pool=gnn_mode, rng=rng)
    _jiggle(net, rng, 0.05)
    target = copy.deepcopy(net)
    batch = []
    for _ in range(3):
        M = np.zeros((n, n_p))
        M[np.arange(n), rng.integers(0, n_p, size=n)] = 1.0
        mask = (M.sum(axis=0) > 0).astype(float)
        batch.append(ManagerTransition(
            F=rng.random((n, n)), obs=rng.normal(size=(n, 12)), s=rng.random(n), M=None if gnn_mode else M,
            mask=mask, actions=rng.integers(0, 4, size=n_p), reward=float(rng.normal()), F2=rng.random((n, n)),
            obs2=rng.normal(size=(n, 12)), s2=rng.random(n), M2=None if gnn_mode else M, mask2=mask,
            terminal=bool(rng.integers(0, 2))))
    A = (rng.random((n, n)) < 0.5).astype(float)
    return ("qmix-gnn-path" if gnn_mode else "qmix-path"), lambda: qmix_loss(batch, net, target, 0.9, A)[0], \
        net.parameters()


def _case_mixer(rng):
    n_p, sd = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    mixer = MixingNetwork(n_p, sd, embed=3, rng=rng)
    q = Tensor(rng.normal(size=(4, n_p)), requires_grad=True)
    s = rng.normal(size=(4, sd))
    return "mixer", lambda: (mixer(q, s) ** 2).sum(), mixer.parameters() + [q]


def _case_embed_stack(rng):
    n = int(rng.integers(2, 6))
    model = GraphEmbed(3, 4, int(rng.integers(1, 4)), rng=rng, last_linear=bool(rng.integers(0, 2)))
    F = np.where(rng.random((n, n)) < 0.6, rng.random((n, n)), 0.0)
    X = rng.normal(size=(n, 3))
    w = rng.normal(size=(n, 4))
    return "graph-embed", lambda: (model(F, X) * w).sum(), model.parameters()


GRAD_CASES = [_case_dense, _case_mlp, _case_ops, _case_propagate, _case_pool_path, _case_value_path,
              _case_qmix_path, _case_mixer, _case_embed_stack]


def test_criterion_4_gradient_integrity():
    tic = time.perf_counter()
    worst, failures, kinds = 0.0, [], set()
    for k in range(100):
        rng = np.random.default_rng(4000 + k)
        name, f, params = GRAD_CASES[k % len(GRAD_CASES)](rng)
        kinds.add(name)
        for p in params:
            p.grad = None
        f().backward()
        for p in params:
            num = finite_difference_grad(lambda: f().item(), p.data)
            err = _rel_err(p.grad, num)
            worst = max(worst, err)
            if err >= 1e-4:
                failures.append((k, name, err))
    secs = time.perf_counter() - tic
    report(4, not failures and secs < 120.0,
           f"100 configurations over {len(kinds)} graph kinds, worst rel err {worst:.1e}, "
           f"{len(failures)} failures, {secs:.1f} s")


# ---------------------------------------------------------------------------
# 5


def test_criterion_5_qmix_monotonicity():
    tic = time.perf_counter()
    negatives, probes = 0, 0
    for k in range(10):
        rng = np.random.default_rng(500 + k)
        n, n_p = 16, 4
        net = ManagerNet(n, n_p, d=8, rng=rng)
        emb = rng.normal(size=(100, n_p, 8)) * 3
        with_q = net.qnet(emb).data
        chosen = np.take_along_axis(with_q, rng.integers(0, 4, size=(100, n_p, 1)), axis=-1)[..., 0]
        q = Tensor(chosen, requires_grad=True)
        s = rng.normal(size=(100, n)) * 2
        net.mixer(q, s).sum().backward()
        negatives += int((q.grad < 0).sum())
        probes += 100
    secs = time.perf_counter() - tic
    report(5, negatives == 0 and probes == 1000 and secs < 10.0,
           f"{probes} probes x 4 regions, {negatives} negative partials, {secs:.2f} s")


# ---------------------------------------------------------------------------
# 6


def test_criterion_6_coarsening_conservation():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(100):
        n, n_p = int(rng.integers(2, 17)), int(rng.integers(1, 5))
        F = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
        M = np.zeros((n, n_p))
        M[np.arange(n), rng.integers(0, n_p, size=n)] = 1.0
        Fc, _, _ = coarsen(M, F, rng.normal(size=(n, 3)))
        worst = max(worst, abs(Fc.data.sum() - F.sum()))
    n = 9
    F, Xa = rng.random((n, n)), rng.normal(size=(n, 5))
    Fc, Xp, _ = coarsen(np.eye(n), F, Xa)
    identity = np.array_equal(Fc.data, F) and np.array_equal(Xp.data, Xa)
    report(6, worst <= 1e-12 and identity, f"100 cases, max |sum diff| {worst:.1e}, identity exact: {identity}")


# ---------------------------------------------------------------------------
# 7 and 10 share the training runs


PROTOCOL = {
    "scenario": {"builtin": "shifting", "horizon": 360},
    "seeds": [0, 1, 2, 3, 4],
    "episodes": 400,
    "static_partition": "quadrants",
    "feudal": {},
}


@pytest.fixture(scope="module")
def shifting_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("protocol")
    tag = cli.config_hash(PROTOCOL)
    tic = time.perf_counter()
    runs = {mode: cli.run_mode(PROTOCOL, mode, out, tag) for mode in ("mcts", "static", "baseline:fixed")}
    return runs, time.perf_counter() - tic


def test_criterion_7_learning_ordering(shifting_runs):
    runs, secs = shifting_runs
    seeds = PROTOCOL["seeds"]
    att = {m: {s: cli.final_window(runs[m][s], window=50) for s in seeds} for m in runs}
    beat_fixed = sum(att["mcts"][s] < att["baseline:fixed"][s] for s in seeds)
    beat_static = sum(att["mcts"][s] < att["static"][s] for s in seeds)
    per_seed = "; ".join(f"seed {s}: mcts {att['mcts'][s]:.1f} static {att['static'][s]:.1f} "
                         f"fixed {att['baseline:fixed'][s]:.1f}" for s in seeds)
    print(per_seed)
    report(7, beat_fixed >= 4 and beat_static >= 4 and secs <= 7200,
           f"final-50 travel time: mcts beats fixed-time {beat_fixed}/5, static {beat_static}/5; "
           f"means mcts {np.mean(list(att['mcts'].values())):.1f} s, static "
           f"{np.mean(list(att['static'].values())):.1f} s, fixed {np.mean(list(att['baseline:fixed'].values())):.1f}"
           f" s; {secs / 60:.0f} min [{per_seed}]")


def test_criterion_10_ncut_adaptivity(shifting_runs):
    runs, _ = shifting_runs
    chosen = np.array([[r["mean_ncut"] for r in runs["mcts"][s]] for s in PROTOCOL["seeds"]])
    quad = np.array([[r["reference_ncut"] for r in runs["mcts"][s]] for s in PROTOCOL["seeds"]])
    seeds_lower = int(np.sum(chosen.mean(axis=1) < quad.mean(axis=1)))
    report(10, chosen.mean() < quad.mean(),
           f"time-averaged Ncut: mcts-chosen {chosen.mean():.3f} vs quadrants {quad.mean():.3f} "
           f"on the same snapshots (lower in {seeds_lower}/5 seeds)")


# ---------------------------------------------------------------------------
# 8


def test_criterion_8_degenerate_equivalence():
    cases = [
        (Scenario(build_grid(2, 2), ArrivalProcess(rate=300), horizon=90), 4, 11),
        (cli.build_scenario({"builtin": "shifting", "horizon": 120}), 2, 12),
    ]
    matches = []
    for sc, episodes, seed in cases:
        cfg = FeudalConfig(mode="static", static_partition=[list(range(sc.network.n))], w_g=0.0,
                           worker_sees_goal=False)
        ours = train(sc, cfg, episodes, seed).series("mean_reward").tolist()
        ref = train_a2c_reference(sc, episodes, seed, interval=cfg.interval)
        matches.append(ours == ref)
    report(8, all(matches), f"bit-identical episode rewards on {sum(matches)}/{len(matches)} runs")


# ---------------------------------------------------------------------------
# 9


def test_criterion_9_simulator_conservation_and_determinism(tmp_path):
    rng = np.random.default_rng(909)
    violations, steps = 0, 0
    for ep in range(100):
        r, c = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        kind = rng.choice(["gaussian", "constant"])
        sc = Scenario(build_grid(r, c), ArrivalProcess(kind=kind, rate=float(rng.uniform(0, 900))),
                      horizon=int(rng.integers(20, 80)), turn_probs=tuple(rng.dirichlet([1, 1, 1])))
        state = reset(sc, int(rng.integers(2**31)))
        for _ in range(sc.horizon):
            step(state, rng.integers(0, 8, size=state.n))
            steps += 1
            violations += not state.conserved()
    sc = Scenario(build_grid(3, 3), ArrivalProcess(rate=500), horizon=200)
    for name in ("a.csv", "b.csv"):
        write_metrics_csv(run_episode(FixedTime(), sc, seed=42), tmp_path / name)
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    report(9, violations == 0 and same,
           f"100 random episodes, {steps} steps, {violations} conservation violations; identical metric files: {same}")
