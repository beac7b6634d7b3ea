"""Feudal control: Qmix managers pick a sub-goal per region every interval,
A2C workers pick a phase per intersection every step.

Workers share one actor and one critic. Each manager scores the four
sub-goals from its region embedding with a shared Q head, and a monotone
mixing network combines the chosen values into a team value.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .gnn import GraphPool, RegionEncoder, assignment_batch, aux_link_loss, harden
from .mcts import MCTS, AlphaSchedule, SearchConfig, exhaustive_best
from .network import N_LANES, N_PHASES, lane_index
from .nn import MLP, Dense, Module, RMSProp, Tensor, no_grad, save_checkpoint
from .partition import ENUM_MAX_NODES, Partition, PartitionSpace, ncut, quadrant_partition
from .sim import Scenario, average_travel_time, flow_snapshot, reset, step

N_SUBGOALS = 4
SUBGOAL_NAMES = ("ns_through", "ew_through", "ns_left", "ew_left")


def _emphasis() -> np.ndarray:
    lanes = {
        0: [("N", "straight"), ("N", "right"), ("S", "straight"), ("S", "right")],
        1: [("E", "straight"), ("E", "right"), ("W", "straight"), ("W", "right")],
        2: [("N", "left"), ("N", "straight"), ("S", "left"), ("S", "straight")],
        3: [("E", "left"), ("E", "straight"), ("W", "left"), ("W", "straight")],
    }
    out = np.zeros((N_SUBGOALS, N_LANES), dtype=bool)
    for g, movs in lanes.items():
        for a, k in movs:
            out[g, lane_index(a, k)] = True
    out.setflags(write=False)
    return out


EMPHASIS = _emphasis()  # (4, 12) lanes each sub-goal favours


@dataclass(frozen=True)
class SubGoal:
    id: int

    def __post_init__(self):
        if not 0 <= self.id < N_SUBGOALS:
            raise ValueError(f"sub-goal id must be in 0..{N_SUBGOALS - 1}")

    @property
    def name(self) -> str:
        return SUBGOAL_NAMES[self.id]

    @property
    def lanes(self) -> np.ndarray:
        return EMPHASIS[self.id]


def intrinsic_reward(obs, g, w_g: float = 0.5):
    """Negative queue on the lanes the sub-goal does not emphasise, times ``w_g``.

    ``obs`` may be one 12-vector or an (n, 12) stack with one goal per row.
    """
    if w_g < 0:
        raise ValueError("w_g must be >= 0")
    obs = np.asarray(obs, dtype=np.float64)
    g = np.asarray(g.id if isinstance(g, SubGoal) else g)
    off = ~EMPHASIS[g]
    sigma = -w_g * (obs * off).sum(axis=-1)
    return float(sigma) if sigma.ndim == 0 else sigma


def shaped_reward(r, obs, g, w_g: float = 0.5):
    return r + intrinsic_reward(obs, g, w_g)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class FeudalConfig:
    mode: str = "static"  # static | mcts | enum | gnn
    interval: int = 30  # manager interval T, steps
    gamma: float = 0.99
    manager_gamma: float = 0.99
    entropy: float = 0.01
    lr: float = 5e-4
    manager_lr: float = 5e-4
    value_lr: float = 5e-4
    w_g: float = 0.5
    worker_sees_goal: bool = True
    worker_hidden: tuple = (64, 32)
    d: int = 64
    m_max: int = 4
    min_region: int = 2
    mcts_budget: int = 1000
    mcts_c: float = math.sqrt(2.0)
    alpha_max: float = 0.5
    alpha_ramp: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.5
    buffer_capacity: int = 1000
    batch_size: int = 30
    target_sync: int = 200
    obs_scale: float = 0.1
    reward_scale: float = 0.01
    manager_reward_scale: float = 0.1
    value_buffer: int = 200
    value_batch: int = 16
    grad_clip: Optional[float] = 10.0
    static_partition: Optional[list] = None  # regions; quadrants when None on a grid
    managers: bool = True

    def __post_init__(self):
        if self.mode not in ("static", "mcts", "enum", "gnn"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        self.worker_hidden = tuple(self.worker_hidden)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# workers


class WorkerPolicy(Module):
    """Shared actor and critic over (scaled lane queues, one-hot sub-goal)."""

    def __init__(self, sees_goal: bool = True, hidden: Sequence[int] = (64, 32), obs_scale: float = 0.1,
                 rng: Optional[np.random.Generator] = None, lr: float = 5e-4, entropy: float = 0.01,
                 gamma: float = 0.99, grad_clip: Optional[float] = None):
        rng = rng or np.random.default_rng(0)
        self.sees_goal = sees_goal
        self.obs_scale = obs_scale
        self.entropy = entropy
        self.gamma = gamma
        n_in = N_LANES + (N_SUBGOALS if sees_goal else 0)
        self.actor = MLP([n_in, *hidden, N_PHASES], rng=rng)
        self.critic = MLP([n_in, *hidden, 1], rng=rng)
        self.actor_opt = RMSProp(self.actor.parameters(), lr=lr, clip=grad_clip)
        self.critic_opt = RMSProp(self.critic.parameters(), lr=lr, clip=grad_clip)

    def features(self, obs: np.ndarray, goals: np.ndarray) -> np.ndarray:
        x = np.asarray(obs, dtype=np.float64) * self.obs_scale
        if not self.sees_goal:
            return x
        onehot = np.zeros(x.shape[:-1] + (N_SUBGOALS,))
        np.put_along_axis(onehot, np.asarray(goals)[..., None], 1.0, axis=-1)
        return np.concatenate([x, onehot], axis=-1)

    def probs(self, feats: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.actor(feats).softmax(-1).data

    def act(self, feats: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        p = self.probs(feats)
        u = rng.random(p.shape[0])
        cdf = np.cumsum(p, axis=-1)
        a = np.minimum((cdf < u[:, None]).sum(axis=-1), N_PHASES - 1)
        return a, p

    def value(self, feats: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.critic(feats).data[..., 0]


def nstep_returns(rewards: np.ndarray, bootstrap: np.ndarray, gamma: float, terminal: bool = False) -> np.ndarray:
    """Discounted returns of a (T, n) reward block, bootstrapped after the last step."""
    R = np.zeros_like(bootstrap, dtype=np.float64) if terminal else np.asarray(bootstrap, dtype=np.float64)
    out = np.zeros_like(rewards, dtype=np.float64)
    for t in range(len(rewards) - 1, -1, -1):
        R = rewards[t] + gamma * R
        out[t] = R
    return out


def a2c_losses(policy: WorkerPolicy, x: np.ndarray, actions: np.ndarray, returns: np.ndarray):
    """(actor loss, critic loss, mean entropy) tensors on flat samples.

    The advantage is the return minus the critic value, held constant in the
    actor loss. Losses are means over samples.
    """
    v = policy.critic(x).reshape(-1)
    adv = returns - v.data
    d = v - returns
    value_loss = (d * d).mean()
    logp = policy.actor(x).log_softmax(-1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(actions)), actions] = 1.0
    chosen = (logp * onehot).sum(axis=-1)
    ent = -(logp.exp() * logp).sum(axis=-1).mean()
    actor_loss = -(chosen * adv).mean() - policy.entropy * ent
    return actor_loss, value_loss, ent


def a2c_update(policy: WorkerPolicy, feats: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
               next_feats: Optional[np.ndarray], terminal: bool = False) -> tuple[float, float, float]:
    """One actor and one critic RMSProp step on a (T, n) trajectory block."""
    if len(rewards) < 1:
        raise ValueError("empty trajectory")
    terminal = terminal or next_feats is None
    boot = np.zeros(rewards.shape[1]) if terminal else policy.value(next_feats)
    returns = nstep_returns(rewards, boot, policy.gamma, terminal)
    x = feats.reshape(-1, feats.shape[-1])
    policy.critic_opt.zero_grad()
    policy.actor_opt.zero_grad()
    actor_loss, value_loss, ent = a2c_losses(policy, x, np.asarray(actions).reshape(-1), returns.reshape(-1))
    value_loss.backward()
    actor_loss.backward()
    policy.critic_opt.step()
    policy.actor_opt.step()
    return actor_loss.item(), value_loss.item(), ent.item()


# ---------------------------------------------------------------------------
# managers


class MixingNetwork(Module):
    """Monotone mix of per-region values; hypernetworks map the global state to
    non-negative weights (absolute value) and free biases."""

    def __init__(self, n_p: int, state_dim: int, embed: int = 32, activation: str = "elu",
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.n_p, self.embed, self.activation = n_p, embed, activation
        self.hyper_w1 = Dense(state_dim, n_p * embed, rng=rng)
        self.hyper_b1 = Dense(state_dim, embed, rng=rng)
        self.hyper_w2 = Dense(state_dim, embed, rng=rng)
        self.hyper_b2 = MLP([state_dim, embed, 1], rng=rng)

    def weights(self, s) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        B = s.shape[0]
        w1 = self.hyper_w1(s).abs().reshape(B, self.n_p, self.embed)
        b1 = self.hyper_b1(s).reshape(B, 1, self.embed)
        w2 = self.hyper_w2(s).abs().reshape(B, self.embed, 1)
        b2 = self.hyper_b2(s).reshape(B, 1, 1)
        return w1, b1, w2, b2

    def __call__(self, q, s, mask=None) -> Tensor:
        """q: (B, n_p) chosen values, s: (B, state_dim), mask: (B, n_p) live regions."""
        q = q if isinstance(q, Tensor) else Tensor(q)
        s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
        B = s.shape[0]
        mask = np.ones((B, self.n_p)) if mask is None else np.asarray(mask, dtype=np.float64)
        w1, b1, w2, b2 = self.weights(s)
        w1 = w1 * mask[:, :, None]
        qm = (q * mask).reshape(B, 1, self.n_p)
        h = qm @ w1 + b1
        h = h.elu() if self.activation == "elu" else h
        return (h @ w2 + b2).reshape(B)


def mix(q, s, mixer: MixingNetwork, mask=None) -> Tensor:
    return mixer(q, s, mask)


class ManagerNet(Module):
    """Region encoder, shared per-region Q head and (in gnn mode) the pooling network."""

    def __init__(self, n: int, n_p: int = 4, d: int = 64, pool: bool = False,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.n_p = n_p
        self.encoder = RegionEncoder(N_LANES, d, rng)
        self.qnet = MLP([d, 64, N_SUBGOALS], rng=rng)
        self.mixer = MixingNetwork(n_p, n, 32, rng=rng)
        self.pool = GraphPool(N_LANES, n_p, d, rng) if pool else None

    def q_values(self, F, obs, M) -> Tensor:
        """(B, n_p, 4) Q-vectors; rows of empty regions come from zero embeddings."""
        Xa = self.encoder.agents(F, obs)
        return self.qnet(self.encoder.regions(M, F, Xa))


def manager_q(embeddings, qnet: MLP) -> Tensor:
    """Per-region Q-vectors from an (n_p, d) or (B, n_p, d) embedding stack."""
    return qnet(embeddings)


class ReplayBuffer:
    def __init__(self, capacity: int = 1000, rng: Optional[np.random.Generator] = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.items: list = []
        self.pos = 0
        self.rng = rng or np.random.default_rng(0)

    def __len__(self) -> int:
        return len(self.items)

    def add(self, item):
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            self.items[self.pos] = item
        self.pos = (self.pos + 1) % self.capacity

    def sample_indices(self, k: int) -> np.ndarray:
        if not self.items:
            raise ValueError("empty buffer")
        return self.rng.integers(0, len(self.items), size=k)

    def sample(self, k: int) -> list:
        return [self.items[i] for i in self.sample_indices(k)]


@dataclass
class ManagerTransition:
    F: np.ndarray
    obs: np.ndarray
    s: np.ndarray
    M: Optional[np.ndarray]  # (n, n_p) hard assignment; None in gnn mode (recomputed)
    mask: np.ndarray  # (n_p,) live regions
    actions: np.ndarray  # (n_p,)
    reward: float
    F2: np.ndarray
    obs2: np.ndarray
    s2: np.ndarray
    M2: Optional[np.ndarray]
    mask2: np.ndarray
    terminal: bool


def _stack(batch, name):
    return np.stack([getattr(b, name) for b in batch])


def _assignments(net: ManagerNet, F, obs, M, grad: bool):
    if M is not None:
        return M
    if grad:
        return net.pool(F, obs)
    with no_grad():
        return net.pool(F, obs).data


def qmix_loss(batch: Sequence[ManagerTransition], net: ManagerNet, target: ManagerNet, gamma: float,
              adjacency: Optional[np.ndarray] = None) -> tuple[Tensor, np.ndarray]:
    """Half mean squared TD error of the mixed value (plus the link loss in gnn mode)."""
    if not batch:
        raise ValueError("empty batch")
    F, obs, s = _stack(batch, "F"), _stack(batch, "obs"), _stack(batch, "s")
    F2, obs2, s2 = _stack(batch, "F2"), _stack(batch, "obs2"), _stack(batch, "s2")
    mask, mask2 = _stack(batch, "mask"), _stack(batch, "mask2")
    act = _stack(batch, "actions")
    r = np.array([b.reward for b in batch])
    done = np.array([b.terminal for b in batch], dtype=np.float64)
    gnn = batch[0].M is None
    M = _assignments(net, F, obs, None if gnn else _stack(batch, "M"), True)
    with no_grad():
        M2 = _assignments(target, F2, obs2, None if gnn else _stack(batch, "M2"), False)
        q2 = target.q_values(F2, obs2, M2).data.max(axis=-1)
        y = r + gamma * (1.0 - done) * target.mixer(q2, s2, mask2).data
    Q = net.q_values(F, obs, M)
    onehot = np.zeros(Q.shape)
    np.put_along_axis(onehot, act[..., None], 1.0, axis=-1)
    chosen = (Q * onehot).sum(axis=-1)
    qtot = net.mixer(chosen, s, mask)
    d = qtot - y
    loss = (d * d).mean() * 0.5
    if gnn and adjacency is not None:
        link = None
        for b in range(len(batch)):
            term = aux_link_loss(M[b], adjacency)
            link = term if link is None else link + term
        loss = loss + link * (1.0 / len(batch))
    return loss, y


def qmix_update(batch, net: ManagerNet, target: ManagerNet, opt: RMSProp, gamma: float,
                adjacency: Optional[np.ndarray] = None) -> float:
    opt.zero_grad()
    loss, _ = qmix_loss(batch, net, target, gamma, adjacency)
    loss.backward()
    opt.step()
    return loss.item()


def sync_target(net: Module, target: Module):
    target.load_state_dict(net.state_dict())


# ---------------------------------------------------------------------------
# training


@dataclass
class EpisodeLog:
    episode: int
    mean_reward: float
    average_travel_time: float
    average_queue: float
    partition_changes: int
    mean_ncut: float
    alpha: float
    epsilon: float
    partitions: list = field(default_factory=list)  # (step, regions, ncut, value)
    reference_ncut: float = float("nan")  # quadrant partition on the same snapshots (grids only)


@dataclass
class TrainResult:
    logs: list[EpisodeLog]
    config: FeudalConfig
    timings: dict
    workers: WorkerPolicy
    managers: Optional[ManagerNet]
    value_net: object = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(l, name) for l in self.logs])


def episode_seed(seed: int, episode: int) -> int:
    """Simulator seed for one episode; shared across partition modes."""
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def _streams(seed: int):
    # worker init, worker sampling, manager init, manager exploration, replay, value net
    kids = np.random.SeedSequence(seed).spawn(6)
    return [np.random.default_rng(k) for k in kids]


def default_static_partition(scenario: Scenario, config: FeudalConfig) -> Partition:
    n = scenario.network.n
    if config.static_partition is not None:
        return Partition.from_regions(config.static_partition, n)
    if scenario.network.shape is None:
        raise ValueError("static mode on a non-grid network needs an explicit partition")
    return quadrant_partition(*scenario.network.shape)


class FeudalTrainer:
    def __init__(self, scenario: Scenario, config: FeudalConfig, seed: int = 0, episodes: int = 1):
        net = scenario.network
        if config.mode == "enum" and net.n > ENUM_MAX_NODES:
            raise ValueError(f"enum mode needs at most {ENUM_MAX_NODES} intersections")
        self.scenario, self.config, self.seed = scenario, config, seed
        self.episodes = max(episodes, 1)
        self.n = net.n
        self.n_p = config.m_max
        w_init, self.w_rng, m_init, self.m_rng, r_rng, v_init = _streams(seed)
        self.workers = WorkerPolicy(config.worker_sees_goal, config.worker_hidden, config.obs_scale, w_init,
                                    config.lr, config.entropy, config.gamma, config.grad_clip)
        self.managers = self.target = self.opt = None
        if config.managers:
            self.managers = ManagerNet(self.n, self.n_p, config.d, config.mode == "gnn", m_init)
            self.target = copy.deepcopy(self.managers)
            self.opt = RMSProp(self.managers.parameters(), lr=config.manager_lr, clip=config.grad_clip)
        self.buffer = ReplayBuffer(config.buffer_capacity, r_rng)
        self.adjacency = net.undirected.astype(np.float64)
        self.space = PartitionSpace(net, config.m_max, config.min_region) if config.mode in ("mcts", "enum") else None
        self.static = default_static_partition(scenario, config) if config.mode == "static" else None
        self.reference = quadrant_partition(*net.shape) if net.shape is not None else None
        if self.static is not None and self.static.m > self.n_p:
            raise ValueError(f"static partition has more than m_max={self.n_p} regions")
        self.value_net = None
        self.value_samples: list = []
        if config.mode in ("mcts", "enum") and config.alpha_max > 0:
            from .gnn import PartitionValueNet

            self.value_net = PartitionValueNet(N_LANES, config.d, 32, self.n_p, v_init, lr=config.value_lr)
        self.alpha = AlphaSchedule(config.alpha_max, config.alpha_ramp) if config.alpha_max > 0 else None
        self.updates = 0
        self.timings = {"sim": 0.0, "workers": 0.0, "partition": 0.0, "managers": 0.0, "value": 0.0}
        self.fallbacks = 0

    # -- schedules ----------------------------------------------------------
    def epsilon(self, episode: int) -> float:
        c = self.config
        span = max(1.0, c.eps_decay_frac * self.episodes)
        frac = min(1.0, episode / span)
        return c.eps_start + (c.eps_end - c.eps_start) * frac

    def alpha_at(self, episode: int) -> float:
        return self.alpha(episode) if self.alpha is not None else 0.0

    # -- partition choice ------------------------------------------------------
    def choose_partition(self, F: np.ndarray, obs: np.ndarray, episode: int):
        """Returns (partition, assignment or None for gnn, hard assignment, value)."""
        c = self.config
        if c.mode == "static":
            return self.static, assignment_batch([self.static], self.n_p)[0], None
        if c.mode == "gnn":
            with no_grad():
                M = self.managers.pool(F, obs).data
            P, hard = harden(M)
            return P, hard, None
        alpha = self.alpha_at(episode)
        valuer = self.value_net if alpha > 0 else None
        if c.mode == "mcts":
            cfg = SearchConfig(eval_budget=c.mcts_budget, c=c.mcts_c, m_max=c.m_max, min_region=c.min_region,
                               alpha=alpha)
            res = MCTS(self.space, cfg).search(F, obs, valuer)
            P, value = res.partition, res.value
        else:
            P, value, _ = exhaustive_best(self.space, F, obs, alpha, valuer)
        if P is None:
            self.fallbacks += 1
            P = quadrant_partition(*self.scenario.network.shape) if self.scenario.network.shape else \
                Partition.single(self.n)
            value = float("nan")
        return P, assignment_batch([P], self.n_p)[0], value

    def goals_for(self, hard: np.ndarray, region_goals: np.ndarray) -> np.ndarray:
        return region_goals[np.argmax(hard, axis=1)]

    def pick_goals(self, F, obs, M, mask, eps: float) -> np.ndarray:
        with no_grad():
            q = self.managers.q_values(F, obs, M).data
        greedy = np.argmax(q, axis=-1)
        explore = self.m_rng.random(self.n_p) < eps
        rand = self.m_rng.integers(0, N_SUBGOALS, size=self.n_p)
        goals = np.where(explore, rand, greedy)
        return np.where(mask > 0, goals, 0)

    # -- one episode -------------------------------------------------------------
    def run_episode(self, episode: int, learn: bool = True) -> EpisodeLog:
        c, T = self.config, self.config.interval
        scenario = self.scenario
        state = reset(scenario, episode_seed(self.seed, episode))
        H = scenario.horizon
        eps = self.epsilon(episode)
        alpha = self.alpha_at(episode)
        goals = np.zeros(self.n, dtype=np.int64)
        feats_buf, act_buf, rew_buf = [], [], []
        reward_sum = 0.0
        queue_sum = 0.0
        prev = None  # (F, obs, s, M, mask, actions, local_steps, partition)
        changes, ncuts, ref_ncuts, trace = 0, [], [], []
        last_P = None
        for t in range(H):
            if t % T == 0:
                obs = state.queue.astype(np.float64)
                if t > 0 and learn and feats_buf:
                    self._worker_update(feats_buf, act_buf, rew_buf, obs, goals)
                    feats_buf, act_buf, rew_buf = [], [], []
                tic = time.perf_counter()
                F = flow_snapshot(state).density
                P, M, value = self.choose_partition(F, obs, episode)
                self.timings["partition"] += time.perf_counter() - tic
                hard = M
                mask = (hard.sum(axis=0) > 0).astype(np.float64)
                nc = ncut(F, P)
                ncuts.append(nc)
                if self.reference is not None:
                    ref_ncuts.append(ncut(F, self.reference))
                trace.append((t, P.regions, nc, value))
                if last_P is not None and P != last_P:
                    changes += 1
                last_P = P
                s = obs.sum(axis=1) * c.obs_scale
                if self.managers is not None:
                    tic = time.perf_counter()
                    M_in = None if c.mode == "gnn" else M
                    region_goals = self.pick_goals(F, obs, M if c.mode != "gnn" else self._soft(F, obs), mask, eps)
                    if prev is not None:
                        self._manager_step(prev, state, F, obs, s, M_in, mask, False, learn, episode)
                    prev = (F, obs, s, M_in, mask, region_goals, state.local_steps.copy(), P)
                    goals = self.goals_for(hard, region_goals)
                    self.timings["managers"] += time.perf_counter() - tic
            tic = time.perf_counter()
            feats = self.workers.features(state.queue, goals)
            actions, _ = self.workers.act(feats, self.w_rng)
            self.timings["workers"] += time.perf_counter() - tic
            tic = time.perf_counter()
            _, r = step(state, actions)
            self.timings["sim"] += time.perf_counter() - tic
            reward_sum += float(r.mean())
            queue_sum += float(state.queue.sum())
            r_hat = shaped_reward(r, state.queue, goals, c.w_g) * c.reward_scale
            feats_buf.append(feats)
            act_buf.append(actions)
            rew_buf.append(r_hat)
        if learn and feats_buf:
            self._worker_update(feats_buf, act_buf, rew_buf, state.queue.astype(np.float64), goals)
        if self.managers is not None and prev is not None:
            tic = time.perf_counter()
            obs = state.queue.astype(np.float64)
            F = flow_snapshot(state).density
            s = obs.sum(axis=1) * c.obs_scale
            self._manager_step(prev, state, F, obs, s, prev[3], prev[4], True, learn, episode)
            self.timings["managers"] += time.perf_counter() - tic
        return EpisodeLog(
            episode=episode,
            mean_reward=reward_sum / H,
            average_travel_time=average_travel_time(state),
            average_queue=queue_sum / (H * self.n * N_LANES),
            partition_changes=changes,
            mean_ncut=float(np.mean(ncuts)) if ncuts else 0.0,
            alpha=alpha,
            epsilon=eps,
            partitions=trace,
            reference_ncut=float(np.mean(ref_ncuts)) if ref_ncuts else float("nan"),
        )

    def _soft(self, F, obs):
        with no_grad():
            return self.managers.pool(F, obs).data

    def _worker_update(self, feats_buf, act_buf, rew_buf, next_obs, goals):
        tic = time.perf_counter()
        next_feats = self.workers.features(next_obs, goals)
        a2c_update(self.workers, np.stack(feats_buf), np.stack(act_buf), np.stack(rew_buf), next_feats)
        self.timings["workers"] += time.perf_counter() - tic

    def _manager_step(self, prev, state, F2, obs2, s2, M2, mask2, terminal, learn, episode):
        c = self.config
        F, obs, s, M, mask, actions, local0, P = prev
        local = (state.local_steps - local0).sum()
        reward = -float(local) / (c.interval * self.n) * c.manager_reward_scale
        if M2 is not None and M2.shape != (self.n, self.n_p):
            raise ValueError("assignment shape mismatch")
        tr = ManagerTransition(F, obs, s, M, mask, actions, reward, F2, obs2, s2, M2,
                               mask2 if M2 is not None else mask2, terminal)
        self.buffer.add(tr)
        if not learn:
            return
        if self.value_net is not None:
            tic = time.perf_counter()
            self.value_samples.append((F, obs, P, reward))
            if len(self.value_samples) > c.value_buffer:
                self.value_samples.pop(0)
            idx = self.m_rng.integers(0, len(self.value_samples), size=min(c.value_batch, len(self.value_samples)))
            self.value_net.fit_batch([self.value_samples[i] for i in idx])
            self.timings["value"] += time.perf_counter() - tic
        if len(self.buffer) >= c.batch_size:
            batch = self.buffer.sample(c.batch_size)
            qmix_update(batch, self.managers, self.target, self.opt, c.manager_gamma,
                        self.adjacency if c.mode == "gnn" else None)
            self.updates += 1
            if self.updates % c.target_sync == 0:
                sync_target(self.managers, self.target)

    def train(self, episodes: Optional[int] = None, callback: Optional[Callable[[EpisodeLog], None]] = None,
              learn: bool = True) -> TrainResult:
        episodes = self.episodes if episodes is None else episodes
        logs = []
        for e in range(episodes):
            log = self.run_episode(e, learn)
            logs.append(log)
            if callback is not None:
                callback(log)
        return TrainResult(logs, self.config, dict(self.timings), self.workers, self.managers, self.value_net)

    def save(self, out_dir, tag: str):
        from pathlib import Path

        out = Path(out_dir)
        save_checkpoint(self.workers.state_dict(), out / f"{tag}_workers")
        if self.managers is not None:
            save_checkpoint(self.managers.state_dict(), out / f"{tag}_managers")
        if self.value_net is not None:
            save_checkpoint(self.value_net.state_dict(), out / f"{tag}_value")


def train(scenario: Scenario, config: FeudalConfig, episodes: int, seed: int = 0,
          callback: Optional[Callable[[EpisodeLog], None]] = None) -> TrainResult:
    return FeudalTrainer(scenario, config, seed, episodes).train(episodes, callback)


# ---------------------------------------------------------------------------
# reference: plain shared-parameter A2C without managers, written separately


def train_a2c_reference(scenario: Scenario, episodes: int, seed: int = 0, interval: int = 30,
                        hidden: Sequence[int] = (64, 32), lr: float = 5e-4, entropy: float = 0.01,
                        gamma: float = 0.99, obs_scale: float = 0.1, reward_scale: float = 0.01,
                        grad_clip: Optional[float] = 10.0) -> list[float]:
    """Mean per-step reward of each episode for plain A2C workers on raw queue rewards."""
    w_init, w_rng = _streams(seed)[:2]
    policy = WorkerPolicy(False, hidden, obs_scale, w_init, lr, entropy, gamma, grad_clip)
    out = []
    for e in range(episodes):
        state = reset(scenario, episode_seed(seed, e))
        block_x, block_a, block_r = [], [], []
        total = 0.0
        for t in range(scenario.horizon):
            if t > 0 and t % interval == 0:
                a2c_update(policy, np.stack(block_x), np.stack(block_a), np.stack(block_r),
                           policy.features(state.queue, None))
                block_x, block_a, block_r = [], [], []
            x = policy.features(state.queue, None)
            a, _ = policy.act(x, w_rng)
            _, r = step(state, a)
            total += float(r.mean())
            block_x.append(x)
            block_a.append(a)
            block_r.append(r * reward_scale)
        if block_x:
            a2c_update(policy, np.stack(block_x), np.stack(block_a), np.stack(block_r),
                       policy.features(state.queue, None))
        out.append(total / scenario.horizon)
    return out
