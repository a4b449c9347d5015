"""Double-DQN training loop shared by plain fine-tuning, RCETL and APOTL."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .env import EdgeEnv, ServiceRequest
from .metrics import intent_satisfaction, intent_success_rate
from .net import ReplayBuffer, SchedNet, soft_update_target


@dataclass(frozen=True)
class TrainConfig:
    max_episodes: int = 300
    batch_size: int = 64
    gamma: float = 0.9
    lr: float = 1e-3
    rho: float = 0.05
    eps_start: float = 0.3
    eps_end: float = 0.02
    anneal_frac: float = 0.6
    warmup: int = 64
    replay_capacity: int = 20_000
    eval_every: int = 5
    plateau_window: int = 50
    plateau_delta: float = 0.01
    sat_threshold: float = 0.90
    # Keep training past the reward plateau until the evaluation threshold is met.
    require_threshold: bool = True
    min_episodes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def linear_anneal(start: float, end: float, episode: int, horizon: int) -> float:
    if horizon <= 0:
        return end
    if episode >= horizon:
        return end
    frac = max(episode / horizon, 0.0)
    return start + (end - start) * frac


def plateau_episode(rewards: Sequence[float], window: int, delta: float) -> int | None:
    """First episode ``e`` where the mean of the last ``window`` rewards differs
    from the mean of the ``window`` before it by at most ``delta``."""
    r = np.asarray(rewards, dtype=float)
    if len(r) < 2 * window:
        return None
    c = np.concatenate([[0.0], np.cumsum(r)])
    for e in range(2 * window - 1, len(r)):
        cur = (c[e + 1] - c[e + 1 - window]) / window
        prev = (c[e + 1 - window] - c[e + 1 - 2 * window]) / window
        if abs(cur - prev) <= delta:
            return e
    return None


class ActionGuide(Protocol):
    """Hook that may override exploration (used by APOTL)."""

    def begin_episode(self, episode: int, net: SchedNet) -> None: ...

    def propose(self, episode: int, s: np.ndarray, service: int, q: np.ndarray,
                rng: np.random.Generator) -> int | None: ...


def make_episodes(requests: Sequence[ServiceRequest], length: int, count: int,
                  gap: tuple[float, float], rng: np.random.Generator) -> list[list[ServiceRequest]]:
    """Cut ``count`` fixed-length episodes from a seeded walk over ``requests``."""
    if not requests:
        raise ValueError("empty request pool")
    order = rng.permutation(len(requests))
    pos = 0
    episodes = []
    rid = 0
    for _ in range(count):
        t = 0.0
        ep = []
        for _ in range(length):
            if pos == len(order):
                order = rng.permutation(len(requests))
                pos = 0
            t += rng.uniform(*gap)
            ep.append(requests[order[pos]].with_arrival(t, rid))
            pos += 1
            rid += 1
        episodes.append(ep)
    return episodes


@dataclass
class EvalResult:
    sat: dict
    isr: float
    reward: float
    cpu_offloaded: float
    utilization: np.ndarray          # (time, nodes, resources)
    success_rate: float
    latency: float

    def summary(self) -> dict:
        return {
            "sat": dict(sorted(self.sat.items())),
            "isr": self.isr,
            "reward": self.reward,
            "cpu_offloaded": self.cpu_offloaded,
            "success_rate": self.success_rate,
            "latency": self.latency,
        }


def run_policy(env: EdgeEnv, net: SchedNet | None, episodes, policy="greedy") -> tuple[list, list, list, list]:
    """Roll ``episodes`` with the greedy Q policy (or best-effort when ``net`` is None)."""
    from .env import best_effort_action

    reqs, outs, rewards, utils = [], [], [], []
    for ep in episodes:
        state = env.reset(0)
        for req in ep:
            if net is None or policy == "best_effort":
                action = best_effort_action(env, state, req)
            else:
                s = env.encode_state(state, req)
                action = env.action(int(np.argmax(net.forward(s, req.service_type))))
            state, tau, out = env.step(state, req, action)
            reqs.append(req)
            outs.append(out)
            rewards.append(tau)
            utils.append(out.utilization)
    return reqs, outs, rewards, utils


def evaluate(env: EdgeEnv, net: SchedNet | None, episodes, policy="greedy") -> EvalResult:
    reqs, outs, rewards, utils = run_policy(env, net, episodes, policy)
    ok = [o for o in outs if o.success]
    return EvalResult(
        sat=intent_satisfaction(reqs, outs),
        isr=intent_success_rate(reqs, outs),
        reward=float(np.mean(rewards)),
        cpu_offloaded=float(np.mean([o.cpu_offloaded for o in outs])),
        utilization=np.asarray(utils),
        success_rate=len(ok) / len(outs),
        latency=float(np.mean([o.execution_latency for o in ok])) if ok else float("nan"),
    )


@dataclass
class TrainResult:
    net: SchedNet
    trace: list = field(default_factory=list)          # per-episode dicts
    eval_trace: list = field(default_factory=list)     # (episode, summary)
    plateau: int | None = None
    threshold: int | None = None
    cap_hit: bool = False
    replay: ReplayBuffer | None = None
    extra: dict = field(default_factory=dict)

    @property
    def episodes(self) -> int:
        return len(self.trace)

    def sat_trace(self) -> list:
        return [(ep, summ["sat"]) for ep, summ in self.eval_trace]


class DDQNTrainer:
    """Epsilon-greedy DDQN with a soft-updated target network.

    Targets use the online network's argmax evaluated by the target network.
    """

    def __init__(self, env: EdgeEnv, net: SchedNet, config: TrainConfig = TrainConfig(),
                 seed: int = 0, guide: ActionGuide | None = None, replay: ReplayBuffer | None = None):
        self.env = env
        self.net = net
        self.config = config
        self.seed = seed
        self.guide = guide
        self.rng = np.random.default_rng([seed, 11])
        self.replay = replay if replay is not None else ReplayBuffer(config.replay_capacity, seed=seed)
        self.target = net.copy()
        self.net.adam.lr = config.lr

    def epsilon(self, episode: int) -> float:
        c = self.config
        return linear_anneal(c.eps_start, c.eps_end, episode, int(c.anneal_frac * c.max_episodes))

    def select(self, episode: int, s: np.ndarray, service: int) -> int:
        q = self.net.forward(s, service)
        if self.guide is not None:
            a = self.guide.propose(episode, s, service, q, self.rng)
            if a is not None:
                return int(a)
        if self.rng.random() < self.epsilon(episode):
            return int(self.rng.integers(self.env.n_actions))
        return int(np.argmax(q))

    def _learn(self) -> float:
        c = self.config
        S, svc, A, R, S2, svc2, D = self.replay.sample(c.batch_size)
        a_star = np.argmax(self.net.forward(S2, svc2), axis=1)
        q_next = self.target.forward(S2, svc2)[np.arange(len(a_star)), a_star]
        y = R + c.gamma * (1.0 - D) * q_next
        loss = self.net.update(S, svc, A, y)
        soft_update_target(self.net, self.target, c.rho)
        return loss

    def train(self, train_requests: Sequence[ServiceRequest], eval_episodes) -> TrainResult:
        c = self.config
        env = self.env
        p = env.params
        episodes = make_episodes(train_requests, p.episode_length, c.max_episodes, p.arrival_gap,
                                 np.random.default_rng([self.seed, 7]))
        result = TrainResult(self.net, replay=self.replay)
        rewards = []
        for ep_idx, ep in enumerate(episodes):
            if self.guide is not None:
                self.guide.begin_episode(ep_idx, self.net)
            state = env.reset(self.seed)
            s = env.encode_state(state, ep[0])
            taus, oks, lats, offs, losses = [], [], [], [], []
            for t, req in enumerate(ep):
                a = self.select(ep_idx, s, req.service_type)
                state, tau, out = env.step(state, req, env.action(a))
                done = t == len(ep) - 1
                nxt = ep[t + 1] if not done else req
                s2 = env.encode_state(state, nxt)
                self.replay.push(s, req.service_type, a, tau, s2, nxt.service_type, done)
                if len(self.replay) >= max(c.warmup, c.batch_size):
                    losses.append(self._learn())
                taus.append(tau)
                oks.append(out.success)
                offs.append(out.cpu_offloaded)
                if out.success:
                    lats.append(out.execution_latency)
                s = s2
            rewards.append(float(np.mean(taus)))
            result.trace.append({
                "episode": ep_idx,
                "reward": rewards[-1],
                "success_rate": float(np.mean(oks)),
                "latency": float(np.mean(lats)) if lats else float("nan"),
                "cpu_offloaded": float(np.mean(offs)),
                "epsilon": self.epsilon(ep_idx),
                "loss": float(np.mean(losses)) if losses else float("nan"),
            })
            if (ep_idx + 1) % c.eval_every == 0:
                ev = evaluate(env, self.net, eval_episodes)
                result.eval_trace.append((ep_idx + 1, ev.summary()))
                if result.threshold is None and ev.sat and all(v > c.sat_threshold for v in ev.sat.values()):
                    result.threshold = ep_idx + 1
            if result.plateau is None:
                result.plateau = plateau_episode(rewards, c.plateau_window, c.plateau_delta)
            done_training = (
                result.plateau is not None
                and ep_idx + 1 >= c.min_episodes
                and (result.threshold is not None or not c.require_threshold)
            )
            if done_training:
                break
        result.cap_hit = result.plateau is None
        return result
