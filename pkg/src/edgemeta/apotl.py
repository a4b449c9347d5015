"""Bisimulation-guided transfer to a new service type.

Expert and learner transitions are abstracted onto a shared k-means codebook of
encoded states.  A lax bisimulation table between expert and learner
(cell, action) pairs bounds how far each learner action is from the expert's
best action; the bound drives action selection during early training.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_expit
from sklearn.cluster import KMeans

from .ddqn import DDQNTrainer, TrainConfig, TrainResult, linear_anneal
from .env import EdgeEnv
from .net import ReplayBuffer, SchedNet
from .transport import BOX, _emd, hausdorff_tables


# --- bisimulation table ---------------------------------------------------
@dataclass
class BisimTable:
    dis: np.ndarray                # [expert cell, expert action, learner cell, learner action]
    eta_r: float
    eta_kd: float
    changes: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.changes)

    @property
    def diverged(self) -> bool:
        c = self.changes
        return any(c[i + 1] > c[i] + 1e-12 for i in range(1, len(c) - 1))

    def to_dict(self) -> dict:
        return {"shape": list(self.dis.shape), "dis": self.dis.ravel().tolist(), "eta_r": self.eta_r,
                "eta_kd": self.eta_kd, "changes": list(self.changes)}


def _supports(P: np.ndarray):
    out = []
    for row in P.reshape(-1, P.shape[-1]):
        idx = np.flatnonzero(row > 0)
        w = row[idx] / row[idx].sum() if idx.size else row[idx]
        out.append((idx, np.ascontiguousarray(w)))
    return out


def bisim_fixed_point(R_e, P_e, R_l, P_l, eta_r: float = 0.5, eta_kd: float = 0.5,
                      iterations: int = 5, tol: float | None = None, max_iterations: int = 10_000) -> BisimTable:
    """Iterate ``Dis = eta_r |r_e - r_l| + eta_kd * KD(P_e, P_l; H(Dis))``.

    ``R_*`` have shape ``(S, A)`` and ``P_*`` shape ``(S, A, S)`` (expert and learner
    state sets may differ).  The ground metric between successor states is the
    Hausdorff action-set distance of the current table.  With ``tol`` given the
    loop runs until the max change drops below it (or ``max_iterations``).
    """
    if eta_r < 0 or eta_kd < 0:
        raise ValueError("eta_r and eta_kd must be >= 0")
    R_e, R_l = np.asarray(R_e, float), np.asarray(R_l, float)
    P_e, P_l = np.asarray(P_e, float), np.asarray(P_l, float)
    Se, A = R_e.shape
    Sl, Al = R_l.shape
    base = eta_r * np.abs(R_e[:, :, None, None] - R_l[None, None, :, :])
    dis = base.copy()
    table = BisimTable(dis, eta_r, eta_kd)
    if eta_kd == 0:
        table.changes.append(0.0)
        return table
    sup_e, sup_l = _supports(P_e), _supports(P_l)
    limit = max_iterations if tol is not None else iterations
    for _ in range(limit):
        H = np.minimum(hausdorff_tables(dis), 2.0 * BOX)
        kd = np.zeros((Se * A, Sl * Al))
        for i, (ie, we) in enumerate(sup_e):
            if ie.size == 0:
                continue
            for j, (il, wl) in enumerate(sup_l):
                if il.size == 0:
                    continue
                if ie.size == 1 and il.size == 1:
                    kd[i, j] = H[ie[0], il[0]]
                else:
                    kd[i, j] = _emd(we, wl * (we.sum() / wl.sum()), np.ascontiguousarray(H[np.ix_(ie, il)]))
        new = base + eta_kd * kd.reshape(Se, A, Sl, Al)
        change = float(np.max(np.abs(new - dis)))
        dis = new
        table.changes.append(change)
        if tol is not None and change < tol:
            break
    table.dis = dis
    return table


# --- bounds and action selection ------------------------------------------
def up_bound_single(dis: np.ndarray, expert_cell: int, expert_action: int, learner_cell: int,
                    learner_action: int, learner_greedy: int) -> float:
    """``Dis((s_l, a_l*), (s_e, a_e*)) + Dis((s_l, a_l), (s_e, a_e*))``."""
    row = dis[expert_cell, expert_action, learner_cell]
    return float(row[learner_greedy] + row[learner_action])


def up_bound_vector(dis: np.ndarray, expert_cell: int, expert_action: int, learner_cell: int,
                    learner_greedy: int) -> np.ndarray:
    row = dis[expert_cell, expert_action, learner_cell]
    return row[learner_greedy] + row


def up_bound_weighted(values: Sequence, mu: Sequence[float]):
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < -1e-12) or abs(mu.sum() - 1.0) > 1e-9:
        raise ValueError("expert weights must lie on the simplex")
    vals = np.asarray(values, dtype=float)
    return np.tensordot(mu, vals, axes=1)


def action_probabilities(up) -> np.ndarray:
    """``P(a) = sigmoid(-UP(a)) / sum_a' sigmoid(-UP(a'))`` (computed in log space)."""
    u = np.asarray(up, dtype=float)
    if u.ndim != 1 or u.size == 0:
        raise ValueError("need a non-empty vector of bounds")
    logit = log_expit(-u)
    logit = logit - np.max(logit)
    p = np.exp(logit)
    return p / p.sum()


def expert_weights(mean_distances: Sequence[float], eps: float = 1e-3) -> np.ndarray:
    """``mu_j`` proportional to ``1 / (eps + mean distance to expert j)``."""
    d = np.asarray(mean_distances, dtype=float)
    if d.size == 0:
        raise ValueError("no experts")
    w = 1.0 / (eps + np.maximum(d, 0.0))
    return w / w.sum()


# --- experts and abstraction ------------------------------------------------
@dataclass
class ExpertProfile:
    service: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    snapshot: SchedNet
    scenario_tag: str = ""

    def __post_init__(self):
        self.best_actions = np.argmax(self.snapshot.forward(self.states, self.service), axis=1) \
            if len(self.states) else np.zeros(0, dtype=int)

    @property
    def size(self) -> int:
        return len(self.states)

    @classmethod
    def from_replay(cls, replay: ReplayBuffer, net: SchedNet, service: str, size: int = 2000,
                    seed: int = 0, scenario_tag: str = "") -> "ExpertProfile":
        idx = net.services.index(service)
        rows = [r for r in replay.records() if r[1] == idx]
        if not rows:
            raise ValueError(f"replay holds no transitions of service {service!r}")
        rng = np.random.default_rng(seed)
        if len(rows) > size:
            pick = np.sort(rng.choice(len(rows), size=size, replace=False))
            rows = [rows[i] for i in pick]
        return cls(
            service=service,
            states=np.stack([r[0] for r in rows]),
            actions=np.array([r[2] for r in rows]),
            rewards=np.array([r[3] for r in rows]),
            next_states=np.stack([r[4] for r in rows]),
            snapshot=net.copy(),
            scenario_tag=scenario_tag,
        )


class Codebook:
    def __init__(self, centroids: np.ndarray):
        self.centroids = np.asarray(centroids, dtype=float)

    @property
    def size(self) -> int:
        return len(self.centroids)

    def cells(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        d = ((S[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)

    @classmethod
    def fit(cls, states: np.ndarray, k: int, seed: int = 0) -> "Codebook":
        X = np.unique(np.asarray(states, dtype=float), axis=0)
        k = max(1, min(k, len(X)))
        km = KMeans(n_clusters=k, n_init=1, random_state=seed).fit(X)
        return cls(km.cluster_centers_)


def tabulate(cells, actions, rewards, next_cells, n_cells: int, n_actions: int, prior=None):
    """Mean reward and empirical successor distribution per (cell, action).

    Unseen pairs take the ``prior`` ``(R, P)`` when given, otherwise the side's
    overall mean reward and successor histogram.
    """
    R = np.zeros((n_cells, n_actions))
    P = np.zeros((n_cells, n_actions, n_cells))
    N = np.zeros((n_cells, n_actions))
    np.add.at(N, (cells, actions), 1.0)
    np.add.at(R, (cells, actions), rewards)
    np.add.at(P, (cells, actions, next_cells), 1.0)
    seen = N > 0
    R[seen] /= N[seen]
    P[seen] /= N[seen][:, None]
    if prior is not None:
        R[~seen] = prior[0][~seen]
        P[~seen] = prior[1][~seen]
    else:
        R[~seen] = np.mean(rewards) if len(rewards) else 0.0
        hist = np.bincount(next_cells, minlength=n_cells).astype(float) if len(next_cells) else np.ones(n_cells)
        P[~seen] = hist / hist.sum()
    return R, P, N


# --- the guide plugged into the DDQN loop -----------------------------------
@dataclass(frozen=True)
class ApotlConfig:
    beta_start: float = 1.0
    beta_end: float = 0.05
    beta_frac: float = 0.6
    eta_r: float = 0.5
    eta_kd: float = 0.5
    iterations: int = 5
    n_cells: int = 8
    refresh_every: int = 10
    mu_every: int = 50
    mu_eps: float = 1e-3
    profile_size: int = 2000
    learner_sample_cap: int = 2000
    similar_prior: float = 2.0       # initial weight of declared-similar experts vs 1.0

    def to_dict(self) -> dict:
        return asdict(self)


class ApotlGuide:
    def __init__(self, experts: Sequence[ExpertProfile], learner_service: int, replay: ReplayBuffer,
                 config: ApotlConfig = ApotlConfig(), max_episodes: int = 300, seed: int = 0,
                 similar: Sequence[str] = ()):
        if not experts:
            raise ValueError("APOTL needs at least one expert")
        self.experts = list(experts)
        self.learner_service = int(learner_service)
        self.replay = replay
        self.config = config
        self.max_episodes = max_episodes
        self.seed = seed
        self.rng = np.random.default_rng([seed, 23])
        prior = np.array([config.similar_prior if e.service in similar else 1.0 for e in experts])
        self.mu = prior / prior.sum()
        self.mu_history = [self.mu.tolist()]
        self.tables: list[BisimTable] = []
        self.codebook: Codebook | None = None
        self.n_actions = experts[0].snapshot.n_actions
        self.expert_cells: list[np.ndarray] = []
        self.net: SchedNet | None = None

    def beta(self, episode: int) -> float:
        c = self.config
        if c.beta_start == 0 and c.beta_end == 0:
            return 0.0
        return linear_anneal(c.beta_start, c.beta_end, episode, int(c.beta_frac * self.max_episodes))

    def _learner_rows(self):
        rows = [r for r in self.replay.records() if r[1] == self.learner_service]
        cap = self.config.learner_sample_cap
        return rows[-cap:]

    def refresh(self):
        c = self.config
        rows = self._learner_rows()
        pool = [e.states for e in self.experts]
        if rows:
            pool.append(np.stack([r[0] for r in rows]))
        self.codebook = Codebook.fit(np.concatenate(pool), c.n_cells, seed=self.seed)
        K = self.codebook.size
        self.tables, self.expert_cells = [], []
        for e in self.experts:
            ce = self.codebook.cells(e.states)
            R_e, P_e, _ = tabulate(ce, e.actions, e.rewards, self.codebook.cells(e.next_states), K, self.n_actions)
            if rows:
                S = np.stack([r[0] for r in rows])
                S2 = np.stack([r[4] for r in rows])
                R_l, P_l, _ = tabulate(self.codebook.cells(S), np.array([r[2] for r in rows]),
                                       np.array([r[3] for r in rows]), self.codebook.cells(S2), K,
                                       self.n_actions, prior=(R_e, P_e))
            else:
                R_l, P_l = R_e.copy(), P_e.copy()
            self.tables.append(bisim_fixed_point(R_e, P_e, R_l, P_l, c.eta_r, c.eta_kd, c.iterations))
            self.expert_cells.append(ce)

    def estimate_mu(self):
        rows = self._learner_rows()
        if not rows or self.codebook is None:
            return
        S = np.stack([r[0] for r in rows])
        A = np.array([r[2] for r in rows])
        cl = self.codebook.cells(S)
        means = []
        for e, ce, tab in zip(self.experts, self.expert_cells, self.tables):
            near = self._nearest(e, S)
            means.append(float(np.mean(tab.dis[ce[near], e.actions[near], cl, A])))
        self.mu = expert_weights(means, self.config.mu_eps)
        self.mu_history.append(self.mu.tolist())

    @staticmethod
    def _nearest(expert: ExpertProfile, S: np.ndarray) -> np.ndarray:
        S = np.atleast_2d(S)
        d = (S ** 2).sum(1)[:, None] - 2 * S @ expert.states.T + (expert.states ** 2).sum(1)[None, :]
        return np.argmin(d, axis=1)

    def begin_episode(self, episode: int, net: SchedNet) -> None:
        self.net = net
        if self.beta(episode) <= 0:
            return
        if self.codebook is None or episode % self.config.refresh_every == 0:
            self.refresh()
        if episode > 0 and episode % self.config.mu_every == 0:
            self.estimate_mu()

    def bounds(self, s: np.ndarray, q: np.ndarray) -> np.ndarray:
        cl = int(self.codebook.cells(s)[0])
        greedy = int(np.argmax(q))
        ups = []
        for e, ce, tab in zip(self.experts, self.expert_cells, self.tables):
            k = int(self._nearest(e, s)[0])
            ups.append(up_bound_vector(tab.dis, int(ce[k]), int(e.best_actions[k]), cl, greedy))
        return up_bound_weighted(ups, self.mu)

    def propose(self, episode, s, service, q, rng) -> int | None:
        if int(service) != self.learner_service:
            return None
        beta = self.beta(episode)
        if beta <= 0 or self.rng.random() >= beta:
            return None
        return int(np.argmax(action_probabilities(self.bounds(s, q))))


def train_apotl(env: EdgeEnv, net: SchedNet, experts: Sequence[ExpertProfile], learner_service: str,
                train_requests, eval_episodes, config: TrainConfig = TrainConfig(),
                apotl: ApotlConfig = ApotlConfig(), seed: int = 0, similar: Sequence[str] = ()) -> TrainResult:
    """DDQN on the new service with bisimulation-guided exploration."""
    if learner_service not in net.services:
        raise ValueError(f"network has no head for {learner_service!r}; call add_head first")
    replay = ReplayBuffer(config.replay_capacity, seed=seed)
    guide = ApotlGuide(experts, net.services.index(learner_service), replay, apotl, config.max_episodes,
                       seed, similar)
    trainer = DDQNTrainer(env, net, config, seed=seed, guide=guide, replay=replay)
    result = trainer.train(train_requests, eval_episodes)
    result.extra["mu_history"] = guide.mu_history
    result.extra["experts"] = [e.service for e in experts]
    return result
