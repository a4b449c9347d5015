"""Estimator-style wrapper around the DDQN scheduler."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ddqn import DDQNTrainer, TrainConfig, evaluate, make_episodes
from .env import EdgeEnv
from .scenario import ScenarioSpec


class SchedulingAgent(BaseEstimator):
    """Learns a placement policy for one scenario.

    ``fit`` takes a list of service requests; ``predict`` returns the greedy action
    index for each request placed on an idle network; ``score`` is the intent
    success rate over episodes built from the given requests.
    """

    def __init__(self, scenario: ScenarioSpec | None = None, max_episodes: int = 300, hidden: int = 64,
                 encoder_dim: int = 4, lr: float = 1e-3, gamma: float = 0.9, batch_size: int = 64,
                 eval_episodes: int = 8, seed: int = 0):
        self.scenario = scenario
        self.max_episodes = max_episodes
        self.hidden = hidden
        self.encoder_dim = encoder_dim
        self.lr = lr
        self.gamma = gamma
        self.batch_size = batch_size
        self.eval_episodes = eval_episodes
        self.seed = seed

    def _env(self) -> EdgeEnv:
        if self.scenario is None:
            raise ValueError("a scenario is required")
        return EdgeEnv.from_scenario(self.scenario)

    def _episodes(self, env, requests, seed):
        return make_episodes(list(requests), env.params.episode_length, self.eval_episodes,
                             env.params.arrival_gap, np.random.default_rng([self.seed, seed]))

    def fit(self, X, y=None, eval_requests=None):
        from .curriculum import RunConfig, new_network

        env = self._env()
        cfg = RunConfig(hidden=self.hidden, encoder_dim=self.encoder_dim, lr=self.lr, gamma=self.gamma)
        net = new_network(self.scenario, env, cfg, self.seed)
        train = TrainConfig(max_episodes=self.max_episodes, batch_size=self.batch_size, gamma=self.gamma,
                            lr=self.lr)
        eps = self._episodes(env, eval_requests if eval_requests is not None else X, 1)
        result = DDQNTrainer(env, net, train, seed=self.seed).train(list(X), eps)
        self.net_ = result.net
        self.trace_ = result.trace
        self.plateau_ = result.plateau
        self.threshold_ = result.threshold
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        env = self._env()
        out = []
        for r in X:
            s = env.encode_state(env.reset(0), r)
            out.append(int(np.argmax(self.net_.forward(s, r.service_type))))
        return np.array(out, dtype=int)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "net_")
        env = self._env()
        return evaluate(env, self.net_, self._episodes(env, X, 2)).isr
