"""Resource causal effects and causal-effect-guided transfer on resource introduction."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ddqn import DDQNTrainer, TrainConfig, TrainResult
from .env import EdgeEnv, ServiceRequest
from .net import SchedNet

# evaluator(R, context) -> rewards; R has shape (batch, m)
Evaluator = Callable[[np.ndarray, object], np.ndarray]


@dataclass
class RceVector:
    values: np.ndarray
    names: list
    samples: int
    grid: int
    mc: int
    seed: int

    def to_dict(self) -> dict:
        return {"values": dict(zip(self.names, np.asarray(self.values).tolist())), "samples": self.samples,
                "grid": self.grid, "mc": self.mc, "seed": self.seed}


def _draws(lower, upper, M: int, rng: np.random.Generator) -> np.ndarray:
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    return lower + (upper - lower) * rng.random((M, lower.size))


def _check_value(n: int, a: float, lower, upper):
    if not lower[n] <= a <= upper[n]:
        raise ValueError(f"intervention value {a} outside [{lower[n]}, {upper[n]}]")


def intervention_expected_reward(evaluator: Evaluator, n: int, a: float, lower, upper, M: int = 2000,
                                 seed: int = 0, context=None) -> float:
    """Monte-Carlo ``E[tau | Fix(r_n = a)]`` with the other components uniform on their ranges."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    _check_value(n, a, lower, upper)
    R = _draws(lower, upper, M, np.random.default_rng(seed))
    R[:, n] = a
    return float(np.mean(evaluator(R, context)))


def average_expected_reward(evaluator: Evaluator, n: int, lower, upper, K: int = 11, M: int = 2000,
                            seed: int = 0, context=None) -> float:
    """Mean of the interventional expectation over a ``K``-point grid on ``[l_n, h_n]``."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    grid = np.linspace(lower[n], upper[n], K)
    return float(np.mean([intervention_expected_reward(evaluator, n, g, lower, upper, M, seed, context)
                          for g in grid]))


def rce_value(evaluator: Evaluator, n: int, a: float, lower, upper, K: int = 11, M: int = 2000,
              seed: int = 0, context=None) -> float:
    # Both terms reuse the same draws, so any constant evaluator gives exactly 0.
    fixed = intervention_expected_reward(evaluator, n, a, lower, upper, M, seed, context)
    return abs(fixed - average_expected_reward(evaluator, n, lower, upper, K, M, seed, context))


def rce_sample(evaluator: Evaluator, values, lower, upper, K: int = 11, M: int = 2000, seed: int = 0,
               context=None) -> np.ndarray:
    """RCE of every resource for one sample, in a single batched evaluator call."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    values = np.asarray(values, float)
    m = lower.size
    base = _draws(lower, upper, M, np.random.default_rng(seed))
    blocks = []
    for n in range(m):
        _check_value(n, values[n], lower, upper)
        for a in np.concatenate([[values[n]], np.linspace(lower[n], upper[n], K)]):
            R = base.copy()
            R[:, n] = a
            blocks.append(R)
    tau = np.asarray(evaluator(np.concatenate(blocks), context), float).reshape(m, K + 1, M).mean(axis=2)
    return np.abs(tau[:, 0] - tau[:, 1:].mean(axis=1))


def rce_vector(evaluator: Evaluator, samples: Sequence[tuple], lower, upper, K: int = 11, M: int = 2000,
               seed: int = 0, names: Sequence[str] | None = None) -> RceVector:
    """Average per-sample RCE vectors; each sample is ``(values, context)``."""
    if not samples:
        raise ValueError("at least one sample is required")
    per = [rce_sample(evaluator, v, lower, upper, K, M, seed + 7 * i, ctx) for i, (v, ctx) in enumerate(samples)]
    names = list(names) if names is not None else [f"r{i}" for i in range(len(lower))]
    return RceVector(np.mean(per, axis=0), names, len(samples), K, M, seed)


class PolicyRewardEvaluator:
    """Reward of one greedy placement on an idle network for each requirement row.

    The context is ``(service_type, intent, user_position)``.
    """

    def __init__(self, env: EdgeEnv, net: SchedNet, chunk: int = 32_768):
        self.env = env
        self.net = net
        self.chunk = chunk

    def __call__(self, R: np.ndarray, context) -> np.ndarray:
        service, intent, pos = context
        out = np.empty(len(R))
        for lo in range(0, len(R), self.chunk):
            block = R[lo:lo + self.chunk]
            X = self.env.encode_fresh_batch(block, intent, pos)
            a = np.argmax(self.net.forward(X, service), axis=1)
            B = len(block)
            out[lo:lo + B] = self.env.fresh_step_batch(
                np.full(B, service), block, np.broadcast_to(intent.values, (B, intent.p)),
                pos, a)
        return out


def causal_diff_and_freeze(rce_old, rce_new, xi: float, net: SchedNet | None = None,
                           names: Sequence[str] | None = None) -> list[str]:
    """Freeze the encoder of every old resource whose RCE moved by at most ``xi``.

    The comparison is index-wise over the old resources; a negative ``xi`` freezes nothing.
    """
    old = np.asarray(getattr(rce_old, "values", rce_old), float)
    new = np.asarray(getattr(rce_new, "values", rce_new), float)
    if new.size < old.size:
        raise ValueError("the new RCE vector must cover every old resource")
    if names is None:
        names = getattr(rce_old, "names", None) or [f"r{i}" for i in range(old.size)]
    frozen = [f"encoder:{names[i]}" for i in range(old.size) if abs(old[i] - new[i]) <= xi]
    if net is not None and frozen:
        net.set_freeze(frozen, True)
    return frozen


@dataclass(frozen=True)
class RcetlConfig:
    # None: plain fine-tuning (no causal analysis, nothing frozen).
    xi: float | None = 0.05
    grid: int = 11
    mc: int = 2000
    samples: int = 100
    init_scale: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def rce_samples(requests: Sequence[ServiceRequest], count: int, seed: int, keep: Sequence[int]) -> list[tuple]:
    rng = np.random.default_rng([seed, 5])
    pick = rng.choice(len(requests), size=min(count, len(requests)), replace=False)
    out = []
    for i in sorted(pick):
        r = requests[i]
        out.append((r.requirement.values[list(keep)], (r.service_type, r.intent, r.user_position)))
    return out


def train_rcetl(env_old: EdgeEnv, env_new: EdgeEnv, net: SchedNet, train_requests, eval_episodes,
                config: RcetlConfig = RcetlConfig(), train: TrainConfig = TrainConfig(),
                seed: int = 0) -> TrainResult:
    """Causal analysis, input expansion, selective freezing, then DDQN on the new scenario."""
    old_names = env_old.resources.names
    new_names = [r for r in env_new.resources.names if r not in old_names]
    if not new_names:
        raise ValueError("the new scenario introduces no resource")
    report: dict = {"new_resources": new_names, "xi": config.xi}
    rce_old = rce_new = None
    if config.xi is not None:
        keep_old = [env_new.resources.index(r) for r in old_names]
        samples_old = rce_samples(train_requests, config.samples, config.seed, keep_old)
        rce_old = rce_vector(PolicyRewardEvaluator(env_old, net), samples_old, env_old.resources.lower,
                             env_old.resources.upper, config.grid, config.mc, config.seed, old_names)
    expanded = net
    for k, r in enumerate(new_names):
        expanded = expanded.expand_input(r, config.init_scale, seed=seed * 100 + k)
    expanded.layout_id = env_new.layout_id
    frozen: list[str] = []
    if config.xi is not None:
        samples_new = rce_samples(train_requests, config.samples, config.seed, range(env_new.resources.m))
        rce_new = rce_vector(PolicyRewardEvaluator(env_new, expanded), samples_new, env_new.resources.lower,
                             env_new.resources.upper, config.grid, config.mc, config.seed,
                             env_new.resources.names)
        frozen = causal_diff_and_freeze(rce_old, rce_new, config.xi, expanded, old_names)
        report["rce_old"] = rce_old.to_dict()
        report["rce_new"] = rce_new.to_dict()
    report["frozen"] = frozen
    result = DDQNTrainer(env_new, expanded, train, seed=seed).train(train_requests, eval_episodes)
    expanded.set_freeze(frozen, False)
    result.extra["rcetl"] = report
    return result
