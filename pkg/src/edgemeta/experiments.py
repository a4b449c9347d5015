"""Paired-run fixtures for the transfer, replay and correction trends."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .apotl import ApotlConfig, ExpertProfile, train_apotl
from .ddqn import DDQNTrainer, TrainConfig, evaluate, make_episodes
from .env import EdgeEnv
from .rcetl import RcetlConfig, train_rcetl
from .scenario import (CurriculumTable, GenerationContext, ScenarioSpec, eval_dataset,
                       next_scenario_builtin, synthesize_dataset)
from .curriculum import RunConfig, new_network, run_curriculum

FAULT_CPU_BIAS = 4.0


def fixture_specs(steps, seed: int = 0, **table) -> list[ScenarioSpec]:
    """Generate one scenario per entry of a custom step table (no directives)."""
    ctx = GenerationContext(seed=seed, table=CurriculumTable(steps=tuple(steps), **table))
    return [next_scenario_builtin(ctx) for _ in steps]


def _episodes(env, requests, count, seed):
    return make_episodes(requests, env.params.episode_length, count, env.params.arrival_gap,
                         np.random.default_rng([seed, 99]))


def _base_network(spec: ScenarioSpec, train: TrainConfig, seed: int, eval_count: int):
    env = EdgeEnv.from_scenario(spec)
    net = new_network(spec, env, RunConfig(), seed)
    eps = _episodes(env, eval_dataset(spec), eval_count, seed)
    return DDQNTrainer(env, net, train, seed=seed).train(synthesize_dataset(spec), eps)


@dataclass
class TrendRow:
    seed: int
    variant: str
    episodes: int            # plateau or threshold episode, the cap when never reached
    reached: bool
    metric: float


def rcetl_trend(seeds=range(5), train: TrainConfig = TrainConfig(max_episodes=250),
                rcetl: RcetlConfig = RcetlConfig(samples=20, mc=500), eval_count: int = 8) -> list[TrendRow]:
    """DPU introduction on a three-node, two-service network: RCETL against plain fine-tuning.

    ``episodes`` is the reward-plateau episode; ``metric`` the greedy mean cpu_offloaded.
    """
    rows = []
    for seed in seeds:
        old, new = fixture_specs(({"resources": ["cpu", "storage", "gpu"], "services": ["rt", "vr"]},
                                  {"resources": ["dpu"], "services": []}), seed)
        base = _base_network(old, train, seed, eval_count).net
        env_old, env_new = EdgeEnv.from_scenario(old), EdgeEnv.from_scenario(new)
        reqs = synthesize_dataset(new)
        eps = _episodes(env_new, eval_dataset(new), eval_count, seed + 1)
        for variant, xi in (("rcetl", rcetl.xi), ("baseline", None)):
            res = train_rcetl(env_old, env_new, base.copy(), reqs, eps, replace(rcetl, xi=xi, seed=seed),
                              train, seed)
            ev = evaluate(env_new, res.net, eps)
            rows.append(TrendRow(seed, variant, res.plateau if res.plateau is not None else train.max_episodes,
                                 res.plateau is not None, ev.cpu_offloaded))
    return rows


def apotl_trend(seeds=range(5), train: TrainConfig = TrainConfig(max_episodes=250),
                apotl: ApotlConfig = ApotlConfig(), eval_count: int = 8) -> list[TrendRow]:
    """A real-time expert guides an IoV learner (similar) and a VR learner (dissimilar).

    ``episodes`` is the first eval episode with every Sat above the threshold.
    """
    rows = []
    resources = ["cpu", "storage", "gpu", "dpu"]
    for seed in seeds:
        expert_spec, = fixture_specs(({"resources": resources, "services": ["rt"]},), seed)
        base = _base_network(expert_spec, replace(train, require_threshold=False), seed, eval_count)
        expert = ExpertProfile.from_replay(base.replay, base.net, "rt", apotl.profile_size, seed, "expert")
        for variant, service in (("similar", "iov"), ("dissimilar", "vr")):
            _, spec = fixture_specs(({"resources": resources, "services": ["rt"]},
                                     {"resources": [], "services": [service]}), seed)
            env = EdgeEnv.from_scenario(spec)
            reqs = synthesize_dataset(spec, services=[service])
            eps = _episodes(env, eval_dataset(spec, [service]), eval_count, seed + 2)
            net = base.net.copy().add_head(service, seed=seed + 17)
            similar = spec.services.entries[spec.services.index(service)].similar_to
            res = train_apotl(env, net, [expert], service, reqs, eps, train, apotl, seed, similar)
            ev = evaluate(env, res.net, eps)
            rows.append(TrendRow(seed, variant, res.threshold if res.threshold is not None else train.max_episodes,
                                 res.threshold is not None, ev.isr))
    return rows


def gir_trend(seeds=range(5), steps: int = 5, service: str = "rt", output_root=None,
              **overrides) -> list[TrendRow]:
    """Full curriculum with and without generative replay; ``metric`` is ISR on ``service``.

    With ``output_root`` each run exports to ``<output_root>/<variant>-<seed>``.
    """
    rows = []
    for seed in seeds:
        for variant, gir in (("gir", True), ("no_gir", False)):
            out = None if output_root is None else str(Path(output_root) / f"{variant}-{seed}")
            rep = run_curriculum(RunConfig(seed=seed, steps=steps, gir=gir, output_dir=out, **overrides))
            last = [s for s in rep["steps"] if "error" not in s][-1]
            rows.append(TrendRow(seed, variant, sum(p["episodes"] for s in rep["steps"] for p in s.get("phases", [])),
                                 len(rep["steps"]) == steps, last["isr_by_service"][service]))
    return rows


def correction_trend(seeds=range(5), fault_seeds=range(5), steps: int = 3, **overrides) -> dict:
    """Run the curriculum with and without the CPU-bias fault and collect Disc flags and directives."""
    out = {"fault": [], "clean": []}
    for label, bias, ss in (("fault", FAULT_CPU_BIAS, fault_seeds), ("clean", 0.0, seeds)):
        for seed in ss:
            rep = run_curriculum(RunConfig(seed=seed, steps=steps, w_cpu_bias=bias, **overrides))
            out[label].append({
                "seed": seed,
                "steps": [{
                    "step": s["step"],
                    "disc": s.get("metrics", {}).get("disc", {}),
                    "flags": s.get("metrics", {}).get("flags", []),
                    "directives": [(d["kind"], d["params"]) for d in s.get("directives", [])],
                } for s in rep["steps"]],
            })
    return out


def median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=float)))
