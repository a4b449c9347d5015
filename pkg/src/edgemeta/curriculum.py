"""Training-phase loop over generated scenarios, inference and metric export."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .apotl import ApotlConfig, ExpertProfile, train_apotl
from .ddqn import DDQNTrainer, TrainConfig, TrainResult, evaluate, make_episodes
from .env import EdgeEnv, SchedAction
from .gir import CvaeModel, RecordCodec, mix_dataset, records_to_requests, synthesize_replay
from .metrics import EvalThresholds, MetricsReport, build_report, correction_verdict
from .net import SchedNet
from .nsi import IntentVector, NsiError
from .rcetl import RcetlConfig, train_rcetl
from .scenario import (
    CurriculumDone,
    CurriculumTable,
    EndpointConfig,
    GenerationContext,
    ScenarioSpec,
    eval_dataset,
    external_generate,
    make_request,
    next_scenario_builtin,
    synthesize_dataset,
)

EPISODE_COLUMNS = ("run", "step", "phase", "episode", "reward", "success_rate", "latency",
                   "cpu_offloaded", "epsilon", "loss")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 5
    generator: str = "builtin"
    endpoint_config: str | None = None
    # thresholds
    xi: float = 0.05
    sat_flag: float = 0.75
    convergence: float = 0.90
    kl_novelty: float = 0.5
    disc_flag: float = 0.4
    fast_floor: int = 20
    # training
    episode_cap: int = 300
    min_episodes: int = 0
    batch_size: int = 64
    gamma: float = 0.9
    lr: float = 1e-3
    hidden: int = 64
    encoder_dim: int = 4
    plateau_window: int = 50
    plateau_delta: float = 0.01
    eval_every: int = 5
    eval_episodes: int = 8
    # transfer
    transfer: bool = True
    rce_samples: int = 20
    rce_mc: int = 500
    rce_grid: int = 11
    eta_r: float = 0.5
    eta_kd: float = 0.5
    beta_start: float = 1.0
    # generative replay
    gir: bool = True
    gir_epochs: int = 200
    gir_ratio: float = 0.5
    # scenario
    dataset_size: int = 512
    eval_size: int = 128
    w_cpu_bias: float = 0.0
    continue_on_error: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        checks = [
            (self.steps >= 1, "steps must be >= 1"),
            (self.generator in ("builtin", "external"), "generator must be 'builtin' or 'external'"),
            (self.generator != "external" or self.endpoint_config, "external generator needs endpoint_config"),
            (self.xi >= 0, "xi must be >= 0"),
            (0 <= self.sat_flag <= 1, "sat_flag must lie in [0, 1]"),
            (0 <= self.convergence <= 1, "convergence must lie in [0, 1]"),
            (self.kl_novelty >= 0, "kl_novelty must be >= 0"),
            (self.disc_flag >= 0, "disc_flag must be >= 0"),
            (self.fast_floor >= 0, "fast_floor must be >= 0"),
            (self.episode_cap >= 1, "episode_cap must be >= 1"),
            (0 <= self.min_episodes <= self.episode_cap, "min_episodes must lie in [0, episode_cap]"),
            (0 < self.gamma < 1, "gamma must lie in (0, 1)"),
            (self.lr > 0, "lr must be > 0"),
            (0 < self.gir_ratio <= 1, "gir_ratio must lie in (0, 1]"),
            (self.rce_samples >= 1 and self.rce_mc >= 1 and self.rce_grid >= 2, "RCE sizes too small"),
            (self.eta_r >= 0 and self.eta_kd >= 0, "eta values must be >= 0"),
            (0 <= self.beta_start <= 1, "beta_start must lie in [0, 1]"),
            (self.dataset_size >= 16 and self.eval_size >= 1, "dataset sizes too small"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_episodes=self.episode_cap, batch_size=self.batch_size, gamma=self.gamma,
                           lr=self.lr, eval_every=self.eval_every, plateau_window=self.plateau_window,
                           plateau_delta=self.plateau_delta, sat_threshold=self.convergence,
                           min_episodes=self.min_episodes)

    def thresholds(self) -> EvalThresholds:
        return EvalThresholds(sat_flag=self.sat_flag, convergence=self.convergence, disc=self.disc_flag,
                              kl_novelty=self.kl_novelty, fast_floor=self.fast_floor, episode_cap=self.episode_cap)

    def table(self) -> CurriculumTable:
        return CurriculumTable(dataset_size=self.dataset_size, eval_size=self.eval_size,
                               reward={"w_cpu_bias": self.w_cpu_bias} if self.w_cpu_bias else {})


def _clean(x):
    """Make floats JSON-stable (NaN/inf become None)."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1)


def new_network(spec: ScenarioSpec, env: EdgeEnv, config: RunConfig, seed: int) -> SchedNet:
    lay = env.feature_layout()
    return SchedNet(spec.resources.names, spec.services.names, lay["resource_group"], lay["net_block"],
                    env.n_actions, encoder_dim=config.encoder_dim, hidden=config.hidden, seed=seed,
                    lr=config.lr, layout_id=env.layout_id)


def _mask(env: EdgeEnv) -> np.ndarray:
    return env.capacity > 0


def _groups(spec: ScenarioSpec) -> dict:
    return {g: [spec.resources.index(r) for r in names] for g, names in spec.resources.groups().items()}


class CurriculumRunner:
    """Holds the evolving state of one curriculum run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.context = GenerationContext(seed=config.seed, table=config.table())
        self.net: SchedNet | None = None
        self.spec: ScenarioSpec | None = None
        self.experts: dict[str, ExpertProfile] = {}
        self.cvae: CvaeModel | None = None
        self.codec: RecordCodec | None = None
        self.intent_history: dict[str, np.ndarray] = {}
        self.service_tags: dict[str, str] = {}
        self.step_reports: list[dict] = []
        self.traces: list[dict] = []
        self.events: list[dict] = []

    # --- generation -----------------------------------------------------
    def _generate(self) -> ScenarioSpec:
        if self.config.generator == "external":
            return external_generate(self.context, EndpointConfig.from_file(self.config.endpoint_config))
        return next_scenario_builtin(self.context)

    # --- training dispatch -------------------------------------------------
    def _train(self, spec: ScenarioSpec, env: EdgeEnv, train_reqs, eval_eps, step_no: int) -> list[tuple[str, TrainResult]]:
        cfg = self.config
        seed = cfg.seed * 1000 + step_no
        tc = cfg.train_config()
        phases = []
        if self.net is None:
            net = new_network(spec, env, cfg, seed)
            res = DDQNTrainer(env, net, tc, seed=seed).train(train_reqs, eval_eps)
            return [("initial", res)]
        delta = spec.delta
        net = self.net
        prev = self.spec
        new_res = [r for r in delta.get("resources", []) if r not in prev.resources.names]
        new_svc = [s for s in delta.get("services", []) if s not in net.services]
        if new_res:
            env_old = EdgeEnv.from_scenario(prev)
            mid = spec
            if new_svc:
                # resource-first: train the expanded network on the old services only
                keep = [s for s in spec.services.names if s in prev.services.names]
                mid = _restrict_services(spec, keep)
            env_mid = EdgeEnv.from_scenario(mid)
            reqs = [r for r in train_reqs if spec.services.names[r.service_type] in mid.services.names]
            rc = RcetlConfig(xi=cfg.xi if cfg.transfer else None, grid=cfg.rce_grid, mc=cfg.rce_mc,
                             samples=cfg.rce_samples, seed=seed)
            res = train_rcetl(env_old, env_mid, net, reqs, eval_eps if mid is spec else
                              _episodes(env_mid, eval_dataset(mid), cfg, step_no), rc, tc, seed)
            net = res.net
            phases.append(("rcetl", res))
        for s in new_svc:
            net = net.add_head(s, seed=seed + 17)
            experts = [e for e in self.experts.values() if e.states.shape[1] == net.input_dim]
            similar = spec.services.entries[spec.services.index(s)].similar_to
            if experts and cfg.transfer:
                ac = ApotlConfig(eta_r=cfg.eta_r, eta_kd=cfg.eta_kd, beta_start=cfg.beta_start,
                                 beta_end=min(0.05, cfg.beta_start))
                res = train_apotl(env, net, experts, s, train_reqs, eval_eps, tc, ac, seed, similar)
            else:
                res = DDQNTrainer(env, net, tc, seed=seed).train(train_reqs, eval_eps)
            net = res.net
            phases.append(("apotl", res))
        if not phases:
            res = DDQNTrainer(env, net, tc, seed=seed).train(train_reqs, eval_eps)
            phases.append(("finetune", res))
        return phases

    # --- one step -----------------------------------------------------------
    def run_step(self, step_no: int) -> dict:
        cfg = self.config
        spec = self._generate()
        env = EdgeEnv.from_scenario(spec)
        services = spec.dataset_services
        new_reqs = synthesize_dataset(spec)
        train_reqs = list(new_reqs)
        provenance = {"new": len(new_reqs), "replay": 0}
        if cfg.gir and self.cvae is not None:
            recs = synthesize_replay(self.cvae, self.codec, len(new_reqs), seed=cfg.seed * 7919 + step_no)
            replay = records_to_requests(recs, spec, seed=cfg.seed * 31 + step_no)
            mixed = mix_dataset(new_reqs, replay, cfg.gir_ratio, seed=cfg.seed + step_no)
            train_reqs = [r for _, r in mixed]
            provenance = {"new": sum(p == "new" for p, _ in mixed), "replay": sum(p == "replay" for p, _ in mixed)}
        eval_eps = _episodes(env, eval_dataset(spec, services), cfg, step_no)
        phases = self._train(spec, env, train_reqs, eval_eps, step_no)
        net = phases[-1][1].net
        final = evaluate(env, net, eval_eps)
        isr_by_service = {}
        for s in spec.services.names:
            eps = _episodes(env, eval_dataset(spec, [s]), cfg, step_no)
            isr_by_service[s] = evaluate(env, net, eps).isr
        # expert profiles of every service seen in this step's experience
        last = phases[-1][1]
        for s in spec.services.names:
            try:
                self.experts[s] = ExpertProfile.from_replay(last.replay, net, s, seed=cfg.seed, scenario_tag=spec.tag)
            except ValueError:
                pass
        for s in spec.services.names:
            self.service_tags.setdefault(s, spec.tag)
        gir_trace = None
        if cfg.gir:
            gir_trace = self._fit_gir(spec, new_reqs, step_no)
        new_intents = np.array([r.intent.values for r in new_reqs])
        eval_trace = [(ep + (sum(p[1].episodes for p in phases[:i])), sat)
                      for i, (_, res) in enumerate(phases) for ep, sat in res.sat_trace()]
        report = build_report(
            spec.tag, final.sat, final.isr, final.utilization, _groups(spec), spec.resources.names,
            _mask(env), new_intents, dict(self.intent_history), eval_trace, cfg.thresholds(),
            introduces_resource=bool(spec.delta.get("resources")) and step_no > 1,
        )
        mixed_delta = bool(spec.delta.get("resources")) and bool(spec.delta.get("services"))
        directives = correction_verdict(report, cfg.thresholds(), mixed_delta)
        self.context.reports.append(report)
        self.context.submit(directives)
        self.intent_history[spec.tag] = new_intents
        for phase, res in phases:
            for row in res.trace:
                self.traces.append({"run": cfg.seed, "step": spec.tag, "phase": phase, **row})
        self.net, self.spec = net, spec
        summary = {
            "step": spec.tag,
            "delta": spec.delta,
            "source": spec.metadata.get("source"),
            "gir": cfg.gir,
            "provenance": provenance,
            "phases": [{
                "phase": phase,
                "episodes": res.episodes,
                "plateau": res.plateau,
                "threshold": res.threshold,
                "cap_hit": res.cap_hit,
                "final_cpu_offloaded": float(np.mean([r["cpu_offloaded"] for r in res.trace[-10:]])),
                "extra": res.extra,
            } for phase, res in phases],
            "eval": final.summary(),
            "isr_by_service": isr_by_service,
            "metrics": report.to_dict(),
            "directives": [d.to_dict() for d in directives],
            "applied_directives": spec.metadata.get("directives", []),
            "gir_loss": None if gir_trace is None else {k: v[-1] for k, v in gir_trace.items()},
        }
        return summary

    def _fit_gir(self, spec: ScenarioSpec, new_reqs, step_no: int) -> dict:
        cfg = self.config
        codec = RecordCodec(spec, self.service_tags)
        X_new = codec.encode(new_reqs)
        if self.cvae is None:
            X_old = X_new        # nothing older exists at the first step
        else:
            recs = synthesize_replay(self.cvae, self.codec, len(new_reqs), seed=cfg.seed * 131 + step_no)
            X_old = codec.encode(records_to_requests(recs, spec, seed=step_no))
        model = CvaeModel(codec.dim, seed=cfg.seed * 1000 + step_no)
        trace = model.fit(X_old, X_new, epochs=cfg.gir_epochs)
        self.cvae, self.codec = model, codec
        return trace

    def save_step(self, out: Path, summary: dict):
        d = out / summary["step"]
        d.mkdir(parents=True, exist_ok=True)
        self.spec.save(d / "scenario.json")
        (d / "checkpoint.json").write_text(json.dumps({"net": self.net.to_dict(), "scenario": self.spec.to_dict()}))
        (d / "report.json").write_text(dumps(summary))
        rows = [t for t in self.traces if t["step"] == summary["step"]]
        (d / "trace.json").write_text(dumps(rows))
        if self.cvae is not None:
            (d / "gir_model.json").write_text(json.dumps({"model": self.cvae.to_dict(), "tags": self.codec.tags}))


def _restrict_services(spec: ScenarioSpec, keep: Sequence[str]) -> ScenarioSpec:
    from .nsi import NsiMatrix, ServiceCatalog

    idx = [spec.services.index(s) for s in keep]
    services = ServiceCatalog(tuple(spec.services.entries[i] for i in idx), spec.services.version)
    nsi = NsiMatrix(np.array(spec.nsi.tensor)[:, idx, :], spec.nsi.resource_version, spec.nsi.service_version,
                    spec.nsi.version)
    return replace(spec, services=services, nsi=nsi, dataset=tuple((s, c) for s, c in spec.dataset if s in keep))


def _episodes(env: EdgeEnv, requests, config: RunConfig, step_no: int):
    return make_episodes(requests, env.params.episode_length, config.eval_episodes, env.params.arrival_gap,
                         np.random.default_rng([config.seed, step_no, 99]))


def run_curriculum(config: RunConfig) -> dict:
    """Generate, train, evaluate and correct for ``config.steps`` scenarios."""
    runner = CurriculumRunner(config)
    out = Path(config.output_dir) if config.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(dumps(config.to_dict()))
    for step_no in range(1, config.steps + 1):
        try:
            summary = runner.run_step(step_no)
        except CurriculumDone:
            runner.events.append({"event": "curriculum_done", "step": step_no})
            break
        except Exception as exc:  # noqa: BLE001 - structured per-step failure
            summary = {"step": f"step-{step_no}", "error": type(exc).__name__, "message": str(exc)}
            runner.step_reports.append(summary)
            if out is not None:
                (out / f"step-{step_no}-error.json").write_text(dumps(summary))
            if not config.continue_on_error:
                break
            continue
        runner.step_reports.append(summary)
        if out is not None:
            runner.save_step(out, summary)
    report = {
        "variant": "gir" if config.gir else "no-gir",
        "config": config.to_dict(),
        "steps": runner.step_reports,
        "events": runner.events + runner.context.events,
        "traces": runner.traces,
    }
    if out is not None:
        (out / "curriculum.json").write_text(dumps({k: v for k, v in report.items() if k != "traces"}))
        if any("error" not in s for s in runner.step_reports):
            export_metrics(out)
    report["runner"] = runner
    return report


# --- inference ------------------------------------------------------------
def load_checkpoint(path) -> tuple[SchedNet, ScenarioSpec]:
    d = json.loads(Path(path).read_text())
    return SchedNet.from_dict(d["net"]), ScenarioSpec.from_dict(d["scenario"])


def infer(net: SchedNet, spec: ScenarioSpec, intents: Sequence[dict], sequential: bool = False) -> list[dict]:
    """Greedy scheduling decisions for structured intents, in input order.

    Each item is ``{"service": name, "intent": {label: value}, "user_position": [x, y]}``.
    """
    env = EdgeEnv.from_scenario(spec)
    state = env.reset(0)
    out = []
    for k, item in enumerate(intents):
        name = item["service"]
        if name not in spec.services.names:
            raise NsiError(f"unknown service type {name!r}")
        i = spec.services.index(name)
        values = IntentVector.from_mapping({**item["intent"], "service_code": spec.services.entries[i].code})
        pos = item.get("user_position", [0.0, 0.0])
        req = make_request(spec, i, values.values, pos, k).with_arrival(float(item.get("arrival_time", 0.0)), k)
        if not sequential:
            state = env.reset(0)
        s = env.encode_state(state, req)
        a = env.action(int(np.argmax(net.forward(s, i))))
        new_state, tau, outcome = env.step(state, req, a)
        if sequential:
            state = new_state
        out.append({
            "index": k,
            "service": name,
            "node": a.node,
            "multiplier": a.alloc_multiplier,
            "allocation": dict(zip(spec.resources.names, outcome.allocation.tolist())),
            "requirement": dict(zip(spec.resources.names, req.requirement.values.tolist())),
            "feasible": outcome.success,
            "predicted_latency": outcome.execution_latency if outcome.success else None,
            "reward": tau,
        })
    return out


# --- export ----------------------------------------------------------------
def export_metrics(run_dir, fmt: str = "both") -> list[Path]:
    """Write ``episodes.csv`` (per episode) and ``steps.json`` (per step) into ``run_dir``."""
    run = Path(run_dir)
    if fmt not in ("csv", "json", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    reports = sorted(run.glob("step-*/report.json"), key=lambda p: _step_key(p.parent.name))
    if not reports:
        raise FileNotFoundError(f"no step reports under {run}")
    written = []
    if fmt in ("csv", "both"):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=EPISODE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rp in reports:
            for row in json.loads((rp.parent / "trace.json").read_text()):
                w.writerow({k: _fmt(row.get(k)) for k in EPISODE_COLUMNS})
        (run / "episodes.csv").write_text(buf.getvalue())
        written.append(run / "episodes.csv")
    if fmt in ("json", "both"):
        steps = []
        for rp in reports:
            r = json.loads(rp.read_text())
            steps.append({k: r.get(k) for k in ("step", "delta", "eval", "isr_by_service", "metrics",
                                                 "directives", "applied_directives", "provenance", "gir")}
                         | {"phases": [{k: p[k] for k in ("phase", "episodes", "plateau", "threshold",
                                                          "cap_hit", "final_cpu_offloaded")}
                                       for p in r.get("phases", [])]})
        (run / "steps.json").write_text(dumps(steps))
        written.append(run / "steps.json")
    return written


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _step_key(name: str):
    digits = "".join(ch for ch in name.split("-")[-1] if ch.isdigit())
    return (int(digits) if digits else 0, name)
