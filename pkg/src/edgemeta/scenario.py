"""Scenario specifications and the generators that produce them.

The built-in generator walks a fixed curriculum (resources first, then services)
and runs two scripted reasoning procedures: one for introducing a resource type
and one for introducing a service type.  An optional adapter asks an external
JSON completion endpoint instead and falls back to the built-in on failure.
"""
from __future__ import annotations

import copy
import itertools
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources as importlib_resources
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from .env import EdgeEnv, EnvParams, NodeSpec, ServiceRequest
from .metrics import CorrectionDirective
from .nsi import (
    BINARY_LABELS,
    INTENT_LABELS,
    INTENT_RANGES,
    FineGrainedIntent,
    IntentVector,
    NsiError,
    NsiMatrix,
    ResourceCatalog,
    ResourceType,
    ServiceCatalog,
    ServiceType,
    ValidationReport,
    expand_resources,
    expand_services,
    init_service_submatrix,
    map_intent,
    raw_demand,
    rescale_resources,
    validate_matrix,
)

SPEC_FORMAT = "edgemeta-scenario/1"


class ScenarioError(ValueError):
    def __init__(self, message: str, report: ValidationReport | None = None):
        super().__init__(message)
        self.report = report


class CurriculumDone(Exception):
    """The curriculum has no further step and no directive asks for one."""


class DirectiveError(ValueError):
    pass


# --- scenario spec ------------------------------------------------------
@dataclass(frozen=True)
class ScenarioSpec:
    resources: ResourceCatalog
    services: ServiceCatalog
    nsi: NsiMatrix
    env: EnvParams
    dataset: tuple[tuple[str, int], ...]
    dataset_seed: int = 0
    eval_size: int = 128
    metadata: dict = field(default_factory=dict)

    @property
    def tag(self) -> str:
        return self.metadata.get("tag", "")

    @property
    def delta(self) -> dict:
        return self.metadata.get("delta", {"resources": [], "services": []})

    @property
    def dataset_services(self) -> list[str]:
        return [s for s, c in self.dataset if c > 0]

    def to_dict(self) -> dict:
        return {
            "format": SPEC_FORMAT,
            "resources": self.resources.to_dict(),
            "services": self.services.to_dict(),
            "nsi": self.nsi.to_dict(),
            "env": self.env.to_dict(),
            "dataset": [{"service": s, "count": int(c)} for s, c in self.dataset],
            "dataset_seed": int(self.dataset_seed),
            "eval_size": int(self.eval_size),
            "metadata": copy.deepcopy(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        if d.get("format", SPEC_FORMAT) != SPEC_FORMAT:
            raise ScenarioError(f"unsupported scenario format {d.get('format')!r}")
        return cls(
            resources=ResourceCatalog.from_dict(d["resources"]),
            services=ServiceCatalog.from_dict(d["services"]),
            nsi=NsiMatrix.from_dict(d["nsi"]),
            env=EnvParams.from_dict(d["env"]),
            dataset=tuple((e["service"], int(e["count"])) for e in d["dataset"]),
            dataset_seed=int(d.get("dataset_seed", 0)),
            eval_size=int(d.get("eval_size", 128)),
            metadata=copy.deepcopy(d.get("metadata", {})),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_schema(name: str) -> dict:
    ref = importlib_resources.files("edgemeta").joinpath("schemas", name)
    return json.loads(ref.read_text())


# --- curriculum table -----------------------------------------------------
RESOURCE_TABLE: dict[str, ResourceType] = {
    "cpu": ResourceType("cpu", "cores", 0.0, 8.0, "dataproc", "compute"),
    "storage": ResourceType("storage", "GB", 0.0, 64.0, "storage", "storage"),
    "gpu": ResourceType("gpu", "units", 0.0, 4.0, "graphics", "compute"),
    "dpu": ResourceType("dpu", "units", 0.0, 4.0, "dataproc", "offload", "cpu"),
}

_LAT, _SEC = FineGrainedIntent("latency", "<=", "latency"), FineGrainedIntent("security", ">=", "security")

# Binary labels carry (p, p): the probability that the flag is set.
SERVICE_TABLE: dict[str, ServiceType] = {
    "rt": ServiceType("rt", 1, {"service_code": (1, 1), "latency": (1.5, 3.0), "security": (0.3, 0.3),
                                "throughput": (2.0, 6.0), "accuracy": (0.5, 0.9), "priority": (0.3, 1.0)},
                      (_LAT, _SEC)),
    "vr": ServiceType("vr", 2, {"service_code": (2, 2), "latency": (3.0, 6.0), "security": (0.1, 0.1),
                                "throughput": (4.0, 10.0), "accuracy": (0.6, 1.0), "priority": (0.2, 0.8)},
                      (_LAT, _SEC)),
    "iov": ServiceType("iov", 3, {"service_code": (3, 3), "latency": (1.2, 2.5), "security": (0.3, 0.3),
                                  "throughput": (2.0, 5.0), "accuracy": (0.5, 0.9), "priority": (0.5, 1.0)},
                       (_LAT, _SEC), similar_to=("rt",)),
    "img": ServiceType("img", 4, {"service_code": (4, 4), "latency": (3.5, 6.5), "security": (0.2, 0.2),
                                  "throughput": (4.0, 8.0), "accuracy": (0.7, 1.0), "priority": (0.2, 0.7)},
                       (_LAT, _SEC), similar_to=("vr",)),
}

# Demand coefficients per (service, resource) over INTENT_LABELS.
NSI_TABLE: dict[str, dict[str, tuple[float, ...]]] = {
    "rt": {"cpu": (0, 0, 0.5, 0.4, 0, 1.0), "storage": (0, 0, 0, 2.0, 4.0, 0),
           "gpu": (0, 0, 0, 0, 0, 0), "dpu": (0, 0, 0, 0.2, 0, 0.5)},
    "vr": {"cpu": (0, 0, 0, 0.25, 0, 0.5), "storage": (0, 0, 0, 3.0, 2.0, 0),
           "gpu": (0, 0, 0, 0.3, 0.5, 0), "dpu": (0, 0, 0, 0.1, 0, 0)},
}

SERVICE_PARAMS = {  # base execution time (s), data-processing fraction q
    "rt": (1.0, 0.5), "vr": (2.0, 0.2), "iov": (0.8, 0.4), "img": (2.5, 0.3),
}

NODE_TABLE = (
    ((0.5, 0.5), {"cpu": 8.0, "storage": 64.0, "gpu": 0.0, "dpu": 4.0}, True),
    ((3.5, 0.5), {"cpu": 24.0, "storage": 256.0, "gpu": 8.0, "dpu": 0.0}, False),
    ((2.0, 3.5), {"cpu": 8.0, "storage": 64.0, "gpu": 6.0, "dpu": 4.0}, False),
)

CURRICULUM: tuple[dict, ...] = (
    {"resources": ["cpu", "storage"], "services": ["rt"]},
    {"resources": ["gpu"], "services": []},
    {"resources": ["dpu"], "services": []},
    {"resources": [], "services": ["vr"]},
    {"resources": [], "services": ["iov"]},
    {"resources": [], "services": ["img"]},
)


@dataclass(frozen=True)
class CurriculumTable:
    """Everything the built-in generator needs; override pieces for fixtures."""

    resources: dict = field(default_factory=lambda: dict(RESOURCE_TABLE))
    services: dict = field(default_factory=lambda: dict(SERVICE_TABLE))
    nsi: dict = field(default_factory=lambda: copy.deepcopy(NSI_TABLE))
    service_params: dict = field(default_factory=lambda: dict(SERVICE_PARAMS))
    nodes: tuple = NODE_TABLE
    steps: tuple = CURRICULUM
    dataset_size: int = 512
    eval_size: int = 128
    kappa: float = 0.3
    episode_length: int = 16
    # optional per-step row scale factors applied when a resource is introduced
    adjust: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)


# --- generation context ------------------------------------------------
@dataclass
class GenerationContext:
    seed: int = 0
    table: CurriculumTable = field(default_factory=CurriculumTable)
    history: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    pending: list = field(default_factory=list)
    consumed: set = field(default_factory=set)
    events: list = field(default_factory=list)
    queue: list = field(default_factory=list)   # remainder of a decomposed step

    def submit(self, directives: Sequence[CorrectionDirective]):
        """Queue directives for the next scenario; each may be applied only once."""
        known = self.consumed | {d.id for d in self.pending}
        for d in directives:
            if d.id in known:
                raise DirectiveError(f"directive {d.kind} ({d.id}) was already submitted")
            self.pending.append(d)
            known.add(d.id)

    @property
    def last(self) -> ScenarioSpec | None:
        return self.history[-1] if self.history else None


# --- built-in generator ---------------------------------------------------
def _node_specs(table: CurriculumTable, names: Sequence[str]) -> tuple[NodeSpec, ...]:
    return tuple(NodeSpec(pos, {r: float(cap[r]) for r in names}, sec) for pos, cap, sec in table.nodes)


def _env_params(table: CurriculumTable, nodes, services: Sequence[str]) -> EnvParams:
    from .env import RewardWeights

    return EnvParams(
        nodes=tuple(nodes),
        base_time={s: table.service_params[s][0] for s in services},
        offload_fraction={s: table.service_params[s][1] for s in services},
        kappa=table.kappa,
        episode_length=table.episode_length,
        reward=RewardWeights(**table.reward),
    )


def _nsi_rows(table: CurriculumTable, service: str, resource: str) -> np.ndarray:
    return np.asarray(table.nsi[service][resource], dtype=float)


def initial_scenario(table: CurriculumTable, seed: int = 0) -> ScenarioSpec:
    step = table.steps[0]
    resources = ResourceCatalog(tuple(table.resources[r] for r in step["resources"]), 1)
    services = ServiceCatalog(tuple(table.services[s] for s in step["services"]), 1)
    tensor = np.array([[_nsi_rows(table, s, r) for s in services.names] for r in resources.names])
    nsi = NsiMatrix(tensor, 1, 1, 1)
    env = _env_params(table, _node_specs(table, resources.names), services.names)
    trace = [
        f"initialise catalog with resources {resources.names} and services {services.names}",
        "load documented default N-S-I coefficients",
    ]
    return ScenarioSpec(
        resources, services, nsi, env,
        dataset=tuple((s, table.dataset_size // len(services.names)) for s in services.names),
        dataset_seed=seed * 1000 + 1,
        eval_size=table.eval_size,
        metadata={"source": "builtin", "step": 1, "tag": "step-1", "parent": None,
                  "delta": {"resources": list(resources.names), "services": list(services.names)},
                  "cot": trace, "directives": []},
    )


def introduce_resource(parent: ScenarioSpec, table: CurriculumTable, name: str,
                       trace: list) -> ScenarioSpec:
    """Scripted reasoning for a new resource type: assess, expand, adjust."""
    rtype = table.resources[name]
    trace.append(f"consider integration of resource '{name}' ({rtype.unit}, group {rtype.group})")
    rows = []
    for s in parent.services.names:
        ref = s if s in table.nsi else _similar_root(table, s)
        row = _nsi_rows(table, ref, name)
        rows.append(row)
        trace.append(f"assess demand of '{s}' for '{name}': coefficients {list(row)}")
    new_rows = np.asarray(rows)[None, :, :]
    scales = table.adjust.get(name)
    adjust = None
    if scales:
        adjust = [float(scales.get(r, 1.0)) for r in parent.resources.names]
        trace.append(f"adjust existing rows with factors {adjust}")
    else:
        trace.append("existing rows kept (identity adjustment)")
    nsi = expand_resources(parent.nsi, new_rows, adjust)
    resources = parent.resources.extended(rtype)
    trace.append(f"update mapping to N-S-I v{nsi.version} with shape {list(nsi.shape)}")
    nodes = tuple(
        NodeSpec(n.position, {**n.capacity, name: float(table.nodes[i][1][name])}, n.secure)
        for i, n in enumerate(parent.env.nodes)
    )
    env = replace(parent.env, nodes=nodes)
    services = parent.services.names
    dataset = tuple((s, table.dataset_size // len(services)) for s in services)
    return replace(parent, resources=resources, nsi=nsi, env=env, dataset=dataset)


def _similar_root(table: CurriculumTable, service: str) -> str:
    seen = service
    while seen not in table.nsi:
        sim = table.services[seen].similar_to
        if not sim:
            raise ScenarioError(f"service {service!r} has neither coefficients nor a similar service")
        seen = sim[0]
    return seen


def introduce_service(parent: ScenarioSpec, table: CurriculumTable, name: str,
                      trace: list) -> ScenarioSpec:
    """Scripted reasoning for a new service type: template, blend, expand."""
    stype = table.services[name]
    trace.append(f"consider new service '{name}' with intent template {dict(stype.intent_template)}")
    known = [s for s in stype.similar_to if s in parent.services.names]
    if known:
        idx = [parent.services.index(s) for s in known]
        w = np.full(len(idx), 1.0 / len(idx))
        cols = init_service_submatrix(parent.nsi, idx, w)
        trace.append(f"derive requirements from similar services {known} with weights {w.tolist()}")
    else:
        cols = np.array([_nsi_rows(table, name, r) for r in parent.resources.names])[:, None, :]
        trace.append("no similar service in catalog; use documented coefficients")
    nsi = expand_services(parent.nsi, cols)
    services = parent.services.extended(stype)
    trace.append(f"update mapping to N-S-I v{nsi.version} with shape {list(nsi.shape)}")
    base = dict(parent.env.base_time)
    q = dict(parent.env.offload_fraction)
    base[name], q[name] = table.service_params[name]
    env = replace(parent.env, base_time=base, offload_fraction=q)
    return replace(parent, services=services, nsi=nsi, env=env, dataset=((name, table.dataset_size),))


def _scale_template(stype: ServiceType, label: str, factor: float) -> ServiceType:
    tpl = dict(stype.intent_template)
    if label not in tpl:
        return stype
    lo, hi = tpl[label]
    if label in BINARY_LABELS:
        p = min(max(hi / factor, 0.0), 1.0)
        tpl[label] = (p, p)
    else:
        cap = INTENT_RANGES[label][1]
        tpl[label] = (min(lo * factor, cap), min(hi * factor, cap))
    return replace(stype, intent_template=tpl)


def apply_directive(spec: ScenarioSpec, d: CorrectionDirective, trace: list,
                    table: CurriculumTable) -> ScenarioSpec:
    args = d.args
    if d.kind == "create_resource_bottleneck":
        r, f = args.get("resource"), float(args.get("factor", 0.5))
        if r not in spec.resources.names:
            trace.append(f"bottleneck on unknown resource {r!r} skipped")
            return spec
        nodes = tuple(NodeSpec(n.position, {**n.capacity, r: n.capacity[r] * f}, n.secure) for n in spec.env.nodes)
        trace.append(f"create bottleneck: {r} capacity x{f}")
        return replace(spec, env=replace(spec.env, nodes=nodes))
    if d.kind == "adjust_nsi_weights":
        r, f = args.get("resource"), float(args.get("factor", 0.8))
        if r not in spec.resources.names:
            trace.append(f"weight adjustment on unknown resource {r!r} skipped")
            return spec
        scales = [f if name == r else 1.0 for name in spec.resources.names]
        trace.append(f"adjust N-S-I weights: {r} rows x{f}")
        return replace(spec, nsi=rescale_resources(spec.nsi, scales))
    if d.kind == "relax_intent_constraint":
        label, f = args.get("intent", "latency"), float(args.get("factor", 1.2))
        services = ServiceCatalog(tuple(_scale_template(s, label, f) for s in spec.services.entries),
                                  spec.services.version)
        trace.append(f"relax intent '{label}' by x{f}")
        return replace(spec, services=services)
    if d.kind == "regenerate_scenario":
        trace.append(f"regenerate dataset ({args.get('reason', 'unspecified')})")
        return replace(spec, dataset_seed=spec.dataset_seed + 7919)
    if d.kind == "reduce_difficulty":
        services = ServiceCatalog(tuple(_scale_template(s, "latency", 1.25) for s in spec.services.entries),
                                  spec.services.version)
        lo, hi = spec.env.arrival_gap
        trace.append("reduce difficulty: latency targets x1.25, arrival gaps x1.25")
        return replace(spec, services=services, env=replace(spec.env, arrival_gap=(lo * 1.25, hi * 1.25)))
    raise DirectiveError(f"directive {d.kind} cannot be applied to a spec")


def _split_mixed(parent: ScenarioSpec, step: dict) -> tuple[dict, dict] | None:
    if step["resources"] and step["services"]:
        return ({"resources": step["resources"], "services": []},
                {"resources": [], "services": step["services"]})
    return None


def _build_step(parent: ScenarioSpec, table: CurriculumTable, delta: dict, trace: list) -> ScenarioSpec:
    spec = parent
    for r in delta["resources"]:
        spec = introduce_resource(spec, table, r, trace)
    for s in delta["services"]:
        spec = introduce_service(spec, table, s, trace)
    if delta["resources"] and delta["services"]:
        spec = replace(spec, dataset=tuple((s, table.dataset_size // spec.services.n) for s in spec.services.names))
    return spec


def next_scenario_builtin(context: GenerationContext) -> ScenarioSpec:
    """Emit the next curriculum scenario, applying and consuming pending directives."""
    table = context.table
    parent = context.last
    pending, context.pending = list(context.pending), []
    if context.queue:
        delta, meta = context.queue.pop(0)
        trace = [f"continue decomposed step {meta['step']} with services {delta['services']}"]
        spec = _build_step(parent, table, delta, trace)
        tag = f"step-{meta['step']}b"
        step_no = meta["step"]
    elif parent is None:
        spec = initial_scenario(table, context.seed)
        trace = list(spec.metadata["cot"])
        delta = spec.delta
        tag, step_no = "step-1", 1
    else:
        step_no = int(parent.metadata.get("step", 0)) + 1
        if step_no > len(table.steps):
            if not pending:
                raise CurriculumDone("curriculum exhausted")
            step_no = len(table.steps)
            delta = {"resources": [], "services": []}
        else:
            delta = table.steps[step_no - 1]
        trace = []
        if any(d.kind == "decompose_scenario" for d in pending):
            split = _split_mixed(parent, delta)
            if split is not None:
                delta, rest = split
                context.queue.append((rest, {"step": step_no}))
                trace.append("decompose step into resource-only then service-only scenarios")
            else:
                trace.append("single-delta step cannot be decomposed; reducing difficulty instead")
                pending = [replace(d, kind="reduce_difficulty") if d.kind == "decompose_scenario" else d
                           for d in pending]
        spec = _build_step(parent, table, delta, trace)
        tag = f"step-{step_no}" + ("a" if context.queue else "")
        spec = replace(spec, dataset_seed=context.seed * 1000 + step_no)
    applied = []
    for d in pending:
        if d.id in context.consumed:
            raise DirectiveError(f"directive {d.id} was already applied")
        if d.kind != "decompose_scenario":
            spec = apply_directive(spec, d, trace, table)
        context.consumed.add(d.id)
        applied.append(d.to_dict())
    spec = replace(spec, metadata={
        "source": "builtin", "step": step_no, "tag": tag,
        "parent": parent.tag if parent is not None else None,
        "delta": {"resources": list(delta["resources"]), "services": list(delta["services"])},
        "cot": trace, "directives": applied,
    })
    report = validate_scenario(spec)
    if not report.ok:
        raise ScenarioError(f"generated scenario {tag} is invalid", report)
    context.history.append(spec)
    return spec


# --- dataset synthesis --------------------------------------------------
def sample_intents(stype: ServiceType, count: int, rng: np.random.Generator,
                   labels: Sequence[str] = INTENT_LABELS) -> np.ndarray:
    out = np.zeros((count, len(labels)))
    for j, label in enumerate(labels):
        lo, hi = stype.intent_template.get(label, (0.0, 0.0))
        if label in BINARY_LABELS:
            out[:, j] = (rng.random(count) < hi).astype(float)
        elif label == "service_code":
            out[:, j] = stype.code
        else:
            out[:, j] = rng.uniform(lo, hi, size=count)
    return out


def _fits_somewhere(env: EdgeEnv, demand: np.ndarray) -> bool:
    lvl = min(env.levels)
    for k in range(env.n_nodes):
        alloc = env.allocation(demand, k, lvl)
        lacking = (~env.optional) & (env.capacity[k] <= 0) & (alloc > 0)
        if not np.any(lacking) and np.all(alloc <= env.capacity[k]):
            return True
    return False


def make_request(spec: ScenarioSpec, service: int, intent_values, user_position, request_id=0) -> ServiceRequest:
    stype = spec.services.entries[service]
    intent = IntentVector(intent_values)
    req = map_intent(spec.nsi, service, intent, spec.resources)
    return ServiceRequest(service, intent, req, np.asarray(user_position, float), 0.0,
                          intent["latency"] * spec.env.deadline_factor, stype.fine_grained, request_id)


def synthesize_dataset(spec: ScenarioSpec, size: int | None = None, seed: int | None = None,
                       services: Sequence[str] | None = None, max_tries: int = 50) -> list[ServiceRequest]:
    """Sample requests from the service templates and map them through the N-S-I tensor.

    ``size`` rescales the per-service counts of ``spec.dataset`` proportionally.
    Samples that no node could host are redrawn.
    """
    seed = spec.dataset_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    entries = [(s, c) for s, c in spec.dataset if services is None or s in services]
    if services is not None and not entries:
        entries = [(s, 1) for s in services]
    total = sum(c for _, c in entries)
    if size is None:
        counts = [c for _, c in entries]
    elif total == 0 or size == 0:
        counts = [0] * len(entries)
    else:
        counts = [int(size * c // total) for _, c in entries]
        for i in range(size - sum(counts)):
            counts[i % len(counts)] += 1
    env = EdgeEnv(spec.resources, spec.services, spec.env)
    area = np.asarray(spec.env.user_area, float)
    out: list[ServiceRequest] = []
    for (name, _), count in zip(entries, counts):
        i = spec.services.index(name)
        stype = spec.services.entries[i]
        for _ in range(count):
            for _attempt in range(max_tries):
                values = sample_intents(stype, 1, rng)[0]
                pos = rng.uniform(0.0, 1.0, size=2) * area
                req = make_request(spec, i, values, pos, len(out))
                if _fits_somewhere(env, req.requirement.values):
                    break
            else:
                raise ScenarioError(f"could not draw a feasible request for service {name!r}")
            out.append(req)
    order = rng.permutation(len(out))
    return [out[k] for k in order]


def eval_dataset(spec: ScenarioSpec, services: Sequence[str] | None = None, size: int | None = None):
    return synthesize_dataset(spec, spec.eval_size if size is None else size,
                              seed=spec.dataset_seed + 500_000, services=services)


# --- validation -----------------------------------------------------------
def _template_corners(stype: ServiceType, labels=INTENT_LABELS):
    axes = []
    for label in labels:
        lo, hi = stype.intent_template.get(label, (0.0, 0.0))
        if label in BINARY_LABELS:
            axes.append((0.0, 1.0) if hi > 0 else (0.0,))
        elif label == "service_code":
            axes.append((float(stype.code),))
        else:
            axes.append((float(lo), float(hi)))
    return itertools.product(*axes)


def validate_scenario(spec: ScenarioSpec, requests: Sequence[ServiceRequest] | None = None) -> ValidationReport:
    """Consistency, parameter-range and feasibility report (never raises on bad content)."""
    report = validate_matrix(spec.nsi, spec.resources, spec.services)
    p = spec.env
    if not p.nodes:
        report.add("parameters", "scenario declares zero nodes")
    for k, node in enumerate(p.nodes):
        extra = set(node.capacity) - set(spec.resources.names)
        if extra:
            report.add("consistency", f"node {k} lists resources {sorted(extra)} missing from the catalog")
        for r, v in node.capacity.items():
            if not np.isfinite(v) or v < 0:
                report.add("parameters", f"node {k} capacity {r}={v} must be finite and >= 0")
    for s in spec.services.names:
        bt = p.base_time.get(s)
        if bt is None or not bt > 0:
            report.add("parameters", f"service {s!r} needs a positive base time")
        q = p.offload_fraction.get(s, 0.0)
        if not 0.0 <= q <= 1.0:
            report.add("parameters", f"offload fraction of {s!r} must lie in [0, 1]")
    if p.kappa < 0:
        report.add("parameters", "kappa must be >= 0")
    if not p.multiplier_levels or any(not m > 0 for m in p.multiplier_levels):
        report.add("parameters", "multiplier levels must be positive")
    if p.episode_length < 1:
        report.add("parameters", "episode length must be >= 1")
    if not 0 <= p.arrival_gap[0] <= p.arrival_gap[1]:
        report.add("parameters", "arrival gap must satisfy 0 <= low <= high")
    if not p.deadline_factor > 0:
        report.add("parameters", "deadline factor must be > 0")
    for name, count in spec.dataset:
        if name not in spec.services.names:
            report.add("consistency", f"dataset references unknown service {name!r}")
        if count < 0:
            report.add("parameters", f"dataset count for {name!r} is negative")
    for stype in spec.services.entries:
        for label, (lo, hi) in stype.intent_template.items():
            if label not in INTENT_RANGES:
                report.add("consistency", f"service {stype.name!r}: unknown intent label {label!r}")
                continue
            rlo, rhi = INTENT_RANGES[label]
            if not (rlo <= lo <= hi <= rhi) or (label == "latency" and lo <= 0):
                report.add("parameters", f"service {stype.name!r}: template {label}=({lo}, {hi}) out of range")
        for fg in stype.fine_grained:
            if fg.metric not in ("latency", "security"):
                report.add("consistency", f"service {stype.name!r}: metric {fg.metric!r} is not measured")
    if not report.ok:
        return report
    try:
        env = EdgeEnv(spec.resources, spec.services, spec.env)
    except Exception as exc:  # noqa: BLE001 - report, do not raise
        report.add("consistency", f"environment cannot be built: {exc}")
        return report
    for name in spec.dataset_services:
        i = spec.services.index(name)
        worst = None
        for corner in _template_corners(spec.services.entries[i]):
            d = np.clip(raw_demand(spec.nsi, i, np.asarray(corner)), 0.0, spec.resources.upper)
            worst = d if worst is None else np.maximum(worst, d)
        if worst is not None and not _fits_somewhere(env, worst):
            report.add("infeasible", f"worst-case demand of {name!r} {worst.round(3).tolist()} fits no node")
    for req in requests or ():
        if not _fits_somewhere(env, req.requirement.values):
            report.add("infeasible", f"request {req.request_id} demand {req.requirement.values.tolist()} fits no node")
    return report


# --- external generator -----------------------------------------------------
@dataclass(frozen=True)
class EndpointConfig:
    url: str
    credential_env: str = "EDGEMETA_API_KEY"
    timeout: float = 60.0
    retries: int = 2

    @classmethod
    def from_file(cls, path) -> "EndpointConfig":
        return cls(**json.loads(Path(path).read_text()))


class EndpointError(RuntimeError):
    pass


def http_transport(url: str, payload: dict, headers: dict, timeout: float) -> str:
    import urllib.request

    req = urllib.request.Request(url, data=json.dumps(payload).encode(), headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:  # noqa: S310 - configured endpoint
        return resp.read().decode()


def build_prompt(context: GenerationContext) -> dict:
    last = context.last
    return {
        "schema": "edgemeta-generation-request/1",
        "resources": last.resources.to_dict() if last else None,
        "services": last.services.to_dict() if last else None,
        "nsi": last.nsi.to_dict() if last else None,
        "history": [{"tag": s.tag, "delta": s.delta} for s in context.history],
        "directives": [d.to_dict() for d in context.pending],
        "seed": context.seed,
    }


def external_generate(context: GenerationContext, endpoint: EndpointConfig,
                      transport: Callable[[str, dict, dict, float], str] = http_transport) -> ScenarioSpec:
    """Ask the endpoint for the next scenario; validate it, retry, then fall back.

    Raises :class:`EndpointError` only when the credential is missing.
    """
    key = os.environ.get(endpoint.credential_env)
    if not key:
        raise EndpointError(f"credential variable {endpoint.credential_env} is not set")
    schema = load_schema("generation_response.schema.json")
    spec_schema = load_schema("scenario.schema.json")
    payload = build_prompt(context)
    headers = {"Content-Type": "application/json", "Authorization": f"Bearer {key}"}
    failures = []
    for attempt in range(endpoint.retries + 1):
        try:
            raw = transport(endpoint.url, payload, headers, endpoint.timeout)
            doc = json.loads(raw)
            jsonschema.validate(doc, schema)
            jsonschema.validate(doc["scenario"], spec_schema)
            spec = ScenarioSpec.from_dict(doc["scenario"])
            report = validate_scenario(spec)
            if not report.ok:
                raise ScenarioError("scenario failed validation", report)
        except ScenarioError as exc:
            detail = exc.report.to_dict() if exc.report is not None else str(exc)
            failures.append({"attempt": attempt, "error": "validation", "detail": detail})
            continue
        except (OSError, ValueError, KeyError, TypeError, jsonschema.ValidationError, NsiError) as exc:
            failures.append({"attempt": attempt, "error": type(exc).__name__, "detail": str(exc)})
            continue
        meta = dict(spec.metadata)
        meta.setdefault("step", (int(context.last.metadata.get("step", 0)) + 1) if context.last else 1)
        meta.setdefault("tag", f"step-{meta['step']}")
        meta["source"] = "external"
        meta["parent"] = context.last.tag if context.last else None
        meta["directives"] = [d.to_dict() for d in context.pending]
        for d in context.pending:
            context.consumed.add(d.id)
        context.pending = []
        spec = replace(spec, metadata=meta)
        context.history.append(spec)
        return spec
    context.events.append({"event": "fallback", "source": "external", "failures": failures})
    return next_scenario_builtin(context)
