"""Seed-deterministic edge-network simulator.

A request is placed on one node with an allocation ``multiplier * requirement``.
Execution time follows

    base_time(service) * max_r(effective_demand_r / alloc_r) + kappa * distance

over compute resources, where an offload resource (DPU) removes
``min(dpu_alloc, q * cpu_demand)`` from the CPU demand.  Allocations are held
until the task finishes and are released when the clock passes its finish time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .nsi import INTENT_LABELS, IntentVector, ResourceCatalog, ResourceVector, ServiceCatalog

# Allocations are quantised to 1/1024 of a unit so resource bookkeeping
# (capacity == available + sum of in-flight allocations) is exact in floating point.
ALLOC_QUANTUM = 1.0 / 1024.0
INFEASIBLE_REWARD = -1.0


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class RewardWeights:
    w_sat: float = 1.0
    w_lat: float = 0.5
    w_cost: float = 0.2
    # Fault-injection switch: penalises CPU work moved to offload engines.
    w_cpu_bias: float = 0.0


@dataclass(frozen=True)
class NodeSpec:
    position: tuple[float, float]
    capacity: dict
    secure: bool = False

    def to_dict(self) -> dict:
        return {"position": list(self.position), "capacity": dict(self.capacity), "secure": self.secure}

    @classmethod
    def from_dict(cls, d: dict) -> "NodeSpec":
        return cls(tuple(d["position"]), {k: float(v) for k, v in d["capacity"].items()}, bool(d["secure"]))


@dataclass(frozen=True)
class EnvParams:
    nodes: tuple[NodeSpec, ...]
    base_time: dict
    offload_fraction: dict
    kappa: float = 0.3
    multiplier_levels: tuple[float, ...] = (1.0, 1.25, 1.5)
    episode_length: int = 16
    arrival_gap: tuple[float, float] = (0.3, 0.7)
    user_area: tuple[float, float] = (4.0, 4.0)
    deadline_factor: float = 1.0
    latency_scale: float = 5.0
    reward: RewardWeights = RewardWeights()

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "base_time": dict(self.base_time),
            "offload_fraction": dict(self.offload_fraction),
            "kappa": self.kappa,
            "multiplier_levels": list(self.multiplier_levels),
            "episode_length": self.episode_length,
            "arrival_gap": list(self.arrival_gap),
            "user_area": list(self.user_area),
            "deadline_factor": self.deadline_factor,
            "latency_scale": self.latency_scale,
            "reward": vars(self.reward).copy(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvParams":
        return cls(
            nodes=tuple(NodeSpec.from_dict(n) for n in d["nodes"]),
            base_time=dict(d["base_time"]),
            offload_fraction=dict(d["offload_fraction"]),
            kappa=float(d["kappa"]),
            multiplier_levels=tuple(float(x) for x in d["multiplier_levels"]),
            episode_length=int(d["episode_length"]),
            arrival_gap=tuple(d["arrival_gap"]),
            user_area=tuple(d["user_area"]),
            deadline_factor=float(d["deadline_factor"]),
            latency_scale=float(d.get("latency_scale", 5.0)),
            reward=RewardWeights(**d.get("reward", {})),
        )


@dataclass
class EdgeNode:
    id: int
    position: np.ndarray
    capacity: np.ndarray
    available: np.ndarray
    secure: bool = False

    def copy(self) -> "EdgeNode":
        return EdgeNode(self.id, self.position, self.capacity, self.available.copy(), self.secure)


@dataclass(frozen=True)
class Task:
    request_id: int
    node: int
    allocation: np.ndarray
    finish_time: float


@dataclass
class NetworkState:
    nodes: list[EdgeNode]
    clock: float = 0.0
    in_flight: list[Task] = field(default_factory=list)

    def copy(self) -> "NetworkState":
        return NetworkState([n.copy() for n in self.nodes], self.clock, list(self.in_flight))

    def to_dict(self) -> dict:
        return {
            "clock": self.clock,
            "nodes": [
                {
                    "id": n.id,
                    "position": n.position.tolist(),
                    "capacity": n.capacity.tolist(),
                    "available": n.available.tolist(),
                    "secure": n.secure,
                }
                for n in self.nodes
            ],
            "in_flight": [
                {
                    "request_id": t.request_id,
                    "node": t.node,
                    "allocation": t.allocation.tolist(),
                    "finish_time": t.finish_time,
                }
                for t in self.in_flight
            ],
        }


@dataclass(frozen=True)
class ServiceRequest:
    service_type: int
    intent: IntentVector
    requirement: ResourceVector
    user_position: np.ndarray
    arrival_time: float
    deadline: float
    fine_grained: tuple = ()
    request_id: int = 0

    def __post_init__(self):
        if not self.deadline > 0:
            raise EnvError("deadline must be > 0")
        object.__setattr__(self, "user_position", np.asarray(self.user_position, dtype=float))

    def with_arrival(self, arrival_time: float, request_id: int) -> "ServiceRequest":
        return replace(self, arrival_time=float(arrival_time), request_id=int(request_id))


@dataclass(frozen=True)
class SchedAction:
    node: int
    alloc_multiplier: float


@dataclass(frozen=True)
class Outcome:
    request_id: int
    service_type: int
    node: int
    success: bool
    execution_latency: float
    measured: dict
    satisfied: tuple
    cpu_offloaded: float
    allocation: np.ndarray
    utilization: np.ndarray

    @property
    def satisfied_fraction(self) -> float:
        return float(np.mean(self.satisfied)) if self.satisfied else 1.0

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "service_type": self.service_type,
            "node": self.node,
            "success": self.success,
            "execution_latency": self.execution_latency,
            "measured": self.measured,
            "satisfied": list(self.satisfied),
            "cpu_offloaded": self.cpu_offloaded,
            "allocation": self.allocation.tolist(),
            "utilization": self.utilization.tolist(),
        }


def comp(comparator: str, target: float, measured: float, tolerance: float = 1e-6) -> int:
    """1 if ``measured <comparator> target`` holds; inequalities are closed."""
    if comparator == "<=":
        return int(measured <= target)
    if comparator == ">=":
        return int(measured >= target)
    if comparator == "==":
        return int(abs(measured - target) <= tolerance)
    raise EnvError(f"unknown comparator {comparator!r}")


def reward(outcome: Outcome, deadline: float, capacity: np.ndarray, weights: RewardWeights,
           cpu_index: int | None = None) -> float:
    """Scalar reward of one scheduling decision.

    ``w_sat * satisfied_fraction - w_lat * min(EL / deadline, 2) - w_cost * mean(alloc / capacity)``
    with the mean over resources the node actually has; infeasible placements get -1.
    """
    if not outcome.success:
        return INFEASIBLE_REWARD
    has = capacity > 0
    cost = float(np.mean(outcome.allocation[has] / capacity[has])) if np.any(has) else 0.0
    tau = (
        weights.w_sat * outcome.satisfied_fraction
        - weights.w_lat * min(outcome.execution_latency / deadline, 2.0)
        - weights.w_cost * cost
    )
    if weights.w_cpu_bias and cpu_index is not None and outcome.allocation[cpu_index] > 0:
        # fault switch: penalise the share of CPU work moved to offload engines
        cpu = outcome.allocation[cpu_index]
        tau -= weights.w_cpu_bias * min(outcome.cpu_offloaded, cpu) / cpu
    return float(tau)


def quantise(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x, dtype=float) / ALLOC_QUANTUM) * ALLOC_QUANTUM


class EdgeEnv:
    """Simulator bound to one resource/service catalog pair and node layout."""

    def __init__(self, resources: ResourceCatalog, services: ServiceCatalog, params: EnvParams):
        if not params.nodes:
            raise EnvError("scenario declares zero nodes")
        self.resources = resources
        self.services = services
        self.params = params
        names = resources.names
        self.capacity = np.array(
            [[float(n.capacity.get(r, 0.0)) for r in names] for n in params.nodes]
        )
        if np.any(self.capacity < 0):
            raise EnvError("negative node capacity")
        self.positions = np.array([n.position for n in params.nodes], dtype=float)
        self.secure = np.array([bool(n.secure) for n in params.nodes])
        self.levels = tuple(float(x) for x in params.multiplier_levels)
        self.roles = [e.role for e in resources.entries]
        self.compute_idx = [i for i, e in enumerate(resources.entries) if e.role == "compute"]
        self.optional = np.array([e.optional for e in resources.entries])
        self.offloads = [
            (i, resources.index(e.offload_target))
            for i, e in enumerate(resources.entries)
            if e.role == "offload" and e.offload_target is not None
        ]
        self.cpu_index = resources.index("cpu") if "cpu" in names else None
        self.base_time = np.array([float(params.base_time[s]) for s in services.names])
        self.offload_q = np.array([float(params.offload_fraction.get(s, 0.0)) for s in services.names])
        self.dist_scale = float(np.hypot(*params.user_area)) or 1.0
        self.rng = np.random.default_rng(0)

    @classmethod
    def from_scenario(cls, spec) -> "EdgeEnv":
        return cls(spec.resources, spec.services, spec.env)

    @property
    def n_nodes(self) -> int:
        return len(self.params.nodes)

    @property
    def layout_id(self) -> str:
        return f"{self.resources.ref}/nodes-{self.n_nodes}/v1"

    def reset(self, seed: int | None = None) -> NetworkState:
        self.rng = np.random.default_rng(seed)
        nodes = [
            EdgeNode(i, self.positions[i], self.capacity[i], self.capacity[i].copy(), bool(self.secure[i]))
            for i in range(self.n_nodes)
        ]
        return NetworkState(nodes, 0.0, [])

    def action_space(self, state: NetworkState | None = None) -> list[SchedAction]:
        n = self.n_nodes if state is None else len(state.nodes)
        return [SchedAction(k, lvl) for k in range(n) for lvl in self.levels]

    @property
    def n_actions(self) -> int:
        return self.n_nodes * len(self.levels)

    def action(self, index: int) -> SchedAction:
        return SchedAction(index // len(self.levels), self.levels[index % len(self.levels)])

    def action_index(self, action: SchedAction) -> int:
        return action.node * len(self.levels) + self.levels.index(action.alloc_multiplier)

    # --- core dynamics -------------------------------------------------
    def allocation(self, requirement: np.ndarray, node: int, multiplier: float) -> np.ndarray:
        alloc = quantise(multiplier * requirement)
        return np.where(self.optional & (self.capacity[node] <= 0), 0.0, alloc)

    def offloaded(self, service_type: int, requirement: np.ndarray, alloc: np.ndarray, node: int) -> float:
        total = 0.0
        for o, target in self.offloads:
            if self.capacity[node, o] > 0 and alloc[o] > 0:
                total += min(alloc[o], self.offload_q[service_type] * requirement[target])
        return float(total)

    def execution_latency(self, service_type: int, requirement: np.ndarray, alloc: np.ndarray,
                          node: int, user_position: np.ndarray, offloaded: float = 0.0) -> float:
        ratio = 0.0
        for r in self.compute_idx:
            demand = requirement[r]
            if demand <= 0:
                continue
            if r == self.cpu_index:
                demand = demand - offloaded
            ratio = max(ratio, demand / alloc[r])
        dist = float(np.hypot(*(self.positions[node] - user_position)))
        return float(self.base_time[service_type] * ratio + self.params.kappa * dist)

    def _release(self, state: NetworkState, until: float):
        keep = []
        for task in state.in_flight:
            if task.finish_time <= until:
                node = state.nodes[task.node]
                node.available = node.available + task.allocation
            else:
                keep.append(task)
        state.in_flight = keep

    def step(self, state: NetworkState, request: ServiceRequest, action: SchedAction):
        """Place ``request`` with ``action``; returns ``(new_state, reward, outcome)``."""
        if not 0 <= action.node < len(state.nodes):
            raise EnvError(f"action node {action.node} out of range")
        if action.alloc_multiplier not in self.levels:
            raise EnvError(f"multiplier {action.alloc_multiplier} not in {self.levels}")
        if not 0 <= request.service_type < self.services.n:
            raise EnvError(f"unknown service type {request.service_type}")
        req = request.requirement.values
        if req.shape != (self.resources.m,):
            raise EnvError("requirement does not match the resource catalog")
        new = state.copy()
        new.clock = max(new.clock, float(request.arrival_time))
        self._release(new, new.clock)
        k = action.node
        node = new.nodes[k]
        alloc = self.allocation(req, k, action.alloc_multiplier)
        lacking = (~self.optional) & (self.capacity[k] <= 0) & (alloc > 0)
        feasible = not np.any(lacking) and bool(np.all(alloc <= node.available))
        if not feasible:
            outcome = Outcome(
                request.request_id, request.service_type, k, False, 0.0, {},
                tuple(0 for _ in request.fine_grained), 0.0, np.zeros_like(alloc),
                self.utilization(new),
            )
            return new, INFEASIBLE_REWARD, outcome
        off = self.offloaded(request.service_type, req, alloc, k)
        latency = self.execution_latency(request.service_type, req, alloc, k, request.user_position, off)
        node.available = node.available - alloc
        new.in_flight.append(Task(request.request_id, k, alloc, new.clock + latency))
        measured = {"latency": latency, "security": float(self.secure[k])}
        satisfied = tuple(
            comp(fg.comparator, request.intent[fg.intent_label], measured[fg.metric], fg.tolerance)
            for fg in request.fine_grained
        )
        outcome = Outcome(
            request.request_id, request.service_type, k, True, latency, measured, satisfied,
            off, alloc, self.utilization(new),
        )
        tau = reward(outcome, request.deadline, self.capacity[k], self.params.reward, self.cpu_index)
        return new, tau, outcome

    def utilization(self, state: NetworkState) -> np.ndarray:
        used = self.capacity - np.array([n.available for n in state.nodes])
        with np.errstate(invalid="ignore", divide="ignore"):
            util = np.where(self.capacity > 0, used / np.where(self.capacity > 0, self.capacity, 1.0), 0.0)
        return util

    # --- observation -------------------------------------------------
    def feature_layout(self) -> dict:
        """Group sizes of the encoded state.

        One group per resource (normalised requirement followed by the per-node
        availability fraction), then a network block with per-node distance to the
        user and secure flag plus the request's latency target and security flag.
        """
        return {
            "resource_group": 1 + self.n_nodes,
            "n_resources": self.resources.m,
            "net_block": 2 * self.n_nodes + 2,
            "layout_id": self.layout_id,
        }

    def encode_state(self, state: NetworkState, request: ServiceRequest) -> np.ndarray:
        lo, hi = self.resources.lower, self.resources.upper
        req = (request.requirement.values - lo) / (hi - lo)
        avail = np.array([n.available for n in state.nodes])
        cap = self.capacity
        frac = np.where(cap > 0, avail / np.where(cap > 0, cap, 1.0), 0.0)
        res_block = np.concatenate([req[:, None], frac.T], axis=1).reshape(-1)
        dist = np.hypot(*(self.positions - request.user_position).T) / self.dist_scale
        net_block = np.concatenate([
            np.stack([dist, self.secure.astype(float)], axis=1).reshape(-1),
            [request.intent["latency"] / self.params.latency_scale, request.intent["security"]],
        ])
        return np.concatenate([res_block, net_block])

    def encode_fresh_batch(self, requirements, intent: IntentVector, user_position) -> np.ndarray:
        """``encode_state`` on a freshly reset network for many requirement rows."""
        R = np.atleast_2d(np.asarray(requirements, dtype=float))
        lo, hi = self.resources.lower, self.resources.upper
        req = (R - lo) / (hi - lo)
        frac = (self.capacity > 0).astype(float).T          # (m, nodes)
        res = np.concatenate([req[:, :, None], np.broadcast_to(frac, (len(R),) + frac.shape)], axis=2)
        pos = np.asarray(user_position, dtype=float)
        dist = np.hypot(*(self.positions - pos).T) / self.dist_scale
        net_block = np.concatenate([
            np.stack([dist, self.secure.astype(float)], axis=1).reshape(-1),
            [intent["latency"] / self.params.latency_scale, intent["security"]],
        ])
        return np.concatenate([res.reshape(len(R), -1), np.broadcast_to(net_block, (len(R), net_block.size))], axis=1)

    # --- vectorised single step on an idle network ----------------------
    def fresh_step_batch(self, service_type, requirement, intents, user_position, actions) -> np.ndarray:
        """Rewards of placing each request on an otherwise idle network.

        Row-wise equivalent to ``reset()`` followed by one ``step``; used by the
        causal-effect estimator, which needs millions of evaluations.
        """
        service_type = np.asarray(service_type, dtype=int)
        requirement = np.asarray(requirement, dtype=float)
        intents = np.asarray(intents, dtype=float)
        user_position = np.asarray(user_position, dtype=float)
        actions = np.asarray(actions, dtype=int)
        nodes = actions // len(self.levels)
        mult = np.asarray(self.levels)[actions % len(self.levels)]
        cap = self.capacity[nodes]
        alloc = quantise(mult[:, None] * requirement)
        alloc = np.where(self.optional[None, :] & (cap <= 0), 0.0, alloc)
        lacking = np.any((~self.optional[None, :]) & (cap <= 0) & (alloc > 0), axis=1)
        feasible = ~lacking & np.all(alloc <= cap, axis=1)
        off = np.zeros(len(nodes))
        q = self.offload_q[service_type]
        for o, target in self.offloads:
            use = (cap[:, o] > 0) & (alloc[:, o] > 0)
            off = off + np.where(use, np.minimum(alloc[:, o], q * requirement[:, target]), 0.0)
        ratio = np.zeros(len(nodes))
        for r in self.compute_idx:
            demand = requirement[:, r] - off if r == self.cpu_index else requirement[:, r]
            safe = np.where(alloc[:, r] > 0, alloc[:, r], 1.0)
            ratio = np.maximum(ratio, np.where(requirement[:, r] > 0, demand / safe, 0.0))
        dist = np.hypot(*(self.positions[nodes] - user_position).T)
        latency = self.base_time[service_type] * ratio + self.params.kappa * dist
        measured = {"latency": latency, "security": self.secure[nodes].astype(float)}
        labels = list(INTENT_LABELS)
        sat = np.ones(len(nodes))
        for s in np.unique(service_type):
            rows = service_type == s
            fgs = self.services.entries[s].fine_grained
            if not fgs:
                continue
            hits = np.zeros(rows.sum())
            for fg in fgs:
                target = intents[rows, labels.index(fg.intent_label)]
                value = measured[fg.metric][rows]
                if fg.comparator == "<=":
                    hits += value <= target
                elif fg.comparator == ">=":
                    hits += value >= target
                else:
                    hits += np.abs(value - target) <= fg.tolerance
            sat[rows] = hits / len(fgs)
        has = cap > 0
        cost = np.sum(np.where(has, alloc / np.where(has, cap, 1.0), 0.0), axis=1) / np.maximum(has.sum(axis=1), 1)
        w = self.params.reward
        deadline = intents[:, labels.index("latency")] * self.params.deadline_factor
        tau = w.w_sat * sat - w.w_lat * np.minimum(latency / deadline, 2.0) - w.w_cost * cost
        if w.w_cpu_bias and self.cpu_index is not None:
            c = self.cpu_index
            safe = np.where(alloc[:, c] > 0, alloc[:, c], 1.0)
            share = np.minimum(off, alloc[:, c]) / safe
            tau = tau - np.where(alloc[:, c] > 0, w.w_cpu_bias * share, 0.0)
        return np.where(feasible, tau, INFEASIBLE_REWARD)


def best_effort_action(env: EdgeEnv, state: NetworkState, request: ServiceRequest) -> SchedAction:
    """Minimum allocation on the nearest node that can host the request."""
    order = np.argsort(np.hypot(*(env.positions - request.user_position).T), kind="stable")
    lvl = min(env.levels)
    for k in order:
        alloc = env.allocation(request.requirement.values, int(k), lvl)
        lacking = (~env.optional) & (env.capacity[k] <= 0) & (alloc > 0)
        if not np.any(lacking) and np.all(alloc <= state.nodes[k].available):
            return SchedAction(int(k), lvl)
    return SchedAction(int(order[0]), lvl)


def write_outcomes_jsonl(path, outcomes: Iterable[Outcome]):
    with open(path, "w") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_dict(), sort_keys=True) + "\n")


def read_outcomes_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
