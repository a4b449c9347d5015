"""Scenario evaluation metrics and the rule table that turns them into corrections."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .env import Outcome, ServiceRequest, comp


@dataclass(frozen=True)
class EvalThresholds:
    sat_flag: float = 0.75          # Sat_n below this raises low_sat
    convergence: float = 0.90       # Sat_n above this counts as converged
    disc: float = 0.4
    kl_novelty: float = 0.5
    fast_floor: int = 20
    episode_cap: int = 400
    critical_sat: float = 0.25      # below this the scenario is regenerated, not relaxed


# --- intent satisfaction -------------------------------------------------
def intent_satisfaction(requests: Sequence[ServiceRequest], outcomes: Sequence[Outcome]) -> dict:
    """Per fine-grained metric, the fraction of test intents that were met."""
    if not requests:
        raise ValueError("at least one evaluation intent is required")
    if len(requests) != len(outcomes):
        raise ValueError("every intent needs an outcome")
    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for req, out in zip(requests, outcomes):
        for j, fg in enumerate(req.fine_grained):
            counts[fg.metric] = counts.get(fg.metric, 0) + 1
            ok = out.success and out.satisfied[j] if out.satisfied else False
            hits[fg.metric] = hits.get(fg.metric, 0) + int(bool(ok))
    return {k: hits[k] / counts[k] for k in counts}


def satisfaction_from_comps(comps: np.ndarray) -> np.ndarray:
    """``comps`` is ``(|I_eval|, n)`` of 0/1 Comp values; returns Sat_n per column."""
    comps = np.asarray(comps, dtype=float)
    if comps.ndim != 2 or comps.shape[0] == 0:
        raise ValueError("need a non-empty (intents, fine-grained) matrix")
    return comps.mean(axis=0)


def sat_flags(sat: dict, threshold: float = 0.75) -> list[str]:
    # Ties at the threshold do not flag.
    return [f"low_sat:{k}" for k, v in sorted(sat.items()) if v < threshold]


def intent_success_rate(requests, outcomes) -> float:
    """Fraction of requests with every fine-grained intent met (ISR)."""
    if not requests:
        return float("nan")
    ok = [o.success and all(o.satisfied) for o in outcomes]
    return float(np.mean(ok))


# --- dispersion of similar resources -------------------------------------
class IdleGroup(ValueError):
    """The similar-resource group has zero mean utilisation."""


def dispersion(utilization, group: Sequence[int], mask=None) -> float:
    """Population std / mean of the per-resource node-mean utilisations of ``group``.

    ``utilization`` is ``(nodes, resources)`` or ``(time, nodes, resources)``;
    ``mask`` marks which nodes actually have each resource (others are ignored).
    """
    U = np.asarray(utilization, dtype=float)
    if U.ndim == 3:
        U = U.mean(axis=0)
    group = list(group)
    if len(group) < 2:
        raise ValueError("a similar-resource group needs at least two resources")
    M = np.ones_like(U, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    per_resource = []
    for r in group:
        col = U[M[:, r], r]
        per_resource.append(col.mean() if col.size else 0.0)
    per_resource = np.array(per_resource)
    group_mean = per_resource.mean()
    if group_mean <= 0:
        raise IdleGroup("similar-resource group is idle")
    return float(np.sqrt(np.mean((per_resource - group_mean) ** 2)) / group_mean)


# --- kernel density and divergence --------------------------------------
def scott_bandwidth(samples: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = X.shape
    sd = X.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    return np.maximum(sd * n ** (-1.0 / (d + 4)), floor)


def kde_density(samples, query, bandwidth=None) -> np.ndarray:
    """Gaussian product-kernel density estimate at ``query`` points.

    ``bandwidth`` is a scalar or per-dimension array; ``None`` uses Scott's rule.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty sample set")
    Q = np.asarray(query, dtype=float)
    single = Q.ndim <= 1 and X.shape[1] > 1 and Q.size == X.shape[1] or Q.ndim == 0
    Q = Q.reshape(-1, X.shape[1])
    h = scott_bandwidth(X) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (X.shape[1],))
    diff = (Q[:, None, :] - X[None, :, :]) / h
    log_k = -0.5 * np.sum(diff ** 2, axis=2) - np.sum(np.log(h)) - 0.5 * X.shape[1] * np.log(2 * np.pi)
    dens = np.exp(log_k).mean(axis=1)
    return dens[0] if single else dens


class IntentKDE(BaseEstimator):
    """Estimator wrapper around :func:`kde_density` (``fit`` / ``score_samples``)."""

    def __init__(self, bandwidth=None):
        self.bandwidth = bandwidth

    def fit(self, X, y=None):
        X = check_array(X)
        self.samples_ = X
        self.bandwidth_ = scott_bandwidth(X) if self.bandwidth is None else np.broadcast_to(
            np.asarray(self.bandwidth, float), (X.shape[1],)).copy()
        return self

    def density(self, X) -> np.ndarray:
        check_is_fitted(self, "samples_")
        X = check_array(X)
        return kde_density(self.samples_, X, self.bandwidth_)

    def score_samples(self, X) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.density(X))


def kl_divergence(new_samples, old_density: Callable | np.ndarray, eps: float = 1e-9,
                  bandwidth=None) -> float:
    """Monte-Carlo KL(p_new || p_old) evaluated at the new samples themselves.

    ``old_density`` is a callable or the old sample set (a KDE is fitted to it).
    """
    X = np.asarray(new_samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty sample set")
    p_new = kde_density(X, X, bandwidth)
    if callable(old_density):
        p_old = np.asarray(old_density(X), dtype=float)
    else:
        old = np.asarray(old_density, dtype=float)
        old = old[:, None] if old.ndim == 1 else old
        p_old = kde_density(old, X, bandwidth)
    return float(np.mean(np.log(p_new) - np.log(p_old + eps)))


# --- convergence speed ---------------------------------------------------
@dataclass(frozen=True)
class ConvergenceResult:
    steps: int | None
    flags: tuple[str, ...] = ()

    @property
    def reached(self) -> bool:
        return self.steps is not None


def convergence_steps(eval_trace, threshold: float = 0.90, fast_floor: int = 20,
                      episode_cap: int | None = None) -> ConvergenceResult:
    """First episode at which every Sat_n strictly exceeds ``threshold``.

    ``eval_trace`` is a sequence of ``(episode, {metric: Sat_n})`` pairs.
    """
    for episode, sat in eval_trace:
        if sat and all(v > threshold for v in sat.values()):
            flags = ("fast_convergence",) if episode < fast_floor else ()
            if episode_cap is not None and episode > episode_cap:
                flags += ("slow_convergence",)
            return ConvergenceResult(int(episode), flags)
    return ConvergenceResult(None, ("slow_convergence",))


# --- report and verdict -------------------------------------------------
@dataclass
class MetricsReport:
    sat: dict = field(default_factory=dict)
    isr: float | None = None
    disc: dict = field(default_factory=dict)          # group -> value (None when idle)
    kl: dict = field(default_factory=dict)            # history tag -> divergence
    episodes_to_threshold: int | None = None
    flags: list = field(default_factory=list)
    # Resource with the highest node-mean utilisation, per similar group.
    dominant: dict = field(default_factory=dict)
    step: str = ""

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "sat": dict(sorted(self.sat.items())),
            "isr": self.isr,
            "disc": dict(sorted(self.disc.items())),
            "kl": dict(sorted(self.kl.items())),
            "episodes_to_threshold": self.episodes_to_threshold,
            "flags": list(self.flags),
            "dominant": dict(sorted(self.dominant.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


DIRECTIVE_KINDS = (
    "regenerate_scenario",
    "adjust_nsi_weights",
    "relax_intent_constraint",
    "create_resource_bottleneck",
    "decompose_scenario",
    "reduce_difficulty",
)


@dataclass(frozen=True)
class CorrectionDirective:
    kind: str
    params: tuple = ()              # sorted (key, value) pairs
    rationale: tuple[str, ...] = ()
    step: str = ""

    def __post_init__(self):
        if self.kind not in DIRECTIVE_KINDS:
            raise ValueError(f"unknown directive kind {self.kind!r}")
        if not self.rationale:
            raise ValueError("a directive must cite at least one flag")
        if isinstance(self.params, dict):
            object.__setattr__(self, "params", tuple(sorted(self.params.items())))

    @property
    def args(self) -> dict:
        return dict(self.params)

    @property
    def id(self) -> str:
        blob = json.dumps([self.kind, list(self.params), list(self.rationale), self.step])
        return hashlib.sha1(blob.encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "params": self.args,
                "rationale": list(self.rationale), "step": self.step}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionDirective":
        return cls(d["kind"], d.get("params", {}), tuple(d["rationale"]), d.get("step", ""))


# intent label that each fine-grained metric is relaxed through
RELAX_LABEL = {"latency": "latency", "security": "security"}


def correction_verdict(report: MetricsReport, thresholds: EvalThresholds = EvalThresholds(),
                       mixed_delta: bool = False) -> list[CorrectionDirective]:
    """Deterministic rule table from report flags to correction directives."""
    out: list[CorrectionDirective] = []
    flags = list(report.flags)
    step = report.step
    for flag in flags:
        kind, _, arg = flag.partition(":")
        if kind == "low_sat":
            value = report.sat.get(arg, 0.0)
            if value < thresholds.critical_sat:
                out.append(CorrectionDirective("regenerate_scenario", {"reason": "infeasible_intent"}, (flag,), step))
            else:
                out.append(CorrectionDirective(
                    "relax_intent_constraint", {"intent": RELAX_LABEL.get(arg, arg), "factor": 1.2}, (flag,), step))
        elif kind == "high_disc":
            resource = report.dominant.get(arg, "")
            out.append(CorrectionDirective(
                "create_resource_bottleneck", {"resource": resource, "factor": 0.5}, (flag,), step))
            out.append(CorrectionDirective(
                "adjust_nsi_weights", {"resource": resource, "factor": 0.8}, (flag,), step))
        elif kind == "idle_group":
            out.append(CorrectionDirective("regenerate_scenario", {"reason": "idle_group", "group": arg}, (flag,), step))
        elif kind == "slow_convergence":
            k = "decompose_scenario" if mixed_delta else "reduce_difficulty"
            out.append(CorrectionDirective(k, {}, (flag,), step))
    novelty = tuple(f for f in flags if f in ("low_novelty", "fast_convergence"))
    if novelty:
        out.append(CorrectionDirective("regenerate_scenario", {"reason": "novelty"}, novelty, step))
    return out


def build_report(step: str, sat: dict, isr: float | None, utilization, group_indices: dict,
                 resource_names: Sequence[str], mask, new_intents, history: dict,
                 eval_trace, thresholds: EvalThresholds = EvalThresholds(),
                 introduces_resource: bool = False) -> MetricsReport:
    """Compute every metric family and the flags they raise."""
    report = MetricsReport(sat=dict(sat), isr=isr, step=step)
    report.flags.extend(sat_flags(sat, thresholds.sat_flag))
    U = np.asarray(utilization, dtype=float)
    U2 = U.mean(axis=0) if U.ndim == 3 else U
    for group, idx in sorted(group_indices.items()):
        if len(idx) < 2:
            continue
        try:
            d = dispersion(U2, idx, mask)
        except IdleGroup:
            report.disc[group] = None
            report.flags.append(f"idle_group:{group}")
            continue
        report.disc[group] = d
        means = [U2[np.asarray(mask)[:, r], r].mean() if np.asarray(mask)[:, r].any() else 0.0 for r in idx]
        report.dominant[group] = resource_names[idx[int(np.argmax(means))]]
        if d > thresholds.disc:
            report.flags.append(f"high_disc:{group}")
    if history and new_intents is not None and len(new_intents):
        for tag, old in sorted(history.items()):
            report.kl[tag] = kl_divergence(new_intents, old)
        # A new resource type is novelty by itself even if intents repeat.
        if min(report.kl.values()) < thresholds.kl_novelty and not introduces_resource:
            report.flags.append("low_novelty")
    conv = convergence_steps(eval_trace, thresholds.convergence, thresholds.fast_floor, thresholds.episode_cap)
    report.episodes_to_threshold = conv.steps
    report.flags.extend(conv.flags)
    return report
