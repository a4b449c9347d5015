"""Intent/resource vectors and the network-service-intent (N-S-I) mapping tensor.

The tensor has shape ``(m, n, p)``: ``m`` resource types, ``n`` service types and
``p`` intent dimensions.  Slicing out a service gives an ``m x p`` matrix that maps
an intent vector onto a per-resource demand vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

INTENT_LABELS: tuple[str, ...] = (
    "service_code",
    "latency",
    "security",
    "throughput",
    "accuracy",
    "priority",
)

# (low, high) admissible range of every intent label.  ``latency`` must be > 0.
INTENT_RANGES: dict[str, tuple[float, float]] = {
    "service_code": (0.0, 64.0),
    "latency": (0.0, 600.0),
    "security": (0.0, 1.0),
    "throughput": (0.0, 1000.0),
    "accuracy": (0.0, 1.0),
    "priority": (0.0, 1.0),
}
BINARY_LABELS = frozenset({"security"})


class NsiError(ValueError):
    """Raised on shape, dimension or catalog mismatches."""


@dataclass(frozen=True)
class IntentVector:
    values: np.ndarray
    dim_labels: tuple[str, ...] = INTENT_LABELS

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dim_labels", tuple(self.dim_labels))
        if len(values) != len(self.dim_labels):
            raise NsiError(
                f"intent has {len(values)} values for {len(self.dim_labels)} labels"
            )
        for label, v in zip(self.dim_labels, values):
            if not np.isfinite(v):
                raise NsiError(f"intent '{label}' is not finite")
            lo, hi = INTENT_RANGES.get(label, (-np.inf, np.inf))
            if label in BINARY_LABELS and v not in (0.0, 1.0):
                raise NsiError(f"intent '{label}' must be 0 or 1, got {v}")
            if label == "latency" and v <= 0:
                raise NsiError("latency target must be > 0")
            if not lo <= v <= hi:
                raise NsiError(f"intent '{label}'={v} outside [{lo}, {hi}]")

    @property
    def p(self) -> int:
        return len(self.values)

    def __getitem__(self, label: str) -> float:
        return float(self.values[self.dim_labels.index(label)])

    @classmethod
    def from_mapping(cls, mapping: dict, labels: Sequence[str] = INTENT_LABELS):
        return cls(np.array([float(mapping.get(k, 0.0)) for k in labels]), tuple(labels))


@dataclass(frozen=True)
class ResourceVector:
    values: np.ndarray
    catalog_ref: str = ""
    clamped: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise NsiError("resource vector entries must be finite and >= 0")

    @property
    def m(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ResourceType:
    name: str
    unit: str
    lower: float
    upper: float
    group: str
    # compute: drives execution time; storage: capacity only;
    # offload: optional accelerator that takes work away from ``offload_target``.
    role: str = "compute"
    offload_target: str | None = None

    @property
    def optional(self) -> bool:
        return self.role == "offload"


@dataclass(frozen=True)
class ResourceCatalog:
    entries: tuple[ResourceType, ...]
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise NsiError(f"duplicate resource names in {names}")
        for e in self.entries:
            if not e.lower < e.upper:
                raise NsiError(f"resource {e.name}: lower bound must be < upper bound")
            if e.role not in ("compute", "storage", "offload"):
                raise NsiError(f"resource {e.name}: unknown role {e.role!r}")
            if e.offload_target is not None and e.offload_target not in names:
                raise NsiError(f"resource {e.name}: unknown offload target")

    @property
    def m(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def ref(self) -> str:
        return f"resources-v{self.version}"

    @property
    def lower(self) -> np.ndarray:
        return np.array([e.lower for e in self.entries])

    @property
    def upper(self) -> np.ndarray:
        return np.array([e.upper for e in self.entries])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise NsiError(f"unknown resource {name!r}") from None

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for e in self.entries:
            out.setdefault(e.group, []).append(e.name)
        return out

    def extended(self, *new: ResourceType) -> "ResourceCatalog":
        return ResourceCatalog(self.entries + tuple(new), self.version + 1)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "entries": [
                {
                    "name": e.name,
                    "unit": e.unit,
                    "lower": e.lower,
                    "upper": e.upper,
                    "group": e.group,
                    "role": e.role,
                    "offload_target": e.offload_target,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceCatalog":
        return cls(tuple(ResourceType(**e) for e in d["entries"]), int(d["version"]))


@dataclass(frozen=True)
class FineGrainedIntent:
    """One measurable requirement, e.g. ``latency <= intent['latency']``."""

    metric: str
    comparator: str
    intent_label: str
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.comparator not in ("<=", ">=", "=="):
            raise NsiError(f"unknown comparator {self.comparator!r}")


@dataclass(frozen=True)
class ServiceType:
    name: str
    code: int
    # label -> (low, high) used when synthesising intents; security is a probability.
    intent_template: dict
    fine_grained: tuple[FineGrainedIntent, ...]
    similar_to: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fine_grained", tuple(self.fine_grained))
        object.__setattr__(self, "similar_to", tuple(self.similar_to))
        for fg in self.fine_grained:
            if not fg.metric:
                raise NsiError(f"service {self.name}: fine-grained intent without metric")


@dataclass(frozen=True)
class ServiceCatalog:
    entries: tuple[ServiceType, ...]
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise NsiError(f"duplicate service names in {names}")

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def ref(self) -> str:
        return f"services-v{self.version}"

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise NsiError(f"unknown service {name!r}") from None

    def extended(self, *new: ServiceType) -> "ServiceCatalog":
        return ServiceCatalog(self.entries + tuple(new), self.version + 1)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "entries": [
                {
                    "name": e.name,
                    "code": e.code,
                    "intent_template": {k: list(v) for k, v in e.intent_template.items()},
                    "fine_grained": [
                        {
                            "metric": f.metric,
                            "comparator": f.comparator,
                            "intent_label": f.intent_label,
                            "tolerance": f.tolerance,
                        }
                        for f in e.fine_grained
                    ],
                    "similar_to": list(e.similar_to),
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceCatalog":
        entries = []
        for e in d["entries"]:
            entries.append(
                ServiceType(
                    name=e["name"],
                    code=int(e["code"]),
                    intent_template={k: tuple(v) for k, v in e["intent_template"].items()},
                    fine_grained=tuple(FineGrainedIntent(**f) for f in e["fine_grained"]),
                    similar_to=tuple(e.get("similar_to", ())),
                )
            )
        return cls(tuple(entries), int(d["version"]))


@dataclass(frozen=True)
class NsiMatrix:
    tensor: np.ndarray
    resource_version: int = 1
    service_version: int = 1
    version: int = 1

    def __post_init__(self):
        t = np.array(self.tensor, dtype=float)
        if t.ndim != 3:
            raise NsiError(f"N-S-I tensor must be 3-D, got shape {t.shape}")
        t.setflags(write=False)
        object.__setattr__(self, "tensor", t)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tensor.shape

    @property
    def m(self) -> int:
        return self.tensor.shape[0]

    @property
    def n(self) -> int:
        return self.tensor.shape[1]

    @property
    def p(self) -> int:
        return self.tensor.shape[2]

    def submatrix(self, service_type: int) -> np.ndarray:
        if not 0 <= service_type < self.n:
            raise NsiError(f"unknown service type {service_type} (n={self.n})")
        return self.tensor[:, service_type, :]

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "coefficients": self.tensor.reshape(-1).tolist(),
            "version": self.version,
            "resource_catalog_version": self.resource_version,
            "service_catalog_version": self.service_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NsiMatrix":
        shape = tuple(int(s) for s in d["shape"])
        coeffs = np.asarray(d["coefficients"], dtype=float)
        if coeffs.size != int(np.prod(shape)):
            raise NsiError(f"{coeffs.size} coefficients do not fill shape {shape}")
        return cls(
            coeffs.reshape(shape),
            resource_version=int(d["resource_catalog_version"]),
            service_version=int(d["service_catalog_version"]),
            version=int(d["version"]),
        )


def _intent_values(intent, p: int) -> np.ndarray:
    values = intent.values if isinstance(intent, IntentVector) else np.asarray(intent, float)
    if values.shape != (p,):
        raise NsiError(f"intent dimension {values.shape} does not match p={p}")
    return values


def raw_demand(matrix: NsiMatrix, service_type: int, intent) -> np.ndarray:
    """Unclamped ``Pi_i @ I``; linear in the intent."""
    return matrix.submatrix(service_type) @ _intent_values(intent, matrix.p)


def map_intent(
    matrix: NsiMatrix,
    service_type: int,
    intent,
    catalog: ResourceCatalog | None = None,
) -> ResourceVector:
    """Map an intent vector to a resource demand vector.

    Demands are clamped to ``[0, upper]`` (``upper`` from the catalog when given);
    ``ResourceVector.clamped`` records whether any entry was clipped.
    """
    demand = raw_demand(matrix, service_type, intent)
    upper = np.full(matrix.m, np.inf)
    ref = ""
    if catalog is not None:
        if catalog.m != matrix.m:
            raise NsiError(f"catalog has {catalog.m} resources, matrix has {matrix.m}")
        upper = catalog.upper
        ref = catalog.ref
    clipped = np.clip(demand, 0.0, upper)
    return ResourceVector(clipped, ref, bool(np.any(clipped != demand)))


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NsiError(f"{what} contains non-finite entries")


def expand_resources(
    matrix: NsiMatrix,
    new_rows,
    adjust: Callable[[np.ndarray], np.ndarray] | Sequence[float] | None = None,
) -> NsiMatrix:
    """Append ``m'`` resource rows, optionally rescaling the existing rows first.

    ``adjust`` is either a callable on the old tensor or per-row scale factors;
    ``None`` keeps the old rows unchanged.
    """
    new_rows = np.asarray(new_rows, dtype=float)
    if new_rows.ndim != 3 or new_rows.shape[1:] != (matrix.n, matrix.p):
        raise NsiError(
            f"new resource rows must have shape (m', {matrix.n}, {matrix.p}), got {new_rows.shape}"
        )
    _check_finite(new_rows, "new resource rows")
    old = np.array(matrix.tensor)
    if adjust is None:
        adjusted = old
    elif callable(adjust):
        adjusted = np.asarray(adjust(old), dtype=float)
        if adjusted.shape != old.shape:
            raise NsiError("adjustment changed the tensor shape")
    else:
        scale = np.asarray(adjust, dtype=float)
        if scale.shape != (matrix.m,):
            raise NsiError(f"row scale factors need length {matrix.m}")
        adjusted = old * scale[:, None, None]
    _check_finite(adjusted, "adjusted tensor")
    return NsiMatrix(
        np.concatenate([adjusted, new_rows], axis=0),
        resource_version=matrix.resource_version + 1,
        service_version=matrix.service_version,
        version=matrix.version + 1,
    )


def init_service_submatrix(
    matrix: NsiMatrix, similar_services: Sequence[int], blend_weights: Sequence[float]
) -> np.ndarray:
    """Convex blend of the submatrices of ``similar_services``; shape ``(m, 1, p)``."""
    similar = list(similar_services)
    w = np.asarray(blend_weights, dtype=float)
    if not similar:
        raise NsiError("at least one similar service is required")
    if w.shape != (len(similar),):
        raise NsiError("one blend weight per similar service is required")
    if np.any(w < -1e-9) or abs(w.sum() - 1.0) > 1e-9:
        raise NsiError(f"blend weights {w.tolist()} are not on the simplex")
    blended = sum(wj * matrix.submatrix(j) for wj, j in zip(w, similar))
    return blended[:, None, :]


def expand_services(matrix: NsiMatrix, new_cols) -> NsiMatrix:
    new_cols = np.asarray(new_cols, dtype=float)
    if new_cols.ndim != 3 or new_cols.shape[0] != matrix.m or new_cols.shape[2] != matrix.p:
        raise NsiError(
            f"new service columns must have shape ({matrix.m}, n', {matrix.p}), got {new_cols.shape}"
        )
    _check_finite(new_cols, "new service columns")
    return NsiMatrix(
        np.concatenate([np.array(matrix.tensor), new_cols], axis=1),
        resource_version=matrix.resource_version,
        service_version=matrix.service_version + 1,
        version=matrix.version + 1,
    )


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    severity: str = "error"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "detail": self.detail, "severity": self.severity}


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(v.severity == "error" for v in self.violations)

    def add(self, kind: str, detail: str, severity: str = "error"):
        self.violations.append(Violation(kind, detail, severity))

    def extend(self, other: "ValidationReport"):
        self.violations.extend(other.violations)

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def __len__(self):
        return len(self.violations)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def validate_matrix(
    matrix: NsiMatrix,
    resources: ResourceCatalog | None = None,
    services: ServiceCatalog | None = None,
) -> ValidationReport:
    """Report-only consistency check; never mutates ``matrix``."""
    report = ValidationReport()
    t = matrix.tensor
    if not np.all(np.isfinite(t)):
        bad = np.argwhere(~np.isfinite(t))
        report.add("finiteness", f"{len(bad)} non-finite coefficients, first at {bad[0].tolist()}")
    if resources is not None:
        if resources.m != matrix.m:
            report.add("shape", f"matrix has m={matrix.m}, catalog has {resources.m}")
        if resources.version != matrix.resource_version:
            report.add(
                "version",
                f"matrix references resources v{matrix.resource_version}, catalog is v{resources.version}",
            )
    if services is not None:
        if services.n != matrix.n:
            report.add("shape", f"matrix has n={matrix.n}, catalog has {services.n}")
        if services.version != matrix.service_version:
            report.add(
                "version",
                f"matrix references services v{matrix.service_version}, catalog is v{services.version}",
            )
    with np.errstate(invalid="ignore"):
        neg = np.argwhere(t < 0)
    names = resources.names if resources is not None and resources.m == matrix.m else None
    for r, s, k in neg:
        label = names[r] if names else f"resource {r}"
        report.add(
            "negativity",
            f"negative coefficient {t[r, s, k]:g} for {label}, service {s}, intent dim {k}",
            severity="warning",
        )
    return report


def rescale_resources(matrix: NsiMatrix, scales: Sequence[float]) -> NsiMatrix:
    """Scale resource rows in place of the catalog (new matrix version, same catalogs)."""
    scale = np.asarray(scales, dtype=float)
    if scale.shape != (matrix.m,):
        raise NsiError(f"row scale factors need length {matrix.m}")
    _check_finite(scale, "row scale factors")
    return NsiMatrix(
        np.array(matrix.tensor) * scale[:, None, None],
        resource_version=matrix.resource_version,
        service_version=matrix.service_version,
        version=matrix.version + 1,
    )
