import numpy as np
import pytest

from edgemeta.env import EdgeEnv, EnvParams, NodeSpec, ServiceRequest
from edgemeta.nsi import (FineGrainedIntent, IntentVector, ResourceCatalog, ResourceType, ResourceVector,
                          ServiceCatalog, ServiceType)
from edgemeta.scenario import GenerationContext, next_scenario_builtin

LATENCY_FG = FineGrainedIntent("latency", "<=", "latency")
SECURITY_FG = FineGrainedIntent("security", ">=", "security")


def tiny_catalogs(dpu: bool = True):
    res = [ResourceType("cpu", "cores", 0.0, 8.0, "dataproc", "compute"),
           ResourceType("storage", "GB", 0.0, 64.0, "storage", "storage")]
    if dpu:
        res.append(ResourceType("dpu", "units", 0.0, 4.0, "dataproc", "offload", "cpu"))
    svc = ServiceType("rt", 1, {"latency": (1.5, 3.0), "security": (0.3, 0.3)}, (LATENCY_FG, SECURITY_FG))
    return ResourceCatalog(tuple(res)), ServiceCatalog((svc,))


def tiny_env(dpu: bool = True, nodes=None, q: float = 0.5, kappa: float = 0.0) -> EdgeEnv:
    resources, services = tiny_catalogs(dpu)
    if nodes is None:
        cap = {"cpu": 4.0, "storage": 32.0}
        if dpu:
            cap["dpu"] = 2.0
        nodes = (NodeSpec((0.0, 0.0), cap, True), NodeSpec((3.0, 4.0), {"cpu": 8.0, "storage": 64.0}, False))
    params = EnvParams(nodes=tuple(nodes), base_time={"rt": 1.0}, offload_fraction={"rt": q}, kappa=kappa)
    return EdgeEnv(resources, services, params)


def request(env: EdgeEnv, req, latency: float = 2.0, security: float = 0.0, pos=(0.0, 0.0), rid: int = 0,
            arrival: float = 0.0) -> ServiceRequest:
    intent = IntentVector(np.array([1.0, latency, security, 3.0, 0.7, 0.5]))
    return ServiceRequest(0, intent, ResourceVector(np.asarray(req, float)), np.asarray(pos, float), arrival,
                          latency, env.services.entries[0].fine_grained, rid)


@pytest.fixture
def env():
    return tiny_env()


@pytest.fixture(scope="session")
def builtin_specs():
    ctx = GenerationContext(seed=0)
    return [next_scenario_builtin(ctx) for _ in range(6)]


def numeric_gradient(loss_fn, params: dict, name: str, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``params[name]`` (modified in place)."""
    arr = params[name]
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = loss_fn()
        arr[i] = old - h
        down = loss_fn()
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-7) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
