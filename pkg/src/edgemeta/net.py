"""Small Q-network with hand-written backprop, parameter-group freezing and growth.

Architecture::

    resource r features --affine--> e dims   (one encoder per resource)
    network features    --affine--> f dims   (net feature block)
    concat --> relu(W1) --> relu(W2) --> per-service affine head (one Q per action)

Parameter groups are ``encoder:<resource>``, ``net_feature_block``, ``trunk`` and
``head:<service>``; frozen groups receive exactly no update.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "edgemeta-schednet/1"


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0


class SchedNet:
    def __init__(
        self,
        resources: list[str],
        services: list[str],
        group_size: int,
        net_features: int,
        n_actions: int,
        encoder_dim: int = 4,
        net_dim: int = 16,
        hidden: int = 64,
        seed: int = 0,
        lr: float = 1e-3,
        layout_id: str = "",
    ):
        self.resources = list(resources)
        self.services = list(services)
        self.group_size = int(group_size)
        self.net_features = int(net_features)
        self.n_actions = int(n_actions)
        self.encoder_dim = int(encoder_dim)
        self.net_dim = int(net_dim)
        self.hidden = int(hidden)
        self.layout_id = layout_id
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        self.adam = AdamState(lr=lr)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        e, g = self.encoder_dim, self.group_size
        for r in self.resources:
            self.params[f"enc:{r}.W"] = self._he((e, g))
            self.params[f"enc:{r}.b"] = np.zeros(e)
        self.params["net.W"] = self._he((self.net_dim, self.net_features))
        self.params["net.b"] = np.zeros(self.net_dim)
        self.params["trunk1.W"] = self._he((self.hidden, self.trunk_input))
        self.params["trunk1.b"] = np.zeros(self.hidden)
        self.params["trunk2.W"] = self._he((self.hidden, self.hidden))
        self.params["trunk2.b"] = np.zeros(self.hidden)
        for s in self.services:
            self._init_head(s)

    # --- construction helpers -------------------------------------------
    def _he(self, shape) -> np.ndarray:
        return self.rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)

    def _init_head(self, service: str, scale: float = 0.01):
        self.params[f"head:{service}.W"] = self.rng.normal(0.0, scale, size=(self.n_actions, self.hidden))
        self.params[f"head:{service}.b"] = np.zeros(self.n_actions)

    @property
    def trunk_input(self) -> int:
        return len(self.resources) * self.encoder_dim + self.net_dim

    @property
    def input_dim(self) -> int:
        return len(self.resources) * self.group_size + self.net_features

    @property
    def groups(self) -> list[str]:
        return (
            [f"encoder:{r}" for r in self.resources]
            + ["net_feature_block", "trunk"]
            + [f"head:{s}" for s in self.services]
        )

    @staticmethod
    def group_of(param: str) -> str:
        prefix = param.split(".")[0]
        if prefix.startswith("enc:"):
            return "encoder:" + prefix[4:]
        if prefix == "net":
            return "net_feature_block"
        if prefix.startswith("trunk"):
            return "trunk"
        return prefix  # head:<service>

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "SchedNet":
        return copy.deepcopy(self)

    # --- forward / backward -------------------------------------------
    def _split(self, X: np.ndarray):
        g = self.group_size
        parts = [X[:, i * g:(i + 1) * g] for i in range(len(self.resources))]
        return parts, X[:, len(self.resources) * g:]

    def _service_index(self, service) -> int:
        if isinstance(service, str):
            return self.services.index(service)
        if not 0 <= int(service) < len(self.services):
            raise KeyError(f"no head for service {service}")
        return int(service)

    def _forward(self, X: np.ndarray, services: np.ndarray):
        P = self.params
        parts, xnet = self._split(X)
        zs = [x @ P[f"enc:{r}.W"].T + P[f"enc:{r}.b"] for r, x in zip(self.resources, parts)]
        znet = xnet @ P["net.W"].T + P["net.b"]
        u = np.concatenate(zs + [znet], axis=1)
        a1 = u @ P["trunk1.W"].T + P["trunk1.b"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ P["trunk2.W"].T + P["trunk2.b"]
        h2 = np.maximum(a2, 0.0)
        q = np.empty((X.shape[0], self.n_actions))
        for s in np.unique(services):
            rows = services == s
            name = self.services[s]
            q[rows] = h2[rows] @ P[f"head:{name}.W"].T + P[f"head:{name}.b"]
        return q, (parts, xnet, u, a1, h1, a2, h2)

    def forward(self, X, service) -> np.ndarray:
        """Q-values; ``X`` is one state or a batch, ``service`` an index/name or per-row array."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"state has {X.shape[1]} features, network expects {self.input_dim}")
        if np.ndim(service) == 0:
            services = np.full(X.shape[0], self._service_index(service))
        else:
            services = np.array([self._service_index(s) for s in service])
        q, _ = self._forward(X, services)
        return q[0] if single else q

    def loss_and_grads(self, X, services, actions, targets):
        """Mean squared error of ``Q(s, a)`` against ``targets`` and its gradients."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        services = np.asarray(services, dtype=int)
        actions = np.asarray(actions, dtype=int)
        targets = np.asarray(targets, dtype=float)
        B = X.shape[0]
        q, (parts, xnet, u, a1, h1, a2, h2) = self._forward(X, services)
        rows = np.arange(B)
        err = q[rows, actions] - targets
        loss = float(np.mean(err ** 2))
        P = self.params
        grads: dict[str, np.ndarray] = {}
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * err / B
        dh2 = np.zeros_like(h2)
        for s in np.unique(services):
            sel = services == s
            name = self.services[s]
            grads[f"head:{name}.W"] = dq[sel].T @ h2[sel]
            grads[f"head:{name}.b"] = dq[sel].sum(axis=0)
            dh2[sel] = dq[sel] @ P[f"head:{name}.W"]
        for name in self.services:
            grads.setdefault(f"head:{name}.W", np.zeros_like(P[f"head:{name}.W"]))
            grads.setdefault(f"head:{name}.b", np.zeros_like(P[f"head:{name}.b"]))
        da2 = dh2 * (a2 > 0)
        grads["trunk2.W"] = da2.T @ h1
        grads["trunk2.b"] = da2.sum(axis=0)
        da1 = (da2 @ P["trunk2.W"]) * (a1 > 0)
        grads["trunk1.W"] = da1.T @ u
        grads["trunk1.b"] = da1.sum(axis=0)
        du = da1 @ P["trunk1.W"]
        e = self.encoder_dim
        for i, (r, x) in enumerate(zip(self.resources, parts)):
            dz = du[:, i * e:(i + 1) * e]
            grads[f"enc:{r}.W"] = dz.T @ x
            grads[f"enc:{r}.b"] = dz.sum(axis=0)
        dznet = du[:, len(self.resources) * e:]
        grads["net.W"] = dznet.T @ xnet
        grads["net.b"] = dznet.sum(axis=0)
        return loss, grads

    def update(self, X, services, actions, targets, learning_rate: float | None = None) -> float:
        """One Adam step on the mean-squared Bellman error; frozen groups are skipped."""
        if len(np.atleast_1d(actions)) == 0:
            raise ValueError("empty batch")
        loss, grads = self.loss_and_grads(X, services, actions, targets)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss {loss}; update aborted")
        self.apply_gradients(grads, learning_rate)
        return loss

    def apply_gradients(self, grads: dict, learning_rate: float | None = None):
        st = self.adam
        st.t += 1
        lr = st.lr if learning_rate is None else learning_rate
        c1 = 1.0 - st.beta1 ** st.t
        c2 = 1.0 - st.beta2 ** st.t
        for name, g in grads.items():
            if self.group_of(name) in self.frozen:
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
            v = self._v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            self.params[name] = self.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + st.eps)

    # --- structure changes -----------------------------------------------
    def set_freeze(self, groups, frozen: bool = True):
        groups = [groups] if isinstance(groups, str) else list(groups)
        unknown = set(groups) - set(self.groups)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        if frozen:
            self.frozen.update(groups)
        else:
            self.frozen.difference_update(groups)

    def expand_input(self, resource: str, init_scale: float = 0.01, seed: int | None = None) -> "SchedNet":
        """Copy of the network with an encoder for ``resource`` appended.

        Adds ``e*g + e`` encoder parameters and ``hidden*e`` trunk columns, i.e. the
        parameter count grows by ``e * (g + 1 + hidden)``.  New weights are drawn
        from normal(0, init_scale); ``init_scale=0`` gives an exact zero extension.
        """
        if resource in self.resources:
            raise ValueError(f"resource {resource!r} already has an encoder")
        new = self.copy()
        rng = np.random.default_rng(seed) if seed is not None else new.rng
        e, g, m = self.encoder_dim, self.group_size, len(self.resources)
        new.params[f"enc:{resource}.W"] = rng.normal(0.0, init_scale, size=(e, g)) if init_scale else np.zeros((e, g))
        new.params[f"enc:{resource}.b"] = np.zeros(e)
        cols = rng.normal(0.0, init_scale, size=(self.hidden, e)) if init_scale else np.zeros((self.hidden, e))
        W1 = self.params["trunk1.W"]
        new.params["trunk1.W"] = np.concatenate([W1[:, : m * e], cols, W1[:, m * e:]], axis=1)
        new.resources.append(resource)
        for store in (new._m, new._v):
            if "trunk1.W" in store:
                old = store["trunk1.W"]
                store["trunk1.W"] = np.concatenate(
                    [old[:, : m * e], np.zeros((self.hidden, e)), old[:, m * e:]], axis=1
                )
        return new

    def add_head(self, service: str, init_scale: float = 0.01, seed: int | None = None) -> "SchedNet":
        """Copy of the network with a fresh Q-head for ``service``; adds ``A*(hidden+1)`` parameters."""
        if service in self.services:
            raise ValueError(f"service {service!r} already has a head")
        new = self.copy()
        if seed is not None:
            new.rng = np.random.default_rng(seed)
        new.services.append(service)
        if init_scale:
            new._init_head(service, init_scale)
        else:
            new.params[f"head:{service}.W"] = np.zeros((self.n_actions, self.hidden))
            new.params[f"head:{service}.b"] = np.zeros(self.n_actions)
        return new

    # --- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        enc = lambda a: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}  # noqa: E731
        return {
            "format": CHECKPOINT_FORMAT,
            "layout_id": self.layout_id,
            "config": {
                "resources": self.resources,
                "services": self.services,
                "group_size": self.group_size,
                "net_features": self.net_features,
                "n_actions": self.n_actions,
                "encoder_dim": self.encoder_dim,
                "net_dim": self.net_dim,
                "hidden": self.hidden,
            },
            "params": {k: enc(v) for k, v in sorted(self.params.items())},
            "frozen": sorted(self.frozen),
            "adam": {
                "lr": self.adam.lr,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
                "t": self.adam.t,
                "m": {k: enc(v) for k, v in sorted(self._m.items())},
                "v": {k: enc(v) for k, v in sorted(self._v.items())},
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchedNet":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        cfg = d["config"]
        net = cls.__new__(cls)
        net.resources = list(cfg["resources"])
        net.services = list(cfg["services"])
        for k in ("group_size", "net_features", "n_actions", "encoder_dim", "net_dim", "hidden"):
            setattr(net, k, int(cfg[k]))
        net.layout_id = d.get("layout_id", "")
        net.rng = np.random.default_rng(0)
        dec = lambda e: np.asarray(e["data"], dtype=float).reshape(e["shape"])  # noqa: E731
        net.params = {k: dec(v) for k, v in d["params"].items()}
        net.frozen = set(d["frozen"])
        a = d["adam"]
        net.adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], int(a["t"]))
        net._m = {k: dec(v) for k, v in a["m"].items()}
        net._v = {k: dec(v) for k, v in a["v"].items()}
        return net

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SchedNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def soft_update_target(net: SchedNet, target: SchedNet, rho: float = 0.05) -> SchedNet:
    """Polyak averaging ``target <- rho * net + (1 - rho) * target`` (in place)."""
    for name, p in net.params.items():
        if name in target.params and target.params[name].shape == p.shape:
            target.params[name] = rho * p + (1.0 - rho) * target.params[name]
        else:
            target.params[name] = p.copy()
    target.resources = list(net.resources)
    target.services = list(net.services)
    return target


class ReplayBuffer:
    """FIFO transition store with a seeded sampler.

    Rows are ``(s, service, a, reward, s_next, service_next, done)``.
    """

    def __init__(self, capacity: int = 20_000, seed: int = 0):
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        self._rows: list[tuple] = []
        self._start = 0

    def __len__(self):
        return len(self._rows)

    def push(self, s, service, a, reward, s_next, service_next, done):
        row = (np.asarray(s, float), int(service), int(a), float(reward),
               np.asarray(s_next, float), int(service_next), bool(done))
        if len(self._rows) < self.capacity:
            self._rows.append(row)
        else:
            self._rows[self._start] = row
            self._start = (self._start + 1) % self.capacity

    def records(self) -> list[tuple]:
        """Rows in insertion order (oldest first)."""
        return self._rows[self._start:] + self._rows[: self._start]

    def sample(self, batch_size: int):
        idx = self.rng.integers(0, len(self._rows), size=batch_size)
        rows = [self._rows[i] for i in idx]
        S = np.stack([r[0] for r in rows])
        svc = np.array([r[1] for r in rows])
        A = np.array([r[2] for r in rows])
        R = np.array([r[3] for r in rows])
        S2 = np.stack([r[4] for r in rows])
        svc2 = np.array([r[5] for r in rows])
        D = np.array([r[6] for r in rows], dtype=float)
        return S, svc, A, R, S2, svc2, D
