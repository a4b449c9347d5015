"""Generative intent replay with a two-encoder conditional VAE.

Training runs in three phases: the old-data encoder (new encoder frozen), the
new-data encoder (old encoder frozen), then the generator on balanced old/new
batches with both encoders frozen.  Replay samples are decoded from standard
normal latents and turned back into requests through the current N-S-I tensor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import ServiceRequest
from .nsi import BINARY_LABELS, INTENT_LABELS

GIR_FORMAT = "edgemeta-cvae/1"


def kl_standard_normal(mu, logvar) -> np.ndarray:
    """Per-row ``KL(N(mu, exp(logvar)) || N(0, I))``."""
    mu, logvar = np.asarray(mu, float), np.asarray(logvar, float)
    return 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar, axis=-1)


class MLP:
    """Dense layers with ReLU hidden units and a linear or sigmoid output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, output: str = "linear"):
        self.sizes = list(sizes)
        self.output = output
        self.params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
            self.params[f"b{i}"] = np.zeros(b)

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1

    def forward(self, X):
        cache = [X]
        h = X
        for i in range(self.depth):
            a = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.depth - 1:
                h = np.maximum(a, 0.0)
            elif self.output == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-a))
            else:
                h = a
            cache.append(h)
        return h, cache

    def backward(self, dout, cache):
        grads = {}
        d = dout
        if self.output == "sigmoid":
            y = cache[-1]
            d = d * y * (1.0 - y)
        for i in reversed(range(self.depth)):
            h_in = cache[i]
            grads[f"W{i}"] = h_in.T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            d = d @ self.params[f"W{i}"].T
            if i > 0:
                d = d * (cache[i] > 0)
        return grads, d


class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params: dict, grads: dict, prefix: str):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            key = prefix + k
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class CvaeModel:
    PARTS = ("E_old", "E_new", "G")

    def __init__(self, dim: int, latent: int = 8, hidden: int = 64, seed: int = 0, lr: float = 1e-3,
                 recon_weight: float = 50.0):
        self.dim, self.latent, self.hidden = int(dim), int(latent), int(hidden)
        # Squared error is scaled as a Gaussian decoder with sigma = 0.1 on [0, 1] records;
        # at weight 1 the KL term wins and the generator collapses onto the data mean.
        self.recon_weight = float(recon_weight)
        rng = np.random.default_rng(seed)
        self.E_old = MLP([dim, hidden, hidden, 2 * latent], rng)
        self.E_new = MLP([dim, hidden, hidden, 2 * latent], rng)
        self.G = MLP([2 * latent, hidden, hidden, dim], rng, output="sigmoid")
        self.frozen: set[str] = set()
        self.trained = False
        self.opt = Adam(lr)
        self.rng = np.random.default_rng([seed, 1])

    def part(self, name: str) -> MLP:
        return getattr(self, name)

    def set_freeze(self, parts, frozen: bool = True):
        parts = [parts] if isinstance(parts, str) else list(parts)
        for p in parts:
            if p not in self.PARTS:
                raise KeyError(p)
        (self.frozen.update if frozen else self.frozen.difference_update)(parts)

    def encode(self, which: str, X):
        out, cache = self.part(which).forward(X)
        return out[:, : self.latent], out[:, self.latent:], cache

    # --- losses ---------------------------------------------------------
    def encoder_loss(self, X, which: str, noise):
        """Reconstruction through G with the other latent half zero-filled, plus KL."""
        X = np.atleast_2d(X)
        B, d = X.shape[0], self.latent
        mu, logvar, ecache = self.encode(which, X)
        std = np.exp(0.5 * logvar)
        z = mu + std * noise
        zfull = np.zeros((B, 2 * d))
        sl = slice(0, d) if which == "E_old" else slice(d, 2 * d)
        zfull[:, sl] = z
        xhat, gcache = self.G.forward(zfull)
        diff = xhat - X
        w = self.recon_weight
        rec = w * np.sum(diff ** 2, axis=1)
        kl = kl_standard_normal(mu, logvar)
        loss = float(np.mean(rec + kl))
        gG, dz_full = self.G.backward(2.0 * w * diff / B, gcache)
        dz = dz_full[:, sl]
        dmu = dz + mu / B
        dlogvar = dz * noise * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / B
        gE, _ = self.part(which).backward(np.concatenate([dmu, dlogvar], axis=1), ecache)
        return loss, {which: gE, "G": gG}

    def generator_loss(self, X_old, X_new, noise):
        """MSE of G on stacked latents from both encoders plus both KL terms."""
        X = np.concatenate([np.atleast_2d(X_old), np.atleast_2d(X_new)])
        B, d = X.shape[0], self.latent
        halves, caches, kl = [], [], np.zeros(B)
        for k, which in enumerate(("E_old", "E_new")):
            mu, logvar, cache = self.encode(which, X)
            std = np.exp(0.5 * logvar)
            eps = noise[:, k * d:(k + 1) * d]
            halves.append(mu + std * eps)
            caches.append((mu, logvar, std, eps, cache))
            kl = kl + kl_standard_normal(mu, logvar)
        z = np.concatenate(halves, axis=1)
        xhat, gcache = self.G.forward(z)
        diff = xhat - X
        w = self.recon_weight
        loss = float(np.mean(w * np.sum(diff ** 2, axis=1) + kl))
        gG, dz = self.G.backward(2.0 * w * diff / B, gcache)
        grads = {"G": gG}
        for k, which in enumerate(("E_old", "E_new")):
            mu, logvar, std, eps, cache = caches[k]
            dzk = dz[:, k * d:(k + 1) * d]
            dmu = dzk + mu / B
            dlogvar = dzk * eps * 0.5 * std + 0.5 * (np.exp(logvar) - 1.0) / B
            grads[which], _ = self.part(which).backward(np.concatenate([dmu, dlogvar], axis=1), cache)
        return loss, grads

    def _apply(self, grads: dict):
        for part, g in grads.items():
            if part in self.frozen:
                continue
            self.opt.step(self.part(part).params, g, part + ".")

    # --- training phases --------------------------------------------------
    def _epochs(self, X, epochs, batch, step):
        X = np.asarray(X, float)
        if len(X) == 0:
            raise ValueError("no records to train on")
        trace = []
        for _ in range(epochs):
            order = self.rng.permutation(len(X))
            losses = [step(X[order[i:i + batch]]) for i in range(0, len(X), batch)]
            trace.append(float(np.mean(losses)))
        return trace

    def _train_encoder(self, which, other, X, epochs, batch):
        self.set_freeze(other, True)
        self.set_freeze([which, "G"], False)

        def step(xb):
            loss, grads = self.encoder_loss(xb, which, self.rng.standard_normal((len(xb), self.latent)))
            self._apply(grads)
            return loss

        return self._epochs(X, epochs, batch, step)

    def train_old_encoder(self, X_old, epochs: int = 200, batch: int = 64) -> list:
        return self._train_encoder("E_old", "E_new", X_old, epochs, batch)

    def train_new_encoder(self, X_new, epochs: int = 200, batch: int = 64) -> list:
        return self._train_encoder("E_new", "E_old", X_new, epochs, batch)

    def train_generator(self, X_old, X_new, epochs: int = 200, batch: int = 64) -> list:
        X_old, X_new = np.asarray(X_old, float), np.asarray(X_new, float)
        if len(X_old) == 0 or len(X_new) == 0:
            raise ValueError("generator batches must hold old and new records in equal proportion")
        self.set_freeze(["E_old", "E_new"], True)
        self.set_freeze("G", False)
        half = max(batch // 2, 1)
        n_batches = int(np.ceil(max(len(X_old), len(X_new)) / half))
        trace = []
        for _ in range(epochs):
            losses = []
            for _ in range(n_batches):
                xo = X_old[self.rng.integers(len(X_old), size=half)]
                xn = X_new[self.rng.integers(len(X_new), size=half)]
                loss, grads = self.generator_loss(xo, xn, self.rng.standard_normal((2 * half, 2 * self.latent)))
                self._apply(grads)
                losses.append(loss)
            trace.append(float(np.mean(losses)))
        self.trained = True
        return trace

    def fit(self, X_old, X_new, epochs: int = 200, batch: int = 64) -> dict:
        traces = {
            "E_old": self.train_old_encoder(X_old, epochs, batch),
            "E_new": self.train_new_encoder(X_new, epochs, batch),
            "G": self.train_generator(X_old, X_new, epochs, batch),
        }
        return traces

    def stack_features(self, X, seed: int = 0) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        rng = np.random.default_rng(seed)
        parts = []
        for which in ("E_old", "E_new"):
            mu, logvar, _ = self.encode(which, X)
            parts.append(mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape))
        return np.concatenate(parts, axis=1)

    @property
    def decoder_sigma(self) -> float:
        return float(np.sqrt(0.5 / self.recon_weight))

    def sample(self, count: int, seed: int = 0, noise: bool = True) -> np.ndarray:
        """Draw records from the decoder likelihood (``noise=False`` returns its means)."""
        if not self.trained:
            raise RuntimeError("the generative model has not been trained")
        if count == 0:
            return np.zeros((0, self.dim))
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((count, 2 * self.latent))
        mean = self.G.forward(z)[0]
        if not noise:
            return mean
        return np.clip(mean + self.decoder_sigma * rng.standard_normal(mean.shape), 0.0, 1.0)

    # --- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        enc = lambda a: {"shape": list(a.shape), "data": a.ravel().tolist()}  # noqa: E731
        return {
            "format": GIR_FORMAT,
            "dim": self.dim, "latent": self.latent, "hidden": self.hidden, "trained": self.trained,
            "recon_weight": self.recon_weight,
            "frozen": sorted(self.frozen),
            "params": {p: {k: enc(v) for k, v in self.part(p).params.items()} for p in self.PARTS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvaeModel":
        if d.get("format") != GIR_FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        model = cls(d["dim"], d["latent"], d["hidden"], recon_weight=d.get("recon_weight", 50.0))
        dec = lambda e: np.asarray(e["data"], float).reshape(e["shape"])  # noqa: E731
        for p in cls.PARTS:
            model.part(p).params = {k: dec(v) for k, v in d["params"][p].items()}
        model.frozen = set(d["frozen"])
        model.trained = bool(d["trained"])
        return model


# --- records ------------------------------------------------------------
@dataclass(frozen=True)
class GirRecord:
    service: str
    intent: np.ndarray
    resource: np.ndarray
    tag: str = ""

    def to_dict(self) -> dict:
        return {"service": self.service, "intent": self.intent.tolist(), "resource": self.resource.tolist(),
                "tag": self.tag}


class RecordCodec:
    """Maps requests to ``[service one-hot, intent, requirement]`` scaled to ``[0, 1]``."""

    def __init__(self, spec, tags: dict | None = None):
        self.services = list(spec.services.names)
        self.codes = {s.name: s.code for s in spec.services.entries}
        lo = np.zeros(len(INTENT_LABELS))
        hi = np.ones(len(INTENT_LABELS))
        for j, label in enumerate(INTENT_LABELS):
            vals = [v for s in spec.services.entries for v in s.intent_template.get(label, (0.0, 0.0))]
            if label in BINARY_LABELS:
                lo[j], hi[j] = 0.0, 1.0
            else:
                lo[j], hi[j] = min(vals), max(vals)
                if hi[j] <= lo[j]:
                    hi[j] = lo[j] + 1.0
        self.intent_lo, self.intent_hi = lo, hi
        self.res_lo, self.res_hi = spec.resources.lower, spec.resources.upper
        self.templates = {s.name: s.intent_template for s in spec.services.entries}
        self.tags = dict(tags or {})

    @property
    def dim(self) -> int:
        return len(self.services) + len(INTENT_LABELS) + len(self.res_lo)

    def encode(self, requests: Sequence[ServiceRequest]) -> np.ndarray:
        X = np.zeros((len(requests), self.dim))
        n = len(self.services)
        for i, r in enumerate(requests):
            X[i, r.service_type] = 1.0
            X[i, n:n + len(INTENT_LABELS)] = (r.intent.values - self.intent_lo) / (self.intent_hi - self.intent_lo)
            X[i, n + len(INTENT_LABELS):] = (r.requirement.values - self.res_lo) / (self.res_hi - self.res_lo)
        return np.clip(X, 0.0, 1.0)

    def decode(self, X) -> list[GirRecord]:
        X = np.clip(np.atleast_2d(X), 0.0, 1.0)
        n, p = len(self.services), len(INTENT_LABELS)
        out = []
        for row in X:
            name = self.services[int(np.argmax(row[:n]))]
            intent = self.intent_lo + row[n:n + p] * (self.intent_hi - self.intent_lo)
            tpl = self.templates[name]
            for j, label in enumerate(INTENT_LABELS):
                if label in BINARY_LABELS:
                    intent[j] = float(intent[j] >= 0.5)
                elif label == "service_code":
                    intent[j] = self.codes[name]
                else:
                    lo, hi = tpl.get(label, (self.intent_lo[j], self.intent_hi[j]))
                    intent[j] = min(max(intent[j], lo), hi)
            res = self.res_lo + row[n + p:] * (self.res_hi - self.res_lo)
            out.append(GirRecord(name, intent, res, self.tags.get(name, "")))
        return out


def synthesize_replay(model: CvaeModel, codec: RecordCodec, count: int, seed: int = 0,
                      tags: Sequence[str] | None = None, max_rounds: int = 20) -> list[GirRecord]:
    """Decode ``count`` records, keeping only those whose tag passes ``tags``."""
    if count == 0:
        return []
    out: list[GirRecord] = []
    for k in range(max_rounds):
        recs = codec.decode(model.sample(count, seed=seed + 104_729 * k))
        out.extend(r for r in recs if tags is None or r.tag in tags)
        if len(out) >= count:
            return out[:count]
    return out


def records_to_requests(records: Sequence[GirRecord], spec, seed: int = 0) -> list[ServiceRequest]:
    """Rebuild requests for the current catalog: the requirement is re-derived from the intent."""
    from .scenario import make_request

    rng = np.random.default_rng(seed)
    area = np.asarray(spec.env.user_area, float)
    out = []
    for i, r in enumerate(records):
        if r.service not in spec.services.names:
            continue
        pos = rng.uniform(0.0, 1.0, size=2) * area
        out.append(make_request(spec, spec.services.index(r.service), r.intent, pos, i))
    return out


def mix_dataset(new: Sequence, replay: Sequence, ratio: float = 0.5, seed: int = 0) -> list[tuple[str, object]]:
    """All new records plus replay so that new records form ``ratio`` of the mix; shuffled.

    Returns ``(provenance, record)`` pairs with provenance ``"new"`` or ``"replay"``.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    n_replay = 0 if ratio == 1.0 else int(round(len(new) * (1.0 - ratio) / ratio))
    n_replay = min(n_replay, len(replay))
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(replay), size=n_replay, replace=False) if n_replay else []
    mixed = [("new", r) for r in new] + [("replay", replay[i]) for i in sorted(pick)]
    order = rng.permutation(len(mixed))
    return [mixed[i] for i in order]


def write_records_jsonl(path, records: Sequence[GirRecord]):
    Path(path).write_text("".join(json.dumps(r.to_dict()) + "\n" for r in records))


def read_records_jsonl(path) -> list[GirRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(GirRecord(d["service"], np.asarray(d["intent"]), np.asarray(d["resource"]), d.get("tag", "")))
    return out
