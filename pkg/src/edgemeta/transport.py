"""Kantorovich distance (bounded dual LP) and the Hausdorff action-set distance."""
from __future__ import annotations

import os

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

# POT probes every array backend on import; the heavy ones are never used here.
for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
from ot.lp.emd_wrap import emd_c  # noqa: E402

BOX = 1.0


def _check(weights_a, weights_b, ground):
    a = np.ascontiguousarray(weights_a, dtype=float)
    b = np.ascontiguousarray(weights_b, dtype=float)
    D = np.ascontiguousarray(ground, dtype=float)
    if D.shape != (a.size, b.size):
        raise ValueError(f"ground metric shape {D.shape} does not match supports {a.size}x{b.size}")
    for w, side in ((a, "first"), (b, "second")):
        if w.size == 0 or np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"{side} weights are not on the simplex")
    if not np.all(np.isfinite(D)):
        raise ValueError("ground metric has non-finite entries")
    return a, b, D


def kantorovich_lp(weights_a, weights_b, ground) -> float:
    """Solve ``max  a.p - b.q  s.t.  p_m - q_n <= D_mn,  |p|, |q| <= 1`` with HiGHS."""
    a, b, D = _check(weights_a, weights_b, ground)
    na, nb = a.size, b.size
    rows = np.repeat(np.arange(na * nb), 2)
    cols = np.stack([np.repeat(np.arange(na), nb), na + np.tile(np.arange(nb), na)], axis=1).ravel()
    vals = np.tile([1.0, -1.0], na * nb)
    A = coo_matrix((vals, (rows, cols)), shape=(na * nb, na + nb))
    res = linprog(np.concatenate([-a, b]), A_ub=A, b_ub=D.ravel(),
                  bounds=[(-BOX, BOX)] * (na + nb), method="highs")
    if res.status != 0:
        raise RuntimeError(f"Kantorovich LP failed: {res.message}")
    return float(-res.fun)


def _emd(a: np.ndarray, b: np.ndarray, C: np.ndarray) -> float:
    # unchecked: contiguous float64 inputs with equal mass
    _, value, _, _, code = emd_c(a, b, C, 100_000, 1)
    if code != 1:
        raise RuntimeError(f"network simplex did not converge (code {code})")
    return float(value)


def transport_cost(weights_a, weights_b, cost) -> float:
    """Primal optimal-transport cost by network simplex."""
    a, b, C = _check(weights_a, weights_b, cost)
    return _emd(a, b * (a.sum() / b.sum()), C)


def kantorovich(weights_a, weights_b, ground, method: str = "transport") -> float:
    """Kantorovich distance with potentials boxed to ``[-1, 1]``.

    The bounded dual equals optimal transport under the capped cost ``min(D, 2)``,
    so the default path solves that primal; ``method="lp"`` solves the dual directly.
    """
    if method == "lp":
        return kantorovich_lp(weights_a, weights_b, ground)
    if method != "transport":
        raise ValueError(f"unknown method {method!r}")
    a, b, D = _check(weights_a, weights_b, ground)
    return transport_cost(a, b, np.minimum(D, 2.0 * BOX))


def hausdorff_action_distance(dist) -> float:
    """``max(max_e min_l D, min_e max_l D)`` for a table ``D[a_e, a_l]``."""
    D = np.asarray(dist, dtype=float)
    if D.ndim != 2 or D.size == 0:
        raise ValueError("need a non-empty expert-by-learner distance table")
    return float(max(D.min(axis=1).max(), D.max(axis=1).min()))


def hausdorff_tables(dis: np.ndarray) -> np.ndarray:
    """Vectorised Hausdorff distance for ``dis[x, a_e, y, a_l]`` -> ``H[x, y]``."""
    maxmin = dis.min(axis=3).max(axis=1)
    minmax = dis.max(axis=3).min(axis=1)
    return np.maximum(maxmin, minmax)
