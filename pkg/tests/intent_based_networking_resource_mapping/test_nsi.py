import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from edgemeta.nsi import (
    IntentVector, NsiError, NsiMatrix, ResourceCatalog, ResourceType, expand_resources, expand_services,
    init_service_submatrix, map_intent, raw_demand, rescale_resources, validate_matrix,
)


def loop_product(P, x):
    # plain-Python oracle, deliberately avoiding numpy matmul
    return [sum(float(P[r][k]) * float(x[k]) for k in range(len(x))) for r in range(len(P))]


def test_identity_and_zero():
    M = NsiMatrix(np.eye(3)[:, None, :])
    assert map_intent(M, 0, np.zeros(3)).values.tolist() == [0, 0, 0]
    assert map_intent(M, 0, np.array([2.0, 5, 1])).values.tolist() == [2, 5, 1]


def test_rectangular_submatrix():
    M = NsiMatrix(np.array([[1.0, 0, 2], [0, 3, 0]])[:, None, :])
    np.testing.assert_allclose(map_intent(M, 0, np.ones(3)).values, [3, 3])


def test_clamp_flag():
    cat = ResourceCatalog((ResourceType("cpu", "cores", 0, 4, "g"), ResourceType("mem", "GB", 0, 8, "h")))
    M = NsiMatrix(np.array([[[-1.0, 0]], [[10.0, 0]]]))
    v = map_intent(M, 0, np.array([1.0, 0]), cat)
    assert v.values.tolist() == [0.0, 8.0]
    assert v.clamped
    assert not map_intent(M, 0, np.zeros(2), cat).clamped


def test_dimension_errors():
    M = NsiMatrix(np.ones((2, 1, 3)))
    with pytest.raises(NsiError):
        map_intent(M, 0, np.ones(4))
    with pytest.raises((NsiError, IndexError)):
        map_intent(M, 3, np.ones(3))


def test_random_fixtures_match_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        m, n, p = rng.integers(1, 7, size=3)
        T = rng.normal(size=(m, n, p))
        i = int(rng.integers(n))
        x = rng.normal(size=p) * 3
        expected = np.clip(loop_product(T[:, i, :], x), 0, None)
        got = map_intent(NsiMatrix(T), i, x).values
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(float, (3, 2, 4), elements=st.floats(-5, 5)), arrays(float, 4, elements=st.floats(-5, 5)),
       arrays(float, 4, elements=st.floats(-5, 5)), st.floats(-3, 3), st.floats(-3, 3))
def test_raw_demand_is_linear(T, a, b, alpha, beta):
    M = NsiMatrix(T)
    lhs = raw_demand(M, 1, alpha * a + beta * b)
    rhs = alpha * raw_demand(M, 1, a) + beta * raw_demand(M, 1, b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_expand_resources_rows_and_versions():
    T = np.random.default_rng(0).uniform(size=(2, 3, 4))
    M = NsiMatrix(T)
    E = expand_resources(M, np.zeros((1, 3, 4)))
    assert E.shape == (3, 3, 4)
    assert E.version == M.version + 1 and E.resource_version == M.resource_version + 1
    x = np.ones(4)
    for s in range(3):
        np.testing.assert_array_equal(map_intent(E, s, x).values[:2], map_intent(M, s, x).values)
        assert map_intent(E, s, x).values[2] == 0.0


def test_expand_resources_adjust_scales_demand():
    T = np.random.default_rng(1).uniform(size=(2, 2, 3))
    E = expand_resources(NsiMatrix(T), np.ones((1, 2, 3)), adjust=[0.8, 1.0])
    x = np.array([1.0, 2.0, 0.5])
    for s in range(2):
        np.testing.assert_allclose(map_intent(E, s, x).values[0], 0.8 * (T[0, s] @ x))


def test_expand_errors():
    M = NsiMatrix(np.ones((2, 2, 3)))
    with pytest.raises(NsiError):
        expand_resources(M, np.ones((1, 3, 3)))
    with pytest.raises(NsiError):
        expand_resources(M, np.full((1, 2, 3), np.nan))
    with pytest.raises(NsiError):
        expand_services(M, np.ones((3, 1, 3)))


def test_submatrix_blend():
    T = np.stack([np.ones((2, 3)), np.zeros((2, 3))], axis=1)
    M = NsiMatrix(T)
    np.testing.assert_allclose(init_service_submatrix(M, [0, 1], [0.25, 0.75])[:, 0], 0.25 * np.ones((2, 3)))
    np.testing.assert_array_equal(init_service_submatrix(M, [1], [1.0])[:, 0], T[:, 1])
    same = NsiMatrix(np.stack([np.full((2, 3), 2.0)] * 2, axis=1))
    np.testing.assert_allclose(init_service_submatrix(same, [0, 1], [0.5, 0.5])[:, 0], 2.0)
    with pytest.raises(NsiError):
        init_service_submatrix(M, [], [])
    with pytest.raises(NsiError):
        init_service_submatrix(M, [0, 1], [0.5, 0.6])


def test_expand_services_with_blend():
    T = np.random.default_rng(2).uniform(size=(3, 2, 4))
    M = NsiMatrix(T)
    E = expand_services(M, init_service_submatrix(M, [0, 1], [0.5, 0.5]))
    x = np.array([0.3, 1, 2, 0.1])
    assert E.shape == (3, 3, 4) and E.service_version == 2
    np.testing.assert_allclose(map_intent(E, 2, x).values,
                               np.clip(0.5 * (T[:, 0] @ x) + 0.5 * (T[:, 1] @ x), 0, None))


def test_random_expansion_sequences_are_conservative():
    rng = np.random.default_rng(5)
    for _ in range(100):
        m, n, p = rng.integers(1, 4, size=3)
        M = NsiMatrix(rng.uniform(size=(m, n, p)))
        probes = [(s, rng.normal(size=p)) for s in range(n)]
        before = [map_intent(M, s, x).values for s, x in probes]
        versions = [M.version]
        for _ in range(int(rng.integers(1, 6))):
            if rng.random() < 0.5:
                M = expand_resources(M, rng.uniform(size=(int(rng.integers(1, 3)), M.n, p)))
            else:
                M = expand_services(M, rng.uniform(size=(M.m, int(rng.integers(1, 3)), p)))
            versions.append(M.version)
        assert all(b > a for a, b in zip(versions, versions[1:]))
        for (s, x), old in zip(probes, before):
            np.testing.assert_allclose(map_intent(M, s, x).values[:len(old)], old, rtol=0, atol=1e-12)


def _unchecked(t):
    # bypass construction checks to obtain a matrix holding a NaN
    M = object.__new__(NsiMatrix)
    object.__setattr__(M, "tensor", t)
    for k in ("resource_version", "service_version", "version"):
        object.__setattr__(M, k, 1)
    return M


def test_validate_matrix_reports():
    cat = ResourceCatalog((ResourceType("cpu", "cores", 0, 4, "g"),))
    assert len(validate_matrix(NsiMatrix(np.ones((1, 1, 2))), cat)) == 0
    bad = np.ones((1, 1, 2))
    bad[0, 0, 1] = np.nan
    M = _unchecked(bad)
    assert "finiteness" in validate_matrix(M, cat).kinds()
    assert np.isnan(M.tensor[0, 0, 1])
    neg = validate_matrix(NsiMatrix(-np.ones((1, 1, 2))), cat)
    assert "negativity" in neg.kinds() and neg.ok
    assert "version" in validate_matrix(NsiMatrix(np.ones((1, 1, 2)), resource_version=3), cat).kinds()


def test_rescale_keeps_catalog_versions():
    M = NsiMatrix(np.ones((2, 1, 2)))
    R = rescale_resources(M, [0.5, 1.0])
    assert (R.resource_version, R.service_version, R.version) == (1, 1, 2)
    np.testing.assert_allclose(R.tensor[0], 0.5)


def test_json_round_trip():
    M = NsiMatrix(np.random.default_rng(3).normal(size=(2, 3, 4)), 2, 3, 5)
    back = NsiMatrix.from_dict(json.loads(json.dumps(M.to_dict())))
    np.testing.assert_array_equal(back.tensor, M.tensor)
    assert (back.resource_version, back.service_version, back.version) == (2, 3, 5)


def test_intent_vector_from_mapping():
    iv = IntentVector.from_mapping({"latency": 2.0, "security": 1.0})
    assert iv["latency"] == 2.0 and iv.p == 6
