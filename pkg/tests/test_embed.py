import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from yarddog.dataset import FeatureDataset
from yarddog.embed import (
    ProjectionModel,
    build_quadratic_form,
    centralize,
    compute_mean,
    embed,
    embed_many,
    fit,
    jacobi_eigh,
    scatter_terms,
    spherical_project,
    top_aspc,
)
from yarddog.errors import DegenerateVectorError, DimensionError

import oracles


def test_mean_examples():
    np.testing.assert_array_equal(compute_mean([[1, 3], [3, 1]]), [2, 2])
    np.testing.assert_array_equal(compute_mean([[0.5, -2, 7]]), [0.5, -2, 7])
    with pytest.raises(ValueError):
        compute_mean(np.empty((0, 3)))


def test_mean_matches_accumulation():
    x = np.random.default_rng(0).standard_normal((50, 7))
    acc = [0.0] * 7
    for row in x:
        for j, v in enumerate(row):
            acc[j] += v
    np.testing.assert_allclose(compute_mean(x), [a / 50 for a in acc], atol=1e-12)


def test_centralize():
    v = np.array([0.3, -1.2])
    np.testing.assert_array_equal(centralize(v, v), [0, 0])
    np.testing.assert_array_equal(centralize([3, 4], [1, 1]), [2, 3])
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(9), rng.standard_normal(9)
    assert np.array_equal(centralize(a, b), np.array([x - y for x, y in zip(a, b)]))
    assert np.array_equal(centralize(centralize(a, b), np.zeros(9)), centralize(a, b))
    with pytest.raises(DimensionError):
        centralize([1, 2], [1, 2, 3])


def test_spherical_project():
    np.testing.assert_allclose(spherical_project([3, 4]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(spherical_project([0, 1, 0]), [0, 1, 0])
    with pytest.raises(DegenerateVectorError):
        spherical_project([0, 0])
    v = np.random.default_rng(2).standard_normal((20, 5)) * 100
    assert np.all(np.abs(np.linalg.norm(spherical_project(v), axis=1) - 1) <= 1e-12)


def test_hand_checked_one_dimensional_form():
    form = build_quadratic_form([np.array([[0.0], [2.0]]), np.array([[10.0], [12.0]])], alpha=1.0)
    assert form.k == 2
    np.testing.assert_allclose(form.matrix, [[98.0]], atol=1e-12)
    between, within, k = scatter_terms([np.array([[0.0], [2.0]]), np.array([[10.0], [12.0]])])
    np.testing.assert_allclose(between, [[102.0]])
    np.testing.assert_allclose(within, [[8.0]])


def test_vanishing_alpha_leaves_between_term():
    rng = np.random.default_rng(4)
    groups = [rng.standard_normal((3, 4)) for _ in range(3)]
    between, _, _ = scatter_terms(groups)
    np.testing.assert_allclose(build_quadratic_form(groups, 1e-300).matrix, between, rtol=0, atol=1e-15)


def test_form_errors():
    with pytest.raises(ValueError):
        build_quadratic_form([np.ones((2, 2))], 1.0)
    with pytest.raises(ValueError):
        build_quadratic_form([np.ones((2, 2)), np.zeros((2, 2))], 0.0)


def test_singletons_count_in_k_but_not_within():
    rng = np.random.default_rng(6)
    groups = [rng.standard_normal((1, 3)), rng.standard_normal((4, 3)), rng.standard_normal((1, 3))]
    form = build_quadratic_form(groups, 0.7)
    assert form.k == 3
    V = np.linalg.qr(rng.standard_normal((3, 2)))[0].T
    assert abs(np.trace(V @ form.matrix @ V.T) - oracles.objective_pairwise(groups, V, 0.7)) <= 1e-9


def test_random_three_class_form_matches_pairwise():
    rng = np.random.default_rng(7)
    groups = [rng.standard_normal((int(rng.integers(2, 6)), 4)) for _ in range(3)]
    form = build_quadratic_form(groups, 0.5)
    # recover the matrix entrywise from the oracle via polarization
    d = 4
    eye = np.eye(d)
    oracle = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            if i == j:
                oracle[i, j] = oracles.objective_pairwise(groups, eye[i], 0.5)
            else:
                u = (eye[i] + eye[j])
                w = (eye[i] - eye[j])
                oracle[i, j] = (oracles.objective_pairwise(groups, u, 0.5) - oracles.objective_pairwise(groups, w, 0.5)) / 4
    assert np.max(np.abs(form.matrix - oracle)) <= 1e-9
    assert np.max(np.abs(form.matrix - form.matrix.T)) <= 1e-10


def test_top_aspc_diagonal():
    comps, vals = top_aspc(np.diag([3.0, 1.0, 2.0]), 2)
    np.testing.assert_allclose(vals, [3, 2])
    np.testing.assert_allclose(comps, [[1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_top_aspc_two_by_two():
    comps, vals = top_aspc(np.array([[2.0, 1.0], [1.0, 2.0]]), 1)
    np.testing.assert_allclose(vals, [3.0])
    np.testing.assert_allclose(comps, [[1 / np.sqrt(2), 1 / np.sqrt(2)]], atol=1e-14)


def test_top_aspc_range():
    with pytest.raises(ValueError):
        top_aspc(np.eye(3), 0)
    with pytest.raises(ValueError):
        top_aspc(np.eye(3), 4)


def test_sign_convention():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((8, 8))
    comps, _ = top_aspc(a + a.T, 8)
    for row in comps:
        assert row[np.argmax(np.abs(row))] > 0


def test_top_aspc_beats_random_frames():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((6, 6))
    q = a + a.T
    comps, vals = top_aspc(q, 3)
    best = np.trace(comps @ q @ comps.T)
    np.testing.assert_allclose(best, vals.sum())
    frames = np.linalg.qr(rng.standard_normal((100_000, 6, 3)))[0]
    sampled = np.einsum("sia,ij,sja->s", frames, q, frames)
    assert best >= sampled.max()


def test_jacobi_agrees_with_eigh():
    rng = np.random.default_rng(12)
    for d in (1, 2, 5, 12):
        a = rng.standard_normal((d, d))
        q = a + a.T
        w, v = jacobi_eigh(q)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(q), atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(d), atol=1e-12)
        np.testing.assert_allclose(q @ v, v * w, atol=1e-9)


def two_clusters(seed=0, d=10, per=15):
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(d)
    axis /= np.linalg.norm(axis)
    ids, imgs, rows = [], [], []
    for name, center in (("a", 5 * axis), ("b", -5 * axis)):
        for j in range(per):
            ids.append(name)
            imgs.append(str(j))
            rows.append(center + 0.3 * rng.standard_normal(d))
    return FeatureDataset(tuple(ids), tuple(imgs), np.array(rows)), axis


def test_fit_recovers_cluster_axis():
    data, axis = two_clusters()
    model = fit(data, alpha=1.0, n=1)
    assert abs(model.components[0] @ axis) >= 0.99


def test_full_rank_fit_is_orthonormal_basis():
    data, _ = two_clusters(seed=3)
    model = fit(data, alpha=0.5, n=10)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(10), atol=1e-9)
    unit = spherical_project(data.vectors - data.vectors.mean(0))
    form = build_quadratic_form([unit[:15], unit[15:]], 0.5)
    assert abs(np.trace(model.components @ form.matrix @ model.components.T) - np.trace(form.matrix)) <= 1e-8
    assert list(model.eigenvalues) == sorted(model.eigenvalues, reverse=True)


def test_fit_restricted_to_identities():
    data, _ = two_clusters()
    extra = FeatureDataset(data.identities + ("c",), data.images + ("0",), np.vstack([data.vectors, 100 * np.ones(10)]))
    a = fit(data, 1.0, 3)
    b = fit(extra, 1.0, 3, identities=["a", "b"])
    assert np.array_equal(a.components, b.components)
    assert np.array_equal(a.mean, b.mean)


def test_embed_examples():
    data, _ = two_clusters()
    model = fit(data, 1.0, 10)
    with pytest.raises(DegenerateVectorError):
        embed(model, model.mean)
    v = np.random.default_rng(0).standard_normal(10)
    assert abs(np.linalg.norm(embed(model, v)) - 1) <= 1e-12
    with pytest.raises(DimensionError):
        embed(model, np.ones(3))


def test_embed_matches_stage_oracle():
    rng = np.random.default_rng(13)
    d, n = 7, 3
    model = ProjectionModel(rng.standard_normal(d), np.linalg.qr(rng.standard_normal((d, n)))[0].T, 1.0, np.arange(n, 0, -1.0))
    v = rng.standard_normal(d)
    c = [a - b for a, b in zip(v, model.mean)]
    norm = sum(x * x for x in c) ** 0.5
    u = [x / norm for x in c]
    expected = [sum(row[j] * u[j] for j in range(d)) for row in model.components]
    np.testing.assert_allclose(embed(model, v), expected, atol=1e-12)
    assert np.array_equal(embed_many(model, v[None])[0], embed(model, v))


def test_model_round_trip(tmp_path):
    data, _ = two_clusters(seed=5)
    model = fit(data, 0.3, 4)
    model.save(tmp_path / "head.json")
    back = ProjectionModel.load(tmp_path / "head.json")
    assert back.n_components == 4 and back.dim == 10 and back.alpha == 0.3
    np.testing.assert_allclose(embed_many(back, data.vectors), embed_many(model, data.vectors), rtol=0, atol=1e-12)


def test_nonpositive_components_flagged():
    data, _ = two_clusters()
    model = fit(data, 2.0, 10)
    assert model.n_nonpositive == int(np.sum(model.eigenvalues <= 0)) > 0


@st.composite
def small_groups(draw):
    d = draw(st.integers(1, 8))
    k = draw(st.integers(2, 5))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    sizes = [draw(st.integers(1, 6)) for _ in range(k)]
    return [rng.standard_normal((m, d)) * draw(st.sampled_from([0.1, 1.0, 10.0])) for m in sizes], rng


@settings(max_examples=60, deadline=None)
@given(small_groups(), st.sampled_from([0.1, 0.5, 1.0, 2.0]), st.integers(1, 8))
def test_trace_matches_pairwise_oracle(case, alpha, n):
    groups, rng = case
    d = groups[0].shape[1]
    n = min(n, d)
    V = np.linalg.qr(rng.standard_normal((d, n)))[0].T
    form = build_quadratic_form(groups, alpha)
    assert abs(np.trace(V @ form.matrix @ V.T) - oracles.objective_pairwise(groups, V, alpha)) <= 1e-9 * max(
        1.0, abs(oracles.objective_pairwise(groups, V, alpha))
    )
