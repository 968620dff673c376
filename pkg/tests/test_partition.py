import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special, stats

from federa.data import Dataset, SynthConfig, synth_generate
from federa.errors import ConfigError, DataError
from federa.linalg import make_rng
from federa.partition import (
    PartitionConfig,
    class_proportions,
    dirichlet_log_pdf,
    dirichlet_sample,
    heterogeneity_matrix,
    js_divergence,
    largest_remainder,
    log_gamma,
    log_standard_gamma,
    partition,
    read_shards_json,
    write_matrix_csv,
    write_shards_json,
)


def tiny_dataset(labels, num_classes=None):
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(np.ones((len(labels), 2), dtype=np.int64), labels, num_classes or int(labels.max()) + 1, 4)


@pytest.mark.parametrize("x", [0.001, 0.3, 0.5, 1.0, 2.5, 7.0, 30.0, 171.5])
def test_log_gamma_matches_reference(x):
    assert log_gamma(x) == pytest.approx(math.lgamma(x), rel=1e-12, abs=1e-12)


def test_log_standard_gamma_rejects_nonpositive():
    with pytest.raises(ConfigError):
        log_standard_gamma([1.0, 0.0], make_rng(0, "g"))


@pytest.mark.parametrize("shape", [0.05, 0.7, 1.0, 4.0])
def test_gamma_moments(shape):
    g = np.exp(log_standard_gamma(np.full(200_000, shape), make_rng(1, "g")))
    assert abs(g.mean() - shape) < 4 * math.sqrt(shape / 200_000)
    assert stats.kstest(g, "gamma", args=(shape,)).pvalue > 0.001


def test_dirichlet_sample_on_simplex_for_tiny_alpha():
    x = dirichlet_sample(np.full(20, 1e-3), make_rng(2, "d"))
    assert np.all(x >= 0) and abs(x.sum() - 1.0) < 1e-12 and np.all(np.isfinite(x))


def test_dirichlet_sample_rejects_bad_concentration():
    with pytest.raises(ConfigError):
        dirichlet_sample([1.0, -1.0], make_rng(0, "d"))
    with pytest.raises(ConfigError):
        dirichlet_sample([], make_rng(0, "d"))


@pytest.mark.parametrize("alpha", [0.1, 1.0, 100.0])
def test_dirichlet_mean_within_tv(alpha):
    m = np.linspace(1, 3, 20)
    m /= m.sum()
    draws = dirichlet_sample(alpha * m, make_rng(3, "d"), size=100_000)
    assert 0.5 * np.abs(draws.mean(axis=0) - m).sum() < 0.01


def test_dirichlet_chi_square_against_log_pdf():
    u = np.array([2.0, 3.0])
    x1 = dirichlet_sample(u, make_rng(4, "chi"), size=20_000)[:, 0]
    edges = np.linspace(0.0, 1.0, 21)
    observed, _ = np.histogram(x1, edges)
    pdf = lambda t: math.exp(dirichlet_log_pdf([t, 1.0 - t], u))
    probs = np.array([integrate.quad(pdf, max(lo, 1e-12), min(hi, 1 - 1e-12))[0] for lo, hi in zip(edges[:-1], edges[1:])])
    assert abs(probs.sum() - 1.0) < 1e-8
    assert stats.chisquare(observed, probs * len(x1)).pvalue > 0.01


def test_dirichlet_log_pdf_values():
    assert dirichlet_log_pdf([0.5, 0.5], [1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)
    x, u = np.array([0.2, 0.3, 0.5]), np.array([0.5, 2.0, 4.0])
    ref = special.gammaln(u.sum()) - special.gammaln(u).sum() + np.sum((u - 1) * np.log(x))
    assert dirichlet_log_pdf(x, u) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(DataError):
        dirichlet_log_pdf([1.0, 0.0], [2.0, 2.0])


def test_class_proportions():
    assert class_proportions([0, 0, 1, 3], 4).tolist() == [0.5, 0.25, 0.0, 0.25]
    with pytest.raises(DataError):
        class_proportions([], 2)


@pytest.mark.parametrize(
    "total, weights, expected",
    [(10, [1, 1, 1], [4, 3, 3]), (7, [0.5, 0.5], [4, 3]), (5, [0, 0], [3, 2]), (0, [1, 2], [0, 0]), (3, [0.1, 0.6, 0.3], [0, 2, 1])],
)
def test_largest_remainder(total, weights, expected):
    assert largest_remainder(total, weights).tolist() == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 500), st.lists(st.floats(0, 10), min_size=1, max_size=12))
def test_largest_remainder_sums(total, weights):
    counts = largest_remainder(total, weights)
    assert counts.sum() == total and np.all(counts >= 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 30), st.sampled_from([0.01, 0.1, 1.0, 100.0]), st.integers(0, 1000))
def test_partition_is_exact_cover(num_clients, alpha, seed):
    labels = make_rng(seed, "labels").integers(0, 6, 60)
    shards = partition(tiny_dataset(labels, 6), PartitionConfig(num_clients, alpha, seed))
    allidx = np.concatenate([s.sample_indices for s in shards])
    assert sorted(allidx.tolist()) == list(range(60))
    assert all(len(s) >= 1 for s in shards)
    assert [s.client_id for s in shards] == list(range(num_clients))
    for s in shards:
        assert abs(s.empirical_dist.sum() - 1.0) < 1e-12


def test_partition_single_client_and_errors():
    ds = tiny_dataset([0, 1, 1, 2])
    (only,) = partition(ds, PartitionConfig(1, 0.5, 0))
    assert only.sample_indices.tolist() == [0, 1, 2, 3]
    with pytest.raises(DataError):
        partition(ds, PartitionConfig(5, 0.5, 0))
    with pytest.raises(ConfigError):
        partition(ds, PartitionConfig(2, 0.0, 0))


def test_partition_deterministic():
    ds = synth_generate(SynthConfig(samples_per_class=20))
    a = partition(ds, PartitionConfig(10, 0.3, 7))
    b = partition(ds, PartitionConfig(10, 0.3, 7))
    assert all(np.array_equal(x.sample_indices, y.sample_indices) for x, y in zip(a, b))


def test_partition_class_keys_override():
    ds = tiny_dataset([0] * 10 + [1] * 10)
    keys = np.array([0, 1] * 10)
    shards = partition(ds, PartitionConfig(2, 1.0, 0), class_keys=keys)
    assert sorted(np.concatenate([s.sample_indices for s in shards]).tolist()) == list(range(20))


def test_js_divergence_cases():
    assert js_divergence([1, 0], [0, 1]) == pytest.approx(1.0, abs=1e-15)
    assert js_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    p, q = np.array([0.1, 0.4, 0.5]), np.array([0.3, 0.3, 0.4])
    mid = 0.5 * (p + q)
    ref = 0.5 * np.sum(special.rel_entr(p, mid)) / np.log(2) + 0.5 * np.sum(special.rel_entr(q, mid)) / np.log(2)
    assert js_divergence(p, q) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ConfigError):
        js_divergence([1.0], [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_js_symmetric_bounded(p, q):
    p, q = np.array(p) + 1e-9, np.array(q) + 1e-9
    p, q = p / p.sum(), q / q.sum()
    assert js_divergence(p, q) == pytest.approx(js_divergence(q, p), abs=1e-15)
    assert 0.0 <= js_divergence(p, q) <= 1.0


def test_heterogeneity_matrix_and_alpha_ordering():
    ds = synth_generate(SynthConfig())
    means = []
    for alpha in (0.1, 1.0, 100.0):
        mat, mean = heterogeneity_matrix(partition(ds, PartitionConfig(20, alpha, 0)))
        assert np.allclose(mat, mat.T) and np.all(np.diag(mat) == 0)
        means.append(mean)
    assert means[0] > means[1] > means[2]


def test_shards_json_roundtrip(tmp_path):
    ds = synth_generate(SynthConfig(samples_per_class=10))
    shards = partition(ds, PartitionConfig(4, 0.5, 1))
    write_shards_json(tmp_path / "s.json", shards)
    back = read_shards_json(tmp_path / "s.json", ds.labels)
    for a, b in zip(shards, back):
        assert a.client_id == b.client_id and np.array_equal(a.sample_indices, b.sample_indices)
        assert np.array_equal(a.empirical_dist, b.empirical_dist)
    with pytest.raises(DataError):
        read_shards_json(tmp_path / "missing.json", ds.labels)


def test_matrix_csv_roundtrip(tmp_path):
    m = np.array([[0.0, 1 / 3], [1 / 3, 0.0]])
    write_matrix_csv(tmp_path / "m.csv", m)
    back = np.loadtxt(tmp_path / "m.csv", delimiter=",")
    assert np.array_equal(back, m)
