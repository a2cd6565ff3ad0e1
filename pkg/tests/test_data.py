import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcfa.data import (
    DEFAULT_SHADES,
    GlobalAverageDataset,
    IdxFormatError,
    LabeledDataset,
    LocalAverage,
    PartitionPlan,
    dirichlet_partition,
    filter_classes,
    global_average_aggregate,
    iid_partition,
    load_idx,
    local_average,
    make_simpson_colored,
    max_class_share,
    one_hot,
    sample_global_batch,
    subset_means,
    synthetic_digits,
    write_idx,
)


def labeled(labels, classes=None, dim=3, seed=0):
    labels = np.asarray(labels)
    classes = classes or int(labels.max()) + 1
    xs = np.random.default_rng(seed).normal(size=(len(labels), dim))
    return LabeledDataset(xs, one_hot(labels, classes))


# --- partitions ------------------------------------------------------------

def test_dirichlet_single_client_gets_everything():
    ds = labeled(np.arange(20) % 4)
    assert dirichlet_partition(ds, 1, 0.5, seed=3).assignments == [list(range(20))]


def test_dirichlet_is_deterministic():
    ds = labeled(np.arange(200) % 10)
    a = dirichlet_partition(ds, 7, 0.3, seed=11)
    b = dirichlet_partition(ds, 7, 0.3, seed=11)
    assert a.assignments == b.assignments


def test_dirichlet_rejects_bad_args():
    ds = labeled(np.arange(5) % 2)
    with pytest.raises(ValueError):
        dirichlet_partition(ds, 6, 0.5, seed=0)
    with pytest.raises(ValueError):
        dirichlet_partition(ds, 2, 0.0, seed=0)


def test_dirichlet_smaller_alpha_is_more_skewed():
    ds = labeled(np.arange(1000) % 10)
    shares = {a: np.mean([max_class_share(dirichlet_partition(ds, 10, a, s), ds) for s in range(50)]) for a in (0.2, 0.6)}
    assert shares[0.2] > shares[0.6]


def test_iid_sizes():
    assert sorted(iid_partition(labeled([0, 1, 0, 1]), 2, 0).sizes()) == [2, 2]
    assert sorted(iid_partition(labeled([0, 1, 0, 1, 0]), 2, 0).sizes(), reverse=True) == [3, 2]
    with pytest.raises(ValueError):
        iid_partition(labeled([0, 1]), 3, 0)


def test_iid_label_histograms_close_to_global():
    ds = labeled(np.arange(1000) % 10)
    K, df = 5, 9
    stats = []
    for seed in range(50):
        plan = iid_partition(ds, K, seed)
        for a in plan.assignments:
            counts = np.bincount(ds.labels[a], minlength=10)
            expected = len(a) / 10
            stats.append(((counts - expected) ** 2 / expected).sum())
    # chi-square with 9 dof has mean 9; sampling without replacement only shrinks it
    assert np.mean(stats) < 1.5 * df
    skewed = dirichlet_partition(ds, K, 0.2, 0)
    chi_skew = [((np.bincount(ds.labels[a], minlength=10) - len(a) / 10) ** 2 / (len(a) / 10)).sum() for a in skewed.assignments]
    assert np.mean(chi_skew) > 10 * np.mean(stats)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 40), data=st.data(), seed=st.integers(0, 10_000), alpha=st.floats(0.05, 5.0))
def test_partitions_disjoint_and_covering(n, data, seed, alpha):
    K = data.draw(st.integers(1, n))
    ds = labeled(np.arange(n) % 3, classes=3)
    for plan in (dirichlet_partition(ds, K, alpha, seed), iid_partition(ds, K, seed)):
        plan.validate(n)
        assert plan.num_clients == K


def test_partition_json_roundtrip():
    plan = iid_partition(labeled(np.arange(9) % 3), 3, 1)
    assert PartitionPlan.from_json(plan.to_json()).assignments == plan.assignments


# --- IDX -------------------------------------------------------------------

def write_fixture(tmp_path, n=4, labels=(7, 1, 0, 9)):
    imgs = (np.arange(n * 28 * 28) % 256).astype(np.uint8).reshape(n, 28, 28)
    write_idx(imgs, np.array(labels, dtype=np.uint8), tmp_path / "img", tmp_path / "lab")
    return tmp_path / "img", tmp_path / "lab"


def test_load_idx_fixture(tmp_path):
    ds = load_idx(*write_fixture(tmp_path))
    assert ds.xs.shape == (4, 784)
    assert ds.xs.min() >= 0 and ds.xs.max() <= 1
    assert ds.ys[0].argmax() == 7 and ds.ys[0].sum() == 1


def test_load_idx_bad_magic(tmp_path):
    img, lab = write_fixture(tmp_path)
    raw = bytearray(img.read_bytes())
    raw[3] = 0x01
    img.write_bytes(bytes(raw))
    with pytest.raises(IdxFormatError):
        load_idx(img, lab)


def test_load_idx_truncated_and_count_mismatch(tmp_path):
    img, lab = write_fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(IdxFormatError):
        load_idx(img, lab)
    img, lab = write_fixture(tmp_path, n=3, labels=(1, 2, 3))
    lab.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x02\x01\x02")
    with pytest.raises(IdxFormatError):
        load_idx(img, lab)


# --- coloured split --------------------------------------------------------

@pytest.fixture(scope="module")
def simpson():
    return make_simpson_colored(synthetic_digits(600, seed=1), clients=5, seed=2)


def test_simpson_client_shades(simpson):
    t = DEFAULT_SHADES
    assert simpson.client_shades[0] == (t[0], t[1])
    assert simpson.client_shades == [(t[c], t[c + 1]) for c in range(5)]


def test_simpson_digit1_darker_within_each_client(simpson):
    for c in simpson.clients:
        lab = c.ys.argmax(axis=1)
        assert c.xs[lab == 0].mean() < c.xs[lab == 1].mean()


def test_simpson_shared_shade_across_labels(simpson):
    # shade t_2 appears as digit 7 on client 2 and digit 1 on client 3
    assert simpson.client_shades[1][1] == simpson.client_shades[2][0] == DEFAULT_SHADES[2]
    assert (simpson.clients[1].ys[:, 1] == 1).any() and (simpson.clients[2].ys[:, 0] == 1).any()


def test_simpson_test_set_balanced_over_shades(simpson):
    lab = simpson.test.ys.argmax(axis=1)
    for cls in (0, 1):
        counts = np.bincount(simpson.test_shade_index[lab == cls], minlength=6)
        assert counts.max() - counts.min() <= 1
    assert simpson.test.xs.shape[1] == 3 * 144


def test_simpson_requires_only_1_and_7():
    ds = labeled(np.array([1, 7, 3]), classes=10)
    with pytest.raises(ValueError):
        make_simpson_colored(ds)
    assert set(filter_classes(ds).labels) == {1, 7}


# --- averages --------------------------------------------------------------

def test_local_average_identity_permutation():
    ds = LabeledDataset(np.array([[2.0], [4.0], [6.0], [8.0]]), one_hot([0, 0, 1, 1], 2))
    la = local_average(ds, 2, shuffle=False)
    np.testing.assert_array_equal(la.xs, [[3.0], [7.0]])
    np.testing.assert_array_equal(la.ys, [[1.0, 0.0], [0.0, 1.0]])
    assert la.n == 2
    assert local_average(ds, 1, shuffle=False).xs[0, 0] == 5.0


def test_local_average_drops_remainder():
    ds = LabeledDataset(np.arange(5.0)[:, None], one_hot([0] * 5, 1))
    la = local_average(ds, 2, shuffle=False)
    assert la.n == 2
    np.testing.assert_array_equal(la.xs[:, 0], [0.5, 2.5])
    with pytest.raises(ValueError):
        local_average(ds, 6)


def test_local_average_seeded():
    ds = labeled(np.arange(40) % 2)
    a = local_average(ds, 4, rng=np.random.default_rng(3))
    b = local_average(ds, 4, rng=np.random.default_rng(3))
    assert a.xs.tobytes() == b.xs.tobytes()
    assert np.abs(a.ys.sum(axis=1) - 1).max() < 1e-9


def test_global_aggregate_examples():
    y = np.array([[0.5, 0.5]])
    g = global_average_aggregate([LocalAverage(np.array([[1.0, 3.0]]), y, 5, 0), LocalAverage(np.array([[3.0, 1.0]]), y, 5, 1)])
    np.testing.assert_array_equal(g.xs, [[2.0, 2.0]])
    assert g.present
    one = LocalAverage(np.array([[1.5, -2.0]]), np.array([[0.25, 0.75]]), 3, 0)
    g1 = global_average_aggregate([one])
    assert g1.xs.tobytes() == one.xs.tobytes() and g1.ys.tobytes() == one.ys.tobytes()


def test_global_aggregate_b1_equal_sizes_is_grand_mean():
    rng = np.random.default_rng(0)
    dss = [labeled(rng.integers(0, 3, 20), classes=3, seed=k) for k in range(4)]
    locals_ = [local_average(d, 1, rng=np.random.default_rng(k), client_id=k) for k, d in enumerate(dss)]
    g = global_average_aggregate(locals_)
    np.testing.assert_allclose(g.xs[0], np.vstack([d.xs for d in dss]).mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.ys[0], np.vstack([d.ys for d in dss]).mean(axis=0), atol=1e-12)


def test_global_aggregate_client_order_invariant_bitwise():
    rng = np.random.default_rng(4)
    locals_ = [LocalAverage(rng.normal(size=(3, 2)), rng.dirichlet(np.ones(2), 3), int(rng.integers(1, 9)), k) for k in range(5)]
    a = global_average_aggregate(locals_)
    b = global_average_aggregate(list(reversed(locals_)))
    assert a.xs.tobytes() == b.xs.tobytes() and a.ys.tobytes() == b.ys.tobytes()


def test_global_aggregate_errors():
    y = np.array([[1.0]])
    with pytest.raises(ValueError):
        global_average_aggregate([])
    with pytest.raises(ValueError):
        global_average_aggregate([LocalAverage(np.zeros((1, 2)), y, 1, 0), LocalAverage(np.zeros((2, 2)), np.ones((2, 1)), 1, 1)])


def test_sample_global_batch():
    g1 = GlobalAverageDataset(np.array([[1.0, 2.0]]), np.array([[1.0]]))
    xs, ys = sample_global_batch(g1, 5, np.random.default_rng(0))
    assert (xs == [1.0, 2.0]).all() and xs.shape == (5, 2)
    g = GlobalAverageDataset(np.arange(8.0)[:, None], one_hot(np.arange(8) % 2, 2))
    a = sample_global_batch(g, 6, np.random.default_rng(9))[0]
    b = sample_global_batch(g, 6, np.random.default_rng(9))[0]
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        sample_global_batch(GlobalAverageDataset.absent(), 1, np.random.default_rng(0))


def test_sample_global_batch_uniform_rows():
    B, draws = 8, 100_000
    g = GlobalAverageDataset(np.arange(float(B))[:, None], one_hot(np.zeros(B, int), 1))
    xs, _ = sample_global_batch(g, draws, np.random.default_rng(123))
    counts = np.bincount(xs[:, 0].astype(int), minlength=B)
    p = 1 / B
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.abs(counts - draws * p).max() < 3 * sigma


def test_subset_means_clt_variance():
    rng = np.random.default_rng(0)
    sigma2, n = 4.0, 50
    means = []
    for _ in range(400):
        vals = rng.normal(1.0, np.sqrt(sigma2), size=(n * 10, 1))
        m, used = subset_means(vals, 10, rng.permutation(len(vals)))
        assert used == n
        means.append(m[:, 0])
    assert np.var(np.concatenate(means)) == pytest.approx(sigma2 / n, rel=0.1)
