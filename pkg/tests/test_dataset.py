import numpy as np
import pytest

from tailcal.dataset import (
    GaussianMixtureSpec,
    LabeledDataset,
    LongTailProfile,
    ShiftSpec,
    empirical_prior,
    feature_mean,
    imbalance_factor,
    load_counts,
    load_dataset,
    make_longtail_counts,
    make_shifted_counts,
    sample_dataset,
    save_counts,
    save_dataset,
)
from tailcal.errors import CountError, ParseError, ProfileError, ShiftError
from tailcal.numerics import RngStream, prob_vector


def test_two_class_split_matches_documented_alternative():
    counts = make_longtail_counts(LongTailProfile(2, max_count=9900, imbalance_factor=99))
    assert counts.tolist() == [9900, 100]
    assert counts.sum() == 10000


def test_exponential_profile_ten_classes():
    counts = make_longtail_counts(LongTailProfile(10, max_count=5000, imbalance_factor=100))
    # frozen from round(5000 * 100 ** (-i / 9)) evaluated directly
    expected = [round(5000 * 100 ** (-i / 9)) for i in range(10)]
    assert counts.tolist() == expected
    assert counts.tolist() == [5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]
    assert counts[0] == 5000 and counts[-1] == 50
    assert np.all(np.diff(counts) <= 0)


def test_balanced_profile():
    counts = make_longtail_counts(LongTailProfile(3, max_count=10, imbalance_factor=1))
    assert counts.tolist() == [10, 10, 10]


def test_step_profile():
    counts = make_longtail_counts(
        LongTailProfile(4, max_count=100, imbalance_factor=10, kind="step")
    )
    assert counts.tolist() == [100, 100, 10, 10]


def test_profile_rejects_zero_counts():
    with pytest.raises(ProfileError):
        make_longtail_counts(LongTailProfile(2, max_count=10, imbalance_factor=100))


def test_profile_rejects_bad_parameters():
    with pytest.raises(ProfileError):
        LongTailProfile(1, max_count=10)
    with pytest.raises(ProfileError):
        LongTailProfile(2, max_count=10, imbalance_factor=0.5)
    with pytest.raises(ProfileError):
        LongTailProfile(2, kind="explicit", counts=(5,))


def test_imbalance_factor_roundtrip():
    profile = LongTailProfile(5, max_count=6000, imbalance_factor=12)
    counts = make_longtail_counts(profile)
    assert imbalance_factor(counts) == pytest.approx(12, rel=0.02)


def test_empirical_prior_examples():
    np.testing.assert_allclose(empirical_prior([196, 4]), [0.98, 0.02])
    np.testing.assert_allclose(empirical_prior([1, 1, 1, 1]), [0.25] * 4)
    np.testing.assert_allclose(empirical_prior([9900, 100]), [0.99, 0.01])
    prob_vector(empirical_prior([3, 7, 11]))


def test_empirical_prior_reconstructs_counts():
    counts = np.array([123, 456, 7])
    prior = empirical_prior(counts)
    np.testing.assert_allclose(prior * counts.sum(), counts, atol=1e-9)


def test_imbalance_factor_examples():
    assert imbalance_factor([5000, 50]) == 100
    assert imbalance_factor([10, 10]) == 1
    assert imbalance_factor([500, 50, 5]) == 100


def test_sample_dataset_deterministic(gmm):
    a = sample_dataset(gmm, [50, 20], RngStream(5))
    b = sample_dataset(gmm, [50, 20], RngStream(5))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_sample_dataset_rejects_zero_count(gmm):
    with pytest.raises(CountError):
        sample_dataset(gmm, [3, 0], RngStream(5))


def test_sample_dataset_class_means_converge(gmm):
    ds = sample_dataset(gmm, [5000, 50], RngStream(11))
    for label in (0, 1):
        n = ds.counts[label]
        bound = 3.0 * float(gmm.sigmas[label]) / np.sqrt(n)
        observed = feature_mean(ds, label=label)
        assert np.all(np.abs(observed - gmm.means[label]) < bound + 1e-12)


def test_shifted_counts_forward_two_class():
    counts = make_shifted_counts([100, 100], ShiftSpec("forward", 50))
    assert counts.tolist() == [196, 4]
    assert counts.sum() == 200


def test_shifted_counts_backward_reverses_forward():
    counts = make_shifted_counts([196, 4], ShiftSpec("backward", 49))
    assert counts.tolist() == [4, 196]


def test_shifted_counts_uniform():
    counts = make_shifted_counts([150, 50], ShiftSpec("uniform"))
    assert counts.tolist() == [100, 100]


def test_shift_spec_validation():
    with pytest.raises(ShiftError):
        ShiftSpec("uniform", 2.0)
    with pytest.raises(ShiftError):
        ShiftSpec("sideways", 2.0)
    with pytest.raises(ShiftError):
        ShiftSpec("forward", 0.5)
    with pytest.raises(ShiftError):
        make_shifted_counts([4, 4], ShiftSpec("forward", 100))


def test_feature_mean_trivial():
    ds = LabeledDataset(np.array([[0.0, 0.0], [2.0, 2.0]]), [0, 1], [1, 1])
    np.testing.assert_allclose(feature_mean(ds), [1.0, 1.0])
    single = LabeledDataset(np.array([[3.0, 4.0]]), [0], [1])
    np.testing.assert_allclose(feature_mean(single), [3.0, 4.0])


def test_feature_mean_matches_mixture_mean(gmm):
    ds = sample_dataset(gmm, [9901, 99], RngStream(21))
    mixture_mean = 0.9901 * (-1.0) + 0.0099 * 1.0
    assert abs(feature_mean(ds)[0] - mixture_mean) < 0.05


def test_moment_diagnostic_separates_train_and_test(gmm):
    train = sample_dataset(gmm, [9901, 99], RngStream(31, 0))
    test = sample_dataset(gmm, [5000, 5000], RngStream(31, 1))
    gap = np.linalg.norm(feature_mean(train) - feature_mean(test))
    stderr = max(
        np.linalg.norm(train.features.std(axis=0)) / np.sqrt(train.n),
        np.linalg.norm(test.features.std(axis=0)) / np.sqrt(test.n),
    )
    assert gap > 5 * stderr


def test_dataset_csv_roundtrip(tmp_path, gmm):
    ds = sample_dataset(gmm, [30, 12], RngStream(8))
    path = tmp_path / "ds.csv"
    save_dataset(ds, path)
    loaded = load_dataset(path, num_classes=2)
    np.testing.assert_array_equal(loaded.features, ds.features)
    np.testing.assert_array_equal(loaded.labels, ds.labels)
    np.testing.assert_array_equal(loaded.counts, ds.counts)


def test_load_rejects_label_out_of_range(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,f1,label\n0.0,0.0,0\n1.0,1.0,2\n0.5,0.5,1\n")
    with pytest.raises(ParseError, match="line 3"):
        load_dataset(path, num_classes=2)


def test_load_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ParseError, match="no header"):
        load_dataset(path)


def test_load_rejects_ragged_rows(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("f0,f1,label\n0.0,0.0,0\n1.0,1\n")
    with pytest.raises(ParseError, match="line 3"):
        load_dataset(path)


def test_counts_json_roundtrip(tmp_path):
    path = tmp_path / "counts.json"
    save_counts([9901, 99], path)
    assert load_counts(path).tolist() == [9901, 99]
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ParseError):
        load_counts(bad)


def test_labeled_dataset_invariants():
    with pytest.raises(CountError):
        LabeledDataset(np.zeros((2, 2)), [0, 1], [2, 0])
    with pytest.raises(CountError):
        LabeledDataset(np.zeros((2, 2)), [0, 5], [1, 1])


def test_mixture_spec_validation():
    with pytest.raises(CountError):
        GaussianMixtureSpec(np.zeros((2, 2)), np.array([1.0, 0.0]))
