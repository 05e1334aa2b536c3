import numpy as np
import pytest
from scipy.stats import kendalltau

from milexplain.bags import (Bag, BagFormatError, TaskLabel,
                             discretize_event_times,
                             generate_classification_bags,
                             generate_regression_bags,
                             generate_survival_bags, load_bag, load_dataset,
                             save_bag, save_dataset)


def test_classification_label_matches_truth_mask():
    ds = generate_classification_bags(60, seed=1)
    for bag in ds.bags:
        assert bag.label.class_index == int(bag.truth_mask.any())


def test_classification_balanced_labels():
    ds = generate_classification_bags(40, seed=2)
    labels = [b.label.class_index for b in ds.bags]
    assert sum(labels) == 20


def test_classification_all_background():
    ds = generate_classification_bags(10, witness_rate=0.0, seed=3,
                                      positive_fraction=0.0)
    assert all(b.label.class_index == 0 for b in ds.bags)
    assert all(not b.truth_mask.any() for b in ds.bags)


def test_classification_witness_rate_zero_with_positives_raises():
    with pytest.raises(ValueError):
        generate_classification_bags(10, witness_rate=0.0, seed=3)


def test_classification_seed_determinism():
    a = generate_classification_bags(20, seed=9)
    b = generate_classification_bags(20, seed=9)
    for x, y in zip(a.bags, b.bags):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.truth_mask.tobytes() == y.truth_mask.tobytes()
        assert x.label.class_index == y.label.class_index
    assert a.splits == b.splits


def test_regression_null_signal():
    ds = generate_regression_bags(15, signal_scale=0.0, noise_sd=0.0, seed=4)
    assert all(b.label.value == 0.0 for b in ds.bags)


def test_regression_target_recomputable_without_noise():
    ds = generate_regression_bags(25, noise_sd=0.0, seed=5, signal_scale=1.7)
    direction = np.array(ds.generator["direction"])
    for bag in ds.bags:
        expect = np.mean(bag.features @ direction) * 1.7
        assert abs(bag.label.value - expect) < 1e-12


def test_regression_truth_mask_top_quartile():
    ds = generate_regression_bags(10, seed=6)
    direction = np.array(ds.generator["direction"])
    for bag in ds.bags:
        contrib = bag.features @ direction
        cut = np.quantile(contrib, 0.75)
        np.testing.assert_array_equal(bag.truth_mask, contrib >= cut)


def test_regression_reference_value_is_train_median():
    ds = generate_regression_bags(50, seed=7)
    train = set(ds.splits["train"])
    vals = [b.label.value for b in ds.bags if b.id in train]
    assert ds.reference_value == float(np.median(vals))


def test_survival_censoring_vanishes_with_tiny_censor_rate():
    ds = generate_survival_bags(80, censor_rate=1e-9, seed=8)
    assert sum(b.label.censored for b in ds.bags) == 0


def test_survival_risk_anticorrelates_with_event_time():
    ds = generate_survival_bags(500, seed=10, n_range=(10, 30))
    risks, times = [], []
    for bag in ds.bags:
        if bag.label.censored == 0:
            risks.append(bag.truth_mask.mean())
            times.append(bag.label.raw_time)
    tau, _ = kendalltau(risks, times)
    assert tau < 0


def test_survival_seed_determinism():
    a = generate_survival_bags(30, seed=11)
    b = generate_survival_bags(30, seed=11)
    for x, y in zip(a.bags, b.bags):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.label.to_json() == y.label.to_json()


def test_discretize_hand_case():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    intervals = discretize_event_times(times, np.zeros(4, dtype=int), 2)
    np.testing.assert_array_equal(intervals, [1, 1, 2, 2])


def test_discretize_degenerate_all_equal():
    intervals = discretize_event_times(np.full(6, 3.3), np.zeros(6), 4)
    np.testing.assert_array_equal(intervals, np.ones(6))


def test_discretize_censored_beyond_last_edge_clamps():
    times = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
    cens = np.array([0, 0, 0, 0, 1])
    intervals = discretize_event_times(times, cens, 4)
    assert intervals[-1] == 4


def test_discretize_monotone_in_time():
    rng = np.random.default_rng(12)
    times = rng.exponential(2.0, 200)
    cens = rng.integers(0, 2, 200)
    cens[:10] = 0
    intervals = discretize_event_times(times, cens, 4)
    order = np.argsort(times)
    assert np.all(np.diff(intervals[order]) >= 0)


def test_discretize_needs_enough_uncensored():
    with pytest.raises(ValueError):
        discretize_event_times(np.ones(5), np.array([1, 1, 1, 0, 0]), 3)


def test_bag_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    bag = Bag(id="b0", features=rng.standard_normal((7, 3)),
              truth_mask=rng.random(7) < 0.4)
    save_bag(bag, tmp_path / "b0.xmb")
    back = load_bag(tmp_path / "b0.xmb")
    assert back.features.tobytes() == bag.features.tobytes()
    np.testing.assert_array_equal(back.truth_mask, bag.truth_mask)
    assert back.id == "b0"


def test_bag_roundtrip_minimal(tmp_path):
    bag = Bag(id="tiny", features=np.array([[0.25]]))
    save_bag(bag, tmp_path / "tiny.xmb")
    back = load_bag(tmp_path / "tiny.xmb")
    assert back.features.shape == (1, 1)
    assert back.features[0, 0] == 0.25
    assert back.truth_mask is None


def test_bag_bad_magic_names_magic(tmp_path):
    path = tmp_path / "bad.xmb"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(BagFormatError, match="XMILBAG1"):
        load_bag(path)


def test_bag_truncated(tmp_path):
    path = tmp_path / "trunc.xmb"
    path.write_bytes(b"XMILBAG1" + b"\x02\x00\x00\x00\x02\x00\x00\x00" + b"\x00" * 8)
    with pytest.raises(BagFormatError, match="truncated"):
        load_bag(path)


def test_dataset_roundtrip_with_labels(tmp_path):
    ds = generate_classification_bags(12, seed=14)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path / "manifest.json")
    assert back.task == ds.task and back.d == ds.d
    assert back.splits == ds.splits
    for a, b in zip(sorted(ds.bags, key=lambda x: x.id), back.bags):
        assert a.features.tobytes() == b.features.tobytes()
        assert a.label.to_json() == b.label.to_json()


def test_dataset_splits_disjoint():
    ds = generate_survival_bags(40, seed=15)
    ids = [set(ds.splits[s]) for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) \
        and not (ids[1] & ids[2])
    assert len(ids[0] | ids[1] | ids[2]) == 40


def test_manifest_missing_file_raises(tmp_path):
    ds = generate_regression_bags(6, seed=16)
    manifest = save_dataset(ds, tmp_path)
    (tmp_path / "bags" / "bag0003.xmb").unlink()
    with pytest.raises(BagFormatError, match="missing bag file"):
        load_dataset(manifest)


def test_manifest_overlapping_splits_raise(tmp_path):
    ds = generate_regression_bags(6, seed=17)
    ds.splits["val"] = list(ds.splits["train"][:1]) + ds.splits["val"]
    manifest = save_dataset(ds, tmp_path)
    with pytest.raises(BagFormatError, match="assigned to both"):
        load_dataset(manifest)


def test_label_json_roundtrip():
    for lbl in (TaskLabel("classification", class_index=1),
                TaskLabel("regression", value=-3.25),
                TaskLabel("survival", interval=2, censored=1, raw_time=7.5)):
        assert TaskLabel.from_json(lbl.to_json()) == lbl
