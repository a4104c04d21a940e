import json

import numpy as np
import pytest

from diffunlearn.datasets import (
    Dataset, ToyDatasetSpec, generate_dataset, split_forget, split_from_dict, split_holdout, split_to_dict,
)
from diffunlearn.evaluation import classify, train_toy_classifier


def test_degenerate_mixture_sits_on_means():
    spec = ToyDatasetSpec(sigma=1e-6, n_per_class=50)
    data = generate_dataset(spec)
    means = spec.class_means()
    assert np.max(np.linalg.norm(data.x - means[data.y], axis=1)) <= 1e-4


def test_dataset_deterministic_per_seed():
    a, b = generate_dataset(ToyDatasetSpec(seed=4)), generate_dataset(ToyDatasetSpec(seed=4))
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, generate_dataset(ToyDatasetSpec(seed=5)).x)


def test_unit_separated_means_support_an_accurate_classifier():
    means = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))
    spec = ToyDatasetSpec(n_per_class=2000, sigma=0.1, means=means, seed=2)
    train, held = split_holdout(generate_dataset(spec), 0.2, 2)
    clf = train_toy_classifier(train.x, train.y)
    assert np.mean(classify(clf, held.x) == held.y) >= 0.95


@pytest.mark.parametrize("kw", [{"num_classes": 1}, {"sigma": 0.0}, {"n_per_class": 0},
                                {"num_classes": 2, "means": ((0.0, 0.0), (0.0, 0.0))},
                                {"num_classes": 3, "means": ((0.0, 0.0), (1.0, 0.0))}])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        generate_dataset(ToyDatasetSpec(**kw))


def test_split_partition_arithmetic():
    data = generate_dataset(ToyDatasetSpec(n_per_class=500))
    sp = split_forget(data, [2], 0.16, seed=0)
    assert len(sp.forget) == 500 and len(sp.remain) == 1500
    assert set(sp.forget.y.tolist()) == {2} and 2 not in set(sp.remain.y.tolist())
    assert abs(len(sp.remain_subset) - 0.16 * len(sp.remain)) <= 1


def test_full_fraction_subset_is_remain():
    data = generate_dataset(ToyDatasetSpec(n_per_class=50))
    sp = split_forget(data, [0], 1.0, seed=0)
    np.testing.assert_array_equal(sp.remain_subset.x, sp.remain.x)


def test_split_errors():
    data = generate_dataset(ToyDatasetSpec(n_per_class=10))
    with pytest.raises(ValueError, match="nothing remains"):
        split_forget(data, [0, 1, 2, 3], 0.5, seed=0)
    with pytest.raises(ValueError):
        split_forget(data, [], 0.5, seed=0)
    with pytest.raises(ValueError):
        split_forget(data, [7], 0.5, seed=0)


def test_holdout_is_stratified_and_disjoint():
    data = generate_dataset(ToyDatasetSpec(n_per_class=100))
    train, held = split_holdout(data, 0.2, 0)
    assert np.bincount(held.y).tolist() == [20] * 4
    rows = {r.tobytes() for r in train.x}
    assert not any(r.tobytes() in rows for r in held.x)


def test_persisted_split_round_trip_and_revalidation():
    data = generate_dataset(ToyDatasetSpec(n_per_class=30))
    sp = split_forget(data, [1], 0.3, seed=0)
    d = json.loads(json.dumps(split_to_dict(sp)))
    back = split_from_dict(d)
    np.testing.assert_array_equal(back.remain_subset.x, sp.remain_subset.x)
    bad = json.loads(json.dumps(d))
    bad["forget"]["y"][0] = 0
    with pytest.raises(ValueError):
        split_from_dict(bad)
    leak = json.loads(json.dumps(d))
    leak["forget"]["x"][0] = leak["remain"]["x"][0]
    with pytest.raises(ValueError, match="overlap"):
        split_from_dict(leak)


def test_dataset_shape_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
