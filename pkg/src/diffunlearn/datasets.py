"""Labeled Gaussian-mixture datasets and forget/remain splits."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mathcore import Rng


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("x must be n x d with one label per row")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def of_class(self, c: int) -> "Dataset":
        return self.subset(self.y == c)


@dataclass(frozen=True)
class ToyDatasetSpec:
    num_classes: int = 4
    radius: float = 3.0
    sigma: float = 0.35
    n_per_class: int = 2000
    seed: int = 0
    means: tuple[tuple[float, ...], ...] | None = None

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        angles = 2.0 * np.pi * np.arange(self.num_classes) / self.num_classes
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be positive")
        means = self.class_means()
        if len(means) != self.num_classes:
            raise ValueError("one mean per class is required")
        if len({tuple(m) for m in means.tolist()}) != len(means):
            raise ValueError("class means must be pairwise distinct")


def generate_dataset(spec: ToyDatasetSpec) -> Dataset:
    """``n_per_class`` isotropic Gaussian draws around each class mean, grouped by class."""
    spec.validate()
    rng = Rng(spec.seed).spawn("dataset")
    means = spec.class_means()
    xs = [m + spec.sigma * rng.normal((spec.n_per_class, len(m))) for m in means]
    ys = [np.full(spec.n_per_class, k) for k in range(spec.num_classes)]
    return Dataset(np.concatenate(xs), np.concatenate(ys))


def split_holdout(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split into (train, unseen holdout) with ``fraction`` of every class held out."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("holdout fraction must lie in [0, 1)")
    rng = Rng(seed).spawn("holdout")
    hold = np.zeros(len(data), dtype=bool)
    for c in np.unique(data.y):
        idx = np.flatnonzero(data.y == c)
        k = int(round(fraction * len(idx)))
        hold[idx[rng.choice(len(idx), k)]] = True
    return data.subset(~hold), data.subset(hold)


@dataclass
class DatasetSplit:
    remain: Dataset
    forget: Dataset
    remain_subset: Dataset
    forget_classes: tuple[int, ...]
    remain_subset_index: np.ndarray = field(repr=False, default=None)

    def validate(self) -> None:
        fc = set(self.forget_classes)
        if not set(np.unique(self.forget.y).tolist()) <= fc:
            raise ValueError("forget set holds labels outside the forgotten classes")
        if fc & set(np.unique(self.remain.y).tolist()):
            raise ValueError("remain set holds forgotten labels")
        if self.remain_subset_index is not None:
            idx = self.remain_subset_index
            if len(np.unique(idx)) != len(idx) or (len(idx) and idx.max() >= len(self.remain)):
                raise ValueError("remain subset is not a subset of the remain set")
            if not (np.array_equal(self.remain.x[idx], self.remain_subset.x)
                    and np.array_equal(self.remain.y[idx], self.remain_subset.y)):
                raise ValueError("remain subset does not match its index")


def draw_remain_subset(n_remain: int, fraction: float, rng: Rng) -> np.ndarray:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("rs_fraction must lie in (0, 1]")
    k = max(1, int(round(fraction * n_remain)))
    return np.sort(rng.choice(n_remain, k))


def split_forget(data: Dataset, forget_classes: Sequence[int], rs_fraction: float, seed: int) -> DatasetSplit:
    fc = tuple(sorted({int(c) for c in forget_classes}))
    labels = set(np.unique(data.y).tolist())
    if not fc:
        raise ValueError("forget class set is empty")
    if not set(fc) <= labels:
        raise ValueError(f"forget classes {fc} not present in the data")
    if set(fc) == labels:
        raise ValueError("nothing remains")
    is_f = np.isin(data.y, fc)
    remain = data.subset(~is_f)
    idx = draw_remain_subset(len(remain), rs_fraction, Rng(seed).spawn("rs"))
    split = DatasetSplit(remain, data.subset(is_f), remain.subset(idx), fc, idx)
    split.validate()
    return split


def split_to_dict(split: DatasetSplit) -> dict:
    """Index form of a split, relative to the labeled dataset it was cut from."""
    return {
        "forget_classes": list(split.forget_classes),
        "remain_subset_index": [int(i) for i in split.remain_subset_index],
        "remain": {"x": split.remain.x.tolist(), "y": split.remain.y.tolist()},
        "forget": {"x": split.forget.x.tolist(), "y": split.forget.y.tolist()},
    }


def split_from_dict(d: dict) -> DatasetSplit:
    """Rebuild a persisted split and re-check its invariants."""
    remain = Dataset(d["remain"]["x"], d["remain"]["y"])
    forget = Dataset(np.asarray(d["forget"]["x"]).reshape(-1, remain.dim), d["forget"]["y"])
    idx = np.asarray(d["remain_subset_index"], dtype=np.int64)
    split = DatasetSplit(remain, forget, remain.subset(idx), tuple(d["forget_classes"]), idx)
    split.validate()
    rows_r = {r.tobytes() for r in remain.x}
    if any(r.tobytes() in rows_r for r in forget.x):
        raise ValueError("remain and forget sets overlap")
    return split
