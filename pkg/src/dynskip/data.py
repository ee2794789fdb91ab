from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} do not line up")

    def __len__(self) -> int:
        return self.y.size

    def subset(self, idx) -> Dataset:
        return Dataset(self.X[idx], self.y[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Dataset]:
        """One epoch of minibatches; shuffled when ``rng`` is given, last batch may be short."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start : start + batch_size])

    def save_csv(self, path: str | Path) -> None:
        header = ",".join([f"x{i}" for i in range(self.X.shape[1])] + ["label"])
        table = np.column_stack([self.X, self.y.astype(np.float64)])
        fmt = ["%.17g"] * self.X.shape[1] + ["%d"]
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)

    @classmethod
    def load_csv(cls, path: str | Path) -> Dataset:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(table[:, :-1], table[:, -1].astype(np.int64))


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            getattr(self, name).save_csv(directory / f"{name}.csv")

    @classmethod
    def load(cls, directory: str | Path) -> Splits:
        directory = Path(directory)
        missing = [n for n in ("train", "val", "test") if not (directory / f"{n}.csv").exists()]
        if missing:
            raise FileNotFoundError(f"{directory} lacks split files: {missing}")
        return cls(*(Dataset.load_csv(directory / f"{n}.csv") for n in ("train", "val", "test")))
