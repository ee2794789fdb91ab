"""Synthetic pretrained networks with known-redundant blocks, and the exhaustive oracle."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from sklearn.linear_model import LogisticRegression

from .autodiff import AdamW, no_grad
from .data import Dataset, Splits
from .network import SkippableNetwork, SkipMask
from .pipeline import SearchConfig, evaluate, finetune_mask, train_step

MAX_ORACLE_N = 12


class GenerationError(RuntimeError):
    """The synthetic network could not be pretrained to the required quality."""


class SpecError(ValueError):
    pass


@dataclass
class PlantedSpec:
    n: int = 8
    redundant: list[int] = field(default_factory=lambda: [2, 5])
    d: int = 64
    d_ff: int = 256
    h_adapt: int = 8
    h_skip: int = 16
    classes: int = 4
    input_dim: int = 16
    clusters: int = 8
    cluster_std: float = 1.0
    margin: float = 3.0
    train_size: int = 8192
    val_size: int = 512
    test_size: int = 4096
    noise_scale: float = 0.02
    essential_ratio: float | None = 0.5
    pretrain_threshold: float = 0.95
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        self.redundant = sorted(int(i) for i in self.redundant)
        if len(set(self.redundant)) != len(self.redundant):
            raise SpecError("redundant: duplicate block indices")
        if any(not 0 <= i < self.n for i in self.redundant):
            raise SpecError(f"redundant: indices must lie in [0, {self.n})")
        if len(self.redundant) >= self.n:
            raise SpecError("redundant: at least one block must stay essential")
        if not 0 < self.noise_scale <= 0.05:
            raise SpecError("noise_scale: must lie in (0, 0.05]")
        if self.essential_ratio is not None and not self.essential_ratio > 0:
            raise SpecError("essential_ratio: must be positive")
        for key in ("classes", "input_dim", "clusters", "train_size", "val_size", "test_size"):
            if getattr(self, key) < 1:
                raise SpecError(f"{key}: must be >= 1")

    @property
    def essential(self) -> list[int]:
        return [i for i in range(self.n) if i not in self.redundant]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PlantedSpec:
        if not isinstance(data, dict):
            raise SpecError("spec: expected a JSON object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise SpecError(f"spec: unknown field(s) {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            kind = fields[key].type
            if value is None and "None" in kind:
                pass
            elif kind == "list[int]":
                if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    raise SpecError(f"spec.{key}: expected a list of integers")
            elif kind == "int":
                if isinstance(value, bool) or not isinstance(value, int):
                    raise SpecError(f"spec.{key}: expected an integer, got {value!r}")
            elif isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SpecError(f"spec.{key}: expected a number, got {value!r}")
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> PlantedSpec:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def contribution_ratios(net: SkippableNetwork, X: np.ndarray) -> np.ndarray:
    """Mean ``||block_i(x_i)|| / ||x_i||`` per block along the bare frozen chain."""
    ratios = np.zeros(net.n)
    with no_grad():
        h = net.embed(X)
        for i, block in enumerate(net.blocks):
            out = block(h)
            ratios[i] = np.mean(np.linalg.norm(out.values, axis=1) / np.linalg.norm(h.values, axis=1))
            h = h + out
    return ratios


def _set_essential_scale(net: SkippableNetwork, spec: PlantedSpec, X: np.ndarray) -> None:
    """Rescale essential blocks so each adds ``spec.essential_ratio`` of its input's norm."""
    for _ in range(50):
        ratios = contribution_ratios(net, X)
        factors = spec.essential_ratio / ratios[spec.essential]
        if np.all(np.abs(factors - 1) < 1e-3):
            return
        for i, f in zip(spec.essential, factors):
            net.blocks[i].w2.values *= f
            net.blocks[i].b2.values *= f
    raise GenerationError("essential block scales did not settle")


def _plant(net: SkippableNetwork, spec: PlantedSpec, X: np.ndarray) -> None:
    if spec.essential_ratio is not None:
        _set_essential_scale(net, spec, X)
    # rescaling an early planted block shifts the inputs of later ones, so iterate
    for _ in range(20):
        ratios = contribution_ratios(net, X)
        target = spec.noise_scale * ratios[spec.essential].mean()
        over = [i for i in spec.redundant if ratios[i] > target]
        if not over:
            return
        for i in over:
            factor = 0.9 * target / ratios[i]
            net.blocks[i].w2.values *= factor
            net.blocks[i].b2.values *= factor
    raise GenerationError("could not shrink planted blocks below the noise scale")


def _inputs(rng: np.random.Generator, centers: np.ndarray, spec: PlantedSpec, size: int) -> np.ndarray:
    which = rng.integers(len(centers), size=size)
    return centers[which] + rng.normal(0.0, spec.cluster_std, (size, spec.input_dim))


def _frozen_logits(net: SkippableNetwork, X: np.ndarray) -> np.ndarray:
    with no_grad():
        return net.forward_frozen(X).values


def _teacher(spec: PlantedSpec) -> tuple[SkippableNetwork, np.ndarray]:
    """Random chain with the planted blocks already shrunk, plus the input-mixture centres.

    The head is standardised on a calibration pool so that logits are O(1) and
    every class claims a roughly equal share of the input mixture.
    """
    rng = np.random.default_rng([spec.seed, 13])
    net = SkippableNetwork.init(
        spec.input_dim, spec.n, spec.d, spec.d_ff, spec.h_adapt, spec.h_skip, spec.classes, seed=rng
    )
    centers = rng.normal(0.0, 1.0, (spec.clusters, spec.input_dim))
    pool = _inputs(rng, centers, spec, 4096)
    _plant(net, spec, pool)
    with no_grad():
        h = net.embed(pool)
        for block in net.blocks:
            h = h + block(h)
    hv = h.values
    net.head.w.values *= 4.0 / (hv @ net.head.w.values).std()
    # the head is linear, so balancing only needs the cached final hidden states
    for _ in range(200):
        logits = hv @ net.head.w.values + net.head.b.values
        freq = np.bincount(logits.argmax(axis=1), minlength=spec.classes) / len(pool)
        net.head.b.values -= 0.5 * (freq - 1.0 / spec.classes)
    return net, centers


def _labelled(net, centers, spec, rng, size) -> Dataset:
    """``size`` teacher-labelled points, class counts balanced to within one."""
    want = np.bincount(np.arange(size) % spec.classes, minlength=spec.classes)
    rng.shuffle(want)
    picked_X, picked_y = [], []
    need = want.copy()
    for _ in range(200):
        if not need.any():
            break
        X = _inputs(rng, centers, spec, 4 * size)
        logits = _frozen_logits(net, X)
        top2 = np.sort(logits, axis=1)[:, -2:]
        keep = top2[:, 1] - top2[:, 0] >= spec.margin
        y = logits.argmax(axis=1)
        for k in range(spec.classes):
            idx = np.flatnonzero(keep & (y == k))[: need[k]]
            picked_X.append(X[idx])
            picked_y.append(y[idx])
            need[k] -= idx.size
    if need.any():
        raise GenerationError(f"could not fill balanced classes, still missing {need.tolist()}")
    X = np.concatenate(picked_X)
    y = np.concatenate(picked_y)
    order = rng.permutation(size)
    return Dataset(X[order], y[order])


def gen_dataset(spec: PlantedSpec) -> Splits:
    """Gaussian-mixture inputs labelled by the planted teacher chain.

    Points whose top-two teacher logits are closer than ``spec.margin`` are
    rejected; each split is class-balanced to within one sample.
    """
    net, centers = _teacher(spec)
    rng = np.random.default_rng([spec.seed, 11])
    return Splits(
        _labelled(net, centers, spec, rng, spec.train_size),
        _labelled(net, centers, spec, rng, spec.val_size),
        _labelled(net, centers, spec, rng, spec.test_size),
    )


def linear_probe_accuracy(splits: Splits) -> float:
    probe = LogisticRegression(max_iter=2000).fit(splits.train.X, splits.train.y)
    return float(probe.score(splits.test.X, splits.test.y))


def _accuracy_frozen(net: SkippableNetwork, data: Dataset) -> float:
    return float(np.mean(_frozen_logits(net, data.X).argmax(axis=1) == data.y))


def _train_frozen_chain(net, params, train: Dataset, spec: PlantedSpec, rng, epochs: int) -> float:
    """Train ``params`` of the bare chain for ``epochs``; returns final train accuracy."""
    opt = AdamW(params, lr=spec.pretrain_lr)

    class _Bare:
        forward = staticmethod(net.forward_frozen)

    for _ in range(epochs):
        for batch in train.batches(32, rng):
            train_step(_Bare, batch, [opt])
    return _accuracy_frozen(net, train)


def gen_pretrained(spec: PlantedSpec, splits: Splits | None = None) -> SkippableNetwork:
    """Pretrained chain for the planted task: all blocks frozen, fresh zero-init adapters.

    Starts from the labelling teacher. When ``spec.pretrain_epochs`` is positive
    the essential parameters are trained further on the train split; the planted
    blocks are then re-shrunk to the noise scale.
    """
    splits = gen_dataset(spec) if splits is None else splits
    net, _ = _teacher(spec)
    rng = np.random.default_rng([spec.seed, 17])
    net.freeze_blocks(False)
    for i in spec.redundant:
        net.blocks[i].freeze()
    live = net.embed.parameters() + net.head.parameters()
    live += [p for i in spec.essential for p in net.blocks[i].parameters()]
    acc = _train_frozen_chain(net, live, splits.train, spec, rng, spec.pretrain_epochs)
    if acc < spec.pretrain_threshold:
        raise GenerationError(f"pretraining reached train accuracy {acc:.3f} < {spec.pretrain_threshold}")
    _plant(net, spec, splits.val.X)
    net.freeze_blocks()
    net.reset_adapters(rng)
    probe = linear_probe_accuracy(splits)
    full = _accuracy_frozen(net, splits.test)
    if probe >= full:
        raise GenerationError(f"linear probe ({probe:.3f}) matches the network ({full:.3f}); task is too shallow")
    return net


@dataclass
class OracleResult:
    ranking: list[SkipMask]
    losses: list[float]
    accuracies: list[float]

    @property
    def best(self) -> SkipMask:
        return self.ranking[0]

    def rank_of(self, mask: SkipMask) -> int:
        return self.ranking.index(mask)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subset", "loss", "accuracy"])
            for mask, loss, acc in zip(self.ranking, self.losses, self.accuracies):
                w.writerow([mask.label(), repr(loss), repr(acc)])

    @classmethod
    def read_csv(cls, path: str | Path, n: int) -> OracleResult:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        masks = [SkipMask([int(v) for v in r["subset"].split("-") if v != ""], n) for r in rows]
        return cls(masks, [float(r["loss"]) for r in rows], [float(r["accuracy"]) for r in rows])


def oracle_best_skip_set(
    net: SkippableNetwork,
    train: Dataset,
    val: Dataset,
    m: int,
    budget: int = 200,
    cfg: SearchConfig | None = None,
    seed: int = 0,
) -> OracleResult:
    """Finetune fresh adapters for every m-subset and rank subsets by validation loss.

    Every subset sees the same adapter initialisation and batch order.
    """
    if net.n > MAX_ORACLE_N:
        raise ValueError(
            f"exhaustive oracle is limited to n <= {MAX_ORACLE_N} (got n={net.n}); "
            "use random_skip_baseline for a sampled comparison"
        )
    if not 0 <= m <= net.n:
        raise ValueError(f"m={m} outside [0, {net.n}]")
    cfg = cfg if cfg is not None else SearchConfig(n=net.n, m=m, seed=seed)
    rows = []
    for subset in itertools.combinations(range(net.n), m):
        mask = SkipMask(subset, net.n)
        pruned = finetune_mask(net, mask, train, cfg, steps=budget, seed=seed)
        metrics = evaluate(pruned, val)
        rows.append((metrics["loss"], subset, mask, metrics["accuracy"]))
    rows.sort(key=lambda r: (r[0], r[1]))
    return OracleResult([r[2] for r in rows], [r[0] for r in rows], [r[3] for r in rows])


def param_count_formula(input_dim: int, n: int, d: int, d_ff: int, h_adapt: int, h_skip: int, classes: int) -> int:
    embed = input_dim * d + d
    head = d * classes + classes
    block = d * d_ff + d_ff + d_ff * d + d
    return embed + head + n * (block + 2 * d * h_adapt + 2 * d * h_skip)


def n_subsets(n: int, m: int) -> int:
    return math.comb(n, m)
