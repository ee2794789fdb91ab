"""Warmup, bandit search and finetuning of a skippable network."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import AdamW, Tape, backward, no_grad, softmax_cross_entropy
from .bandit import (
    CandidateBatch,
    RedundancyState,
    SearchAbort,
    final_skip_set,
    random_mask,
    reward,
    sample_mask,
    update_redundancy,
)
from .data import Dataset
from .network import PrunedNetwork, SkippableNetwork, SkipMask, flop_report, prune

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class PhaseError(RuntimeError):
    """Pipeline phases were called out of order."""


@dataclass
class SearchConfig:
    n: int = 8
    m: int = 2
    c: int = 4
    interval: int = 10
    warmup_epochs: int = 1
    search_epochs: int = 2
    finetune_epochs: int = 10
    batch_size: int = 32
    validation_batch_size: int = 128
    lr_adapters: float = 1e-3
    lr_head: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.interval < 1:
            raise ConfigError(f"interval must be >= 1, got {self.interval}")
        if not 0 <= self.m <= self.n:
            raise ConfigError(f"m must lie in [0, n={self.n}], got {self.m}")
        if self.c < 2:
            raise ConfigError(f"c must be >= 2, got {self.c}")
        for name in ("batch_size", "validation_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("warmup_epochs", "search_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SearchConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            expected = float if known[key].type in ("float", float) else int
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config.{key}: expected a number, got {value!r}")
            if expected is int and float(value) != int(value):
                raise ConfigError(f"config.{key}: expected an integer, got {value!r}")
            kwargs[key] = expected(value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> SearchConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class SearchReport:
    final_mask: list[int]
    n: int
    m: int
    redundancy: list[float]
    redundancy_trajectory: str | None
    phases: dict[str, dict[str, float]]
    flop_full: int
    flop_pruned: int
    flop_saved_fraction: float
    trainable_param_count: int
    frozen_param_count: int
    config: dict[str, Any] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        if not include_timing:
            out.pop("wall_clock")
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> SearchReport:
        return cls(**json.loads(Path(path).read_text()))


def evaluate(model: SkippableNetwork | PrunedNetwork, data: Dataset, mask: SkipMask | None = None) -> dict[str, float]:
    """Mean cross-entropy and top-1 accuracy, without recording anything."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    with no_grad():
        logits = model.forward(data.X, mask) if isinstance(model, SkippableNetwork) else model.forward(data.X)
        loss = softmax_cross_entropy(logits, data.y).item()
    acc = float(np.mean(np.argmax(logits.values, axis=1) == data.y))
    return {"loss": loss, "accuracy": acc}


def _optimizers(trainable_adapters, trainable_io, cfg: SearchConfig) -> list[AdamW]:
    return [
        AdamW(trainable_adapters, lr=cfg.lr_adapters, weight_decay=cfg.weight_decay),
        AdamW(trainable_io, lr=cfg.lr_head, weight_decay=cfg.weight_decay),
    ]


def _net_optimizers(net: SkippableNetwork, cfg: SearchConfig) -> list[AdamW]:
    adapters = [p for a in net.adapt_adapters + net.skip_adapters for p in a.parameters()]
    io = net.embed.parameters() + net.head.parameters()
    return _optimizers([p for p in adapters if not p.frozen], [p for p in io if not p.frozen], cfg)


def _pruned_optimizers(pruned: PrunedNetwork, cfg: SearchConfig) -> list[AdamW]:
    io = pruned.embed.parameters() + pruned.head.parameters()
    io_ids = {id(p) for p in io}
    adapters = [p for p in pruned.trainable_parameters() if id(p) not in io_ids]
    return _optimizers(adapters, [p for p in io if not p.frozen], cfg)


def train_step(model, batch: Dataset, optimizers: list[AdamW], mask: SkipMask | None = None) -> float:
    with Tape() as tape:
        logits = model.forward(batch.X, mask) if mask is not None else model.forward(batch.X)
        loss = softmax_cross_entropy(logits, batch.y)
        value = loss.item()
        if not math.isfinite(value):
            raise SearchAbort(f"non-finite training loss {value!r} under mask {mask!r}")
        backward(loss, tape)
    for opt in optimizers:
        opt.step()
        opt.zero_grad()
    return value


def finetune_mask(
    net: SkippableNetwork,
    mask: SkipMask,
    train: Dataset,
    cfg: SearchConfig,
    *,
    epochs: int | None = None,
    steps: int | None = None,
    fresh_adapters: bool = True,
    seed: int | None = None,
) -> PrunedNetwork:
    """Prune ``net`` to ``mask`` and train its adapters/embed/head.

    Training length is ``steps`` minibatches when given, otherwise ``epochs``
    (default ``cfg.finetune_epochs``). ``net`` itself is left untouched.
    """
    seed = cfg.seed if seed is None else seed
    work = net.copy()
    if fresh_adapters:
        work.reset_adapters(np.random.default_rng([seed, 1]))
    pruned = prune(work, mask)
    opts = _pruned_optimizers(pruned, cfg)
    rng = np.random.default_rng([seed, 2])
    if steps is None:
        for _ in range(cfg.finetune_epochs if epochs is None else epochs):
            for batch in train.batches(cfg.batch_size, rng):
                train_step(pruned, batch, opts)
    else:
        done = 0
        while done < steps:
            for batch in train.batches(cfg.batch_size, rng):
                train_step(pruned, batch, opts)
                done += 1
                if done == steps:
                    break
    return pruned


class DASPipeline:
    """Runs warmup -> search -> finetune on a copy of a pretrained network."""

    PHASES = ("init", "warmup", "search", "finetune")

    def __init__(self, net: SkippableNetwork, cfg: SearchConfig, train: Dataset, val: Dataset):
        if net.n != cfg.n:
            raise ConfigError(f"config n={cfg.n} but network has n={net.n}")
        for name, data in (("train", train), ("val", val)):
            if data.X.shape[1] != net.input_dim:
                raise ConfigError(f"{name} inputs have width {data.X.shape[1]}, network expects {net.input_dim}")
        self.net = net.copy()
        self.cfg = cfg
        self.train = train
        self.val = val
        self.state = RedundancyState.zeros(net.n)
        self.phase = "init"
        self.history: dict[str, dict[str, float]] = {}
        self.wall_clock: dict[str, float] = {}
        self.log_lines: list[str] = []
        self.final_mask: SkipMask | None = None
        self.pruned: PrunedNetwork | None = None
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self._rng_data, self._rng_warmup, self._rng_policy, self._rng_val, self._rng_cand = (
            np.random.default_rng(s) for s in seeds
        )
        self._opts = _net_optimizers(self.net, cfg)
        self.warmup_masks: list[SkipMask] = []

    def _require(self, phase: str) -> None:
        if self.phase != phase:
            raise PhaseError(f"expected phase {phase!r}, pipeline is at {self.phase!r}")

    def _epoch(self, mask_fn) -> float:
        losses = []
        for batch in self.train.batches(self.cfg.batch_size, self._rng_data):
            mask = mask_fn()
            try:
                losses.append(train_step(self.net, batch, self._opts, mask))
            except SearchAbort as exc:
                raise SearchAbort(f"{exc} (phase {self.phase}, step {len(losses) + 1})") from None
        return float(np.mean(losses)) if losses else float("nan")

    def warmup(self) -> None:
        self._require("init")
        t0 = time.perf_counter()
        cfg = self.cfg
        losses = []
        for _ in range(cfg.warmup_epochs):

            def mask_fn():
                mask = random_mask(cfg.n, cfg.m, self._rng_warmup)
                self.warmup_masks.append(mask)
                return mask

            losses.append(self._epoch(mask_fn))
        self.history["warmup"] = {"train_loss": float(np.mean(losses)) if losses else float("nan")}
        self.phase = "warmup"
        self.wall_clock["warmup"] = time.perf_counter() - t0

    def candidate_losses(self, masks: list[SkipMask], batch: Dataset) -> list[float]:
        """Validation loss of each candidate on the shared batch; order follows ``masks``."""
        with no_grad():
            return [softmax_cross_entropy(self.net.forward(batch.X, m), batch.y).item() for m in masks]

    def _validate(self, step: int, train_losses: list[float]) -> None:
        cfg = self.cfg
        size = min(cfg.validation_batch_size, len(self.val))
        batch = self.val.subset(self._rng_val.choice(len(self.val), size=size, replace=False))
        masks = [sample_mask(self.state, cfg.m, self._rng_cand) for _ in range(cfg.c)]
        losses = self.candidate_losses(masks, batch)
        try:
            rewards = [reward(loss) for loss in losses]
        except SearchAbort as exc:
            bad = next(m for m, loss in zip(masks, losses) if not math.isfinite(loss))
            raise SearchAbort(f"{exc} at search step {step}, candidate mask {bad.sorted()}") from None
        update_redundancy(self.state, CandidateBatch(masks, np.array(rewards)))
        top = final_skip_set(self.state, cfg.m).sorted()
        line = ", ".join(
            [str(step), f"{np.mean(train_losses):.6f}"] + [f"{v:.6f}" for v in rewards] + [" ".join(map(str, top))]
        )
        self.log_lines.append(line)
        log.info(line)

    def search(self) -> RedundancyState:
        self._require("warmup")
        t0 = time.perf_counter()
        cfg = self.cfg
        step = 0
        recent: list[float] = []
        all_losses: list[float] = []
        for _ in range(cfg.search_epochs):
            for batch in self.train.batches(cfg.batch_size, self._rng_data):
                step += 1
                mask = sample_mask(self.state, cfg.m, self._rng_policy)
                try:
                    loss = train_step(self.net, batch, self._opts, mask)
                except SearchAbort as exc:
                    raise SearchAbort(f"{exc} at search step {step}") from None
                recent.append(loss)
                all_losses.append(loss)
                if step % cfg.interval == 0:
                    self._validate(step, recent)
                    recent = []
        self.history["search"] = {"train_loss": float(np.mean(all_losses)) if all_losses else float("nan")}
        self.final_mask = final_skip_set(self.state, cfg.m)
        self.phase = "search"
        self.wall_clock["search"] = time.perf_counter() - t0
        return self.state

    def finetune(self, test: Dataset | None = None, trajectory_path: str | Path | None = None) -> SearchReport:
        self._require("search")
        t0 = time.perf_counter()
        cfg = self.cfg
        mask = self.final_mask
        self.pruned = finetune_mask(self.net, mask, self.train, cfg, fresh_adapters=False, seed=cfg.seed)
        self.history["finetune"] = evaluate(self.pruned, self.train)
        self.history["val"] = evaluate(self.pruned, self.val)
        if test is not None:
            self.history["test"] = evaluate(self.pruned, test)
        if trajectory_path is not None:
            self.state.write_trajectory(trajectory_path)
        self.phase = "finetune"
        self.wall_clock["finetune"] = time.perf_counter() - t0
        flops = flop_report(self.net, mask)
        counts = self.pruned.param_counts()
        return SearchReport(
            final_mask=mask.sorted(),
            n=cfg.n,
            m=cfg.m,
            redundancy=[float(v) for v in self.state.r],
            redundancy_trajectory=None if trajectory_path is None else Path(trajectory_path).name,
            phases=self.history,
            flop_full=flops["full"],
            flop_pruned=flops["pruned"],
            flop_saved_fraction=flops["saved_fraction"],
            trainable_param_count=counts["trainable"],
            frozen_param_count=counts["frozen"],
            config=cfg.to_dict(),
            wall_clock=dict(self.wall_clock),
        )

    def run(self, test: Dataset | None = None, trajectory_path: str | Path | None = None) -> SearchReport:
        self.warmup()
        self.search()
        return self.finetune(test, trajectory_path)


def random_skip_baseline(
    net: SkippableNetwork,
    train: Dataset,
    test: Dataset,
    cfg: SearchConfig,
    k: int = 10,
    seed: int | None = None,
) -> list[tuple[SkipMask, dict[str, float]]]:
    """Finetune ``k`` uniformly random m-subsets with fresh adapters; test metrics per subset."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 7])
    out = []
    for _ in range(k):
        mask = random_mask(net.n, cfg.m, rng)
        pruned = finetune_mask(net, mask, train, cfg, seed=seed)
        out.append((mask, evaluate(pruned, test)))
    return out
