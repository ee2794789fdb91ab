"""Frozen residual MLP chain with parallel and short-cut adapters."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .autodiff import DimensionError, Parameter, Tensor, add, add_bias, matmul, relu

CHECKPOINT_VERSION = 1


class MaskError(ValueError):
    """A skip mask references modules the network does not have."""


@dataclass(frozen=True)
class SkipMask:
    skipped: frozenset[int]
    n: int

    def __init__(self, skipped: Iterable[int], n: int):
        skipped = frozenset(int(i) for i in skipped)
        bad = sorted(i for i in skipped if not 0 <= i < n)
        if bad:
            raise MaskError(f"mask indices {bad} outside [0, {n})")
        object.__setattr__(self, "skipped", skipped)
        object.__setattr__(self, "n", int(n))

    @classmethod
    def empty(cls, n: int) -> SkipMask:
        return cls((), n)

    @classmethod
    def full(cls, n: int) -> SkipMask:
        return cls(range(n), n)

    @property
    def m(self) -> int:
        return len(self.skipped)

    def __contains__(self, i: int) -> bool:
        return i in self.skipped

    def sorted(self) -> list[int]:
        return sorted(self.skipped)

    def kept(self) -> list[int]:
        return [i for i in range(self.n) if i not in self.skipped]

    def label(self) -> str:
        return "-".join(str(i) for i in self.sorted())

    def __repr__(self) -> str:
        return f"SkipMask({self.sorted()}, n={self.n})"


class Adapter:
    """Bottleneck ``ReLU(x @ w_in) @ w_out`` with ``h < d``."""

    def __init__(self, w_in: Parameter, w_out: Parameter):
        d, h = w_in.shape
        if w_out.shape != (h, d):
            raise DimensionError(f"adapter w_out {w_out.shape} != ({h}, {d})")
        if h >= d:
            raise DimensionError(f"adapter bottleneck h={h} must be < d={d}")
        self.w_in = w_in
        self.w_out = w_out

    @classmethod
    def init(cls, d: int, h: int, rng: np.random.Generator, scale: float = 0.01) -> Adapter:
        return cls(Parameter(rng.normal(0.0, scale, (d, h))), Parameter(np.zeros((h, d))))

    @property
    def d(self) -> int:
        return self.w_in.shape[0]

    @property
    def h(self) -> int:
        return self.w_in.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w_in, self.w_out]

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(self, x)


def adapter_forward(a: Adapter, x: Tensor) -> Tensor:
    if x.shape[-1] != a.d:
        raise DimensionError(f"adapter expects width {a.d}, got input {x.shape}")
    return matmul(relu(matmul(x, a.w_in)), a.w_out)


class FrozenBlock:
    """Residual branch ``relu(x W1 + b1) W2 + b2``; the skip path is added by the caller."""

    def __init__(self, index: int, w1: Parameter, b1: Parameter, w2: Parameter, b2: Parameter):
        self.index = index
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, index: int, d: int, d_ff: int, rng: np.random.Generator) -> FrozenBlock:
        return cls(
            index,
            Parameter(rng.normal(0.0, np.sqrt(2.0 / d), (d, d_ff))),
            Parameter(np.zeros(d_ff)),
            Parameter(rng.normal(0.0, np.sqrt(1.0 / d_ff), (d_ff, d))),
            Parameter(np.zeros(d)),
        )

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(add_bias(matmul(x, self.w1), self.b1))
        return add_bias(matmul(h, self.w2), self.b2)


def block_forward_adapted(block: FrozenBlock, adapter: Adapter, x: Tensor) -> Tensor:
    return add(add(x, block(x)), adapter(x))


def block_forward_skipped(adapter: Adapter, x: Tensor) -> Tensor:
    return add(x, adapter(x))


class _Linear:
    def __init__(self, w: Parameter, b: Parameter):
        self.w, self.b = w, b

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.w), self.b)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class SkippableNetwork:
    """``embed -> n x (block | short-cut) -> head``.

    Kept layer ``i`` computes ``x + block_i(x) + adapt_i(x)``; a skipped layer
    computes ``x + skip_i(x)`` and never touches the frozen block.
    """

    def __init__(
        self,
        embed: _Linear,
        blocks: list[FrozenBlock],
        adapt_adapters: list[Adapter],
        skip_adapters: list[Adapter],
        head: _Linear,
    ):
        if not len(blocks) == len(adapt_adapters) == len(skip_adapters):
            raise ValueError("blocks, adapt_adapters and skip_adapters must have equal length")
        self.embed = embed
        self.blocks = blocks
        self.adapt_adapters = adapt_adapters
        self.skip_adapters = skip_adapters
        self.head = head
        self._check_skip_saves_compute()

    @classmethod
    def init(
        cls,
        input_dim: int,
        n: int = 8,
        d: int = 64,
        d_ff: int = 256,
        h_adapt: int = 8,
        h_skip: int = 16,
        classes: int = 4,
        seed: int | np.random.Generator = 0,
    ) -> SkippableNetwork:
        rng = np.random.default_rng(seed)
        embed = _Linear(
            Parameter(rng.normal(0.0, np.sqrt(1.0 / input_dim), (input_dim, d))),
            Parameter(np.zeros(d)),
        )
        blocks = [FrozenBlock.init(i, d, d_ff, rng) for i in range(n)]
        head = _Linear(Parameter(rng.normal(0.0, np.sqrt(1.0 / d), (d, classes))), Parameter(np.zeros(classes)))
        net = cls(
            embed,
            blocks,
            [Adapter.init(d, h_adapt, rng) for _ in range(n)],
            [Adapter.init(d, h_skip, rng) for _ in range(n)],
            head,
        )
        net.freeze_blocks()
        return net

    # shape helpers
    @property
    def n(self) -> int:
        return len(self.blocks)

    @property
    def input_dim(self) -> int:
        return self.embed.w.shape[0]

    @property
    def d(self) -> int:
        return self.embed.w.shape[1]

    @property
    def d_ff(self) -> int:
        return self.blocks[0].d_ff if self.blocks else 0

    @property
    def h_adapt(self) -> int:
        return self.adapt_adapters[0].h if self.adapt_adapters else 0

    @property
    def h_skip(self) -> int:
        return self.skip_adapters[0].h if self.skip_adapters else 0

    @property
    def classes(self) -> int:
        return self.head.w.shape[1]

    def _check_skip_saves_compute(self) -> None:
        for block, ad, sk in zip(self.blocks, self.adapt_adapters, self.skip_adapters):
            if block.d * block.d_ff <= sk.d * sk.h:
                raise ValueError(
                    f"short-cut adapter h={sk.h} costs as much as frozen block {block.index} (d_ff={block.d_ff})"
                )

    def freeze_blocks(self, frozen: bool = True) -> None:
        for b in self.blocks:
            b.freeze(frozen)

    def reset_adapters(self, seed: int | np.random.Generator = 0) -> None:
        """Fresh zero-initialised adapters at every position."""
        rng = np.random.default_rng(seed)
        self.adapt_adapters = [Adapter.init(self.d, self.h_adapt, rng) for _ in range(self.n)]
        self.skip_adapters = [Adapter.init(self.d, self.h_skip, rng) for _ in range(self.n)]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield "embed.w", self.embed.w
        yield "embed.b", self.embed.b
        for i, b in enumerate(self.blocks):
            for name, p in zip(("w1", "b1", "w2", "b2"), b.parameters()):
                yield f"blocks.{i}.{name}", p
        for i, a in enumerate(self.adapt_adapters):
            yield f"adapt.{i}.w_in", a.w_in
            yield f"adapt.{i}.w_out", a.w_out
        for i, a in enumerate(self.skip_adapters):
            yield f"skip.{i}.w_in", a.w_in
            yield f"skip.{i}.w_out", a.w_out
        yield "head.w", self.head.w
        yield "head.b", self.head.b

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def active_parameters(self, mask: SkipMask) -> list[Parameter]:
        """Trainable parameters that a forward under ``mask`` actually touches."""
        params = self.embed.parameters()
        for i in range(self.n):
            ad = self.skip_adapters[i] if i in mask else self.adapt_adapters[i]
            params += ad.parameters()
            if i not in mask:
                params += self.blocks[i].parameters()
        params += self.head.parameters()
        return [p for p in params if not p.frozen]

    def check_mask(self, mask: SkipMask) -> None:
        if not isinstance(mask, SkipMask):
            raise MaskError(f"expected SkipMask, got {type(mask).__name__}")
        if mask.n != self.n:
            raise MaskError(f"mask is for n={mask.n}, network has n={self.n}")

    def forward(self, x, mask: SkipMask | None = None) -> Tensor:
        mask = SkipMask.empty(self.n) if mask is None else mask
        self.check_mask(mask)
        h = self.embed(_as_input(x))
        for i in range(self.n):
            if i in mask:
                h = block_forward_skipped(self.skip_adapters[i], h)
            else:
                h = block_forward_adapted(self.blocks[i], self.adapt_adapters[i], h)
        return self.head(h)

    __call__ = forward

    def forward_frozen(self, x) -> Tensor:
        """The bare pretrained chain, no adapters at all."""
        h = self.embed(_as_input(x))
        for block in self.blocks:
            h = add(h, block(h))
        return self.head(h)

    def hidden_states(self, x, mask: SkipMask | None = None) -> list[np.ndarray]:
        """Input to every layer plus the final hidden state (length n + 1)."""
        mask = SkipMask.empty(self.n) if mask is None else mask
        self.check_mask(mask)
        h = self.embed(_as_input(x))
        states = [h.values]
        for i in range(self.n):
            if i in mask:
                h = block_forward_skipped(self.skip_adapters[i], h)
            else:
                h = block_forward_adapted(self.blocks[i], self.adapt_adapters[i], h)
            states.append(h.values)
        return states

    def prune(self, mask: SkipMask) -> PrunedNetwork:
        return prune(self, mask)

    def copy(self) -> SkippableNetwork:
        return copy.deepcopy(self)

    def param_counts(self) -> dict[str, int]:
        trainable = sum(p.values.size for p in self.parameters() if not p.frozen)
        frozen = sum(p.values.size for p in self.parameters() if p.frozen)
        return {"trainable": trainable, "frozen": frozen, "total": trainable + frozen}

    def count_flops(self, mask: SkipMask | None = None, batch: int = 1) -> int:
        return count_flops(self, mask, batch)

    # checkpoints
    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "n": self.n,
            "d": self.d,
            "d_ff": self.d_ff,
            "h_adapt": self.h_adapt,
            "h_skip": self.h_skip,
            "classes": self.classes,
            "input_dim": self.input_dim,
            "params": {
                name: {"shape": list(p.shape), "values": p.values.ravel().tolist(), "frozen": p.frozen}
                for name, p in self.named_parameters()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> SkippableNetwork:
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        params = data["params"]

        def p(name: str) -> Parameter:
            entry = params[name]
            values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            return Parameter(values, frozen=bool(entry["frozen"]))

        n = int(data["n"])
        blocks = [
            FrozenBlock(i, p(f"blocks.{i}.w1"), p(f"blocks.{i}.b1"), p(f"blocks.{i}.w2"), p(f"blocks.{i}.b2"))
            for i in range(n)
        ]
        net = cls(
            _Linear(p("embed.w"), p("embed.b")),
            blocks,
            [Adapter(p(f"adapt.{i}.w_in"), p(f"adapt.{i}.w_out")) for i in range(n)],
            [Adapter(p(f"skip.{i}.w_in"), p(f"skip.{i}.w_out")) for i in range(n)],
            _Linear(p("head.w"), p("head.b")),
        )
        for key in ("d", "d_ff", "h_adapt", "h_skip", "classes"):
            if int(data[key]) != getattr(net, key):
                raise ValueError(f"checkpoint header {key}={data[key]} disagrees with parameters")
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> SkippableNetwork:
        return cls.from_dict(json.loads(Path(path).read_text()))


class PrunedNetwork:
    """Deployable chain with the skipped frozen blocks physically removed."""

    def __init__(self, embed: _Linear, layers: list[tuple], head: _Linear, mask: SkipMask):
        self.embed = embed
        self.layers = layers  # ("adapted", block, adapter) or ("skipped", adapter)
        self.head = head
        self.mask = mask

    def forward(self, x) -> Tensor:
        h = self.embed(_as_input(x))
        for layer in self.layers:
            if layer[0] == "skipped":
                h = block_forward_skipped(layer[1], h)
            else:
                h = block_forward_adapted(layer[1], layer[2], h)
        return self.head(h)

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        params = self.embed.parameters()
        for layer in self.layers:
            for module in layer[1:]:
                params += module.parameters()
        return params + self.head.parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def param_counts(self) -> dict[str, int]:
        trainable = sum(p.values.size for p in self.parameters() if not p.frozen)
        frozen = sum(p.values.size for p in self.parameters() if p.frozen)
        return {"trainable": trainable, "frozen": frozen, "total": trainable + frozen}

    def count_flops(self, batch: int = 1) -> int:
        total = batch * (self.embed.w.shape[0] * self.embed.w.shape[1] + self.head.w.shape[0] * self.head.w.shape[1])
        for layer in self.layers:
            if layer[0] == "skipped":
                total += batch * _adapter_macs(layer[1])
            else:
                total += batch * (_block_macs(layer[1]) + _adapter_macs(layer[2]))
        return total

    def to_dict(self, flop_report: dict | None = None) -> dict:
        """Checkpoint-schema export of the full positional layout plus the mask."""
        n = self.mask.n
        kept = {layer[1].index: layer for layer in self.layers if layer[0] == "adapted"}
        skipped = [layer for layer in self.layers if layer[0] == "skipped"]
        params = {
            "embed.w": self.embed.w,
            "embed.b": self.embed.b,
            "head.w": self.head.w,
            "head.b": self.head.b,
        }
        it = iter(skipped)
        for i in range(n):
            if i in kept:
                _, block, ad = kept[i]
                for name, p in zip(("w1", "b1", "w2", "b2"), block.parameters()):
                    params[f"blocks.{i}.{name}"] = p
                params[f"adapt.{i}.w_in"], params[f"adapt.{i}.w_out"] = ad.w_in, ad.w_out
            else:
                sk = next(it)[1]
                params[f"skip.{i}.w_in"], params[f"skip.{i}.w_out"] = sk.w_in, sk.w_out
        any_block = next(iter(kept.values()), None)
        any_adapt = any_block[2] if any_block else None
        any_skip = skipped[0][1] if skipped else None
        out = {
            "version": CHECKPOINT_VERSION,
            "n": n,
            "d": self.embed.w.shape[1],
            "d_ff": any_block[1].d_ff if any_block else None,
            "h_adapt": any_adapt.h if any_adapt else None,
            "h_skip": any_skip.h if any_skip else None,
            "classes": self.head.w.shape[1],
            "input_dim": self.embed.w.shape[0],
            "params": {
                name: {"shape": list(p.shape), "values": p.values.ravel().tolist(), "frozen": p.frozen}
                for name, p in params.items()
            },
            "final_mask": self.mask.sorted(),
        }
        if flop_report is not None:
            out["flop_report"] = flop_report
        return out

    @classmethod
    def from_dict(cls, data: dict) -> PrunedNetwork:
        params = data["params"]

        def p(name: str) -> Parameter:
            entry = params[name]
            values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            return Parameter(values, frozen=bool(entry["frozen"]))

        n = int(data["n"])
        mask = SkipMask(data["final_mask"], n)
        layers: list[tuple] = []
        for i in range(n):
            if i in mask:
                layers.append(("skipped", Adapter(p(f"skip.{i}.w_in"), p(f"skip.{i}.w_out"))))
            else:
                block = FrozenBlock(
                    i, p(f"blocks.{i}.w1"), p(f"blocks.{i}.b1"), p(f"blocks.{i}.w2"), p(f"blocks.{i}.b2")
                )
                layers.append(("adapted", block, Adapter(p(f"adapt.{i}.w_in"), p(f"adapt.{i}.w_out"))))
        return cls(_Linear(p("embed.w"), p("embed.b")), layers, _Linear(p("head.w"), p("head.b")), mask)

    def save(self, path: str | Path, flop_report: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(flop_report)))

    @classmethod
    def load(cls, path: str | Path) -> PrunedNetwork:
        return cls.from_dict(json.loads(Path(path).read_text()))


def prune(net: SkippableNetwork, mask: SkipMask) -> PrunedNetwork:
    """Detach the modules ``mask`` keeps into a standalone network.

    The pruned network shares no storage with ``net``.
    """
    net.check_mask(mask)
    net = net.copy()
    layers: list[tuple] = []
    for i in range(net.n):
        if i in mask:
            layers.append(("skipped", net.skip_adapters[i]))
        else:
            layers.append(("adapted", net.blocks[i], net.adapt_adapters[i]))
    return PrunedNetwork(net.embed, layers, net.head, mask)


def _block_macs(block: FrozenBlock) -> int:
    return 2 * block.d * block.d_ff


def _adapter_macs(adapter: Adapter) -> int:
    return 2 * adapter.d * adapter.h


def count_flops(net: SkippableNetwork, mask: SkipMask | None = None, batch: int = 1) -> int:
    """Multiply-adds of one forward pass over ``batch`` rows.

    Bias additions and ReLUs are not multiply-adds and are not counted.
    """
    mask = SkipMask.empty(net.n) if mask is None else mask
    net.check_mask(mask)
    per_row = net.input_dim * net.d + net.d * net.classes
    for i in range(net.n):
        if i in mask:
            per_row += _adapter_macs(net.skip_adapters[i])
        else:
            per_row += _block_macs(net.blocks[i]) + _adapter_macs(net.adapt_adapters[i])
    return batch * per_row


def flop_report(net: SkippableNetwork, mask: SkipMask) -> dict:
    full = count_flops(net, SkipMask.empty(net.n))
    pruned = count_flops(net, mask)
    return {"full": full, "pruned": pruned, "saved_fraction": 1.0 - pruned / full}
