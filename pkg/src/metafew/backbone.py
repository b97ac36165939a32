"""Convolutional feature extractor with a freeze/adapt split.

The extractor is a stack of L blocks, each conv3x3 -> bias -> relu ->
max-pool 2x2, flattened after the last block. Fine-tuning adapts only the
last k blocks: `split_params` names the frozen prefix and adaptable
suffix, `adapted_copies` produces fresh leaf tensors for the suffix, and
`merge_params` assembles an extractor that shares the frozen tensors and
uses the adapted ones. Frozen tensors are never copied, so bitwise
invariance of the prefix under fine-tuning is structural, not a promise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .errors import ContractError, DimensionError
from .tensor import Tensor, conv2d, max_pool2, relu, reshape


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    in_size: int = 32
    widths: tuple = (8, 16, 32, 64)
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def block_shapes(self):
        """Per-block (channels, height, width) after conv+pool, plus input."""
        shapes = [(self.in_channels, self.in_size, self.in_size)]
        c, h, w = shapes[0]
        for width in self.widths:
            h = (h + 2 * self.padding - self.kernel) // self.stride + 1
            w = (w + 2 * self.padding - self.kernel) // self.stride + 1
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise DimensionError(
                    f"backbone config collapses spatial dims to {h}x{w} at width {width}"
                )
            c = width
            shapes.append((c, h, w))
        return shapes

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def feature_dim(self) -> int:
        c, h, w = self.block_shapes()[-1]
        return c * h * w


class FeatureExtractor:
    def __init__(self, config: BackboneConfig, params: dict):
        self.config = config
        expected = [f"block{i}.{leaf}" for i in range(config.depth) for leaf in ("w", "b")]
        if list(params.keys()) != expected:
            raise ContractError(f"backbone params must be exactly {expected}")
        shapes = config.block_shapes()
        for i in range(config.depth):
            c_in = shapes[i][0]
            c_out = config.widths[i]
            want_w = (c_out, c_in, config.kernel, config.kernel)
            if params[f"block{i}.w"].shape != want_w:
                raise ContractError(f"block{i}.w has shape {params[f'block{i}.w'].shape}, want {want_w}")
            if params[f"block{i}.b"].shape != (c_out,):
                raise ContractError(f"block{i}.b has shape {params[f'block{i}.b'].shape}, want {(c_out,)}")
        self.params = dict(params)

    @classmethod
    def create(cls, config: BackboneConfig, seed: int) -> "FeatureExtractor":
        gen = _rng.stream("init", seed, "backbone")
        shapes = config.block_shapes()
        params = {}
        for i, width in enumerate(config.widths):
            c_in = shapes[i][0]
            fan = config.kernel * config.kernel
            w = _rng.xavier_uniform(gen, (width, c_in, config.kernel, config.kernel),
                                    fan_in=c_in * fan, fan_out=width * fan)
            params[f"block{i}.w"] = Tensor(w, requires_grad=True)
            params[f"block{i}.b"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        return cls(config, params)

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def param_list(self):
        return list(self.params.values())

    def named_params(self):
        return dict(self.params)

    def activations(self, x, start: int = 0, stop: int | None = None) -> Tensor:
        """Run blocks [start, stop) on x ([N,C,H,W] or [C,H,W])."""
        stop = self.depth if stop is None else stop
        if not 0 <= start <= stop <= self.depth:
            raise ContractError(f"bad block range [{start}, {stop}) for depth {self.depth}")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        shapes = self.config.block_shapes()
        want_c = shapes[start][0]
        got_c = x.shape[-3] if x.ndim >= 3 else None
        if x.ndim not in (3, 4) or got_c != want_c:
            raise DimensionError(
                f"block {start} expects {want_c} channels, got input shape {x.shape}"
            )
        for i in range(start, stop):
            x = conv2d(x, self.params[f"block{i}.w"], self.config.stride, self.config.padding)
            b = self.params[f"block{i}.b"]
            x = x + reshape(b, (b.shape[0], 1, 1))
            x = relu(x)
            x = max_pool2(x)
        return x

    def features(self, x) -> Tensor:
        """Flattened final activations: [N,F] for batched input, [F] for single."""
        single = (not isinstance(x, Tensor) and np.asarray(x).ndim == 3) or (
            isinstance(x, Tensor) and x.ndim == 3
        )
        acts = self.activations(x)
        f = self.feature_dim
        return reshape(acts, (f,) if single else (acts.shape[0], f))


@dataclass(frozen=True)
class ParamPartition:
    k: int
    frozen_names: tuple
    adapted_names: tuple


def split_params(fe: FeatureExtractor, k: int) -> ParamPartition:
    """Partition params into a frozen prefix (first L-k blocks) and adaptable suffix."""
    if not isinstance(k, int) or not 0 <= k <= fe.depth:
        raise ContractError(f"k must be an integer in [0, {fe.depth}], got {k!r}")
    cut = fe.depth - k
    frozen = tuple(n for n in fe.params if int(n.split(".")[0][5:]) < cut)
    adapted = tuple(n for n in fe.params if int(n.split(".")[0][5:]) >= cut)
    return ParamPartition(k, frozen, adapted)


def adapted_copies(fe: FeatureExtractor, part: ParamPartition) -> dict:
    """Fresh tensors initialized from the suffix params, ready for fine-tuning."""
    return {name: fe.params[name].copy(requires_grad=True) for name in part.adapted_names}


def merge_params(fe: FeatureExtractor, part: ParamPartition, adapted: dict) -> FeatureExtractor:
    """An extractor that shares the frozen tensors and uses the adapted suffix."""
    if set(adapted) != set(part.adapted_names):
        raise ContractError(
            f"adapted params {sorted(adapted)} do not match partition {sorted(part.adapted_names)}"
        )
    merged = {}
    for name in fe.params:
        src = fe.params[name] if name in part.frozen_names else adapted[name]
        if src.shape != fe.params[name].shape:
            raise ContractError(f"{name}: adapted shape {src.shape} != original {fe.params[name].shape}")
        merged[name] = src
    return FeatureExtractor(fe.config, merged)
