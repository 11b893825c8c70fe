"""Candidate operations and the small module system they are built on."""

from __future__ import annotations

import enum
import math

import numpy as np

from .. import tensorcore as tc
from ..tensorcore import DTensor


class OpKind(enum.IntEnum):
    Zero = 0
    SkipConnect = 1
    AvgPool3x3 = 2
    MaxPool3x3 = 3
    SepConv3x3 = 4
    SepConv5x5 = 5
    DilConv3x3 = 6
    DilConv5x5 = 7


NUM_OPS = len(OpKind)


class Module:
    """Parameter container; DTensor attributes with ``requires_grad`` are parameters."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, DTensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> list[DTensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def conv_weight(rng: np.random.Generator, c_out: int, c_in_per_group: int, k: int) -> DTensor:
    bound = 1.0 / math.sqrt(c_in_per_group * k * k)
    data = rng.uniform(-bound, bound, size=(c_out, c_in_per_group, k, k))
    return DTensor(data.astype(tc.default_dtype()), requires_grad=True)


class ReLUConvBN(Module):
    def __init__(self, c_in, c_out, k, stride, padding, rng):
        self.weight = conv_weight(rng, c_out, c_in, k)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        x = tc.conv2d(tc.relu(x), self.weight, self.stride, self.padding)
        return tc.batch_norm(x)


class SepConv(Module):
    """Two stacked (relu, depthwise k×k, pointwise 1×1, norm) blocks; only the first is strided."""

    def __init__(self, c_in, c_out, k, stride, padding, rng):
        self.dw1 = conv_weight(rng, c_in, 1, k)
        self.pw1 = conv_weight(rng, c_in, c_in, 1)
        self.dw2 = conv_weight(rng, c_in, 1, k)
        self.pw2 = conv_weight(rng, c_out, c_in, 1)
        self.stride, self.padding, self.c_in = stride, padding, c_in

    def forward(self, x):
        x = tc.conv2d(tc.relu(x), self.dw1, self.stride, self.padding, groups=self.c_in)
        x = tc.batch_norm(tc.conv2d(x, self.pw1))
        x = tc.conv2d(tc.relu(x), self.dw2, 1, self.padding, groups=self.c_in)
        return tc.batch_norm(tc.conv2d(x, self.pw2))


class DilConv(Module):
    def __init__(self, c_in, c_out, k, stride, padding, dilation, rng):
        self.dw = conv_weight(rng, c_in, 1, k)
        self.pw = conv_weight(rng, c_out, c_in, 1)
        self.stride, self.padding, self.dilation, self.c_in = stride, padding, dilation, c_in

    def forward(self, x):
        x = tc.conv2d(tc.relu(x), self.dw, self.stride, self.padding, self.dilation, groups=self.c_in)
        return tc.batch_norm(tc.conv2d(x, self.pw))


class FactorizedReduce(Module):
    """Halves resolution with two offset stride-2 1×1 convolutions."""

    def __init__(self, c_in, c_out, rng):
        assert c_out % 2 == 0
        self.w1 = conv_weight(rng, c_out // 2, c_in, 1)
        self.w2 = conv_weight(rng, c_out // 2, c_in, 1)

    def forward(self, x):
        x = tc.relu(x)
        a = tc.conv2d(x, self.w1, stride=2)
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"factorized reduce needs even spatial size, got {x.shape[2:]}")
        shifted = tc.getitem(x, (slice(None), slice(None), slice(1, None), slice(1, None)))
        b = tc.conv2d(shifted, self.w2, stride=2)
        return tc.batch_norm(tc.concat([a, b], axis=1))


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    def __init__(self, stride):
        self.stride = stride

    def forward(self, x):
        data = x.data[:, :, ::self.stride, ::self.stride]
        return DTensor(np.zeros_like(data))


class Pool(Module):
    def __init__(self, kind, stride, normalize):
        self.kind, self.stride, self.normalize = kind, stride, normalize

    def forward(self, x):
        out = tc.pool2d(x, self.kind, 3, self.stride, 1)
        return tc.batch_norm(out) if self.normalize else out


def make_op(kind: OpKind, channels: int, stride: int, rng: np.random.Generator | None = None,
            search: bool = True) -> Module:
    """Instantiate one candidate operation.

    In search mode pooling is followed by a parameter-free normalization so
    its scale matches the convolution branches.
    """
    if channels <= 0 or stride not in (1, 2):
        raise ValueError(f"invalid op config channels={channels} stride={stride}")
    rng = rng if rng is not None else np.random.default_rng(0)
    kind = OpKind(kind)
    c = channels
    if kind is OpKind.Zero:
        return Zero(stride)
    if kind is OpKind.SkipConnect:
        return Identity() if stride == 1 else FactorizedReduce(c, c, rng)
    if kind is OpKind.AvgPool3x3:
        return Pool("avg", stride, search)
    if kind is OpKind.MaxPool3x3:
        return Pool("max", stride, search)
    if kind is OpKind.SepConv3x3:
        return SepConv(c, c, 3, stride, 1, rng)
    if kind is OpKind.SepConv5x5:
        return SepConv(c, c, 5, stride, 2, rng)
    if kind is OpKind.DilConv3x3:
        return DilConv(c, c, 3, stride, 2, 2, rng)
    return DilConv(c, c, 5, stride, 4, 2, rng)
