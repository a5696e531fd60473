"""Candidate edge operations.

Every operation maps ``C`` channels to ``C`` channels. At stride 2 every kind
produces the same ``ceil(n/2)`` spatial shape, so a cell can mix them freely.
"""

from __future__ import annotations

import enum
import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

CATALOG_VERSION = "scnas-ops-v1"
LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


class OperationKind(enum.IntEnum):
    Conv3 = 0
    SepDilConv3Rate2 = 1
    SepDilConv3Rate3 = 2
    SepDilConv3Rate4 = 3
    MaxPool3 = 4
    AvgPool3 = 5
    Identity = 6
    Zero = 7

    @classmethod
    def parse(cls, name: str) -> OperationKind:
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown operation kind {name!r}") from None


FULL_CATALOG: tuple[OperationKind, ...] = tuple(OperationKind)

_DILATION = {
    OperationKind.SepDilConv3Rate2: 2,
    OperationKind.SepDilConv3Rate3: 3,
    OperationKind.SepDilConv3Rate4: 4,
}


def kaiming_normal(rng: np.random.Generator, shape: Sequence[int]) -> Tensor:
    fan_in = math.prod(shape[1:])
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    return Tensor(rng.normal(0.0, gain / math.sqrt(fan_in), size=tuple(shape)), requires_grad=True)


def out_spatial(spatial: Sequence[int], stride: int) -> tuple[int, ...]:
    return tuple(-(-s // stride) for s in spatial)


class Operation:
    kind: OperationKind

    def __init__(self, kind: OperationKind, channels: int, stride: int, label: str = ""):
        if channels < 1:
            raise ValueError(f"channels must be >= 1, got {channels}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.kind = kind
        self.channels = channels
        self.stride = stride
        self.label = label

    def parameters(self) -> list[Tensor]:
        return []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def flops(self, spatial: Sequence[int]) -> int:
        return kind_flops(self.kind, self.channels, self.stride, spatial)

    def __call__(self, x: Tensor) -> Tensor:
        return apply(self, x)

    def __repr__(self) -> str:
        return f"{self.kind.name}(C={self.channels}, stride={self.stride})"


class NormMixin:
    def _init_norm(self, channels: int) -> None:
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def _norm(self, x: Tensor) -> Tensor:
        return T.affine_channels(T.instance_norm(x, NORM_EPS), self.scale, self.shift)


class ConvOp(NormMixin, Operation):
    """LeakyReLU -> full 3^d conv -> InstanceNorm."""

    def __init__(self, channels, stride, rng, ndim=3, label=""):
        super().__init__(OperationKind.Conv3, channels, stride, label)
        self.weight = kaiming_normal(rng, (channels, channels) + (3,) * ndim)
        self._init_norm(channels)

    def parameters(self):
        return [self.weight, self.scale, self.shift]

    def forward(self, x):
        y = T.conv(T.leaky_relu(x, LEAKY_SLOPE), self.weight, stride=self.stride)
        return self._norm(y)


class SepDilConvOp(NormMixin, Operation):
    """LeakyReLU -> dilated depthwise 3^d conv (carries the stride) -> pointwise conv -> InstanceNorm."""

    def __init__(self, kind, channels, stride, rng, ndim=3, label=""):
        super().__init__(kind, channels, stride, label)
        self.dilation = _DILATION[kind]
        self.depthwise = kaiming_normal(rng, (channels, 1) + (3,) * ndim)
        self.pointwise = kaiming_normal(rng, (channels, channels) + (1,) * ndim)
        self._init_norm(channels)

    def parameters(self):
        return [self.depthwise, self.pointwise, self.scale, self.shift]

    def forward(self, x):
        y = T.leaky_relu(x, LEAKY_SLOPE)
        y = T.conv(y, self.depthwise, stride=self.stride, dilation=self.dilation, groups=self.channels)
        y = T.conv(y, self.pointwise)
        return self._norm(y)


class PoolOp(Operation):
    def forward(self, x):
        kind = "max" if self.kind == OperationKind.MaxPool3 else "avg"
        return T.pool(x, kind, window=3, stride=self.stride)


class IdentityOp(Operation):
    def forward(self, x):
        return x if self.stride == 1 else T.subsample(x, self.stride)


class ZeroOp(Operation):
    def forward(self, x):
        return T.zeros(x.shape[:2] + out_spatial(x.shape[2:], self.stride))


def instantiate(
    kind: OperationKind,
    channels: int,
    stride: int = 1,
    seed: int | np.random.Generator = 0,
    ndim: int = 3,
    label: str = "",
) -> Operation:
    """Build an operation with freshly initialized parameters."""
    if not isinstance(kind, OperationKind):
        if isinstance(kind, str):
            kind = OperationKind.parse(kind)
        else:
            try:
                kind = OperationKind(kind)
            except ValueError:
                raise ValueError(f"unknown operation kind {kind!r}") from None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if kind == OperationKind.Conv3:
        op = ConvOp(channels, stride, rng, ndim, label)
    elif kind in _DILATION:
        op = SepDilConvOp(kind, channels, stride, rng, ndim, label)
    elif kind in (OperationKind.MaxPool3, OperationKind.AvgPool3):
        op = PoolOp(kind, channels, stride, label)
    elif kind == OperationKind.Identity:
        op = IdentityOp(kind, channels, stride, label)
    else:
        op = ZeroOp(kind, channels, stride, label)
    return op


def apply(op: Operation, x: Tensor) -> Tensor:
    if x.ndim < 3 or x.shape[1] != op.channels:
        where = f" on {op.label}" if op.label else ""
        raise ValueError(
            f"{op.kind.name}{where}: expected {op.channels} input channels, got shape {tuple(x.shape)}"
        )
    return op.forward(x)


def flops(op: Operation, spatial_shape: Sequence[int]) -> int:
    """FLOPs (2 x multiply-accumulates) of ``op`` on an input of the given spatial shape."""
    return op.flops(tuple(spatial_shape))


def kind_flops(kind: OperationKind, channels: int, stride: int, spatial_shape: Sequence[int]) -> int:
    """Same count as :func:`flops` without building the operation."""
    spatial = tuple(spatial_shape)
    nd = len(spatial)
    vox = math.prod(out_spatial(spatial, stride))
    if kind == OperationKind.Conv3:
        return 2 * 3**nd * channels * channels * vox
    if kind in _DILATION:
        return 2 * (3**nd * channels + channels * channels) * vox
    if kind in (OperationKind.MaxPool3, OperationKind.AvgPool3):
        # one comparison or addition per window element
        return 3**nd * channels * vox
    return 0
