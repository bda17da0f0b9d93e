"""Declarative layer descriptions.

Each layer knows its output shape, the shapes of the tensors it owns and
its per-sample FLOP count. Execution lives in :mod:`vaecompress.nn.engine`.
Shapes exclude the batch axis.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import ClassVar, Dict, Optional, Tuple

Shape = Tuple[int, ...]


class ShapeError(ValueError):
    pass


def conv_extent(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv_transpose_extent(size, kernel, stride, dilation, padding, output_padding=0) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (kernel - 1) + output_padding + 1


@dataclass
class Layer:
    name: str = ""
    kind: ClassVar[str] = ""

    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def param_shapes(self) -> Dict[str, Shape]:
        return {}

    def buffer_shapes(self) -> Dict[str, Shape]:
        return {}

    def flops(self, in_shape: Shape) -> int:
        return 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind
        return d

    def _fail(self, msg: str):
        raise ShapeError(f"layer {self.name or self.kind}: {msg}")

    def _need_chw(self, shape: Shape):
        if len(shape) != 3:
            self._fail(f"expected (C, H, W) input, got {shape}")


@dataclass
class Conv2d(Layer):
    in_ch: int = 1
    out_ch: int = 1
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    bias: bool = True
    kind: ClassVar[str] = "Conv2d"

    def output_shape(self, shape):
        self._need_chw(shape)
        c, h, w = shape
        if c != self.in_ch:
            self._fail(f"expected {self.in_ch} input channels, got {c}")
        ho = conv_extent(h, self.kernel, self.stride, self.dilation, self.padding)
        wo = conv_extent(w, self.kernel, self.stride, self.dilation, self.padding)
        if ho < 1 or wo < 1:
            self._fail(f"input {h}x{w} too small, output extent {ho}x{wo}")
        return (self.out_ch, ho, wo)

    def param_shapes(self):
        p = {"weight": (self.out_ch, self.in_ch, self.kernel, self.kernel)}
        if self.bias:
            p["bias"] = (self.out_ch,)
        return p

    def flops(self, in_shape):
        c, ho, wo = self.output_shape(in_shape)
        return (2 * self.kernel ** 2 * self.in_ch - (not self.bias)) * self.out_ch * ho * wo


@dataclass
class ConvTranspose2d(Layer):
    in_ch: int = 1
    out_ch: int = 1
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    output_padding: int = 0
    bias: bool = True
    kind: ClassVar[str] = "ConvTranspose2d"

    def output_shape(self, shape):
        self._need_chw(shape)
        c, h, w = shape
        if c != self.in_ch:
            self._fail(f"expected {self.in_ch} input channels, got {c}")
        args = (self.kernel, self.stride, self.dilation, self.padding, self.output_padding)
        ho, wo = conv_transpose_extent(h, *args), conv_transpose_extent(w, *args)
        if ho < 1 or wo < 1:
            self._fail(f"output extent {ho}x{wo} < 1")
        return (self.out_ch, ho, wo)

    def param_shapes(self):
        p = {"weight": (self.in_ch, self.out_ch, self.kernel, self.kernel)}
        if self.bias:
            p["bias"] = (self.out_ch,)
        return p

    def flops(self, in_shape):
        _, h, w = in_shape
        macs = 2 * self.kernel ** 2 * self.in_ch * self.out_ch * h * w
        return macs - (0 if self.bias else math.prod(self.output_shape(in_shape)))


@dataclass
class BatchNorm2d(Layer):
    ch: int = 1
    eps: float = 1e-5
    momentum: float = 0.1
    kind: ClassVar[str] = "BatchNorm2d"

    def output_shape(self, shape):
        self._need_chw(shape)
        if shape[0] != self.ch:
            self._fail(f"expected {self.ch} channels, got {shape[0]}")
        return shape

    def param_shapes(self):
        return {"gamma": (self.ch,), "beta": (self.ch,)}

    def buffer_shapes(self):
        return {"running_mean": (self.ch,), "running_var": (self.ch,)}

    def flops(self, in_shape):
        return 2 * math.prod(in_shape)


@dataclass
class LeakyReLU(Layer):
    slope: float = 0.01
    kind: ClassVar[str] = "LeakyReLU"

    def flops(self, in_shape):
        return math.prod(in_shape)


@dataclass
class ReLU(Layer):
    kind: ClassVar[str] = "ReLU"

    def flops(self, in_shape):
        return math.prod(in_shape)


@dataclass
class MaxPool2d(Layer):
    kernel: int = 2
    stride: int = 2
    kind: ClassVar[str] = "MaxPool2d"

    def output_shape(self, shape):
        self._need_chw(shape)
        c, h, w = shape
        ho, wo = conv_extent(h, self.kernel, self.stride, 1, 0), conv_extent(w, self.kernel, self.stride, 1, 0)
        if ho < 1 or wo < 1:
            self._fail(f"input {h}x{w} too small to pool")
        return (c, ho, wo)

    def flops(self, in_shape):
        return self.kernel ** 2 * math.prod(self.output_shape(in_shape))


@dataclass
class MaxUnpool2d(Layer):
    """Scatter values back to the argmax positions recorded by ``pool``."""

    kernel: int = 2
    stride: int = 2
    pool: str = ""
    out_hw: Optional[Tuple[int, int]] = None
    kind: ClassVar[str] = "MaxUnpool2d"

    def output_shape(self, shape):
        self._need_chw(shape)
        c, h, w = shape
        if self.out_hw is not None:
            return (c, *self.out_hw)
        return (c, (h - 1) * self.stride + self.kernel, (w - 1) * self.stride + self.kernel)

    def flops(self, in_shape):
        return math.prod(self.output_shape(in_shape))


@dataclass
class Flatten(Layer):
    kind: ClassVar[str] = "Flatten"

    def output_shape(self, shape):
        return (math.prod(shape),)


@dataclass
class Unflatten(Layer):
    shape: Tuple[int, ...] = (1,)
    kind: ClassVar[str] = "Unflatten"

    def output_shape(self, shape):
        if math.prod(shape) != math.prod(self.shape):
            self._fail(f"cannot reshape {shape} to {tuple(self.shape)}")
        return tuple(self.shape)


@dataclass
class Linear(Layer):
    in_features: int = 1
    out_features: int = 1
    bias: bool = True
    kind: ClassVar[str] = "Linear"

    def output_shape(self, shape):
        if shape != (self.in_features,):
            self._fail(f"expected ({self.in_features},) input, got {shape}")
        return (self.out_features,)

    def param_shapes(self):
        p = {"weight": (self.out_features, self.in_features)}
        if self.bias:
            p["bias"] = (self.out_features,)
        return p

    def flops(self, in_shape):
        return (2 * self.in_features - (not self.bias)) * self.out_features


@dataclass
class LatentHead(Layer):
    """Two parallel linear maps producing latent mean and log-variance."""

    in_features: int = 1
    latent_dim: int = 1
    kind: ClassVar[str] = "LatentHead"

    def output_shape(self, shape):
        if shape != (self.in_features,):
            self._fail(f"expected ({self.in_features},) input, got {shape}")
        return (2, self.latent_dim)

    def param_shapes(self):
        d, n = self.latent_dim, self.in_features
        return {"mu_weight": (d, n), "mu_bias": (d,), "logvar_weight": (d, n), "logvar_bias": (d,)}

    def flops(self, in_shape):
        return 4 * self.in_features * self.latent_dim


LAYER_TYPES = {cls.kind: cls for cls in (
    Conv2d, ConvTranspose2d, BatchNorm2d, LeakyReLU, ReLU, MaxPool2d, MaxUnpool2d,
    Flatten, Unflatten, Linear, LatentHead)}

PARAMETRIC = (Conv2d, ConvTranspose2d, Linear, LatentHead)
ACTIVATIONS = (LeakyReLU, ReLU)


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    cls = LAYER_TYPES[d.pop("kind")]
    names = {f.name for f in fields(cls)}
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names}
    return cls(**kwargs)
