"""Storage precisions and uniform int8 quantization primitives.

Everything rounds half-to-even (numpy's default) so that quantized values
are bit-exact across runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

QMIN, QMAX = -128, 127
FP16_MAX = 65504.0

_NP_DTYPES = {"fp32": np.float32, "fp16": np.float16, "qint8": np.int8}


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    scheme: str = "affine"

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise QuantizationError(f"zero_point {self.zero_point} outside [{QMIN}, {QMAX}]")
        if self.scheme not in ("affine", "symmetric"):
            raise QuantizationError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "symmetric" and self.zero_point != 0:
            raise QuantizationError("symmetric scheme requires zero_point == 0")

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "zero_point": int(self.zero_point), "scheme": self.scheme}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(float(d["scale"]), int(d["zero_point"]), d["scheme"])


@dataclass(frozen=True)
class Tensor:
    """Immutable n-d array tagged with a storage precision.

    ``data`` is kept as a read-only numpy array of the matching numpy dtype
    (float32, float16 or int8); ``qparams`` is required iff dtype is qint8.
    """

    data: np.ndarray
    dtype: str = "fp32"
    qparams: Optional[QuantParams] = None
    shape: tuple = field(init=False)

    def __post_init__(self):
        if self.dtype not in _NP_DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        arr = np.array(self.data, dtype=_NP_DTYPES[self.dtype], copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", tuple(arr.shape))
        if (self.dtype == "qint8") != (self.qparams is not None):
            raise QuantizationError("qparams must be given exactly when dtype is qint8")

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self):
        return self.data.size


ArrayLike = Union[np.ndarray, Tensor, Sequence[float], float]


def _values(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.dtype == "qint8":
            raise QuantizationError("expected a floating tensor, got qint8")
        return x.data.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def quantize_affine(x: ArrayLike, qp: QuantParams) -> Tensor:
    """Quantize to int8: ``clamp(round_half_even(x / scale) + zero_point)``."""
    v = _values(x)
    bad = np.flatnonzero(~np.isfinite(v.ravel()))
    if bad.size:
        raise QuantizationError(f"non-finite value at flat index {int(bad[0])}")
    q = np.clip(np.rint(v / qp.scale) + qp.zero_point, QMIN, QMAX)
    return Tensor(q.astype(np.int8), "qint8", qp)


def dequantize(q: Tensor) -> Tensor:
    if q.qparams is None:
        raise QuantizationError("tensor carries no quantization parameters")
    qp = q.qparams
    x = qp.scale * (q.data.astype(np.float64) - qp.zero_point)
    return Tensor(x.astype(np.float32), "fp32")


def compute_qparams(x: ArrayLike, scheme: str = "affine") -> QuantParams:
    """Fit per-tensor parameters covering the observed value range.

    Affine ranges are widened to include 0 so that zero is exactly
    representable (pruned weights and padding must stay zero).
    """
    v = _values(x)
    if v.size == 0:
        raise QuantizationError("cannot fit qparams on an empty tensor")
    if not np.all(np.isfinite(v)):
        raise QuantizationError("cannot fit qparams on non-finite values")
    return qparams_from_range(float(v.min()), float(v.max()), scheme)


def qparams_from_range(lo: float, hi: float, scheme: str = "affine") -> QuantParams:
    if scheme == "symmetric":
        amax = max(abs(lo), abs(hi))
        if amax == 0:
            return QuantParams(1.0, 0, "symmetric")
        return QuantParams(amax / QMAX, 0, "symmetric")
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi == lo:
        return QuantParams(1.0, 0, "affine")
    scale = (hi - lo) / (QMAX - QMIN)
    zp = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp, "affine")


def fake_quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Array-level quantize -> dequantize in the input's float dtype."""
    q = np.clip(np.rint(x / qp.scale) + qp.zero_point, QMIN, QMAX)
    return ((q - qp.zero_point) * qp.scale).astype(x.dtype, copy=False)


def round_fp16(x: np.ndarray) -> np.ndarray:
    """Round to binary16 (nearest-even), saturating at +-65504; float32 result."""
    x = np.asarray(x)
    return np.clip(x, -FP16_MAX, FP16_MAX).astype(np.float16).astype(np.float32)


def to_fp16(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        x = x.data if x.dtype != "qint8" else dequantize(x).data
    v = np.asarray(x)
    if v.dtype != np.float16:
        # float64 -> float16 is a single correctly rounded conversion in numpy
        v = np.clip(v.astype(np.float64), -FP16_MAX, FP16_MAX).astype(np.float16)
    return Tensor(v, "fp16")
