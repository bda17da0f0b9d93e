"""Forward and backward execution of sequential layer graphs in numpy.

Computation runs in the dtype of the incoming batch (float32 normally,
float64 for gradient checks). Quantized and fp16 parameter stores are
executed by simulation: int8 weights are dequantized, the op runs in float,
and outputs are re-quantized (or rounded to binary16).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..tensor import QuantParams, fake_quantize, qparams_from_range, round_fp16
from .layers import (
    BatchNorm2d, Conv2d, ConvTranspose2d, Flatten, LatentHead, Layer, LeakyReLU, Linear,
    MaxPool2d, MaxUnpool2d, ReLU, ShapeError, Unflatten, conv_extent,
)
from .params import ParamStore
from .spec import VaeSpec

QUANT_MODES = (None, "dynamic", "static", "qat", "observe")


class ExecutionError(RuntimeError):
    pass


# ---------------------------------------------------------------- conv kernels

def im2col(x, k, s, d, p, ho, wo):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            hi, wj = i * d, j * d
            cols[:, :, i, j] = xp[:, :, hi:hi + s * (ho - 1) + 1:s, wj:wj + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols, canvas_shape, k, s, d, ho, wo):
    n, c, hp, wp = canvas_shape
    out = np.zeros(canvas_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            hi, wj = i * d, j * d
            out[:, :, hi:hi + s * (ho - 1) + 1:s, wj:wj + s * (wo - 1) + 1:s] += cols[:, :, i, j]
    return out


def conv2d(x, w, b, s, d, p):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = conv_extent(h, k, s, d, p), conv_extent(wd, k, s, d, p)
    cols = im2col(x, k, s, d, p, ho, wo)
    y = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    if b is not None:
        y += b.reshape(1, -1, 1, 1)
    return y, cols


def conv2d_backward(dy, x_shape, w, cols, s, d, p):
    n, o, ho, wo = dy.shape
    k = w.shape[2]
    dyf = dy.reshape(n, o, ho * wo)
    dw = np.tensordot(dyf, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dyf.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, dyf)
    c, h, wd = x_shape[1:]
    dx = col2im(dcols, (n, c, h + 2 * p, wd + 2 * p), k, s, d, ho, wo)
    if p:
        dx = dx[:, :, p:p + h, p:p + wd]
    return dx, dw, db


def conv_transpose2d(x, w, b, s, d, p, op):
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * s - 2 * p + d * (k - 1) + op + 1
    wo = (wd - 1) * s - 2 * p + d * (k - 1) + op + 1
    cols = np.matmul(w.reshape(cin, -1).T, x.reshape(n, cin, h * wd))
    y = col2im(cols, (n, cout, ho + 2 * p, wo + 2 * p), k, s, d, h, wd)
    if p:
        y = y[:, :, p:p + ho, p:p + wo]
    y = np.ascontiguousarray(y)
    if b is not None:
        y += b.reshape(1, -1, 1, 1)
    return y


def conv_transpose2d_backward(dy, x, w, s, d, p):
    n, cin, h, wd = x.shape
    k = w.shape[2]
    cols = im2col(dy, k, s, d, p, h, wd)
    dx = np.matmul(w.reshape(cin, -1), cols).reshape(x.shape)
    dw = np.tensordot(x.reshape(n, cin, h * wd), cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def maxpool2d(x, k, s):
    n, c, h, w = x.shape
    ho, wo = conv_extent(h, k, s, 1, 0), conv_extent(w, k, s, 1, 0)
    win = im2col(x, k, s, 1, 0, ho, wo).reshape(n, c, k * k, ho, wo)
    arg = win.argmax(axis=2)
    y = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    rows = np.arange(ho).reshape(-1, 1) * s + arg // k
    colsi = np.arange(wo).reshape(1, -1) * s + arg % k
    return y, arg, rows * w + colsi


def maxpool2d_backward(dy, arg, x_shape, k, s):
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ho, wo = dy.shape[2:]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dy * (arg == i * k + j)
    return dx


def maxunpool2d(x, idx, out_hw):
    n, c = x.shape[:2]
    out = np.zeros((n, c, out_hw[0] * out_hw[1]), dtype=x.dtype)
    np.put_along_axis(out, idx.reshape(n, c, -1), x.reshape(n, c, -1), axis=2)
    return out.reshape(n, c, *out_hw)


def maxunpool2d_backward(dy, idx):
    n, c = dy.shape[:2]
    return np.take_along_axis(dy.reshape(n, c, -1), idx.reshape(n, c, -1), axis=2).reshape(idx.shape)


# ---------------------------------------------------------------- execution

@dataclass
class Context:
    training: bool = False
    quant: Optional[str] = None
    fp16: bool = False
    pool_indices: Dict[str, np.ndarray] = field(default_factory=dict)
    observed: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    update_stats: bool = True


def _weight(params: ParamStore, key: str, ctx: Context, dtype):
    arr = params.tensors.get(key)
    if arr is None:
        return None
    if arr.dtype == np.int8:
        qp = params.qparams[key]
        return ((arr.astype(dtype) - qp.zero_point) * qp.scale).astype(dtype)
    arr = arr.astype(dtype, copy=False)
    if ctx.quant == "qat" and key.endswith("weight"):
        amax = float(np.abs(arr).max())
        if amax > 0:
            arr = fake_quantize(arr, QuantParams(amax / 127, 0, "symmetric"))
    return arr


def _requant(y, name: str, params: ParamStore, ctx: Context):
    mode = ctx.quant
    if mode is None:
        return y
    key = f"act:{name}"
    if mode == "observe":
        lo, hi = float(y.min()), float(y.max())
        if key in ctx.observed:
            plo, phi = ctx.observed[key]
            lo, hi = min(lo, plo), max(hi, phi)
        ctx.observed[key] = (lo, hi)
        return y
    if mode == "static" or (mode == "qat" and not ctx.training and key in params.qparams):
        if key not in params.qparams:
            raise ExecutionError(f"missing activation qparams for {name!r}")
        return fake_quantize(y, params.qparams[key])
    # dynamic, or QAT training: range taken from the current batch
    if not np.all(np.isfinite(y)):
        return y
    return fake_quantize(y, qparams_from_range(float(y.min()), float(y.max())))


def _round(y, ctx: Context):
    return round_fp16(y).astype(y.dtype, copy=False) if ctx.fp16 else y


def _finish(y, name, params, ctx):
    return _round(_requant(y, name, params, ctx), ctx)


def _layer_forward(layer: Layer, x, params: ParamStore, ctx: Context):
    """Returns (output, cache); cache is None for stateless reshapes."""
    name = layer.name
    dt = x.dtype
    if isinstance(layer, Conv2d):
        w = _weight(params, f"{name}.weight", ctx, dt)
        b = _weight(params, f"{name}.bias", ctx, dt)
        y, cols = conv2d(x, w, b, layer.stride, layer.dilation, layer.padding)
        return _finish(y, name, params, ctx), (x.shape, w, cols)
    if isinstance(layer, ConvTranspose2d):
        w = _weight(params, f"{name}.weight", ctx, dt)
        b = _weight(params, f"{name}.bias", ctx, dt)
        y = conv_transpose2d(x, w, b, layer.stride, layer.dilation, layer.padding, layer.output_padding)
        return _finish(y, name, params, ctx), (x, w)
    if isinstance(layer, Linear):
        w = _weight(params, f"{name}.weight", ctx, dt)
        b = _weight(params, f"{name}.bias", ctx, dt)
        y = x @ w.T
        if b is not None:
            y = y + b
        return _finish(y, name, params, ctx), (x, w)
    if isinstance(layer, LatentHead):
        wm = _weight(params, f"{name}.mu_weight", ctx, dt)
        wl = _weight(params, f"{name}.logvar_weight", ctx, dt)
        mu = x @ wm.T + _weight(params, f"{name}.mu_bias", ctx, dt)
        lv = x @ wl.T + _weight(params, f"{name}.logvar_bias", ctx, dt)
        mu = _finish(mu, f"{name}.mu", params, ctx)
        lv = _finish(lv, f"{name}.logvar", params, ctx)
        return np.stack([mu, lv], axis=1), (x, wm, wl)
    if isinstance(layer, BatchNorm2d):
        g = _weight(params, f"{name}.gamma", ctx, dt)
        b = _weight(params, f"{name}.beta", ctx, dt)
        if ctx.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if ctx.update_stats:
                m = layer.momentum
                count = x.size // x.shape[1]
                rm, rv = params.tensors[f"{name}.running_mean"], params.tensors[f"{name}.running_var"]
                rm[...] = (1 - m) * rm + m * mean
                rv[...] = (1 - m) * rv + m * var * count / max(count - 1, 1)
        else:
            mean = _weight(params, f"{name}.running_mean", ctx, dt)
            var = _weight(params, f"{name}.running_var", ctx, dt)
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        y = xhat * g.reshape(1, -1, 1, 1) + b.reshape(1, -1, 1, 1)
        return _round(y.astype(dt, copy=False), ctx), (xhat, inv, g)
    if isinstance(layer, LeakyReLU):
        y = np.where(x > 0, x, x * layer.slope).astype(dt, copy=False)
        return _round(y, ctx), x > 0
    if isinstance(layer, ReLU):
        return np.maximum(x, 0), x > 0
    if isinstance(layer, MaxPool2d):
        y, arg, flat = maxpool2d(x, layer.kernel, layer.stride)
        ctx.pool_indices[name] = flat
        return y, (arg, x.shape)
    if isinstance(layer, MaxUnpool2d):
        idx = ctx.pool_indices.get(layer.pool)
        if idx is None:
            raise ExecutionError(f"layer {name}: pool indices for {layer.pool!r} not supplied")
        if idx.shape != x.shape:
            raise ExecutionError(f"layer {name}: indices shape {idx.shape} != input {x.shape}")
        out_hw = layer.out_hw or layer.output_shape(x.shape[1:])[1:]
        return maxunpool2d(x, idx, tuple(out_hw)), idx
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, Unflatten):
        return x.reshape(x.shape[0], *layer.shape), x.shape
    raise ExecutionError(f"unsupported layer {layer.kind}")


def _accum(grads: Dict[str, np.ndarray], params: ParamStore, key: str, g):
    if key not in params.tensors:
        return
    mask = params.masks.get(key)
    if mask is not None:
        g = g * mask
    grads[key] = grads[key] + g if key in grads else g


def _layer_backward(layer: Layer, dy, cache, params: ParamStore, grads):
    name = layer.name
    if isinstance(layer, Conv2d):
        x_shape, w, cols = cache
        dx, dw, db = conv2d_backward(dy, x_shape, w, cols, layer.stride, layer.dilation, layer.padding)
        _accum(grads, params, f"{name}.weight", dw)
        _accum(grads, params, f"{name}.bias", db)
        return dx
    if isinstance(layer, ConvTranspose2d):
        x, w = cache
        dx, dw, db = conv_transpose2d_backward(dy, x, w, layer.stride, layer.dilation, layer.padding)
        _accum(grads, params, f"{name}.weight", dw)
        _accum(grads, params, f"{name}.bias", db)
        return dx
    if isinstance(layer, Linear):
        x, w = cache
        _accum(grads, params, f"{name}.weight", dy.T @ x)
        _accum(grads, params, f"{name}.bias", dy.sum(axis=0))
        return dy @ w
    if isinstance(layer, LatentHead):
        x, wm, wl = cache
        dmu, dlv = dy[:, 0], dy[:, 1]
        _accum(grads, params, f"{name}.mu_weight", dmu.T @ x)
        _accum(grads, params, f"{name}.mu_bias", dmu.sum(axis=0))
        _accum(grads, params, f"{name}.logvar_weight", dlv.T @ x)
        _accum(grads, params, f"{name}.logvar_bias", dlv.sum(axis=0))
        return dmu @ wm + dlv @ wl
    if isinstance(layer, BatchNorm2d):
        xhat, inv, g = cache
        _accum(grads, params, f"{name}.gamma", (dy * xhat).sum(axis=(0, 2, 3)))
        _accum(grads, params, f"{name}.beta", dy.sum(axis=(0, 2, 3)))
        dxhat = dy * g.reshape(1, -1, 1, 1)
        m = dy.size // dy.shape[1]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv.reshape(1, -1, 1, 1) / m * (m * dxhat - s1 - xhat * s2)
    if isinstance(layer, LeakyReLU):
        return np.where(cache, dy, dy * layer.slope).astype(dy.dtype, copy=False)
    if isinstance(layer, ReLU):
        return dy * cache
    if isinstance(layer, MaxPool2d):
        arg, x_shape = cache
        return maxpool2d_backward(dy, arg, x_shape, layer.kernel, layer.stride)
    if isinstance(layer, MaxUnpool2d):
        return maxunpool2d_backward(dy, cache)
    if isinstance(layer, (Flatten, Unflatten)):
        return dy.reshape(cache)
    raise ExecutionError(f"unsupported layer {layer.kind}")


Tape = List[Tuple[Layer, object]]


def _context_for(params: ParamStore, training: bool, quant: Optional[str]) -> Context:
    if quant not in QUANT_MODES:
        raise ValueError(f"unknown quantization mode {quant!r}")
    if params.dtype == "qint8":
        quant = quant or params.quant_mode or "dynamic"
    return Context(training=training, quant=quant, fp16=params.dtype == "fp16")


def run_layers(layers: Sequence[Layer], params: ParamStore, x, ctx: Context):
    """Run layers in order. Returns (output, tape); tape is empty unless training."""
    tape: Tape = []
    if ctx.quant is not None:
        x = _requant(x, "input", params, ctx) if layers and layers[0].name.startswith("enc") else x
    if ctx.fp16:
        x = round_fp16(x).astype(x.dtype, copy=False)
    for layer in layers:
        try:
            x, cache = _layer_forward(layer, x, params, ctx)
        except ShapeError:
            raise
        except (ValueError, IndexError) as exc:
            raise ShapeError(f"layer {layer.name} ({layer.kind}): {exc}") from exc
        if ctx.training:
            tape.append((layer, cache))
    return x, tape


def backprop_layers(tape: Tape, params: ParamStore, dy, grads: Dict[str, np.ndarray]):
    for layer, cache in reversed(tape):
        dy = _layer_backward(layer, dy, cache, params, grads)
    return dy


class EncoderOutput(NamedTuple):
    mu: np.ndarray
    logvar: np.ndarray
    pool_indices: Dict[str, np.ndarray]
    tape: Tape


class DecoderOutput(NamedTuple):
    x_hat: np.ndarray
    tape: Tape


def _check_batch(spec: VaeSpec, batch: np.ndarray):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {batch.shape} does not match (N,) + {tuple(spec.input_shape)}")


def forward_encoder(spec: VaeSpec, params: ParamStore, batch, training: bool = False,
                    quant: Optional[str] = None, ctx: Optional[Context] = None) -> EncoderOutput:
    batch = np.asarray(batch)
    if not np.issubdtype(batch.dtype, np.floating) or batch.dtype == np.float16:
        batch = batch.astype(np.float32)
    _check_batch(spec, batch)
    ctx = ctx or _context_for(params, training, quant)
    out, tape = run_layers(spec.encoder, params, batch, ctx)
    return EncoderOutput(out[:, 0], out[:, 1], ctx.pool_indices, tape)


def forward_decoder(spec: VaeSpec, params: ParamStore, z, pool_indices=None,
                    training: bool = False, quant: Optional[str] = None) -> DecoderOutput:
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != spec.latent_dim:
        raise ShapeError(f"z must be (N, {spec.latent_dim}), got {z.shape}")
    ctx = _context_for(params, training, quant)
    ctx.pool_indices = dict(pool_indices or {})
    out, tape = run_layers(spec.decoder, params, z, ctx)
    return DecoderOutput(out, tape)


def backward_decoder(spec: VaeSpec, params: ParamStore, tape: Tape, dx_hat, grads) -> np.ndarray:
    """Accumulate decoder gradients into ``grads``; returns dL/dz."""
    _check_trainable(params, tape)
    return backprop_layers(tape, params, dx_hat, grads)


def backward_encoder(spec: VaeSpec, params: ParamStore, tape: Tape, dmu, dlogvar, grads) -> np.ndarray:
    """Accumulate encoder gradients into ``grads``; returns dL/dx."""
    _check_trainable(params, tape)
    return backprop_layers(tape, params, np.stack([dmu, dlogvar], axis=1), grads)


def backward(spec: VaeSpec, params: ParamStore, enc: EncoderOutput, loss_grads: Dict[str, np.ndarray],
             dec: Optional[DecoderOutput] = None) -> Dict[str, np.ndarray]:
    """Gradient store for a loss whose gradients w.r.t. the network outputs are given.

    ``loss_grads`` holds ``"mu"`` and ``"logvar"`` and, when ``dec`` is
    supplied, ``"x_hat"``; the decoder input is treated as independent of
    the encoder (callers chaining through a sampled ``z`` use the two
    stage functions above). Masked entries receive zero gradient.
    """
    grads: Dict[str, np.ndarray] = {}
    if dec is not None and "x_hat" in loss_grads:
        backward_decoder(spec, params, dec.tape, loss_grads["x_hat"], grads)
    mu = enc.mu
    dmu = loss_grads.get("mu", np.zeros_like(mu))
    dlv = loss_grads.get("logvar", np.zeros_like(mu))
    backward_encoder(spec, params, enc.tape, dmu, dlv, grads)
    return grads


def _check_trainable(params: ParamStore, tape: Tape):
    if params.dtype != "fp32":
        raise ExecutionError("backward requires an fp32 parameter store (only QAT fake-quant is trainable)")
    if not tape:
        raise ExecutionError("forward must run with training=True before backward")
