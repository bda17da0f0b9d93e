"""Post-training quantization drivers and precision targets.

Quantized models fold every BatchNorm that directly follows a (transposed)
convolution into that convolution, store conv/linear weights as int8 with
per-tensor symmetric parameters and keep biases in fp32.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

from ..nn.engine import Context, forward_decoder, forward_encoder, run_layers
from ..nn.layers import BatchNorm2d, Conv2d, ConvTranspose2d
from ..nn.model import Model
from ..nn.params import ParamStore
from ..nn.spec import VaeSpec, infer_shapes
from ..tensor import FP16_MAX, compute_qparams, qparams_from_range, quantize_affine

PRECISIONS = ("fp32", "fp16", "qint8")


def _fold_layers(layers, params: ParamStore, out: ParamStore):
    folded = []
    skip = set()
    for i, layer in enumerate(layers):
        if i in skip:
            continue
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(layer, (Conv2d, ConvTranspose2d)) and isinstance(nxt, BatchNorm2d):
            g = params[f"{nxt.name}.gamma"].astype(np.float64)
            beta = params[f"{nxt.name}.beta"].astype(np.float64)
            rm = params[f"{nxt.name}.running_mean"].astype(np.float64)
            rv = params[f"{nxt.name}.running_var"].astype(np.float64)
            scale = g / np.sqrt(rv + nxt.eps)
            w = params[f"{layer.name}.weight"].astype(np.float64)
            shape = (-1, 1, 1, 1) if isinstance(layer, Conv2d) else (1, -1, 1, 1)
            b = params.get(layer.name, "bias")
            b = np.zeros(len(scale)) if b is None else b.astype(np.float64)
            out.tensors[f"{layer.name}.weight"] = (w * scale.reshape(shape)).astype(np.float32)
            out.tensors[f"{layer.name}.bias"] = ((b - rm) * scale + beta).astype(np.float32)
            if f"{layer.name}.weight" in params.masks:
                out.masks[f"{layer.name}.weight"] = params.masks[f"{layer.name}.weight"].copy()
            folded.append(replace(layer, bias=True))
            skip.add(i + 1)
        else:
            for k in params.names(f"{layer.name}."):
                out.tensors[k] = params[k].copy()
                if k in params.masks:
                    out.masks[k] = params.masks[k].copy()
            folded.append(layer)
    return folded


def fold_batchnorm(model: Model) -> Model:
    """Equivalent eval-mode model with BN merged into the preceding conv."""
    out = ParamStore(dtype=model.params.dtype)
    spec = model.spec
    enc = _fold_layers(spec.encoder, model.params, out)
    dec = _fold_layers(spec.decoder, model.params, out)
    new = replace(spec, encoder=enc, decoder=dec)
    infer_shapes(new)
    return Model(new, out)


def _is_weight(name: str) -> bool:
    return name.endswith("weight")


def _quantize_weights(model: Model, mode: str) -> Model:
    params = model.params
    out = ParamStore(masks={k: v.copy() for k, v in params.masks.items()}, dtype="qint8", quant_mode=mode)
    for name, arr in params.tensors.items():
        if _is_weight(name):
            qp = compute_qparams(arr, "symmetric")
            out.tensors[name] = quantize_affine(arr, qp).data.copy()
            out.qparams[name] = qp
        else:
            out.tensors[name] = arr.astype(np.float32)
    return Model(model.spec, out)


def _check_fp32(model: Model):
    if model.params.dtype != "fp32":
        raise ValueError(f"expected an fp32 model, got {model.params.dtype}")


def dynamic_quantize(model: Model) -> Model:
    """int8 weights; activation ranges are measured per batch at inference."""
    _check_fp32(model)
    return _quantize_weights(fold_batchnorm(model), "dynamic")


def observe_ranges(model: Model, batches: Iterable[np.ndarray], quant: str = "observe") -> dict:
    """Running min/max at every quantization point over the given batches."""
    ctx_obs: dict = {}
    for xb in batches:
        ctx = Context(quant=quant, observed=ctx_obs)
        enc = forward_encoder(model.spec, model.params, xb, ctx=ctx)
        dctx = Context(quant=quant, observed=ctx_obs, pool_indices=enc.pool_indices)
        run_layers(model.spec.decoder, model.params, enc.mu, dctx)
    return ctx_obs


def static_quantize(model: Model, calibration_batches: Sequence[np.ndarray]) -> Model:
    """int8 weights plus activation parameters frozen from calibration data."""
    _check_fp32(model)
    batches = [np.asarray(b, dtype=np.float32) for b in calibration_batches if len(b)]
    if not batches:
        raise ValueError("static quantization needs at least one non-empty calibration batch")
    folded = fold_batchnorm(model)
    observed = observe_ranges(folded, batches)
    q = _quantize_weights(folded, "static")
    for key, (lo, hi) in sorted(observed.items()):
        q.params.qparams[key] = qparams_from_range(lo, hi, "affine")
    return q


def fp16_model(model: Model) -> Model:
    """Store every tensor in binary16 (saturating); inference rounds activations."""
    _check_fp32(model)
    params = model.params
    out = ParamStore(masks={k: v.copy() for k, v in params.masks.items()}, dtype="fp16")
    for name, arr in params.tensors.items():
        out.tensors[name] = np.clip(arr, -FP16_MAX, FP16_MAX).astype(np.float16)
    return Model(model.spec, out)


def apply_precision(model: Model, precision: str, calibration_batches=None) -> Model:
    if precision == "fp32":
        return model
    if precision == "fp16":
        return fp16_model(model)
    if precision == "qint8":
        if calibration_batches is None:
            raise ValueError("qint8 precision needs calibration batches")
        return static_quantize(model, calibration_batches)
    raise ValueError(f"unknown precision {precision!r}; choose from {PRECISIONS}")


def qat_eval_model(model: Model, calibration_batches: Sequence[np.ndarray]) -> Model:
    """Folded fp32 shadow model with frozen activation ranges.

    Running it with ``quant="qat"`` gives the fake-quant forward that
    :func:`static_quantize` reproduces with stored int8 weights.
    """
    _check_fp32(model)
    folded = fold_batchnorm(model)
    observed = observe_ranges(folded, [np.asarray(b, np.float32) for b in calibration_batches])
    for key, (lo, hi) in observed.items():
        folded.params.qparams[key] = qparams_from_range(lo, hi, "affine")
    return folded


def batches(x: np.ndarray, size: int = 64) -> List[np.ndarray]:
    return [x[i:i + size] for i in range(0, len(x), size)]
