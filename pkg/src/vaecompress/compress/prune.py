"""Global unstructured magnitude pruning and per-tensor sparsity statistics."""
from __future__ import annotations

import math
from typing import Dict, List

import numpy as np

from ..nn.layers import BatchNorm2d, Conv2d, ConvTranspose2d, LatentHead, Linear
from ..nn.params import ParamStore
from ..nn.spec import VaeSpec

PRUNABLE = (Conv2d, ConvTranspose2d, Linear, LatentHead, BatchNorm2d)


def prunable_tensors(spec: VaeSpec, scope: str = "all") -> List[str]:
    """Learnable weight and bias tensors (BatchNorm gain/shift included), in
    layer order. BatchNorm running statistics are never pruned."""
    if scope == "encoder":
        layers = spec.encoder
    elif scope == "all":
        layers = spec.layers()
    else:
        raise ValueError("scope must be 'encoder' or 'all'")
    names = []
    for layer in layers:
        if isinstance(layer, PRUNABLE):
            names.extend(f"{layer.name}.{f}" for f in layer.param_shapes())
    return names


def global_magnitude_prune(spec: VaeSpec, params: ParamStore, sparsity_pct: float,
                           scope: str = "all") -> ParamStore:
    """Zero the floor(pct * K / 100) smallest-magnitude scalars of the K prunable ones.

    Magnitudes are ranked over one pool spanning every prunable tensor; equal
    magnitudes are pruned in flat-index order (tensors concatenated in layer
    order). Returns a new store whose masks combine with any existing masks.
    """
    if not 0 <= sparsity_pct <= 100:
        raise ValueError("sparsity_pct must lie in [0, 100]")
    if params.dtype != "fp32":
        raise ValueError("pruning expects an fp32 model")
    names = prunable_tensors(spec, scope)
    flat = np.concatenate([np.abs(params[n].ravel()) for n in names])
    k = flat.size
    n_prune = math.floor(sparsity_pct * k / 100 + 1e-9)
    order = np.argsort(flat, kind="stable")
    keep = np.ones(k, dtype=bool)
    keep[order[:n_prune]] = False
    out = params.copy()
    pos = 0
    for n in names:
        size = params[n].size
        m = keep[pos:pos + size].reshape(params[n].shape)
        pos += size
        if n in out.masks:
            m = m & out.masks[n]
        out.masks[n] = m
    out.apply_masks()
    return out


def layer_zero_fractions(spec: VaeSpec, params: ParamStore, scope: str = "all") -> Dict[str, float]:
    return {n: float(np.mean(params[n] == 0)) for n in prunable_tensors(spec, scope)}


def measured_sparsity(spec: VaeSpec, params: ParamStore, scope: str = "all") -> float:
    """Percentage of prunable scalars that are exactly zero."""
    names = prunable_tensors(spec, scope)
    zeros = sum(int(np.count_nonzero(params[n] == 0)) for n in names)
    total = sum(params[n].size for n in names)
    return 100.0 * zeros / total


def removal_exempt(spec: VaeSpec) -> set:
    """Layers whose removal would change the detector's interface."""
    first_conv = next((l.name for l in spec.encoder if isinstance(l, Conv2d)), None)
    head = spec.encoder[-1].name
    return {first_conv, head}


def rank_removal_candidates(spec: VaeSpec, fractions: Dict[str, float]) -> List[str]:
    """Encoder tensors ordered by removal preference.

    Highest zero fraction first; ties go to the deeper layer, then to the
    weight over the bias of the same layer.
    """
    exempt = removal_exempt(spec)
    depth = {l.name: i for i, l in enumerate(spec.encoder)}
    cands = []
    for name, frac in fractions.items():
        layer, field = name.rsplit(".", 1)
        if layer in exempt or layer not in depth or field not in ("weight", "bias"):
            continue
        if not isinstance(spec.layer(layer), (Conv2d, Linear)):
            continue
        cands.append((-frac, -depth[layer], field != "weight", name))
    return [c[-1] for c in sorted(cands)]


def select_removal_layer(spec: VaeSpec, fractions: Dict[str, float]) -> str:
    ranked = rank_removal_candidates(spec, fractions)
    if not ranked:
        raise ValueError("every candidate tensor is removal-exempt")
    return ranked[0]
