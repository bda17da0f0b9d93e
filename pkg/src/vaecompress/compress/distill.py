"""Pruning-aware knowledge distillation: greedy layer removal guided by sparsity.

Every iteration prunes the current model by half, removes the tensor with
the largest zero fraction (a whole conv/linear layer for a weight, only the
bias for a bias vector), retrains the smaller student against the frozen
teacher's latent means and keeps going while the accuracy constraint holds.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..metrics import flop_count
from ..nn.layers import Conv2d, LatentHead, Linear, ShapeError, conv_extent
from ..nn.model import Model
from ..nn.params import ParamStore, init_params
from ..nn.spec import VaeSpec, _chain, attachments, build_vae, infer_shapes
from ..train import TrainConfig, train_vae
from .prune import global_magnitude_prune, layer_zero_fractions, rank_removal_candidates, removal_exempt
from .quantize import apply_precision
from .report import AccuracyConstraint, ConstraintViolation, SearchRecord, SearchReport

log = logging.getLogger(__name__)

SELECTION_PRUNE_PCT = 50.0
MAX_DILATION = 4


class RemovalRejected(ValueError):
    """The requested removal cannot be realised with a valid architecture."""


def _parametric_index(encoder, name):
    for i, layer in enumerate(encoder):
        if layer.name == name:
            return i
    raise KeyError(f"no encoder layer named {name!r}")


def _spatial(shape):
    return tuple(shape[1:]) if len(shape) == 3 else None


def _search_stride_dilation(layers, q, in_shape, target, stop):
    """Smallest (dilation, stride) for ``layers[q]`` so that the chain up to
    ``stop`` ends with spatial extent ``target``."""
    conv = layers[q]
    h = in_shape[1]
    for d in range(1, MAX_DILATION + 1):
        for s in range(1, h + 1):
            if conv_extent(h, conv.kernel, s, d, conv.padding) < 1:
                break
            trial = list(layers)
            trial[q] = replace(conv, stride=s, dilation=d)
            try:
                shape = _chain(trial[q:stop], in_shape)[-1]
            except ShapeError:
                continue
            if _spatial(shape) == target:
                return s, d
    return None


def _rebuild_input(layer, incoming):
    if isinstance(layer, Conv2d):
        return replace(layer, in_ch=incoming[0])
    if hasattr(layer, "in_features"):
        return replace(layer, in_features=int(np.prod(incoming)))
    raise RemovalRejected(f"cannot rebuild inputs of {layer.name}")


def build_student_spec(spec: VaeSpec, target: str) -> VaeSpec:
    """Student architecture after removing ``target`` (``<layer>.weight`` or ``<layer>.bias``).

    The decoder is regenerated as the mirror of the new encoder.
    """
    layer_name, field = target.rsplit(".", 1)
    enc = list(spec.encoder)
    r = _parametric_index(enc, layer_name)
    removed = enc[r]
    if layer_name in removal_exempt(spec):
        raise RemovalRejected(f"{layer_name} is removal-exempt")
    if field == "bias":
        if not getattr(removed, "bias", False):
            raise RemovalRejected(f"{layer_name} has no bias")
        enc[r] = replace(removed, bias=False)
        return build_vae(enc, spec.input_shape, spec.beta, name=spec.name)
    if field != "weight" or not isinstance(removed, (Conv2d, Linear)):
        raise RemovalRejected(f"cannot remove {target}")

    in_shapes = [tuple(spec.input_shape)] + _chain(enc, spec.input_shape)[:-1]
    out_shape = removed.output_shape(in_shapes[r])
    n_drop = 1 + len(attachments(enc, r))
    q = max((i for i in range(r) if isinstance(enc[i], (Conv2d, Linear))), default=None)
    new = enc[:r] + enc[r + n_drop:]
    nxt = next(i for i in range(r, len(new)) if isinstance(new[i], (Conv2d, Linear, LatentHead)))

    if isinstance(removed, Conv2d):
        if not isinstance(enc[q], Conv2d):
            raise RemovalRejected(f"no conv precedes {layer_name}")
        found = _search_stride_dilation(new, q, in_shapes[q], _spatial(out_shape), r)
        if found is None:
            raise RemovalRejected(f"no (stride, dilation) reproduces extent {out_shape[1:]}")
        s, d = found
        new[q] = replace(new[q], stride=s, dilation=d)
    elif q is not None and isinstance(enc[q], Linear):
        new[q] = replace(new[q], out_features=removed.out_features)
    incoming = ([tuple(spec.input_shape)] + _chain(new[:nxt], spec.input_shape))[-1]
    new[nxt] = _rebuild_input(new[nxt], incoming)
    try:
        return build_vae(new, spec.input_shape, spec.beta, name=spec.name)
    except ShapeError as exc:
        raise RemovalRejected(str(exc)) from exc


def inherit_params(student: VaeSpec, source: ParamStore, seed: int) -> ParamStore:
    """Copy tensors whose name and shape survive; fresh init for the rest."""
    fresh = init_params(student, seed)
    out = ParamStore()
    for name, arr in fresh.tensors.items():
        src = source.tensors.get(name)
        out.tensors[name] = (src.copy() if src is not None and src.shape == arr.shape else arr)
    return out


def distill_train(teacher: Model, student_spec: VaeSpec, data, cfg: TrainConfig,
                  init: Optional[ParamStore] = None, kd_lambda: float = 1.0) -> Model:
    """ELBO plus ``kd_lambda`` * MSE between student and teacher latent means."""
    cfg = replace(cfg, kd_lambda=kd_lambda)
    params, _ = train_vae(student_spec, data, cfg, params=init, teacher=teacher)
    return Model(student_spec, params)


def _group_fractions(spec, members: Sequence[Model]):
    per = [layer_zero_fractions(spec, global_magnitude_prune(spec, m.params, SELECTION_PRUNE_PCT))
           for m in members]
    return {k: float(np.mean([f[k] for f in per])) for k in per[0]}


def _record(step, models, deployed, removed, ev, passed, precision, sparsity=0.0):
    spec = models[0].spec
    return SearchRecord(
        step=step, spec_id=spec.spec_id, removed=list(removed), sparsity_pct=float(sparsity),
        dtype=precision, auroc=float(ev.auroc),
        kl_id=None if ev.kl_id is None else float(ev.kl_id),
        kl_ood=None if ev.kl_ood is None else float(ev.kl_ood),
        param_count=sum(m.param_count for m in models),
        size_bytes=sum(m.size_bytes for m in deployed),
        flops=sum(flop_count(m.spec) for m in models), passed=bool(passed))


def _with_precision(models, precision, calibration):
    if precision == "fp32":
        return list(models)
    cal = calibration or [None] * len(models)
    return [apply_precision(m, precision, c) for m, c in zip(models, cal)]


def prune_aware_kd_search(teachers: Sequence[Model], constraint: AccuracyConstraint, cfg: TrainConfig,
                          data: Sequence[np.ndarray], precision: str = "fp32",
                          calibration: Optional[Sequence] = None, max_steps: int = 32,
                          trainer: Optional[Callable] = None, inherit: bool = True) -> Tuple[SearchReport, List[Model]]:
    """Greedy removal search over a detector made of one or more encoders.

    All members share one architecture; their post-prune zero fractions are
    averaged to choose the removal. ``data[i]`` trains member ``i``;
    ``calibration[i]`` feeds static quantization when ``precision="qint8"``.
    Returns the report and the selected fp32 models.
    """
    teachers = list(teachers)
    if len({t.spec.spec_id for t in teachers}) != 1:
        raise ValueError("all detector members must share one architecture")
    trainer = trainer or distill_train
    report = SearchReport("prune-aware-kd", constraint.threshold)
    deployed = _with_precision(teachers, precision, calibration)
    ev = constraint.evaluate(deployed)
    if not constraint.passes(ev):
        raise ConstraintViolation(f"teacher AUROC {ev.auroc:.4f} is below the threshold {constraint.threshold}")
    report.append(_record(0, teachers, deployed, [], ev, True, precision))
    best, best_idx = teachers, 0
    current, removed = teachers, []
    for step in range(1, max_steps + 1):
        spec = current[0].spec
        fractions = _group_fractions(spec, current)
        student_spec = target = None
        for cand in rank_removal_candidates(spec, fractions):
            try:
                student_spec = build_student_spec(spec, cand)
                target = cand
                break
            except RemovalRejected as exc:
                log.info("removal of %s rejected: %s", cand, exc)
        if student_spec is None:
            break
        students = []
        for i, (t, m) in enumerate(zip(teachers, current)):
            init = None
            if inherit:
                pruned = global_magnitude_prune(spec, m.params, SELECTION_PRUNE_PCT)
                init = inherit_params(student_spec, pruned, cfg.seed + 1000 * step + i)
            students.append(trainer(t, student_spec, data[i], cfg, init))
        removed = removed + [target]
        deployed = _with_precision(students, precision, calibration)
        ev = constraint.evaluate(deployed)
        ok = constraint.passes(ev)
        report.append(_record(step, students, deployed, removed, ev, ok, precision))
        log.info("step %d removed %s auroc %.4f pass=%s", step, target, ev.auroc, ok)
        if not ok:
            break
        best, best_idx = students, len(report.records) - 1
        current = students
    report.select(best_idx)
    return report, best
