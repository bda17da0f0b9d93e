"""Bisection over global sparsity levels under an accuracy constraint."""
from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence, Tuple

from ..metrics import flop_count
from ..nn.model import Model
from .distill import _with_precision
from .prune import global_magnitude_prune
from .report import AccuracyConstraint, SearchRecord, SearchReport

log = logging.getLogger(__name__)


def max_evaluations(resolution_pct: float) -> int:
    return math.ceil(math.log2(100.0 / resolution_pct)) + 1


def bisection_levels(passes, resolution_pct: float, start: float = 50.0) -> List[Tuple[float, bool]]:
    """Sparsity levels visited for a pass/fail oracle ``passes(s)``.

    The first step moves to s + (100 - s)/2 on a pass and s/2 on a fail;
    later steps halve the gap to the nearest level already known to fail
    (above) or pass (below). Stops once that bracket is narrower than the
    resolution.
    """
    if not resolution_pct > 0:
        raise ValueError("resolution_pct must be > 0")
    lo, hi, s = 0.0, 100.0, float(start)
    visited = []
    while hi - lo >= resolution_pct:
        ok = bool(passes(s))
        visited.append((s, ok))
        if ok:
            lo = s
            s = s + (hi - s) / 2
        else:
            hi = s
            s = lo + (s - lo) / 2
    return visited


def binary_sparsity_search(models: Sequence[Model], constraint: AccuracyConstraint,
                           resolution_pct: float = 1.0, precision: str = "fp32",
                           calibration: Optional[Sequence] = None) -> Tuple[SearchReport, List[Model]]:
    """Prune the original models to each candidate level (never cumulatively).

    Selects the highest passing sparsity; if none passes, the unpruned
    models are recorded at 0% and selected.
    """
    models = list(models)
    report = SearchReport("binary-sparsity", constraint.threshold)
    pruned = {}

    def evaluate(s):
        cands = [Model(m.spec, global_magnitude_prune(m.spec, m.params, s)) for m in models]
        deployed = _with_precision(cands, precision, calibration)
        ev = constraint.evaluate(deployed)
        ok = constraint.passes(ev)
        spec = cands[0].spec
        report.append(SearchRecord(
            step=len(report.records), spec_id=spec.spec_id, removed=[], sparsity_pct=float(s),
            dtype=precision, auroc=float(ev.auroc), kl_id=ev.kl_id, kl_ood=ev.kl_ood,
            param_count=sum(m.param_count for m in cands),
            size_bytes=sum(m.size_bytes for m in deployed),
            flops=sum(flop_count(m.spec) for m in cands), passed=ok))
        pruned[s] = cands
        log.info("sparsity %.4f%% auroc %.4f pass=%s", s, ev.auroc, ok)
        return ok

    visited = bisection_levels(evaluate, resolution_pct)
    passing = [i for i, (_, ok) in enumerate(visited) if ok]
    if passing:
        best = max(passing, key=lambda i: visited[i][0])
        report.select(best)
        return report, pruned[visited[best][0]]
    evaluate(0.0)
    report.select(len(report.records) - 1)
    return report, pruned[0.0]
