"""Detection metrics, FLOP accounting and relative timing."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .nn.layers import LatentHead
from .nn.spec import VaeSpec, _chain


@dataclass
class MetricReport:
    auroc: float
    tpr: float
    fpr: float
    threshold: float
    n_id: int
    n_ood: int

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _pair(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("AUROC needs at least one ID and one OOD score")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney estimate of P(OOD score > ID score), ties counted half."""
    a, b = _pair(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


def tpr_fpr(id_scores, ood_scores, threshold: float) -> Tuple[float, float]:
    """Positive means strictly above ``threshold``."""
    a, b = _pair(id_scores, ood_scores)
    return float(np.mean(b > threshold)), float(np.mean(a > threshold))


def metric_report(id_scores, ood_scores, threshold: float) -> MetricReport:
    a, b = _pair(id_scores, ood_scores)
    tpr, fpr = tpr_fpr(a, b, threshold)
    return MetricReport(auroc(a, b), tpr, fpr, float(threshold), int(a.size), int(b.size))


def roc_points(id_scores, ood_scores):
    """(threshold, fpr, tpr) rows for every distinct score, descending."""
    a, b = _pair(id_scores, ood_scores)
    rows = [(float("inf"), 0.0, 0.0)]
    for t in np.unique(np.concatenate([a, b]))[::-1]:
        tpr, fpr = tpr_fpr(a, b, t - 1e-12 * max(1.0, abs(t)))
        rows.append((float(t), fpr, tpr))
    return rows


def write_roc_csv(path, id_scores, ood_scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        w.writerows(roc_points(id_scores, ood_scores))


def layer_flops(spec: VaeSpec, part: str = "encoder"):
    """Per-layer FLOPs for one sample, as (layer name, flops) pairs."""
    if part == "encoder":
        layers, shape = spec.encoder, tuple(spec.input_shape)
    elif part == "decoder":
        layers, shape = spec.decoder, (spec.latent_dim,)
    else:
        raise ValueError("part must be 'encoder' or 'decoder'")
    out = []
    for layer, out_shape in zip(layers, _chain(layers, shape)):
        out.append((layer.name, int(layer.flops(shape))))
        shape = out_shape
    return out


def flop_count(spec: VaeSpec, part: str = "encoder") -> int:
    """FLOPs per sample: conv 2*k^2*Cin*Cout*Hout*Wout, linear 2*in*out,
    norm/activation/pooling proportional to element counts.

    A length-n dot product plus bias is exactly 2n operations; without a
    bias it is 2n - 1, so bias-free layers count one add fewer per output.
    Defaults to the encoder, the part that runs at test time.
    """
    if part == "all":
        return flop_count(spec, "encoder") + flop_count(spec, "decoder")
    return sum(f for _, f in layer_flops(spec, part))


def benchmark_forward(model, batch: np.ndarray, n_runs: int = 30, warmup: int = 3
                      ) -> Tuple[float, float]:
    """Mean and std wall time (seconds) of encoder forward passes on one thread."""
    if n_runs < 10:
        raise ValueError("n_runs must be >= 10")
    from threadpoolctl import threadpool_limits

    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            model.encode(batch, batch_size=len(batch))
        for _ in range(n_runs):
            t0 = time.perf_counter()
            model.encode(batch, batch_size=len(batch))
            times.append(time.perf_counter() - t0)
    return float(np.mean(times)), float(np.std(times))
