"""Latent-space OOD statistics and the two detector pipelines.

The beta-VAE detector turns the summed KL of selected "reasoner" latent
dimensions into an inductive conformal p-value, feeds it to a power
martingale and runs CUSUM on the log-martingale increments. The optical
flow detector thresholds the summed KL of two encoders.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import tpr_fpr

DEFAULT_EPSILON = 0.92


class DetectorError(RuntimeError):
    pass


def latent_kl_per_dim(mu, logvar) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, 1)) for every latent dimension."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return 0.5 * (mu ** 2 + np.expm1(logvar) - logvar)


def select_reasoners(calib_kl: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Top-``k`` dimensions by variance of their KL across calibration samples.

    ``calib_kl`` holds one (n_i, latent_dim) KL array per partition; the
    variance is taken over all samples pooled. Ties keep the lower index.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    parts = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in calib_kl]
    if len(parts) < 2:
        raise ValueError("need at least two calibration partitions")
    pooled = np.concatenate(parts)
    if k > pooled.shape[1]:
        raise ValueError(f"k={k} exceeds latent_dim={pooled.shape[1]}")
    var = pooled.var(axis=0)
    return np.array(sorted(range(len(var)), key=lambda i: (-var[i], i))[:k])


def icp_pvalue(calib_scores, test_score: float) -> float:
    """(#{calibration >= test} + 1) / (N + 1)."""
    calib = np.asarray(calib_scores, dtype=np.float64)
    if calib.size == 0:
        raise DetectorError("empty calibration set")
    return float((np.count_nonzero(calib >= test_score) + 1) / (calib.size + 1))


def icp_pvalues(sorted_calib: np.ndarray, test_scores) -> np.ndarray:
    """Vectorised :func:`icp_pvalue`; ``sorted_calib`` must be ascending."""
    ge = sorted_calib.size - np.searchsorted(sorted_calib, np.asarray(test_scores, np.float64), side="left")
    return (ge + 1) / (sorted_calib.size + 1)


def martingale_increment(p: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """log of the power-martingale betting factor ``epsilon * p**(epsilon - 1)``."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if not 0 < p <= 1:
        raise ValueError(f"p-value must lie in (0, 1], got {p}")
    return math.log(epsilon) + (epsilon - 1.0) * math.log(p)


def martingale_update(log_m: float, p: float, epsilon: float = DEFAULT_EPSILON) -> float:
    return log_m + martingale_increment(p, epsilon)


def cusum_update(s: float, z: float, delta: float) -> float:
    return max(0.0, s + z - delta)


@dataclass
class DetectorState:
    reasoner_dims: np.ndarray
    calib_scores: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    log_martingale: float = 0.0
    cusum: float = 0.0
    delta: float = 0.0
    tau: float = 1.0

    def reset(self) -> "DetectorState":
        return replace(self, log_martingale=0.0, cusum=0.0)

    def score(self, kl: np.ndarray) -> np.ndarray:
        """Nonconformity: summed KL over the reasoner dimensions."""
        return np.atleast_2d(kl)[:, self.reasoner_dims].sum(axis=1)


@dataclass
class FrameResult:
    kl_sum: float
    p: float
    log_m: float
    cusum: float
    is_ood: bool


def calibrate(encoder, calib_set: np.ndarray, partitions: Sequence, k: int = 3,
              epsilon: float = DEFAULT_EPSILON, delta: float = 0.0, tau: float = 1.0) -> DetectorState:
    """Select reasoners and store sorted calibration nonconformity scores.

    ``encoder`` is anything with ``encode(x) -> (mu, logvar)``;
    ``partitions`` labels each calibration frame (e.g. low / medium).
    """
    calib_set = np.asarray(calib_set)
    if len(calib_set) == 0:
        raise DetectorError("empty calibration set")
    partitions = np.asarray(partitions)
    mu, lv = encoder.encode(calib_set)
    kl = latent_kl_per_dim(mu, lv)
    groups = [kl[partitions == p] for p in np.unique(partitions)]
    dims = select_reasoners(groups, k)
    scores = np.sort(kl[:, dims].sum(axis=1))
    return DetectorState(dims, scores, epsilon=epsilon, delta=delta, tau=tau)


def detect_scores(state: DetectorState, scores: Iterable[float]) -> List[FrameResult]:
    """Run ICP -> martingale -> CUSUM over a stream of nonconformity scores."""
    if state.calib_scores is None or len(state.calib_scores) == 0:
        raise DetectorError("detector is not calibrated")
    out = []
    log_m, s = state.log_martingale, state.cusum
    for score in scores:
        p = icp_pvalue(state.calib_scores, score)
        z = martingale_increment(p, state.epsilon)
        log_m += z
        s = cusum_update(s, z, state.delta)
        out.append(FrameResult(float(score), p, log_m, s, s > state.tau))
    state.log_martingale, state.cusum = log_m, s
    return out


def cusum_trace(state: DetectorState, scores) -> np.ndarray:
    """CUSUM values for one stream starting from a fresh state (vectorised p-values)."""
    p = icp_pvalues(state.calib_scores, scores)
    z = math.log(state.epsilon) + (state.epsilon - 1.0) * np.log(p)
    out = np.empty(len(z))
    s = 0.0
    for i, zi in enumerate(z):
        s = max(0.0, s + zi - state.delta)
        out[i] = s
    return out


def beta_vae_detect(encoder, state: DetectorState, frame_stream) -> List[FrameResult]:
    """Per-frame detection; ``state`` evolves (martingale and CUSUM carry over)."""
    if state.calib_scores is None or len(state.calib_scores) == 0:
        raise DetectorError("detector is not calibrated")
    frames = np.asarray(frame_stream)
    mu, lv = encoder.encode(frames)
    return detect_scores(state, state.score(latent_kl_per_dim(mu, lv)))


def of_score(mu_h, logvar_h, mu_v, logvar_v) -> np.ndarray:
    return (latent_kl_per_dim(mu_h, logvar_h).sum(axis=-1)
            + latent_kl_per_dim(mu_v, logvar_v).sum(axis=-1))


def of_detect(encoder_h, encoder_v, window, tau: float):
    """Summed KL of both flow encoders; OOD when strictly above ``tau``.

    ``window`` is a (horizontal, vertical) pair of (6, H, W) arrays or of
    (N, 6, H, W) batches. Returns (score, is_ood) with matching batch shape.
    """
    h, v = window
    h, v = np.asarray(h), np.asarray(v)
    single = h.ndim == 3
    if single:
        h, v = h[None], v[None]
    if h.shape != v.shape or h.shape[1] != 6:
        raise ValueError(f"expected two (N, 6, H, W) flow windows, got {h.shape} and {v.shape}")
    score = of_score(*encoder_h.encode(h), *encoder_v.encode(v))
    if single:
        return float(score[0]), bool(score[0] > tau)
    return score, score > tau


def fit_operating_point(state: DetectorState, id_streams: Sequence[np.ndarray],
                        ood_streams: Sequence[np.ndarray], max_fpr: float = 0.25,
                        deltas: Optional[Sequence[float]] = None) -> Tuple[float, float, float]:
    """Choose (delta, tau) maximising TPR subject to FPR <= ``max_fpr``.

    Streams are per-frame nonconformity scores on a cross-validation split;
    every frame of an OOD stream is a positive. Returns (delta, tau, tpr).
    Ties in TPR keep the smaller delta.
    """
    if deltas is None:
        deltas = np.round(np.linspace(0.0, 0.2, 11), 3)
    best = None
    for d in deltas:
        st = replace(state, delta=float(d))
        id_sc = np.concatenate([cusum_trace(st, s) for s in id_streams])
        ood_sc = np.concatenate([cusum_trace(st, s) for s in ood_streams])
        cands = np.unique(np.concatenate([id_sc, [0.0]]))
        tau = None
        for t in cands:
            if tpr_fpr(id_sc, ood_sc, t)[1] <= max_fpr:
                tau = float(t)
                break
        tpr = tpr_fpr(id_sc, ood_sc, tau)[0]
        if best is None or tpr > best[2]:
            best = (float(d), tau, float(tpr))
    return best


def write_trace_csv(path, results: Sequence[FrameResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "kl_sum", "p", "log_M", "cusum", "is_ood"])
        for i, r in enumerate(results):
            w.writerow([i, repr(r.kl_sum), repr(r.p), repr(r.log_m), repr(r.cusum), int(r.is_ood)])
