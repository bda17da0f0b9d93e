"""Evaluation benches that turn a trained detector into AUROC and mean-KL numbers.

Each bench owns a cross-validation half and a test half of a dataset's test
split. The cross-validation half fits operating points (CUSUM drift and
threshold, or the KL threshold); the test half is scored.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .compress.report import Evaluation
from .datasynth import ID_PARTITIONS, BrightnessDataset, FlowDataset
from .metrics import auroc, tpr_fpr
from .ood import (DetectorState, calibrate, cusum_trace, fit_operating_point, latent_kl_per_dim,
                  of_score)

STREAM_LEN = 20
MAX_FPR = 0.25


def streams(scores, length: int = STREAM_LEN) -> List[np.ndarray]:
    scores = np.asarray(scores)
    return [scores[i:i + length] for i in range(0, len(scores), length)]


def _halves(x):
    return x[0::2], x[1::2]


@dataclass
class BrightnessBench:
    calib_images: np.ndarray
    calib_partitions: np.ndarray
    cv_id: np.ndarray
    cv_ood: np.ndarray
    test_id: np.ndarray
    test_ood: np.ndarray
    k: int = 3
    stream_len: int = STREAM_LEN

    @classmethod
    def from_dataset(cls, ds: BrightnessDataset, k: int = 3) -> "BrightnessBench":
        cal = ds.split == "calibration"
        test_id = ds.select("test", ID_PARTITIONS)
        test_ood = ds.select("test", ["high"])
        (cv_id, te_id), (cv_ood, te_ood) = _halves(test_id), _halves(test_ood)
        return cls(ds.images[cal], ds.partition[cal], cv_id, cv_ood, te_id, te_ood, k=k)

    def detector(self, model) -> DetectorState:
        """Calibrated state with (delta, tau) fitted on the cross-validation half."""
        state = calibrate(model, self.calib_images, self.calib_partitions, k=self.k)
        id_sc = state.score(latent_kl_per_dim(*model.encode(self.cv_id)))
        ood_sc = state.score(latent_kl_per_dim(*model.encode(self.cv_ood)))
        delta, tau, _ = fit_operating_point(state, streams(id_sc, self.stream_len),
                                            streams(ood_sc, self.stream_len), max_fpr=MAX_FPR)
        state.delta, state.tau = delta, tau
        return state

    def frame_scores(self, model, state: DetectorState, frames) -> np.ndarray:
        """Per-frame CUSUM values over fresh-state streams."""
        sc = state.score(latent_kl_per_dim(*model.encode(frames)))
        return np.concatenate([cusum_trace(state, s) for s in streams(sc, self.stream_len)])

    def evaluate(self, models: Sequence) -> Evaluation:
        model = models[0]
        state = self.detector(model)
        a = self.frame_scores(model, state, self.test_id)
        b = self.frame_scores(model, state, self.test_ood)
        kl_id = latent_kl_per_dim(*model.encode(self.test_id)).sum(axis=1).mean()
        kl_ood = latent_kl_per_dim(*model.encode(self.test_ood)).sum(axis=1).mean()
        return Evaluation(auroc(a, b), float(kl_id), float(kl_ood))

    __call__ = evaluate


@dataclass
class FlowBench:
    cv_h: np.ndarray
    cv_v: np.ndarray
    cv_ood: np.ndarray
    test_h: np.ndarray
    test_v: np.ndarray
    test_ood: np.ndarray

    @classmethod
    def from_dataset(cls, ds: FlowDataset) -> "FlowBench":
        t = ds.split == "test"
        h, v, ood = ds.horizontal[t], ds.vertical[t], ds.label[t] == "ood"
        half = len(h) // 2
        # test windows alternate id/ood, so an even cut keeps both halves balanced
        half -= half % 2
        return cls(h[:half], v[:half], ood[:half], h[half:], v[half:], ood[half:])

    @staticmethod
    def scores(models, h, v) -> np.ndarray:
        mh, mv = models
        return of_score(*mh.encode(h), *mv.encode(v))

    def fit_tau(self, models) -> float:
        """Smallest threshold with cross-validation FPR <= MAX_FPR."""
        sc = self.scores(models, self.cv_h, self.cv_v)
        id_sc, ood_sc = sc[~self.cv_ood], sc[self.cv_ood]
        for t in np.unique(np.concatenate([id_sc, [0.0]])):
            if tpr_fpr(id_sc, ood_sc, t)[1] <= MAX_FPR:
                return float(t)
        return float(id_sc.max())

    def evaluate(self, models: Sequence) -> Evaluation:
        sc = self.scores(models, self.test_h, self.test_v)
        a, b = sc[~self.test_ood], sc[self.test_ood]
        return Evaluation(auroc(a, b), float(a.mean()), float(b.mean()))

    __call__ = evaluate
