"""Seeded synthetic stand-ins for the brightness and optical-flow datasets.

Brightness: procedural road scenes (sky/ground gradient, converging lane
markings, random blobs) scaled by a per-partition luminance multiplier.
Low and medium are in-distribution, high is OOD.

Flow: windows of six horizontal/vertical flow fields from smooth ego-motion.
OOD windows add vertical high-magnitude streaks imitating precipitation.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

LUMINANCE = {"low": 0.4, "medium": 0.7, "high": 1.3}
ID_PARTITIONS = ("low", "medium")
FRAMES_PER_WINDOW = 6
# streak amplitude: a few times the typical ego-motion magnitude (~0.1)
STREAK_LO, STREAK_HI = 0.4, 0.8


@dataclass
class BrightnessDataset:
    images: np.ndarray          # (N, 3, H, W) float32 in [0, 1]
    partition: np.ndarray       # (N,) str: low | medium | high
    split: np.ndarray           # (N,) str: train | calibration | test
    seed: int = 0

    def select(self, split: str, partitions=None) -> np.ndarray:
        m = self.split == split
        if partitions is not None:
            m &= np.isin(self.partition, list(partitions))
        return self.images[m]

    @property
    def is_ood(self) -> np.ndarray:
        return self.partition == "high"


@dataclass
class FlowDataset:
    horizontal: np.ndarray      # (N, 6, H, W)
    vertical: np.ndarray        # (N, 6, H, W)
    label: np.ndarray           # (N,) str: id | ood
    split: np.ndarray           # (N,) str: train | test
    seed: int = 0

    def select(self, split: str, label=None):
        m = self.split == split
        if label is not None:
            m &= self.label == label
        return self.horizontal[m], self.vertical[m]


def _check_size(size: int):
    if size not in (32, 224):
        raise ValueError(f"size must be 32 or 224, got {size}")


def render_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """One base scene with values in [0, 1] before the luminance multiplier."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    horizon = rng.uniform(0.35, 0.55)
    sky = np.array([0.55, 0.7, 0.95]) * rng.uniform(0.8, 1.0)
    ground = np.array([0.45, 0.42, 0.4]) * rng.uniform(0.7, 1.0)
    img = np.where(yy[None] < horizon,
                   sky[:, None, None] * (0.7 + 0.3 * yy[None] / horizon),
                   ground[:, None, None] * (0.8 + 0.2 * (1 - yy[None])))
    vx = rng.uniform(0.35, 0.65)
    below = np.clip((yy - horizon) / (1 - horizon), 0, 1)
    for side, colour in ((-1, (0.95, 0.95, 0.9)), (1, (0.95, 0.85, 0.2))):
        spread = rng.uniform(0.3, 0.45)
        centre = vx + side * spread * below
        lane = (np.abs(xx - centre) < 0.012 + 0.03 * below) & (yy > horizon)
        img[:, lane] = np.array(colour)[:, None]
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.03, 0.12)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        img[:, blob] = rng.uniform(0.1, 0.9, 3)[:, None]
    return img


def apply_luminance(scene: np.ndarray, multiplier: float) -> np.ndarray:
    return np.clip(scene * multiplier, 0.0, 1.0)


def _alternating_runs(rng, low_idx, med_idx):
    """Interleave two index lists in runs of 2-5 frames."""
    queues = [list(low_idx), list(med_idx)]
    out, turn = [], int(rng.integers(2))
    while queues[0] or queues[1]:
        if not queues[turn]:
            turn = 1 - turn
        take = int(rng.integers(2, 6))
        out.extend(queues[turn][:take])
        del queues[turn][:take]
        turn = 1 - turn
    return out


def gen_brightness(seed: int, n_per_partition: int, size: int = 32) -> BrightnessDataset:
    """Low/medium/high brightness frames.

    Each ID partition contributes ``n_per_partition`` frames split 2:1:1
    into train, calibration and test (train:calibration = 2:1). The high
    partition contributes as many test frames as the ID test set so the test
    split is balanced. Calibration frames alternate between low and medium
    in short runs.
    """
    _check_size(size)
    if n_per_partition < 4:
        raise ValueError("n_per_partition must be >= 4")
    rng = np.random.default_rng([seed, 11])
    n_train = n_per_partition // 2
    n_cal = (n_per_partition - n_train) // 2
    n_test = n_per_partition - n_train - n_cal
    n_high = 2 * n_test
    images, parts, splits = [], [], []
    for part, count in (("low", n_per_partition), ("medium", n_per_partition), ("high", n_high)):
        for i in range(count):
            srng = np.random.default_rng([seed, 13, list(LUMINANCE).index(part), i])
            mult = LUMINANCE[part] * srng.uniform(0.85, 1.15)
            img = apply_luminance(render_scene(srng, size), mult)
            img = np.clip(img + srng.normal(0, 0.02, img.shape), 0, 1)
            images.append(img.astype(np.float32))
            parts.append(part)
            if part == "high":
                splits.append("test")
            else:
                splits.append("train" if i < n_train else "calibration" if i < n_train + n_cal else "test")
    images = np.stack(images)
    parts, splits = np.array(parts), np.array(splits)
    # calibration frames: alternating low/medium runs; other splits shuffled
    order = []
    for sp in ("train", "calibration", "test"):
        idx = np.flatnonzero(splits == sp)
        if sp == "calibration":
            order += _alternating_runs(rng, idx[parts[idx] == "low"], idx[parts[idx] == "medium"])
        else:
            order += list(rng.permutation(idx))
    order = np.array(order)
    return BrightnessDataset(images[order], parts[order], splits[order], seed)


def _ego_flow(rng, size):
    """Six frames of smooth affine flow (translation, rotation, zoom)."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    base_t = rng.normal(0, 0.15, 2)
    base_r = rng.normal(0, 0.05)
    base_z = rng.uniform(0.0, 0.15)
    h, v = [], []
    for _ in range(FRAMES_PER_WINDOW):
        tx, ty = base_t + rng.normal(0, 0.03, 2)
        rot = base_r + rng.normal(0, 0.01)
        zoom = base_z + rng.normal(0, 0.01)
        h.append(tx - rot * yy + zoom * xx)
        v.append(ty + rot * xx + zoom * yy)
    h, v = np.stack(h), np.stack(v)
    return h + rng.normal(0, 0.01, h.shape), v + rng.normal(0, 0.01, v.shape)


def _add_streaks(rng, h, v):
    """Vertical streak impulses covering 5-15% of pixels in every frame."""
    _, size, _ = v.shape
    for f in range(FRAMES_PER_WINDOW):
        frac = rng.uniform(0.05, 0.15)
        hit = np.zeros((size, size), dtype=bool)
        while hit.mean() < frac:
            length = int(rng.integers(max(2, size // 12), max(3, size // 4)))
            r0 = int(rng.integers(0, size))
            c = int(rng.integers(0, size))
            hit[r0:r0 + length, c] = True
        v[f][hit] += rng.uniform(STREAK_LO, STREAK_HI)
        h[f][hit] += rng.normal(0, 0.2, hit.sum())
    return h, v


def gen_flows(seed: int, n_windows: int, size: int = 32) -> FlowDataset:
    """``n_windows`` ID training windows plus ``n_windows`` test windows, half OOD."""
    _check_size(size)
    if n_windows < 2:
        raise ValueError("n_windows must be >= 2")
    hs, vs, labels, splits = [], [], [], []
    n_ood = n_windows // 2
    for split, count in (("train", n_windows), ("test", n_windows)):
        for i in range(count):
            rng = np.random.default_rng([seed, 17, split == "test", i])
            h, v = _ego_flow(rng, size)
            ood = split == "test" and i % 2 == 1 and (i // 2) < n_ood
            if ood:
                h, v = _add_streaks(rng, h, v)
            hs.append(h.astype(np.float32))
            vs.append(v.astype(np.float32))
            labels.append("ood" if ood else "id")
            splits.append(split)
    return FlowDataset(np.stack(hs), np.stack(vs), np.array(labels), np.array(splits), seed)


# ---------------------------------------------------------------- persistence

def _write_arrays(root: Path, arrays: Dict[str, np.ndarray], meta: dict):
    root.mkdir(parents=True, exist_ok=True)
    index = dict(meta, arrays={})
    for name, arr in arrays.items():
        if arr.dtype.kind in "US":
            index[name] = arr.tolist()
            continue
        arr = np.ascontiguousarray(arr, dtype="<f4")
        (root / f"{name}.f32").write_bytes(arr.tobytes())
        index["arrays"][name] = list(arr.shape)
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def _read_arrays(root: Path):
    index = json.loads((root / "index.json").read_text())
    arrays = {}
    for name, shape in index["arrays"].items():
        raw = (root / f"{name}.f32").read_bytes()
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return index, arrays


def save_dataset(ds, path) -> None:
    root = Path(path)
    if isinstance(ds, BrightnessDataset):
        _write_arrays(root, {"images": ds.images, "partition": ds.partition, "split": ds.split},
                      {"kind": "brightness", "seed": ds.seed})
    else:
        _write_arrays(root, {"horizontal": ds.horizontal, "vertical": ds.vertical,
                             "label": ds.label, "split": ds.split},
                      {"kind": "flow", "seed": ds.seed})


def load_dataset(path):
    index, arrays = _read_arrays(Path(path))
    if index["kind"] == "brightness":
        return BrightnessDataset(arrays["images"], np.array(index["partition"]),
                                 np.array(index["split"]), index["seed"])
    return FlowDataset(arrays["horizontal"], arrays["vertical"], np.array(index["label"]),
                       np.array(index["split"]), index["seed"])
