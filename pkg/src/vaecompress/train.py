"""beta-VAE training: ELBO, reparameterisation, Adam and QAT hooks."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .nn.engine import backward_decoder, backward_encoder, forward_decoder, forward_encoder
from .nn.model import Model
from .nn.params import ParamStore, init_params, is_learnable
from .nn.spec import VaeSpec
from .tensor import QMAX, QMIN, QuantParams, fake_quantize

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, params: ParamStore, history):
        super().__init__(msg)
        self.params = params
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-4
    batch_size: int = 32
    beta: Optional[float] = None  # None -> the spec's beta
    seed: int = 0
    qat: bool = False
    kd_lambda: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kd_lambda < 0:
            raise ValueError("kd_lambda must be >= 0")


def kl_terms(mu, logvar):
    return 0.5 * (mu ** 2 + np.exp(logvar) - logvar - 1.0)


def elbo_loss(x, x_hat, mu, logvar, beta: float) -> Tuple[float, float, float]:
    """Returns (total, recon, kl); recon is per-sample SSE and kl per-sample
    Gaussian KL to N(0, I), both averaged over the batch."""
    for arr, nm in ((x, "x"), (x_hat, "x_hat"), (mu, "mu"), (logvar, "logvar")):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {nm}")
    if np.shape(x) != np.shape(x_hat):
        raise ValueError(f"x {np.shape(x)} and x_hat {np.shape(x_hat)} differ")
    n = len(x)
    diff = (np.asarray(x_hat, np.float64) - np.asarray(x, np.float64)).reshape(n, -1)
    recon = float((diff ** 2).sum() / n)
    kl = float(kl_terms(np.asarray(mu, np.float64), np.asarray(logvar, np.float64)).sum() / n)
    return recon + beta * kl, recon, kl


def reparameterize(mu, logvar, noise):
    if np.shape(noise) != np.shape(mu):
        raise ValueError("noise must have the shape of mu")
    return mu + np.exp(0.5 * logvar) * noise


def sample_noise(seed: int, epoch: int, indices, latent_dim: int, dtype=np.float32):
    """Standard normals keyed by (seed, epoch, sample index).

    Keying by sample index rather than batch position keeps the stream fixed
    when the batch size changes.
    """
    return np.stack([np.random.default_rng([seed, 7, epoch, int(i)]).standard_normal(latent_dim)
                     for i in indices]).astype(dtype)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place. Pruned entries stay zero."""
    state.t += 1
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for key, g in grads.items():
        p = params.tensors[key]
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        mask = params.masks.get(key)
        if mask is not None:
            p[~mask] = 0
    return state


def fake_quant(x, qp: QuantParams):
    """Quantize-dequantize forward used for QAT."""
    return fake_quantize(np.asarray(x, dtype=np.float32), qp)


def fake_quant_grad(dy, x, qp: QuantParams):
    """Straight-through estimator: pass gradients inside the representable range."""
    lo = (QMIN - qp.zero_point) * qp.scale
    hi = (QMAX - qp.zero_point) * qp.scale
    x = np.asarray(x)
    return np.where((x >= lo) & (x <= hi), dy, 0.0)


def _step(model: Model, xb, noise, beta, cfg: TrainConfig, teacher_mu=None):
    spec, params = model.spec, model.params
    quant = "qat" if cfg.qat else None
    n = len(xb)
    enc = forward_encoder(spec, params, xb, training=True, quant=quant)
    mu, lv = enc.mu, enc.logvar
    std = np.exp(0.5 * lv)
    z = mu + std * noise
    dec = forward_decoder(spec, params, z, enc.pool_indices, training=True, quant=quant)
    total, recon, kl = elbo_loss(xb, dec.x_hat, mu, lv, beta)
    grads: Dict[str, np.ndarray] = {}
    dx_hat = (2.0 / n) * (dec.x_hat - xb)
    dz = backward_decoder(spec, params, dec.tape, dx_hat.astype(xb.dtype), grads)
    dmu = dz + (beta / n) * mu
    dlv = dz * noise * 0.5 * std + (beta / n) * 0.5 * (np.exp(lv) - 1.0)
    if teacher_mu is not None and cfg.kd_lambda > 0:
        diff = mu - teacher_mu
        total += cfg.kd_lambda * float(np.mean(diff.astype(np.float64) ** 2))
        dmu = dmu + cfg.kd_lambda * 2.0 * diff / diff.size
    backward_encoder(spec, params, enc.tape, dmu.astype(xb.dtype), dlv.astype(xb.dtype), grads)
    return grads, (total, recon, kl)


def train_vae(spec: VaeSpec, data: np.ndarray, cfg: TrainConfig, params: Optional[ParamStore] = None,
              teacher: Optional[Model] = None) -> Tuple[ParamStore, List[Tuple[float, float, float]]]:
    """Train with Adam on the ELBO (plus latent distillation when a teacher is given).

    Deterministic for a fixed ``cfg.seed``: the batch order and the
    reparameterisation noise are both pure functions of the seed.
    Returns the trained parameters and per-epoch mean (total, recon, kl).
    """
    data = np.asarray(data, dtype=np.float32)
    if len(data) == 0:
        raise ValueError("training data is empty")
    if params is None:
        params = init_params(spec, cfg.seed)
    if cfg.epochs == 0:
        return params, []
    if params.dtype != "fp32":
        raise ValueError("training requires an fp32 parameter store")
    beta = spec.beta if cfg.beta is None else cfg.beta
    params = params.copy()
    params.apply_masks()
    model = Model(spec, params)
    state = AdamState()
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
        sums = np.zeros(3)
        snapshot = params.copy()
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = data[idx]
            noise = sample_noise(cfg.seed, epoch, idx, spec.latent_dim)
            tmu = None
            if teacher is not None and cfg.kd_lambda > 0:
                tmu = teacher.encode(xb)[0].astype(np.float32)
            try:
                grads, losses = _step(model, xb, noise, beta, cfg, tmu)
            except (ValueError, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", snapshot, history) from exc
            if not all(np.isfinite(losses)):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss", snapshot, history)
            adam_step(params, grads, state, cfg.learning_rate)
            sums += np.array(losses) * len(idx)
        history.append(tuple(float(v) for v in sums / n))
        log.debug("epoch %d total %.4f recon %.4f kl %.4f", epoch, *history[-1])
    return params, history


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "recon", "kl"])
        for i, (t, r, k) in enumerate(history):
            w.writerow([i, repr(t), repr(r), repr(k)])
