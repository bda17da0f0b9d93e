"""
Streaming brightness detector
=============================

Train a small beta-VAE on low and medium brightness frames, calibrate the
conformal detector, then feed it a stream that turns bright halfway through.
"""

import numpy as np

from vaecompress.datasynth import gen_brightness
from vaecompress.experiments import BrightnessBench
from vaecompress.nn.model import Model
from vaecompress.nn.spec import preset
from vaecompress.ood import beta_vae_detect
from vaecompress.train import TrainConfig, train_vae

###############################################################################
# Synthetic road scenes under three lighting levels. Only the low and medium
# frames are used for training and calibration.
ds = gen_brightness(seed=0, n_per_partition=240)
print("splits:", {s: int((ds.split == s).sum()) for s in ("train", "calibration", "test")})

###############################################################################
# Thirty epochs take a few seconds on one core.
spec = preset("desk-beta-vae")
params, history = train_vae(spec, ds.select("train"), TrainConfig(epochs=30, seed=1))
model = Model(spec, params)
print("final loss (total, recon, kl):", np.round(history[-1], 3))

###############################################################################
# Calibration picks the reasoner dimensions and stores their KL scores; the
# cross-validation half of the test split fixes the CUSUM drift and threshold.
bench = BrightnessBench.from_dataset(ds)
state = bench.detector(model)
print("reasoners:", state.reasoner_dims, "delta:", state.delta, "tau: %.3f" % state.tau)

###############################################################################
# Twenty in-distribution frames followed by twenty bright ones.
stream = np.concatenate([bench.test_id[:20], bench.test_ood[:20]])
for i, r in enumerate(beta_vae_detect(model, state.reset(), stream)):
    if i % 4 == 3:
        print(f"frame {i:2d}  p={r.p:.3f}  cusum={r.cusum:7.3f}  {'OOD' if r.is_ood else ''}")

###############################################################################
# Test-half AUROC over per-frame CUSUM values.
print("AUROC: %.3f" % bench([model]).auroc)
