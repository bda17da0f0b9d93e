"""
How much pruning does the detector tolerate?
============================================

Global magnitude pruning removes the smallest weights across the whole
network. This sweep tracks detection AUROC and latent KL as sparsity grows.
"""

from vaecompress.compress.prune import global_magnitude_prune, measured_sparsity
from vaecompress.datasynth import gen_brightness
from vaecompress.experiments import BrightnessBench
from vaecompress.nn.model import Model
from vaecompress.nn.spec import preset
from vaecompress.train import TrainConfig, train_vae

ds = gen_brightness(seed=0, n_per_partition=240)
spec = preset("desk-beta-vae")
params, _ = train_vae(spec, ds.select("train"), TrainConfig(epochs=30, seed=1))
bench = BrightnessBench.from_dataset(ds)

###############################################################################
# Each level prunes the trained weights from scratch, so levels are independent.
print(" target  measured  auroc   kl_id   kl_ood")
for pct in (0, 20, 40, 50, 60, 70, 80, 90):
    pruned = global_magnitude_prune(spec, params, pct)
    ev = bench([Model(spec, pruned)])
    print(f"{pct:6d}%  {measured_sparsity(spec, pruned):7.2f}%  {ev.auroc:.3f}  {ev.kl_id:6.2f}  {ev.kl_ood:7.2f}")
