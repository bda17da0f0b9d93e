"""
Compressing the optical-flow detector
=====================================

Run the whole compression pipeline on the two-encoder optical-flow detector
and read back the distillation and sparsity search reports.
"""

import json
import tempfile
from pathlib import Path

from vaecompress.compress.report import SearchReport
from vaecompress.pipeline import Manifest, run_manifest

manifest = Manifest.from_dict({
    "preset": "desk-of", "seed": 0, "name": "demo",
    "constraint": {"metric": "auroc", "threshold": 0.85},
    "artifact_dir": tempfile.mkdtemp(prefix="vaec-demo-"),
    "stages": [
        {"stage": "synth", "n": 400},
        {"stage": "train", "epochs": 30, "learning_rate": 1e-4},
        {"stage": "prune", "sparsity": 90},
        {"stage": "distill-search"},
        {"stage": "sparsity-search", "resolution": 1.0},
        {"stage": "target-aware"},
    ],
})

###############################################################################
# About a minute on one core.
run = run_manifest(manifest)
root, h = run.root, manifest.digest

###############################################################################
# Heavy pruning wipes out the latent statistics the detector relies on.
print("90% pruned:", json.loads((root / f"prune90-{h}.json").read_text()))

###############################################################################
# Each distillation step removes one encoder layer. The search stops at the
# first student that misses the AUROC constraint.
for name in ("kd-report", "sparsity-report", "kd-report-qint8"):
    rep = SearchReport.from_json((root / f"{name}-{h}.json").read_text())
    print(f"\n{name}")
    for r in rep.records:
        mark = "*" if r.selected else " "
        print(f" {mark} step {r.step}  removed {','.join(r.removed) or '-':28s} sparsity {r.sparsity_pct:7.3f}"
              f"  params {r.param_count:7d}  auroc {r.auroc:.3f}  {'pass' if r.passed else 'fail'}")

print("\nartifacts in", root)
