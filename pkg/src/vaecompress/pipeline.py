"""JSON experiment manifests and the staged compression pipeline.

A manifest names a preset, a seed, a constraint and an ordered list of
stages. Every artifact file name carries the first 12 hex digits of the
manifest hash, and every stage draws its randomness from a sub-seed derived
from (manifest seed, stage name), so a rerun of the same manifest rewrites
byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .compress.distill import prune_aware_kd_search
from .compress.prune import global_magnitude_prune, measured_sparsity
from .compress.quantize import apply_precision, dynamic_quantize, static_quantize
from .compress.report import AccuracyConstraint
from .compress.sparsity import binary_sparsity_search
from .datasynth import FlowDataset, gen_brightness, gen_flows, load_dataset, save_dataset
from .experiments import BrightnessBench, FlowBench
from .metrics import benchmark_forward, metric_report, write_roc_csv
from .nn.model import Model
from .nn.spec import PRESETS, preset
from .ood import beta_vae_detect, write_trace_csv
from .train import TrainConfig, train_vae, write_history_csv

log = logging.getLogger(__name__)

ARTIFACT_ENV = "VAEC_ARTIFACT_ROOT"
STAGES = ("synth", "train", "calibrate", "quantize", "prune", "distill-search",
          "sparsity-search", "target-aware", "eval", "bench")
# stages that need trained models
_NEEDS_MODEL = set(STAGES) - {"synth", "train"}


class ManifestError(ValueError):
    pass


class StageFailed(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, artifact_dir: Path):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause, self.artifact_dir = stage, cause, artifact_dir


@dataclass
class Manifest:
    preset: str
    seed: int = 0
    stages: List[dict] = field(default_factory=list)
    artifact_dir: str = "artifacts"
    constraint: dict = field(default_factory=lambda: {"metric": "auroc", "threshold": 0.9})
    name: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        unknown = set(d) - {"preset", "seed", "stages", "artifact_dir", "constraint", "name"}
        if unknown:
            raise ManifestError(f"unknown manifest keys {sorted(unknown)}")
        if "preset" not in d:
            raise ManifestError("manifest needs a preset")
        m = cls(**d)
        m.validate()
        return m

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"preset": self.preset, "seed": self.seed, "stages": self.stages,
                "artifact_dir": self.artifact_dir, "constraint": self.constraint, "name": self.name}

    @property
    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ManifestError(f"unknown preset {self.preset!r}")
        names = []
        for st in self.stages:
            if not isinstance(st, dict) or st.get("stage") not in STAGES:
                raise ManifestError(f"bad stage entry {st!r}; stages are {STAGES}")
            names.append(st["stage"])
        if "synth" in names and names.index("synth") != 0:
            raise ManifestError("synth must be the first stage")
        if "train" in names:
            t = names.index("train")
            if any(n in _NEEDS_MODEL for n in names[:t]):
                raise ManifestError("train must precede every stage that uses a model")
        if "eval" in names and self.kind == "beta" and "calibrate" in names \
                and names.index("calibrate") > names.index("eval"):
            raise ManifestError("calibrate must precede eval")
        thr = self.constraint.get("threshold")
        if self.constraint.get("metric", "auroc") != "auroc" or thr is None or not 0 <= thr <= 1:
            raise ManifestError("constraint must be {'metric': 'auroc', 'threshold': t in [0, 1]}")

    @property
    def kind(self) -> str:
        return PRESETS[self.preset]["kind"]


def sub_seed(seed: int, label: str) -> int:
    """Deterministic 31-bit seed for one labelled stage."""
    h = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def member_suffixes(kind: str) -> List[str]:
    return ["-h", "-v"] if kind == "of" else [""]


def train_sets(ds) -> List[np.ndarray]:
    if isinstance(ds, FlowDataset):
        return list(ds.select("train"))
    return [ds.select("train")]


def calibration_sets(ds, n: int = 64) -> List[List[np.ndarray]]:
    """Per-member calibration batches for static quantization."""
    if isinstance(ds, FlowDataset):
        h, v = ds.select("train")
        return [[h[:n]], [v[:n]]]
    return [[ds.select("calibration")[:n]]]


def make_bench(ds):
    return FlowBench.from_dataset(ds) if isinstance(ds, FlowDataset) else BrightnessBench.from_dataset(ds)


@dataclass
class Run:
    manifest: Manifest
    root: Path
    base_dir: Path = Path(".")
    dataset: object = None
    baseline: Optional[List[Model]] = None
    models: Optional[List[Model]] = None
    bench: object = None
    outputs: List[str] = field(default_factory=list)

    def path(self, stem: str, ext: str) -> Path:
        return self.root / f"{stem}-{self.manifest.digest}.{ext}"

    def note(self, p: Path) -> Path:
        self.outputs.append(p.name)
        return p

    def save_models(self, stem: str, models: List[Model]) -> None:
        for sfx, m in zip(member_suffixes(self.manifest.kind), models):
            m.save(self.note(self.path(stem + sfx, "vaec")))

    def constraint(self, threshold=None) -> AccuracyConstraint:
        thr = self.manifest.constraint["threshold"] if threshold is None else threshold
        return AccuracyConstraint(float(thr), self.bench)

    def need(self, what: str):
        if getattr(self, what) is None:
            raise ManifestError(f"no {what} available; add the stage that produces it")
        return getattr(self, what)


def _train_config(run: Run, st: dict, label: str) -> TrainConfig:
    base = run.manifest.stages
    train = next((s for s in base if s["stage"] == "train"), {})
    kw = {k: train[k] for k in ("epochs", "learning_rate", "batch_size") if k in train}
    kw.update({k: st[k] for k in ("epochs", "learning_rate", "batch_size") if k in st})
    return TrainConfig(seed=sub_seed(run.manifest.seed, label), **kw)


def stage_synth(run: Run, st: dict):
    size = preset(run.manifest.preset).input_shape[-1]
    seed = sub_seed(run.manifest.seed, "synth")
    if run.manifest.kind == "of":
        ds = gen_flows(seed, int(st.get("n", 400)), size)
    else:
        ds = gen_brightness(seed, int(st.get("n", 240)), size)
    out = run.root / f"data-{run.manifest.digest}"
    save_dataset(ds, out)
    run.outputs.append(out.name)
    run.dataset = ds


def stage_train(run: Run, st: dict):
    if run.dataset is None and "data" in st:
        run.dataset = load_dataset(run.base_dir / st["data"])
    ds = run.need("dataset")
    spec = preset(run.manifest.preset)
    models = []
    for sfx, x in zip(member_suffixes(run.manifest.kind), train_sets(ds)):
        cfg = _train_config(run, st, "train" + sfx)
        params, hist = train_vae(spec, x, cfg)
        write_history_csv(run.note(run.path("loss" + sfx, "csv")), hist)
        models.append(Model(spec, params))
    run.save_models("model-fp32", models)
    run.baseline = run.models = models
    run.bench = make_bench(ds)


def stage_calibrate(run: Run, st: dict):
    models, bench = run.need("models"), run.need("bench")
    if isinstance(bench, BrightnessBench):
        state = bench.detector(models[0])
        body = {"kind": "beta-vae", "reasoner_dims": state.reasoner_dims.tolist(),
                "calib_scores": state.calib_scores.tolist(), "epsilon": state.epsilon,
                "delta": state.delta, "tau": state.tau}
    else:
        body = {"kind": "optical-flow", "tau": bench.fit_tau(models)}
    with open(run.note(run.path("detector", "json")), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)


def stage_quantize(run: Run, st: dict):
    models, ds = run.need("models"), run.need("dataset")
    mode = st.get("mode", "static")
    out = []
    for i, (m, cal) in enumerate(zip(models, calibration_sets(ds))):
        if mode == "dynamic":
            out.append(dynamic_quantize(m))
        elif mode == "static":
            out.append(static_quantize(m, cal))
        elif mode == "qat":
            sfx = member_suffixes(run.manifest.kind)[i]
            cfg = replace(_train_config(run, st, "qat" + sfx), qat=True,
                          epochs=int(st.get("epochs", 5)))
            params, _ = train_vae(m.spec, train_sets(ds)[i], cfg, params=m.params)
            out.append(static_quantize(Model(m.spec, params), cal))
        else:
            raise ManifestError(f"unknown quantization mode {mode!r}")
    run.save_models(f"model-{mode}", out)
    ev = run.bench(out)
    _write_json(run, f"quantize-{mode}", {"mode": mode, "auroc": ev.auroc, "kl_id": ev.kl_id,
                                          "kl_ood": ev.kl_ood,
                                          "size_bytes": sum(m.size_bytes for m in out)})


def stage_prune(run: Run, st: dict):
    models = run.need("models")
    pct = float(st.get("sparsity", 50))
    pruned = [Model(m.spec, global_magnitude_prune(m.spec, m.params, pct)) for m in models]
    tag = f"{pct:g}"
    run.save_models(f"model-pruned{tag}", pruned)
    ev = run.bench(pruned)
    _write_json(run, f"prune{tag}", {
        "requested_pct": pct, "auroc": ev.auroc, "kl_id": ev.kl_id, "kl_ood": ev.kl_ood,
        "measured_pct": [measured_sparsity(m.spec, m.params) for m in pruned]})


def _kd(run: Run, st: dict, models, precision: str, label: str):
    ds = run.dataset
    cfg = _train_config(run, st, label)
    cal = calibration_sets(ds) if precision == "qint8" else None
    return prune_aware_kd_search(models, run.constraint(st.get("threshold")), cfg, train_sets(ds),
                                 precision=precision, calibration=cal)


def _sparsity(run: Run, st: dict, models, precision: str):
    cal = calibration_sets(run.dataset) if precision == "qint8" else None
    return binary_sparsity_search(models, run.constraint(st.get("threshold")),
                                  float(st.get("resolution", 1.0)), precision=precision,
                                  calibration=cal)


def stage_distill_search(run: Run, st: dict):
    precision = st.get("precision", "fp32")
    report, best = _kd(run, st, run.need("models"), precision, "distill")
    report.write(run.note(run.path("kd-report", "json")).with_suffix(""))
    run.outputs.append(run.path("kd-report", "csv").name)
    run.save_models("model-kd", best)
    run.models = best


def stage_sparsity_search(run: Run, st: dict):
    precision = st.get("precision", "fp32")
    report, best = _sparsity(run, st, run.need("models"), precision)
    report.write(run.note(run.path("sparsity-report", "json")).with_suffix(""))
    run.outputs.append(run.path("sparsity-report", "csv").name)
    run.save_models("model-sparse", best)
    run.models = best


def stage_target_aware(run: Run, st: dict):
    """Full search (distillation then sparsity) once per deployment precision."""
    start = run.need("baseline")
    for precision in st.get("precisions", ["fp16", "qint8"]):
        kd_report, kd_best = _kd(run, st, start, precision, f"target-{precision}")
        sp_report, sp_best = _sparsity(run, st, kd_best, precision)
        for name, rep in ((f"kd-report-{precision}", kd_report), (f"sparsity-report-{precision}", sp_report)):
            rep.write(run.note(run.path(name, "json")).with_suffix(""))
            run.outputs.append(run.path(name, "csv").name)
        cal = calibration_sets(run.dataset) if precision == "qint8" else [None] * len(sp_best)
        deployed = [apply_precision(m, precision, c) for m, c in zip(sp_best, cal)]
        run.save_models(f"model-{precision}", deployed)


def stage_eval(run: Run, st: dict):
    models, bench = run.need("models"), run.need("bench")
    if isinstance(bench, BrightnessBench):
        state = bench.detector(models[0])
        a = bench.frame_scores(models[0], state, bench.test_id)
        b = bench.frame_scores(models[0], state, bench.test_ood)
        trace = beta_vae_detect(models[0], state.reset(), np.concatenate([bench.test_id, bench.test_ood]))
        write_trace_csv(run.note(run.path("trace", "csv")), trace)
        thr = state.tau
    else:
        thr = bench.fit_tau(models)
        sc = bench.scores(models, bench.test_h, bench.test_v)
        a, b = sc[~bench.test_ood], sc[bench.test_ood]
    rep = metric_report(a, b, thr)
    rep.to_json(run.note(run.path("metrics", "json")))
    write_roc_csv(run.note(run.path("roc", "csv")), a, b)


def stage_bench(run: Run, st: dict):
    base, cur = run.need("baseline"), run.need("models")
    x = train_sets(run.dataset)[0][: int(st.get("batch", 256))]
    n = int(st.get("n_runs", 10))
    b_mean, b_std = benchmark_forward(base[0], x, n_runs=n)
    c_mean, c_std = benchmark_forward(cur[0], x, n_runs=n)
    # wall times vary between runs, so they live outside the search reports
    _write_json(run, "bench", {"baseline_mean_s": b_mean, "baseline_std_s": b_std,
                               "current_mean_s": c_mean, "current_std_s": c_std,
                               "speedup": b_mean / c_mean})


def _write_json(run: Run, stem: str, body: dict):
    with open(run.note(run.path(stem, "json")), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


STAGE_FUNCS: Dict[str, Callable] = {
    "synth": stage_synth, "train": stage_train, "calibrate": stage_calibrate,
    "quantize": stage_quantize, "prune": stage_prune, "distill-search": stage_distill_search,
    "sparsity-search": stage_sparsity_search, "target-aware": stage_target_aware,
    "eval": stage_eval, "bench": stage_bench,
}


def artifact_root(manifest: Manifest, base_dir: Optional[Path] = None) -> Path:
    root = os.environ.get(ARTIFACT_ENV) or manifest.artifact_dir
    root = Path(root)
    if not root.is_absolute() and base_dir is not None:
        root = base_dir / root
    return root


def run_manifest(manifest: Manifest, base_dir: Optional[Path] = None, dataset=None) -> Run:
    """Execute all stages. On failure the partial artifacts stay in place,
    ``failure-<hash>.json`` records the error and :class:`StageFailed` is raised."""
    root = artifact_root(manifest, base_dir)
    root.mkdir(parents=True, exist_ok=True)
    run = Run(manifest, root, base_dir=base_dir or Path("."), dataset=dataset)
    stale = run.path("failure", "json")
    if stale.exists():
        stale.unlink()
    with open(run.path("manifest", "json"), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    for st in manifest.stages:
        name = st["stage"]
        log.info("stage %s", name)
        try:
            STAGE_FUNCS[name](run, st)
        except Exception as exc:
            with open(run.path("failure", "json"), "w") as fh:
                json.dump({"stage": name, "error": f"{type(exc).__name__}: {exc}",
                           "traceback": traceback.format_exc()}, fh, indent=2)
            raise StageFailed(name, exc, root) from exc
    return run


def run(manifest_path) -> Path:
    path = Path(manifest_path)
    manifest = Manifest.load(path)
    return run_manifest(manifest, base_dir=path.parent).root
