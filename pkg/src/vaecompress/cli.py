"""Command line front end: one subcommand per pipeline operation plus ``run``.

Models are addressed by prefix. A beta-VAE lives in ``<prefix>.vaec``; an
optical-flow detector is the pair ``<prefix>-h.vaec`` and ``<prefix>-v.vaec``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .compress.distill import prune_aware_kd_search
from .compress.prune import global_magnitude_prune, measured_sparsity
from .compress.quantize import PRECISIONS, dynamic_quantize, static_quantize
from .compress.report import AccuracyConstraint
from .compress.sparsity import binary_sparsity_search
from .datasynth import FlowDataset, gen_brightness, gen_flows, load_dataset, save_dataset
from .experiments import BrightnessBench
from .metrics import benchmark_forward, metric_report, write_roc_csv
from .nn.model import Model
from .nn.spec import PRESETS, preset
from .ood import DetectorState, beta_vae_detect, of_detect, write_trace_csv
from .train import TrainConfig, train_vae, write_history_csv

log = logging.getLogger("vaecompress")


class CliError(Exception):
    pass


def _exists(path: Path) -> Path:
    if not path.exists():
        raise CliError(f"missing input: {path}")
    return path


def load_models(prefix: str):
    p = Path(prefix)
    if p.suffix == ".vaec":
        return [Model.load(_exists(p))]
    single = p.with_name(p.name + ".vaec")
    if single.exists():
        return [Model.load(single)]
    pair = [p.with_name(p.name + s + ".vaec") for s in ("-h", "-v")]
    if all(q.exists() for q in pair):
        return [Model.load(q) for q in pair]
    raise CliError(f"missing input: no {single} or {pair[0]}/{pair[1]}")


def save_models(prefix: str, models):
    p = Path(prefix)
    if p.suffix == ".vaec":
        p = p.with_suffix("")
    p.parent.mkdir(parents=True, exist_ok=True)
    sfx = [""] if len(models) == 1 else ["-h", "-v"]
    paths = [p.with_name(p.name + s + ".vaec") for s in sfx]
    for m, q in zip(models, paths):
        m.save(q)
    return paths


def _data(args):
    if not args.data:
        raise CliError("--data is required")
    return load_dataset(_exists(Path(args.data)))


def _constraint(args, bench):
    return AccuracyConstraint(args.constraint_auroc, bench)


def _cfg(args, label):
    return TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                       seed=pipeline.sub_seed(args.seed, label))


def _print_json(body):
    print(json.dumps(body, indent=2, sort_keys=True))


def cmd_synth(args):
    size = preset(args.preset).input_shape[-1]
    if PRESETS[args.preset]["kind"] == "of":
        ds = gen_flows(args.seed, args.n or 400, size)
    else:
        ds = gen_brightness(args.seed, args.n or 240, size)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}")


def cmd_train(args):
    ds = _data(args)
    spec = preset(args.preset)
    models = []
    sfx = pipeline.member_suffixes(PRESETS[args.preset]["kind"])
    for s, x in zip(sfx, pipeline.train_sets(ds)):
        params, hist = train_vae(spec, x, _cfg(args, "train" + s))
        write_history_csv(f"{args.out}{s}-loss.csv", hist)
        models.append(Model(spec, params))
    for p in save_models(args.out, models):
        print(f"wrote {p}")


def cmd_calibrate(args):
    models, ds = load_models(args.inp), _data(args)
    bench = pipeline.make_bench(ds)
    if isinstance(bench, BrightnessBench):
        state = bench.detector(models[0])
        body = {"kind": "beta-vae", "reasoner_dims": state.reasoner_dims.tolist(),
                "calib_scores": state.calib_scores.tolist(), "epsilon": state.epsilon,
                "delta": state.delta, "tau": state.tau}
    else:
        body = {"kind": "optical-flow", "tau": bench.fit_tau(models)}
    with open(args.out, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
    print(f"wrote {args.out}")


def cmd_quantize(args):
    models = load_models(args.inp)
    if args.mode == "dynamic":
        out = [dynamic_quantize(m) for m in models]
    else:
        if not args.data:
            raise CliError(f"--mode {args.mode} needs calibration data (--data)")
        ds = load_dataset(_exists(Path(args.data)))
        cals = pipeline.calibration_sets(ds)
        if args.mode == "qat":
            tuned = []
            for i, (m, x) in enumerate(zip(models, pipeline.train_sets(ds))):
                cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                                  seed=pipeline.sub_seed(args.seed, f"qat{i}"), qat=True)
                params, _ = train_vae(m.spec, x, cfg, params=m.params)
                tuned.append(Model(m.spec, params))
            models = tuned
        out = [static_quantize(m, c) for m, c in zip(models, cals)]
    for p in save_models(args.out, out):
        print(f"wrote {p} ({p.stat().st_size} bytes)")


def cmd_prune(args):
    models = load_models(args.inp)
    out = [Model(m.spec, global_magnitude_prune(m.spec, m.params, args.sparsity)) for m in models]
    for p, m in zip(save_models(args.out, out), out):
        print(f"wrote {p} measured sparsity {measured_sparsity(m.spec, m.params):.4f}%")


def _search_outputs(args, report, best, stem):
    report.write(f"{args.out}-{stem}")
    save_models(args.out, best)
    sel = report.selected
    print(f"selected step {sel.step}: auroc {sel.auroc:.4f} params {sel.param_count} "
          f"sparsity {sel.sparsity_pct:g}% -> {args.out}")


def _calibration(args, ds):
    return pipeline.calibration_sets(ds) if args.precision == "qint8" else None


def cmd_distill(args):
    teachers, ds = load_models(args.inp), _data(args)
    bench = pipeline.make_bench(ds)
    report, best = prune_aware_kd_search(teachers, _constraint(args, bench), _cfg(args, "distill"),
                                         pipeline.train_sets(ds), precision=args.precision,
                                         calibration=_calibration(args, ds))
    _search_outputs(args, report, best, "kd-report")


def cmd_search(args):
    models, ds = load_models(args.inp), _data(args)
    bench = pipeline.make_bench(ds)
    report, best = binary_sparsity_search(models, _constraint(args, bench), args.resolution,
                                          precision=args.precision, calibration=_calibration(args, ds))
    _search_outputs(args, report, best, "sparsity-report")


def _load_detector(path):
    with open(_exists(Path(path))) as fh:
        body = json.load(fh)
    return body


def cmd_detect(args):
    models, ds = load_models(args.inp), _data(args)
    det = _load_detector(args.detector)
    if det["kind"] == "beta-vae":
        state = DetectorState(np.array(det["reasoner_dims"]), np.array(det["calib_scores"]),
                              epsilon=det["epsilon"], delta=det["delta"], tau=det["tau"])
        if args.threshold is not None:
            state.tau = args.threshold
        frames = ds.select("test")
        results = beta_vae_detect(models[0], state, frames)
        write_trace_csv(args.out, results)
        print(f"{sum(r.is_ood for r in results)} of {len(results)} frames flagged; trace in {args.out}")
    else:
        tau = det["tau"] if args.threshold is None else args.threshold
        t = ds.split == "test"
        score, flag = of_detect(models[0], models[1], (ds.horizontal[t], ds.vertical[t]), tau)
        with open(args.out, "w") as fh:
            fh.write("window,score,is_ood\n")
            for i, (s, f) in enumerate(zip(score, flag)):
                fh.write(f"{i},{s!r},{int(f)}\n")
        print(f"{int(flag.sum())} of {len(flag)} windows flagged; scores in {args.out}")


def _scores(models, bench):
    if isinstance(bench, BrightnessBench):
        state = bench.detector(models[0])
        a = bench.frame_scores(models[0], state, bench.test_id)
        b = bench.frame_scores(models[0], state, bench.test_ood)
        return a, b, state.tau
    sc = bench.scores(models, bench.test_h, bench.test_v)
    return sc[~bench.test_ood], sc[bench.test_ood], bench.fit_tau(models)


def cmd_eval(args):
    models, ds = load_models(args.inp), _data(args)
    bench = pipeline.make_bench(ds)
    a, b, thr = _scores(models, bench)
    rep = metric_report(a, b, thr if args.threshold is None else args.threshold)
    body = json.loads(rep.to_json())
    if args.baseline:
        ba, bb, bthr = _scores(load_models(args.baseline), bench)
        body["baseline_auroc"] = metric_report(ba, bb, bthr).auroc
        body["auroc_delta"] = body["auroc"] - body["baseline_auroc"]
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(body, fh, indent=2, sort_keys=True)
        write_roc_csv(Path(args.out).with_suffix(".roc.csv"), a, b)
    _print_json(body)


def cmd_bench(args):
    models, ds = load_models(args.inp), _data(args)
    x = pipeline.train_sets(ds)[0][: args.batch]
    mean, std = benchmark_forward(models[0], x, n_runs=args.n_runs)
    body = {"mean_s": mean, "std_s": std, "batch": len(x)}
    if args.baseline:
        b_mean, b_std = benchmark_forward(load_models(args.baseline)[0], x, n_runs=args.n_runs)
        body.update(baseline_mean_s=b_mean, baseline_std_s=b_std, speedup=b_mean / mean)
    _print_json(body)


def cmd_run(args):
    root = pipeline.run(_exists(Path(args.manifest)))
    print(f"artifacts in {root}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vaec", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, *flags, help=None):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        for f in flags:
            f(p)
        return p

    def preset_(p):
        p.add_argument("--preset", choices=sorted(PRESETS), required=True)

    def seed(p):
        p.add_argument("--seed", type=int, default=0)

    def inp(p):
        p.add_argument("--in", dest="inp", required=True, help="model prefix")

    def out(p, required=True):
        p.add_argument("--out", required=required)

    def data(p):
        p.add_argument("--data", help="dataset directory")

    def training(p):
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--batch-size", type=int, default=32)

    def constraint(p):
        p.add_argument("--constraint-auroc", type=float, required=True)
        p.add_argument("--precision", choices=PRECISIONS, default="fp32")

    def threshold(p):
        p.add_argument("--threshold", type=float, help="decision threshold override")

    s = add("synth", cmd_synth, preset_, seed, out, help="generate a synthetic dataset")
    s.add_argument("--n", type=int, help="samples per partition (beta) or windows (flow)")
    add("train", cmd_train, preset_, seed, data, out, training, help="train a VAE")
    add("calibrate", cmd_calibrate, inp, data, out, help="fit detector state")
    q = add("quantize", cmd_quantize, inp, data, out, seed, training, help="int8 quantization")
    q.add_argument("--mode", choices=("dynamic", "static", "qat"), default="static")
    p = add("prune", cmd_prune, inp, out, help="global magnitude pruning")
    p.add_argument("--sparsity", type=float, required=True)
    add("distill", cmd_distill, inp, data, out, seed, training, constraint,
        help="pruning-aware distillation search")
    r = add("search", cmd_search, inp, data, out, constraint, help="binary sparsity search")
    r.add_argument("--resolution", type=float, default=1.0)
    d = add("detect", cmd_detect, inp, data, out, threshold, help="run the detector on the test split")
    d.add_argument("--detector", required=True, help="JSON written by calibrate")
    e = add("eval", cmd_eval, inp, data, threshold, help="AUROC and TPR/FPR on the test split")
    e.add_argument("--out")
    e.add_argument("--baseline", help="model prefix to report the AUROC delta against")
    b = add("bench", cmd_bench, inp, data, help="single-threaded forward timing")
    b.add_argument("--baseline")
    b.add_argument("--batch", type=int, default=256)
    b.add_argument("--n-runs", type=int, default=30)
    m = add("run", cmd_run, help="execute a JSON manifest")
    m.add_argument("manifest")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "out", None):
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        args.func(args)
    except pipeline.StageFailed as exc:
        print(f"error: {exc} (partial artifacts in {exc.artifact_dir})", file=sys.stderr)
        return 1
    except (CliError, pipeline.ManifestError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
