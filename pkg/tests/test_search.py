import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vaecompress.compress.distill import build_student_spec, distill_train, prune_aware_kd_search
from vaecompress.compress.prune import measured_sparsity
from vaecompress.compress.report import (AccuracyConstraint, ConstraintViolation, Evaluation, SearchReport)
from vaecompress.compress.sparsity import bisection_levels, binary_sparsity_search, max_evaluations
from vaecompress.datasynth import gen_brightness
from vaecompress.nn.model import Model
from vaecompress.nn.params import init_params
from vaecompress.nn.spec import preset
from vaecompress.train import TrainConfig, train_vae


def scripted(values):
    it = iter(values)
    return lambda models: next(it)


def no_training(teacher, spec, data, cfg, init):
    return Model(spec, init if init is not None else init_params(spec, 0))


def kd(values, threshold=0.9, n_members=1):
    teachers = [Model.from_preset("desk-of", i) for i in range(n_members)]
    constraint = AccuracyConstraint(threshold, scripted(values))
    data = [np.zeros((2, 6, 32, 32), np.float32)] * n_members
    return prune_aware_kd_search(teachers, constraint, TrainConfig(epochs=0), data, trainer=no_training)


def test_kd_scripted_selection():
    report, best = kd([0.95, 0.93, 0.88])
    assert len(report.records) == 3
    assert [r.passed for r in report.records] == [True, True, False]
    assert report.selected is report.records[1]
    assert best[0].spec.spec_id == report.records[1].spec_id
    assert report.records[0].removed == [] and len(report.records[2].removed) == 2


def test_kd_teacher_fallback():
    report, best = kd([0.95, 0.5])
    assert report.selected.step == 0 and best[0].spec.spec_id == report.records[0].spec_id


def test_kd_teacher_below_threshold():
    with pytest.raises(ConstraintViolation):
        kd([0.85])


def test_kd_costs_shrink():
    report, _ = kd([0.99] * 40, threshold=0.5)
    params = [r.param_count for r in report.records]
    flops = [r.flops for r in report.records]
    assert len(params) > 3
    assert all(a > b for a, b in zip(params, params[1:]))
    assert all(a > b for a, b in zip(flops, flops[1:]))
    assert report.selected is report.records[-1]


def test_kd_group_shares_architecture():
    report, best = kd([0.95, 0.93, 0.1], n_members=2)
    assert len(best) == 2 and best[0].spec == best[1].spec
    assert report.records[1].param_count == 2 * best[0].param_count


def test_distilled_student_tracks_teacher():
    ds = gen_brightness(3, 120, 32)
    spec = preset("desk-beta-vae")
    params, _ = train_vae(spec, ds.select("train"), TrainConfig(epochs=15, learning_rate=1e-3, seed=1))
    teacher = Model(spec, params)
    student_spec = build_student_spec(spec, "enc.conv3.weight")
    held = ds.select("test", ["low", "medium"])
    target = teacher.encode(held)[0]
    gap = {}
    for lam in (0.0, 1.0):
        cfg = TrainConfig(epochs=10, learning_rate=1e-3, seed=2)
        student = distill_train(teacher, student_spec, ds.select("train"), cfg, kd_lambda=lam)
        gap[lam] = np.abs(student.encode(held)[0] - target).mean()
    assert gap[1.0] < gap[0.0]


def test_bisection_first_moves():
    assert bisection_levels(lambda s: True, 1.0)[:2] == [(50.0, True), (75.0, True)]
    assert bisection_levels(lambda s: False, 1.0)[:2] == [(50.0, False), (25.0, False)]
    with pytest.raises(ValueError):
        bisection_levels(lambda s: True, 0)


def linear_scan(passes, res):
    levels = np.arange(0, 100 + 1e-9, res)
    ok = [s for s in levels if passes(s)]
    return max(ok) if ok else 0.0


@pytest.mark.parametrize("s_star", [10, 37, 60, 88])
def test_bisection_against_linear_scan(s_star):
    passes = lambda s: s <= s_star
    visited = bisection_levels(passes, 1.0)
    best = max([s for s, ok in visited if ok], default=0.0)
    assert len(visited) <= max_evaluations(1.0) == 8
    assert abs(best - linear_scan(passes, 1.0)) <= 1.0
    assert 0 <= s_star - best < 1.0


def test_bisection_spec_example():
    visited = bisection_levels(lambda s: s <= 60, 1.0)
    best = max(s for s, ok in visited if ok)
    assert 59.06 <= best <= 60.0 and len(visited) <= 7


@given(st.floats(0, 99.99), st.sampled_from([0.5, 1.0, 2.5, 5.0, 10.0]))
def test_bisection_contract(s_star, res):
    visited = bisection_levels(lambda s: s <= s_star, res)
    best = max([s for s, ok in visited if ok], default=0.0)
    assert len(visited) <= math.ceil(math.log2(100 / res)) + 1
    assert 0 <= s_star - best < res


def test_sparsity_search_reprunes_original():
    m = Model.from_preset("desk-of", 0)
    for n in m.params.names():
        if n.endswith(".beta"):
            m.params.tensors[n] += 0.05
    constraint = AccuracyConstraint(0.5, lambda ms: 1.0 if measured_sparsity(ms[0].spec, ms[0].params) <= 37 else 0.0)
    report, best = binary_sparsity_search([m], constraint, 1.0)
    assert [(r.sparsity_pct, r.passed) for r in report.records[:3]] == [(50.0, False), (25.0, True), (37.5, False)]
    assert report.selected.sparsity_pct == max(r.sparsity_pct for r in report.records if r.passed)
    assert 36.0 <= measured_sparsity(best[0].spec, best[0].params) <= 37.0
    assert not m.params.masks


def test_sparsity_search_none_passing():
    m = Model.from_preset("desk-of", 0)
    report, best = binary_sparsity_search([m], AccuracyConstraint(0.5, lambda ms: 0.0), 10.0)
    assert report.selected.sparsity_pct == 0.0 and report.selected is report.records[-1]
    assert all(np.array_equal(best[0].params[k], m.params[k]) for k in m.params.tensors)


def test_report_roundtrip(tmp_path):
    report, _ = kd([Evaluation(0.95, 1.0, 2.0), Evaluation(0.93, 1.5, 3.0), 0.88])
    stem = tmp_path / "r"
    report.write(stem)
    back = SearchReport.from_json((tmp_path / "r.json").read_text())
    assert back == report
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0].startswith("step,spec_id,removed")
    assert json.loads((tmp_path / "r.json").read_text())["records"][1]["selected"] is True


def test_constraint_validation():
    with pytest.raises(ValueError):
        AccuracyConstraint(1.5, lambda m: 1.0)
    with pytest.raises(ValueError):
        AccuracyConstraint(0.5, lambda m: 1.0, metric="f1")
    assert AccuracyConstraint(0.5, lambda m: 0.5).passes(Evaluation(0.5))
