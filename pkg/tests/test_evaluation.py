import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from ppt.errors import ParseError
from ppt.evaluation import (
    Experiment, RunRecord, StatReport, a12, classify_effect, compare_variants, emit_report, evaluate,
    experiment_from_dict, experiment_to_dict, mann_whitney, merge_experiments, read_results, uq_table,
)
from ppt.schemas import validate_summary
from ppt.training import TrainRecord


# ----- A12 and effect labels -----------------------------------------------------

def test_a12_examples():
    assert a12([1, 2, 3], [1, 2, 3]) == 0.5
    assert a12([4, 5], [1, 2]) == 1.0
    assert a12([1, 2], [4, 5]) == 0.0
    assert a12([1, 3], [2]) == 0.5
    assert a12([2, 2], [2, 1]) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        a12([], [1])


@given(st.lists(st.integers(-20, 20), min_size=1, max_size=15), st.lists(st.integers(-20, 20), min_size=1, max_size=15))
def test_a12_complement(a, b):
    assert a12(a, b) + a12(b, a) == pytest.approx(1.0)
    assert 0.0 <= a12(a, b) <= 1.0


@pytest.mark.parametrize("value,label", [
    (0.5, "NEGLIGIBLE"), (0.55, "NEGLIGIBLE"), (0.56, "SMALL"), (0.60, "SMALL"), (0.64, "MEDIUM"),
    (0.70, "MEDIUM"), (0.71, "LARGE"), (0.76, "LARGE"), (0.81, "LARGE"), (0.86, "LARGE"), (1.0, "LARGE"),
])
def test_effect_labels(value, label):
    assert classify_effect(value) == label
    assert classify_effect(1.0 - value) == label


def test_effect_label_domain():
    with pytest.raises(ValueError):
        classify_effect(1.1)


# ----- Mann-Whitney ---------------------------------------------------------------------

def _enumerated_p(a, b):
    """Two-sided exact p-value by enumerating every split of the pooled ranks."""
    pooled = np.concatenate([a, b])
    n1 = len(a)
    u_obs = a12(a, b) * n1 * len(b)
    us = []
    for idx in itertools.combinations(range(pooled.size), n1):
        mask = np.zeros(pooled.size, bool)
        mask[list(idx)] = True
        us.append(a12(pooled[mask], pooled[~mask]) * n1 * len(b))
    us = np.array(us)
    lower, upper = np.mean(us <= u_obs + 1e-9), np.mean(us >= u_obs - 1e-9)
    return u_obs, min(1.0, 2 * min(lower, upper))


@pytest.mark.parametrize("n1,n2", [(n1, n2) for n1 in range(1, 9) for n2 in range(1, 9) if n1 + n2 <= 12]
                         + [(6, 7), (7, 7), (8, 8)])
def test_exact_p_matches_enumeration(n1, n2):
    rng = np.random.default_rng(100 * n1 + n2)
    for _ in range(1 if n1 + n2 > 12 else 3):
        x = rng.permutation(n1 + n2).astype(float)
        a, b = x[:n1], x[n1:]
        u, p = mann_whitney(a, b)
        u_ref, p_ref = _enumerated_p(a, b)
        assert u == pytest.approx(u_ref)
        assert p == pytest.approx(p_ref, abs=1e-12)


def test_exact_and_normal_approximation_agree_at_fifteen():
    from scipy.stats import mannwhitneyu
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b = rng.normal(size=15), rng.normal(0.5, size=15)
        _, exact = mann_whitney(a, b)
        approx = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True).pvalue
        assert abs(exact - approx) < 0.02


def test_mann_whitney_matches_scipy_with_ties():
    from scipy.stats import mannwhitneyu
    a = [1, 2, 2, 3, 5, 5, 8, 9, 9, 9, 10, 12, 12, 13, 14, 14, 15, 16, 17, 18, 20, 21]
    b = [2, 3, 3, 4, 4, 6, 7, 7, 8, 9, 11, 11, 12, 13, 13, 15, 19, 20, 21, 22, 23, 24]
    u, p = mann_whitney(a, b)
    ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert u == pytest.approx(ref.statistic)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_identical_samples_not_significant():
    u, p = mann_whitney([3.0] * 5, [3.0] * 5)
    assert p == 1.0 and u == 12.5
    rep = StatReport.compare([1.0] * 4, [1.0] * 4)
    assert not rep.significant and rep.effect_label == "NEGLIGIBLE"
    assert rep.to_dict()["direction"] == "none"


def test_stat_report_separated_samples():
    rep = StatReport.compare(list(range(10, 20)), list(range(10)))
    assert rep.a12 == 1.0 and rep.significant and rep.effect_label == "LARGE"
    assert rep.to_dict()["direction"] == "up"


# ----- Huber evaluation --------------------------------------------------------------------

class ConstantTwin:
    def __init__(self, value):
        self.value = value

    def predict_tte(self, d):
        return np.full(len(d), self.value)


def test_evaluate_oracle():
    d = make_dataset([0.0, 0.5, 3.0])
    # residuals 1, 0.5, -2 -> 0.5, 0.125, 1.5
    assert evaluate(ConstantTwin(1.0), d) == pytest.approx((0.5 + 0.125 + 1.5) / 3)
    with pytest.raises(ValueError):
        evaluate(ConstantTwin(1.0), make_dataset([]))


# ----- reports -----------------------------------------------------------------------------

def _experiment(with_uq=False):
    rng = np.random.default_rng(0)
    recs = []
    for variant, shift in (("PPT", 0.0), ("W_O_TL", 5.0), ("FINETUNE", 1.0)):
        for seed in range(5):
            tr = TrainRecord(epochs=[{"total": 3.0 - k + seed * 0.1} for k in range(3)])
            recs.append(RunRecord("A→B", variant, "cs", seed, float(10 + shift + rng.normal()),
                                  float(20 + seed + shift), 0.5, "ok", tr))
    recs.append(RunRecord("A→B", "W_O_TL", "cs", 5, None, None, 0.0, "failed: diverged"))
    uq = []
    if with_uq:
        uq = [{"evolution": "A→B", "huber": {"cs": 1.0, "bayesian": None, "ensemble": 2.0},
               "precision_at": {"1": 1.0, "5": 0.4}, "precision_pairs": {}, "time_s":
               {"cs": 1.0, "bayesian": 2.0, "ensemble": 3.0}}]
    return Experiment(recs, compare_variants(recs, "cs"), {"pretrain_uq": {"time_s": 9.0}}, uq)


def test_emit_report_medians_and_schema(tmp_path):
    exp = _experiment()
    emit_report(exp, tmp_path)
    summary = json.loads((tmp_path / "summary.json").read_text())
    validate_summary(summary)
    for variant in ("PPT", "W_O_TL", "FINETUNE"):
        ok = [r for r in exp.records if r.variant == variant and r.status == "ok"]
        cell = summary["cells"]["A→B"][f"{variant}/cs"]
        assert cell["median_target_huber"] == pytest.approx(float(np.median([r.target_huber for r in ok])))
        assert cell["median_convergence_time_s"] == pytest.approx(float(np.median([r.convergence_time_s for r in ok])))
    assert summary["cells"]["A→B"]["W_O_TL/cs"]["failed"] == 1
    cmp = summary["comparisons"]["A→B"]["W_O_TL"]
    assert cmp["a12"] == 1.0 and cmp["direction"] == "up"
    tuning = summary["timing"]["tuning"]["A→B"]
    assert tuning["prompt_tuning_s"] == 22.0 and tuning["fine_tuning_s"] == 23.0
    assert (tmp_path / "loss_A_B_PPT_cs.svg").read_text().startswith("<svg")
    back = read_results(tmp_path / "results.csv")
    assert [(r.variant, r.seed, r.status) for r in back] == [(r.variant, r.seed, r.status) for r in exp.records]


def test_emit_report_is_byte_identical(tmp_path):
    emit_report(_experiment(True), tmp_path / "a")
    emit_report(_experiment(True), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "uq_table.csv" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n


def test_emit_report_requires_records(tmp_path):
    with pytest.raises(ValueError):
        emit_report(Experiment([], {}, {}), tmp_path)


def test_uq_table_layout():
    text = uq_table(_experiment(True).uq)
    assert text.splitlines() == [
        "Evolution,UT,BUQ,EUQ,Precision@1,Precision@5,tau_UT,tau_BUQ,tau_EUQ",
        "A→B,1.00,-,2.00,100%,40%,1.00s,2.00s,3.00s",
    ]


def test_summary_schema_rejects_garbage():
    with pytest.raises(ParseError):
        validate_summary({"format": "ppt-summary/1", "cells": {}, "comparisons": {}, "timing": {}, "uq": []})


def test_experiment_round_trip_and_merge():
    exp = _experiment(True)
    back = experiment_from_dict(json.loads(json.dumps(experiment_to_dict(exp))))
    assert [r.target_huber for r in back.records] == [r.target_huber for r in exp.records]
    assert back.records[0].record.totals == exp.records[0].record.totals
    merged = merge_experiments([exp, back], "cs")
    assert len(merged.records) == 2 * len(exp.records)
    assert merged.reports["A→B"]["W_O_TL"].a12 == 1.0


def test_wall_clock_runs_match_except_timing(up_best, lunch_best):
    from conftest import tiny_config
    from ppt.datagen import split_dataset
    from ppt.evaluation import Evolution, run_experiment
    from ppt.uq import UQConfig

    target, test = split_dataset(lunch_best, 50)
    evo = Evolution("UpBest→LunchBest", up_best, target, test)
    pairs = [evo.pair]
    runs = [run_experiment([evo], pairs, tiny_config(max_epochs=2), UQConfig(indicator_epochs=1),
                           ["PPT", "W_O_TL"], repeats=2, clock="wall") for _ in range(2)]
    a, b = ([(r.variant, r.seed, r.target_huber, r.status, [{k: v for k, v in e.items() if k != "epoch_time_s"}
                                                            for e in r.record.epochs]) for r in x.records] for x in runs)
    assert a == b
    assert any(r.convergence_time_s != s.convergence_time_s for r, s in zip(runs[0].records, runs[1].records))
