import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppt.datagen import (ADS_FEATURES, Dataset, EvolutionPair, SubjectSystem, builtin_system,
                         generate_ads_dataset, generate_elevator_dataset, load_dataset, pretraining_systems,
                         save_dataset, simulate_ads, simulate_elevator, split_dataset, window)
from ppt.errors import ConfigurationError, ParseError

ELEV = SubjectSystem("E", {"dispatcher_quality": 0.7}, {"traffic_intensity": 0.05})


def test_zero_samples_rejected():
    with pytest.raises(ConfigurationError):
        generate_elevator_dataset(ELEV, 0, 1)


def test_missing_parameter_is_named():
    bad = SubjectSystem("Bad", {}, {"traffic_intensity": 0.05})
    with pytest.raises(ConfigurationError, match="dispatcher_quality"):
        generate_elevator_dataset(bad, 10, 1)
    with pytest.raises(ConfigurationError, match="npc_std"):
        generate_ads_dataset(SubjectSystem("A", {}, {"npc_mean": 3.0}), 10, 1)


def test_elevator_generation_is_deterministic(tmp_path):
    a, b = generate_elevator_dataset(ELEV, 100, 7), generate_elevator_dataset(ELEV, 100, 7)
    save_dataset(a, tmp_path / "a.csv")
    save_dataset(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.meta.json").read_bytes() == (tmp_path / "b.meta.json").read_bytes()


def test_better_dispatcher_lowers_waiting_time():
    best = SubjectSystem("B", {"dispatcher_quality": 1.0}, {"traffic_intensity": 0.05})
    worst = SubjectSystem("W", {"dispatcher_quality": 0.0}, {"traffic_intensity": 0.05})
    sb, sw = simulate_elevator(best, 500, 11), simulate_elevator(worst, 500, 11)
    # shared arrivals: the backlog recursion is identical, only the scaling differs
    np.testing.assert_array_equal(sb["backlog"], sw["backlog"])
    oracle_b = np.maximum(0, sb["backlog"] * 1.0 + sb["noise"]).mean()
    oracle_w = np.maximum(0, sw["backlog"] * 2.0 + sw["noise"]).mean()
    assert sb["tte"].mean() == pytest.approx(oracle_b)
    assert sw["tte"].mean() == pytest.approx(oracle_w)
    assert oracle_b < oracle_w


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_waiting_time_monotone_in_dispatcher_quality(q1, q2, seed):
    lo, hi = sorted((q1, q2))
    def mean_tte(q):
        s = SubjectSystem("S", {"dispatcher_quality": q}, {"traffic_intensity": 0.05})
        return simulate_elevator(s, 60, seed)["tte"].mean()
    assert mean_tte(lo) >= mean_tte(hi) - 1e-12


def test_backlog_follows_lindley_recursion():
    sim = simulate_elevator(ELEV, 200, 5)
    arrival = np.cumsum(sim["gaps"])
    wait, depart = 0.0, 0.0
    for k in range(200):
        wait = 0.0 if k == 0 else max(0.0, depart - arrival[k])
        assert sim["backlog"][k] == pytest.approx(wait)
        depart = arrival[k] + wait + sim["service"][k]


def test_ads_degenerate_npc_distribution():
    s = SubjectSystem("D", {}, {"npc_mean": 5.0, "npc_std": 0.0})
    assert set(simulate_ads(s, 200, 3)["npc_counts"]) == {5}


def test_ads_simple_npc_mean():
    _, simple = builtin_system("Simple")
    counts = simulate_ads(simple, 10_000, 1)["npc_per_sample"]
    assert abs(counts.mean() - 4.81) < 0.2


def test_ads_no_closing_speed_means_no_collision():
    s = SubjectSystem("Z", {}, {"npc_mean": 4.0, "npc_std": 1.0, "speed_spread": 0.0, "tte_max": 60.0})
    d = generate_ads_dataset(s, 100, 2)
    assert d.F == len(ADS_FEATURES) == 19
    assert np.all(d.tte == 60.0)


def test_ads_tte_clipped():
    _, complex_ = builtin_system("Complex")
    d = generate_ads_dataset(complex_, 500, 4)
    assert d.tte.min() >= 0 and d.tte.max() <= 60.0


@pytest.mark.parametrize("name", ["UpBest", "LunchWorse", "Simple"])
def test_round_trip(tmp_path, name):
    domain, system = builtin_system(name)
    d = generate_ads_dataset(system, 300, 9) if domain == "ads" else generate_elevator_dataset(system, 300, 9)
    save_dataset(d, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    np.testing.assert_allclose(back.features, d.features, rtol=0, atol=1e-9)
    np.testing.assert_allclose(back.tte, d.tte, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(back.t, d.t)
    assert back.metadata() == d.metadata()


def test_sidecar_fields(tmp_path):
    d = generate_elevator_dataset(ELEV, 20, 1)
    save_dataset(d, tmp_path / "x.csv")
    meta = json.loads((tmp_path / "x.meta.json").read_text())
    assert set(meta) == {"system_name", "F", "seed", "cps_params", "env_params", "feature_means", "feature_stds"}
    assert (tmp_path / "x.csv").read_text().splitlines()[0] == "t,f0,f1,f2,f3,f4,f5,f6,f7,tte"


def test_missing_tte_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,f0,f1\n0,1,2\n")
    with pytest.raises(ParseError):
        load_dataset(p)


def test_non_monotone_time(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,f0,tte\n3,0.5,1\n3,0.5,1\n4,0.5,1\n")
    with pytest.raises(ParseError, match="non-monotone t at row 2"):
        load_dataset(p)


@pytest.mark.parametrize("cell", ["nan", "inf", "abc"])
def test_non_finite_field(tmp_path, cell):
    p = tmp_path / "bad.csv"
    p.write_text(f"t,f0,tte\n0,0.5,1\n1,{cell},1\n")
    with pytest.raises(ParseError, match="row 2"):
        load_dataset(p)


def test_window_examples():
    d = generate_elevator_dataset(ELEV, 10, 1)
    assert window(d, 0, 1) == [d[0]]
    w = window(d, 1, 4)
    assert [s.padding for s in w] == [True, True, False, False]
    assert w[2:] == [d[0], d[1]]
    assert window(d, 9, 3) == [d[7], d[8], d[9]]
    with pytest.raises(IndexError):
        window(d, 10, 3)
    with pytest.raises(ValueError):
        window(d, 1, 0)


@given(st.integers(1, 30), st.integers(1, 12), st.data())
def test_window_totality(n, omega, data):
    d = Dataset(ELEV, np.arange(n), np.zeros((n, 2)), np.ones(n))
    i = data.draw(st.integers(0, n - 1))
    assert len(window(d, i, omega)) == omega


def test_evolution_pair_invariants():
    a = generate_elevator_dataset(builtin_system("UpBest")[1], 10, 1)
    b = generate_elevator_dataset(builtin_system("LunchBest")[1], 10, 1)
    assert EvolutionPair(a, b).label == "UpBest→LunchBest"
    with pytest.raises(ConfigurationError):
        EvolutionPair(a, a)
    with pytest.raises(ConfigurationError):
        EvolutionPair(a, generate_elevator_dataset(builtin_system("LunchBest")[1], 10, 1, n_features=9))


def test_dataset_rejects_bad_values():
    with pytest.raises(ValueError):
        Dataset(ELEV, [0, 0], np.zeros((2, 1)), [1, 1])
    with pytest.raises(ValueError):
        Dataset(ELEV, [0, 1], np.zeros((2, 1)), [1, -1])


def test_split_is_temporal():
    d = generate_elevator_dataset(ELEV, 30, 1)
    a, b = split_dataset(d, 10)
    assert len(a) == 10 and len(b) == 20 and a.t[-1] < b.t[0]


def test_pretraining_systems_are_distinct():
    pairs = pretraining_systems("elevator", 3, 0)
    names = [s.name for p in pairs for s in p]
    assert len(set(names)) == 6
    assert pretraining_systems("elevator", 3, 0)[0][0].to_dict() == pairs[0][0].to_dict()
