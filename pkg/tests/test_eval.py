import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import jensenshannon

from sand.core import ActivitySequence, ActivityTaxonomy, Config, Event, default_taxonomy
from sand.errors import ContractError, EmptyMetricError
from sand.evaluation import (EvalReport, daily_counts, evaluate, export_intensity_trace, histogram, jsd)
from sand.policy import PolicyModel

TAX = default_taxonomy()
START = 1474243200  # Monday 00:00 UTC


def _seq(times, types, T=48.0, uid="u", start=START):
    return ActivitySequence(uid, start, T, tuple(Event(float(t), int(k)) for t, k in zip(times, types)))


def _binary_entropy(p):
    return -sum(x * math.log2(x) for x in p if x > 0)


def test_jsd_examples():
    assert jsd([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert abs(jsd([1.0, 0.0], [0.0, 1.0]) - 1.0) < 1e-12
    oracle = _binary_entropy([0.75, 0.25]) - 0.5 * (_binary_entropy([0.5, 0.5]) + 0.0)
    assert abs(jsd([0.5, 0.5], [1.0, 0.0]) - oracle) < 1e-12
    assert abs(oracle - 0.31128) < 1e-5


def test_jsd_contract():
    with pytest.raises(ContractError):
        jsd([1.0], [0.5, 0.5])
    with pytest.raises(ContractError):
        jsd([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ContractError):
        jsd([1.5, -0.5], [0.5, 0.5])


@settings(max_examples=200)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_jsd_symmetric_bounded(n, seed):
    gen = np.random.default_rng(seed)
    p = gen.dirichlet(np.full(n, 0.3))
    q = gen.dirichlet(np.full(n, 0.3))
    a, b = jsd(p, q), jsd(q, p)
    assert abs(a - b) < 1e-12 and 0.0 <= a <= 1.0
    assert abs(a - jensenshannon(p, q, base=2) ** 2) < 1e-12


def test_daily_act_example():
    seq = _seq([1, 5, 23, 25], [0, 0, 0, 0])
    assert daily_counts([seq]).tolist() == [3, 1]
    h = histogram([seq], "DailyAct", TAX)
    assert h.mass[3] == 0.5 and h.mass[1] == 0.5


def test_macro_int_single_gap():
    h = histogram([_seq([2.0, 5.0], [0, 1])], "MacroInt", TAX)
    assert h.mass[1] == 1.0 and h.edges[1] <= 3.0 < h.edges[2]


def test_act_type_point_mass():
    h = histogram([_seq([1, 2, 3], [2, 2, 2])], "ActType", TAX)
    assert h.mass[2] == 1.0 and h.mass.sum() == 1.0


def test_weekday_and_hour():
    seq = _seq([0.5, 24 + 13.2], [0, 1])
    assert histogram([seq], "Weekday", TAX).mass[:2].tolist() == [0.5, 0.5]
    hour = histogram([seq], "Hour", TAX).mass
    assert hour[0] == 0.5 and hour[13] == 0.5


def test_empty_metric_names_kind():
    with pytest.raises(EmptyMetricError, match="macro_int"):
        histogram([_seq([1.0], [0])], "MacroInt", TAX)
    with pytest.raises(ContractError):
        histogram([_seq([1.0], [0])], "nope", TAX)


def test_overflow_bin():
    h = histogram([_seq([0.0, 100.0], [0, 0], T=120.0)], "macro_int", TAX)
    assert h.mass[-1] == 1.0 and np.isinf(h.edges[-1])


def _corpus(seed, n=20):
    gen = np.random.default_rng(seed)
    out = []
    for u in range(n):
        times = np.sort(gen.uniform(0, 72.0, size=gen.integers(2, 30)))
        out.append(_seq(times, gen.integers(0, TAX.M, size=times.size), T=72.0, uid=f"u{u}"))
    return out


def test_identical_corpora_zero():
    real = _corpus(0)
    rep = evaluate(real, real, TAX)
    assert all(v == 0.0 for v in rep.values().values())


def test_hour_point_mass_vs_uniform():
    # one event in every hour of three days: an exactly uniform hour histogram
    real = [_seq(np.arange(72) + 0.5, np.arange(72) % TAX.M, T=72.0)]
    gen = [_seq([24.0 * d for d in range(3)], [0, 1, 2], T=72.0, uid=f"g{i}") for i in range(10)]
    value = evaluate(gen, real, TAX).hour
    p = np.eye(24)[0]
    oracle = jensenshannon(p, np.full(24, 1 / 24), base=2) ** 2
    assert abs(value - oracle) < 1e-12
    assert value > 0.85


def test_missing_type_warns():
    real = _corpus(2)
    gen = [_seq([1, 2, 3, 4], [0, 0, 0, 0], T=72.0)]
    rep = evaluate(gen, real, TAX)
    assert rep.warnings and rep.act_type > 0
    assert all(0.0 <= v <= 1.0 for v in rep.values().values())


def test_report_json_round_trip():
    rep = evaluate(_corpus(3), _corpus(4), TAX, config_hash="abc")
    back = EvalReport.from_dict(json.loads(rep.to_json()))
    assert back.to_json() == rep.to_json()
    assert back.values() == rep.values()


def test_histogram_order_invariant():
    c = _corpus(5)
    for kind in ("macro_int", "daily_act", "hour"):
        assert np.array_equal(histogram(c, kind, TAX).mass, histogram(c[::-1], kind, TAX).mass)


def test_single_type_micro_equals_macro():
    gen = np.random.default_rng(6)
    c = [_seq(np.sort(gen.uniform(0, 72, 15)), [3] * 15, T=72.0, uid=f"u{i}") for i in range(10)]
    assert np.array_equal(histogram(c, "micro_int", TAX, 3).mass, histogram(c, "macro_int", TAX).mass)


def _frozen_model(tax, lam):
    model = PolicyModel(Config(), tax, seed=0)
    for name in ("head.0.W", "head.1.W"):
        model.store.values[name][...] = 0.0
    model.store.values["head.1.b"][...] = math.log(math.expm1(lam))
    return model


def test_trace_equal_levels(tmp_path):
    tax = ActivityTaxonomy(9, tuple(f"a{i}" for i in range(9)), (1, 1, 1, 2, 2, 2, 3, 3, 3))
    seq = _seq([1.05, 2.5], [0, 7], T=4.0)
    n = export_intensity_trace(_frozen_model(tax, 0.4), seq, 0.1, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert n == len(rows) == math.floor(4.0 / 0.1) + 1 + 2
    assert all(r["lambda_l1"] == r["lambda_l2"] == r["lambda_l3"] for r in rows)
    assert [r["event_k"] for r in rows if r["event_k"]] == ["0", "7"]


def test_trace_post_jump_differs(tmp_path):
    model = PolicyModel(Config(), TAX, seed=1)
    gen = np.random.default_rng(1)
    for v in model.store.values.values():
        v[...] = gen.normal(0.0, 0.3, v.shape)
    seq = _seq([1.0], [TAX.need_level.index(2)], T=2.0)
    export_intensity_trace(model, seq, 0.1, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    i = next(j for j, r in enumerate(rows) if r["event_k"])
    assert float(rows[i - 1]["t"]) == pytest.approx(1.0)
    assert rows[i]["lambda_l2"] != rows[i - 1]["lambda_l2"]
