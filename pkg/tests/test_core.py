import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sand.core import (ActivitySequence, ActivityTaxonomy, Config, Event, RngStream, calendar_features,
                       default_taxonomy, dumps_sequence, load_config, need_level_of, parse_dataset,
                       validate_sequence, write_dataset)
from sand.errors import ContractError, ParseError, ValidationError

MONDAY = 1474243200


def _write(tmp_path, lines):
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_parse_two_events(tmp_path):
    p = _write(tmp_path, ['{"user_id":"u1","start_ts":1474243200,"horizon_T":168.0,'
                          '"events":[{"t":1.0,"k":0},{"t":2.5,"k":3}]}'])
    seqs = parse_dataset(p)
    assert len(seqs) == 1 and len(seqs[0]) == 2
    assert seqs[0].events[1] == Event(2.5, 3)


def test_parse_non_monotonic_names_user(tmp_path):
    p = _write(tmp_path, ['{"user_id":"bob","start_ts":0,"horizon_T":10.0,"events":[{"t":2.0,"k":0},{"t":1.0,"k":0}]}'])
    with pytest.raises(ValidationError) as ei:
        parse_dataset(p)
    assert ei.value.user_id == "bob"


def test_parse_empty_events(tmp_path):
    p = _write(tmp_path, ['{"user_id":"u","start_ts":0,"horizon_T":5.0,"events":[]}'])
    assert len(parse_dataset(p)[0]) == 0


@pytest.mark.parametrize("line", [
    '{"user_id":"u","start_ts":0,"horizon_T":5.0,"events":[]',
    '{"user_id":"u","start_ts":0,"horizon_T":5.0,"events":[],"extra":1}',
    '{"user_id":"u","start_ts":0.5,"horizon_T":5.0,"events":[]}',
    '{"user_id":"u","start_ts":0,"horizon_T":5.0,"events":[{"t":1.0}]}',
])
def test_parse_errors_name_line(tmp_path, line):
    p = _write(tmp_path, ['{"user_id":"ok","start_ts":0,"horizon_T":5.0,"events":[]}', line])
    with pytest.raises(ParseError) as ei:
        parse_dataset(p)
    assert ei.value.line == 2 and "line 2" in str(ei.value)


def test_validate_sequence():
    tax = default_taxonomy()
    ok = ActivitySequence("u", MONDAY, 10.0, (Event(1.0, 0), Event(2.0, 4), Event(3.0, 8)))
    assert validate_sequence(ok, tax) == []
    bad_k = ActivitySequence("u", MONDAY, 10.0, (Event(1.0, tax.M),))
    assert any("type out of range" in v for v in validate_sequence(bad_k, tax))
    at_T = ActivitySequence("u", MONDAY, 10.0, (Event(10.0, 0),))
    assert any("event at/after horizon" in v for v in validate_sequence(at_T, tax))


def test_calendar_examples():
    assert calendar_features(MONDAY, 0.0) == (0, 0)
    assert calendar_features(MONDAY, 25.5) == (1, 1)
    assert calendar_features(MONDAY, 167.0) == (23, 6)


@given(st.integers(0, 2_000_000_000), st.integers(0, 10_000))
def test_calendar_day_shift(start, t):
    h0, w0 = calendar_features(start, float(t))
    h1, w1 = calendar_features(start, float(t + 24))
    assert h1 == h0 and w1 == (w0 + 1) % 7


def test_need_levels_default_taxonomy():
    tax = default_taxonomy()
    assert tax.M == 9
    assert need_level_of(tax, "eat") == 1
    assert need_level_of(tax, "work") == 2
    assert need_level_of(tax, "social-entertainment") == 3
    with pytest.raises(ContractError):
        need_level_of(tax, 9)


def test_taxonomy_requires_all_levels():
    with pytest.raises(ContractError):
        ActivityTaxonomy(2, ("a", "b"), (1, 2))
    with pytest.raises(ContractError):
        ActivityTaxonomy.from_dict({"M": 3, "names": ["a", "b", "c"], "need_level": [1, 2, 3], "x": 1})


_event_lists = st.lists(st.floats(0.0, 99.0, allow_nan=False), max_size=20, unique=True).map(sorted)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(_event_lists, st.integers(0, 2**31)), min_size=1, max_size=5))
def test_round_trip_bit_identical(tmp_path_factory, data):
    seqs = [ActivitySequence(f"u{i}", start, 100.0, tuple(Event(t, i % 9) for t in ts))
            for i, (ts, start) in enumerate(data)]
    d = tmp_path_factory.mktemp("rt")
    write_dataset(seqs, d / "a.jsonl")
    back = parse_dataset(d / "a.jsonl")
    assert back == seqs
    write_dataset(back, d / "b.jsonl")
    assert (d / "a.jsonl").read_bytes() == (d / "b.jsonl").read_bytes()


def test_counts_by_level_non_decreasing():
    tax = default_taxonomy()
    seq = ActivitySequence("u", MONDAY, 10.0, (Event(1.0, 0), Event(2.0, 4), Event(3.0, 0), Event(4.0, 8)))
    counts = np.array([seq.counts_by_level(tax, t) for t in np.linspace(0, 10, 41)])
    assert np.all(np.diff(counts, axis=0) >= 0)
    assert counts[-1].tolist() == [2, 1, 1]
    assert seq.counts_by_level(tax, 1.0) == (0, 0, 0)


def test_rng_stream_contract():
    a = RngStream(7, 1).generator().random(4)
    b = RngStream(7, 1).generator().random(4)
    c = RngStream(7, 2).generator().random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert RngStream(7, 1).child("x", 3) == RngStream(7, 1).child("x", 3)
    assert RngStream(7, 1).child("x", 3) != RngStream(7, 1).child("x", 4)


def test_config_overrides_and_hash(tmp_path):
    cfg = Config()
    assert cfg.hash() == Config().hash()
    c2 = cfg.with_overrides(["delta=0.05", "n1=8", "disable_gail=true"])
    assert (c2.delta, c2.n1, c2.disable_gail) == (0.05, 8, True)
    assert c2.hash() != cfg.hash()
    with pytest.raises(ContractError):
        cfg.with_overrides(["nope=1"])
    with pytest.raises(ContractError):
        Config(delta=0.0)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"n2": 4}))
    assert load_config(p, ["seed=3"]).n2 == 4
    with pytest.raises(ContractError):
        Config.from_dict({"bogus": 1})


def test_dumps_sequence_compact():
    s = ActivitySequence("u", 0, 5.0, (Event(1.0, 2),))
    assert json.loads(dumps_sequence(s)) == {"user_id": "u", "start_ts": 0, "horizon_T": 5.0,
                                             "events": [{"t": 1.0, "k": 2}]}
