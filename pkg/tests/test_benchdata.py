import json

import numpy as np
import pytest

from sand.benchdata import GroundTruthSpec, default_spec, flat_spec, generate_corpus, load_spec
from sand.core import calendar_arrays, default_taxonomy, validate_sequence
from sand.errors import ContractError

TAX = default_taxonomy()


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(default_spec(), 120, 168.0, seed=0)


def test_flat_poisson_mean_count():
    seqs = generate_corpus(flat_spec(1.0), 1000, 168.0, seed=1)
    assert abs(np.mean([len(s) for s in seqs]) - 168.0) / 168.0 < 0.03


def test_seed_reproducible_and_nested():
    a = generate_corpus(default_spec(), 5, 48.0, seed=3)
    b = generate_corpus(default_spec(), 5, 48.0, seed=3)
    c = generate_corpus(default_spec(), 8, 48.0, seed=3)
    assert a == b and a == c[:5]
    assert a != generate_corpus(default_spec(), 5, 48.0, seed=4)


def test_sequences_valid(corpus):
    assert all(validate_sequence(s, TAX) == [] for s in corpus)


def test_work_hours(corpus):
    k = TAX.index("work")
    hours = np.concatenate([calendar_arrays(s.start_ts, s.times[s.types == k])[0] for s in corpus])
    assert np.mean((hours >= 9) & (hours < 18)) >= 0.9


def test_all_levels_present(corpus):
    levels = np.asarray(TAX.need_level)[np.concatenate([s.types for s in corpus])]
    share = np.bincount(levels, minlength=4)[1:] / levels.size
    assert np.all(share >= 0.10)
    assert set(np.concatenate([s.types for s in corpus]).tolist()) == set(range(TAX.M))


def test_refractory_type_underdispersed(corpus):
    spec = default_spec()
    k = int(np.argmax(spec.refractory))
    gaps = np.concatenate([np.diff(s.times[s.types == k]) for s in corpus])
    assert gaps.std() / gaps.mean() < 1.0


def test_spec_round_trip_and_validation(tmp_path):
    spec = default_spec()
    spec.check_taxonomy(TAX)
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec.to_dict()))
    back = load_spec(p)
    assert np.array_equal(back.hourly, spec.hourly) and back.names == spec.names
    with pytest.raises(ContractError):
        GroundTruthSpec.from_dict({**spec.to_dict(), "extra": 1})
    with pytest.raises(ContractError):
        GroundTruthSpec(np.zeros((1, 24)), np.ones((1, 7)), np.zeros(1))
    with pytest.raises(ContractError):
        generate_corpus(spec, 0)
    with pytest.raises(ContractError):
        flat_spec(1.0, 2).check_taxonomy(TAX)
