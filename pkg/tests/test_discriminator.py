import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sand import diffnet as dn
from sand.core import ActivitySequence, Config, Event, default_taxonomy
from sand.discriminator import (DiscriminatorModel, auc, bce_loss, encode_history, pair_features,
                                reward, score)
from sand.errors import ContractError
from sand.gradcheck import check_discriminator

TAX = default_taxonomy()
D_STATE = 6


def _seqs(gen, n, T=30.0):
    out = []
    for b in range(n):
        times = np.sort(gen.uniform(0.0, T, size=2 + b))
        out.append(ActivitySequence(f"s{b}", 1474243200 + 3600 * b, T,
                                    tuple(Event(float(t), int(gen.integers(TAX.M))) for t in times)))
    return out


def _features(seed=0, n=4):
    gen = np.random.default_rng(seed)
    seqs = _seqs(gen, n)
    return pair_features(seqs, [gen.normal(size=(len(s), D_STATE)) for s in seqs], TAX)


def test_pair_features_shapes_and_history():
    seq = ActivitySequence("u", 1474243200, 10.0, (Event(1.0, 0), Event(3.0, 4), Event(3.5, 8)))
    f = pair_features([seq], [np.zeros((3, D_STATE))], TAX, window=2)
    assert len(f) == 3
    assert f.hist_mask.sum(axis=1).tolist() == [0, 1, 2]
    assert np.allclose(f.act_tau, np.log1p([1.0, 2.0, 0.5]))
    assert f.hist_type[2].tolist() == [0, 4]
    f.validate(TAX)
    f.act_hour[0] = 24
    with pytest.raises(ContractError):
        f.validate(TAX)


def test_empty_prefix_gives_empty_vector():
    model = DiscriminatorModel(Config(), TAX, D_STATE, seed=1)
    model.store.values["disc.empty"][...] = np.arange(model.cfg.attn_dim)
    assert np.array_equal(encode_history(model, []), np.arange(model.cfg.attn_dim))


def test_single_entry_is_value_map():
    model = DiscriminatorModel(Config(), TAX, D_STATE, seed=2)
    e = Event(5.5, 3)
    ctx = encode_history(model, [e], 1474243200)
    with dn.no_grad():
        x = model._entries(np.log1p([5.5]), [5], [0], [3], [TAX.need_level[3] - 1]).value[0]
    v = model.store.values
    assert np.allclose(ctx, x @ v["disc.attn.Wv"] + v["disc.attn.bv"], rtol=0, atol=1e-14)


def test_history_permutation_invariant():
    model = DiscriminatorModel(Config(), TAX, D_STATE, seed=3)
    f = _features(3)
    row = int(np.argmax(f.hist_mask.sum(axis=1)))
    g = f.take([row, row])
    m = int(g.hist_mask[0].sum())
    perm = np.r_[np.arange(m)[::-1], np.arange(m, g.hist_mask.shape[1])]
    for name in ("hist_tau", "hist_hour", "hist_weekday", "hist_type", "hist_level"):
        getattr(g, name)[1] = getattr(g, name)[1][perm]
    with dn.no_grad():
        ctx = model.contexts(g).value
    assert np.allclose(ctx[0], ctx[1], rtol=0, atol=1e-14)


def test_zero_score_mlp_gives_half():
    model = DiscriminatorModel(Config(), TAX, D_STATE, seed=4, zero_score=True)
    f = _features(4)
    assert np.array_equal(score(model, f), np.full(len(f), 0.5))
    assert np.allclose(reward(model, f), -math.log(2.0), rtol=0, atol=1e-15)


def test_score_deterministic_and_reward_ordering():
    model = DiscriminatorModel(Config(), TAX, D_STATE, seed=5)
    for v in model.store.values.values():
        v[...] = np.random.default_rng(0).normal(0.0, 0.5, v.shape)
    f = _features(5)
    d1, d2 = score(model, f), score(model, f)
    assert np.array_equal(d1, d2)
    r = reward(model, f)
    assert np.allclose(r, np.log(d1), rtol=1e-12, atol=1e-14)
    assert np.array_equal(np.argsort(r, kind="stable"), np.argsort(d1, kind="stable"))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_score_strictly_inside_unit_interval(seed, scale):
    model = DiscriminatorModel(Config(), TAX, D_STATE, seed=seed % 11)
    gen = np.random.default_rng(seed)
    for v in model.store.values.values():
        v[...] = gen.normal(0.0, scale, v.shape)
    f = _features(seed % 7)
    d = score(model, f)
    r = reward(model, f)
    assert np.all((d > 0) & (d < 1))
    assert np.all(r < 0) and np.all(np.isfinite(r))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_discriminator_gradient_check(seed):
    assert check_discriminator(seed) < 1e-4


def test_auc_examples():
    assert auc([1.0, 2.0], [0.0, 0.5]) == 1.0
    assert auc([0.5], [0.5]) == 0.5
    assert auc([0.0], [1.0]) == 0.0
    with pytest.raises(ContractError):
        auc([], [1.0])


def test_learns_single_feature_task():
    cfg = Config()
    model = DiscriminatorModel(cfg, TAX, D_STATE, seed=6)
    real = _features(10, n=8)
    fake = real.take(np.arange(len(real)))
    real.act_type[:] = 0
    fake.act_type[:] = 1
    adam = dn.AdamState(lr=1e-3)
    acc = 0.0
    for step in range(500):
        model.store.zero_grad()
        with dn.Tape() as tape:
            loss = bce_loss(model, real, fake, 1.0, 0.0)
        tape.backward(loss)
        dn.adam_step(model.store, model.store.grads, adam)
        if step % 25 == 24:
            acc = 0.5 * (np.mean(score(model, real) > 0.5) + np.mean(score(model, fake) <= 0.5))
            if acc > 0.95:
                break
    assert acc > 0.95
