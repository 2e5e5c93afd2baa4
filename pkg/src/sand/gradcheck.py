"""Central-difference gradient checks for every differentiable path.

Networks are built small and with randomised parameters (including the
zero-initialised output layers) so every weight receives a gradient.
"""

from __future__ import annotations

import numpy as np

from . import diffnet as dn
from .core import ActivitySequence, ActivityTaxonomy, Config, Event, default_taxonomy
from .discriminator import DiscriminatorModel, bce_loss, pair_features
from .policy import PolicyModel, replay_batch

TOLERANCE = 1e-4
PATHS = ("flow", "decay", "jump", "intensity", "discriminator", "likelihood")


def small_config(**kw) -> Config:
    base = dict(n1=3, n2=3, d_k=2, hidden=5, depth=2, d_hour=2, d_weekday=2, d_type=2, d_level=2, attn_dim=3,
                disc_hidden=4, history_window=4)
    base.update(kw)
    return Config(**base)


def _randomise(store: dn.ParamStore, gen, prefixes=("",), scale=0.5):
    for name, v in store.values.items():
        if name.startswith(prefixes):
            v[...] = gen.normal(0.0, scale, v.shape)


def _subset(store: dn.ParamStore, prefixes) -> dn.ParamStore:
    """A view store sharing arrays with ``store`` restricted to ``prefixes``."""
    out = dn.ParamStore()
    for name, v in store.values.items():
        if name.startswith(prefixes):
            out.values[name] = v
            out.grads[name] = store.grads[name]
    return out


def _model(seed: int, tax: ActivityTaxonomy, **kw):
    gen = np.random.default_rng(seed)
    model = PolicyModel(small_config(**kw), tax, seed=seed)
    _randomise(model.store, gen)
    return model, gen


def _check(model_store, prefixes, loss_fn) -> float:
    sub = _subset(model_store, prefixes)
    return dn.numeric_grad_check(lambda _s: loss_fn(), sub)


def check_flow(seed: int, tax: ActivityTaxonomy | None = None) -> float:
    tax = tax or default_taxonomy()
    model, gen = _model(seed, tax)
    dyn = model.dynamics
    w = gen.normal(size=(dyn.levels, 2, model.cfg.n1))
    clocks = gen.normal(size=(3, 4))

    def loss():
        c, h = dyn.initial_batch(2)
        for j in range(3):
            c, h = dyn.flow_step(c, h, np.array([0.1, 0.05]), clocks[j])
        return dn.tsum(dn.mul(c, w))

    return _check(model.store, ("dyn.flow", "dyn.c0", "dyn.h0"), loss)


def check_decay(seed: int, tax: ActivityTaxonomy | None = None) -> float:
    tax = tax or default_taxonomy()
    model, gen = _model(seed, tax)
    dyn = model.dynamics
    w = gen.normal(size=(dyn.levels, 2, model.cfg.n2))

    def loss():
        c, h = dyn.initial_batch(2)
        for j in range(3):
            c, h = dyn.flow_step(c, h, np.array([0.1, 0.07]), np.zeros(4))
        return dn.tsum(dn.mul(h, w))

    return _check(model.store, ("dyn.decay", "dyn.c0", "dyn.h0"), loss)


def check_jump(seed: int, tax: ActivityTaxonomy | None = None) -> float:
    tax = tax or default_taxonomy()
    model, gen = _model(seed, tax)
    dyn = model.dynamics
    w = gen.normal(size=(dyn.levels, 3, model.cfg.n2))
    ks = np.array([0, 4, 8])

    def loss():
        c, h = dyn.initial_batch(3)
        h = dyn.jump_step(c, h, ks)
        return dn.tsum(dn.mul(h, w))

    return _check(model.store, ("dyn.jump", "dyn.embed", "dyn.c0", "dyn.h0"), loss)


def check_intensity(seed: int, tax: ActivityTaxonomy | None = None) -> float:
    tax = tax or default_taxonomy()
    model, gen = _model(seed, tax, lambda_max=1e6)
    dyn = model.dynamics
    z = gen.normal(size=(4, dyn.state_dim))
    w = gen.normal(size=(4, tax.M))

    def loss():
        return dn.tsum(dn.mul(dn.log(model.head(dn.const(z))), w))

    return _check(model.store, ("head",), loss)


def _toy_sequences(gen, n: int, M: int, T: float = 6.0):
    out = []
    for b in range(n):
        times = np.sort(gen.uniform(0.0, T, size=3 + b))
        out.append(ActivitySequence(f"s{b}", 1474243200 + 3600 * b, T,
                                    tuple(Event(float(t), int(gen.integers(M))) for t in times)))
    return out


def check_discriminator(seed: int, tax: ActivityTaxonomy | None = None) -> float:
    tax = tax or default_taxonomy()
    gen = np.random.default_rng(seed)
    cfg = small_config()
    D = 6
    disc = DiscriminatorModel(cfg, tax, D, seed=seed)
    _randomise(disc.store, gen)
    seqs = _toy_sequences(gen, 3, tax.M)
    real = pair_features(seqs[:2], [gen.normal(size=(len(s), D)) for s in seqs[:2]], tax, cfg.history_window)
    fake = pair_features(seqs[2:], [gen.normal(size=(len(s), D)) for s in seqs[2:]], tax, cfg.history_window)
    return dn.numeric_grad_check(lambda _s: bce_loss(disc, real, fake, 0.9, 0.0), disc.store)


def check_likelihood(seed: int, tax: ActivityTaxonomy | None = None) -> float:
    """End-to-end: trapezoid log-likelihood of a replayed batch w.r.t. every policy parameter."""
    tax = tax or default_taxonomy()
    model, gen = _model(seed, tax, delta=1.0)
    _randomise(model.store, gen, scale=0.3)
    seqs = _toy_sequences(gen, 2, tax.M, T=3.0)
    return dn.numeric_grad_check(lambda _s: replay_batch(model, seqs).objective, model.store)


CHECKS = {
    "flow": check_flow,
    "decay": check_decay,
    "jump": check_jump,
    "intensity": check_intensity,
    "discriminator": check_discriminator,
    "likelihood": check_likelihood,
}


def run_all(seeds=(0, 1, 2), paths=PATHS) -> dict:
    """Worst relative error per path over ``seeds``."""
    return {p: max(CHECKS[p](s) for s in seeds) for p in paths}
