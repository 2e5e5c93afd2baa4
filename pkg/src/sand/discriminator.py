"""Discriminator over (state, action) pairs and the imitation reward log D.

A pair is the need state z(t_i) at an action, the action itself
(interval since the previous event, type, calendar context) and the
recent event history.  History entries are embedded and pooled with
additive attention; an empty history maps to a learned vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import diffnet as dn
from .core import ActivityTaxonomy, Config, RngStream, calendar_arrays
from .errors import ContractError

LOGIT_LIMIT = 30.0  # keeps sigmoid strictly inside (0, 1) in float64


@dataclass
class DiscFeatures:
    """Feature arrays for N (state, action) pairs with histories padded to W."""

    hist_tau: np.ndarray  # (N, W) log1p of the interval before each history entry
    hist_hour: np.ndarray  # (N, W) int
    hist_weekday: np.ndarray
    hist_type: np.ndarray
    hist_level: np.ndarray
    hist_mask: np.ndarray  # (N, W) bool
    act_tau: np.ndarray  # (N,) log1p of the action interval
    act_hour: np.ndarray
    act_weekday: np.ndarray
    act_type: np.ndarray
    act_level: np.ndarray
    state: np.ndarray  # (N, D)

    def __len__(self):
        return self.act_tau.shape[0]

    def validate(self, tax: ActivityTaxonomy):
        if np.any(self.act_tau < 0) or np.any(self.hist_tau[self.hist_mask] < 0):
            raise ContractError("intervals must be non-negative")
        for name, arr, n in (("hour", self.act_hour, 24), ("weekday", self.act_weekday, 7),
                             ("type", self.act_type, tax.M), ("level", self.act_level, 3)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ContractError(f"{name} index out of range")

    def take(self, idx) -> "DiscFeatures":
        idx = np.asarray(idx)
        return DiscFeatures(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @staticmethod
    def concat(parts) -> "DiscFeatures":
        parts = list(parts)
        W = max(p.hist_tau.shape[1] for p in parts)
        out = {}
        for f in DiscFeatures.__dataclass_fields__:
            arrs = [getattr(p, f) for p in parts]
            if f.startswith("hist_"):
                arrs = [np.pad(a, ((0, 0), (0, W - a.shape[1]))) for a in arrs]
            out[f] = np.concatenate(arrs, axis=0)
        return DiscFeatures(**out)


def pair_features(seqs, states, tax: ActivityTaxonomy, window: int = 32) -> DiscFeatures:
    """One pair per event: history is the last ``min(i, window)`` events before event ``i``.

    ``states[b]`` holds the pre-jump need states (n_events, D) of ``seqs[b]``.
    """
    levels = np.asarray(tax.need_level, dtype=np.int64) - 1
    n_total = sum(len(s) for s in seqs)
    D = next((np.asarray(st).shape[1] for st in states if np.asarray(st).ndim == 2), 0)
    W = max(1, min(window, max((len(s) for s in seqs), default=0)))
    f = {
        "hist_tau": np.zeros((n_total, W)),
        "hist_hour": np.zeros((n_total, W), dtype=np.int64),
        "hist_weekday": np.zeros((n_total, W), dtype=np.int64),
        "hist_type": np.zeros((n_total, W), dtype=np.int64),
        "hist_level": np.zeros((n_total, W), dtype=np.int64),
        "hist_mask": np.zeros((n_total, W), dtype=bool),
    }
    act = {k: [] for k in ("act_tau", "act_hour", "act_weekday", "act_type", "act_level")}
    state_rows = []
    row = 0
    for seq, st in zip(seqs, states):
        n = len(seq)
        if n == 0:
            continue
        times, types = seq.times, seq.types
        tau = np.log1p(np.diff(np.concatenate([[0.0], times])))
        hour, wd = calendar_arrays(seq.start_ts, times)
        lvl = levels[types]
        act["act_tau"].append(tau)
        act["act_hour"].append(hour)
        act["act_weekday"].append(wd)
        act["act_type"].append(types)
        act["act_level"].append(lvl)
        state_rows.append(np.asarray(st, dtype=np.float64).reshape(n, -1))
        for i in range(n):
            lo = max(0, i - window)
            m = i - lo
            if m:
                sl = slice(lo, i)
                f["hist_tau"][row, :m] = tau[sl]
                f["hist_hour"][row, :m] = hour[sl]
                f["hist_weekday"][row, :m] = wd[sl]
                f["hist_type"][row, :m] = types[sl]
                f["hist_level"][row, :m] = lvl[sl]
                f["hist_mask"][row, :m] = True
            row += 1
    for k, v in act.items():
        f[k] = np.concatenate(v) if v else np.zeros(0, dtype=np.float64 if k == "act_tau" else np.int64)
    f["state"] = np.concatenate(state_rows, axis=0) if state_rows else np.zeros((0, D))
    return DiscFeatures(**f)


class DiscriminatorModel:
    """Embedding tables, attention pooling, empty-history vector and scoring MLP."""

    def __init__(self, cfg: Config, tax: ActivityTaxonomy, state_dim: int, store: dn.ParamStore | None = None,
                 seed: int | None = None, zero_score: bool = False):
        self.cfg = cfg
        self.tax = tax
        self.state_dim = state_dim
        rng = None
        if store is None:
            store = dn.ParamStore()
            rng = RngStream(cfg.seed if seed is None else seed, 0).child("init", "disc").generator()
        self.store = store
        self.entry_dim = 1 + cfg.d_hour + cfg.d_weekday + cfg.d_type + cfg.d_level
        tables = (("disc.hour", 24, cfg.d_hour), ("disc.weekday", 7, cfg.d_weekday),
                  ("disc.type", tax.M, cfg.d_type), ("disc.level", 3, cfg.d_level))
        if "disc.hour" not in store:
            for name, n, d in tables:
                store.add(name, rng.normal(0.0, 1.0 / math.sqrt(d), (n, d)) if rng is not None else np.zeros((n, d)))
            if rng is not None:
                dn.init_attention(store, "disc.attn", self.entry_dim, cfg.attn_dim, cfg.attn_dim, rng)
            else:
                for name, shape in (("W", (self.entry_dim, cfg.attn_dim)), ("b", (cfg.attn_dim,)), ("v", (cfg.attn_dim, 1)),
                                    ("Wv", (self.entry_dim, cfg.attn_dim)), ("bv", (cfg.attn_dim,))):
                    store.add(f"disc.attn.{name}", np.zeros(shape))
            store.add("disc.empty", np.zeros(cfg.attn_dim))
        n_in = cfg.attn_dim + state_dim + self.entry_dim
        spec = dn.MlpSpec.make(n_in, cfg.disc_hidden, 1, cfg.depth)
        self.net = dn.Mlp(spec, store, "disc.score", rng, zero_last=zero_score)

    def _entries(self, tau, hour, wd, typ, lvl):
        s = self.store
        return dn.concat([
            dn.const(np.asarray(tau, dtype=np.float64)[..., None]),
            dn.take_rows(s["disc.hour"], hour),
            dn.take_rows(s["disc.weekday"], wd),
            dn.take_rows(s["disc.type"], typ),
            dn.take_rows(s["disc.level"], lvl),
        ])

    def contexts(self, f: DiscFeatures) -> dn.Tensor:
        """(N, attn_dim) pooled history; rows without history get the empty vector."""
        N = len(f)
        xs = self._entries(f.hist_tau, f.hist_hour, f.hist_weekday, f.hist_type, f.hist_level)
        pooled = dn.attention_pool(self.store, "disc.attn", xs, f.hist_mask)
        has = f.hist_mask.any(axis=1)[:, None]
        return dn.where(has, pooled, dn.expand(self.store["disc.empty"], 0, N))

    def logits(self, f: DiscFeatures) -> dn.Tensor:
        if f.state.shape[1] != self.state_dim:
            raise ContractError(f"state width {f.state.shape[1]} != {self.state_dim}")
        a = self._entries(f.act_tau, f.act_hour, f.act_weekday, f.act_type, f.act_level)
        x = dn.concat([self.contexts(f), dn.const(f.state), a])
        out = self.net(self.store, x)
        return dn.clamp(dn.getitem(out, (slice(None), 0)), -LOGIT_LIMIT, LOGIT_LIMIT)


def encode_history(model: DiscriminatorModel, prefix, start_ts: int = 0) -> np.ndarray:
    """Context vector for one history ``prefix`` (a list of Events, oldest first)."""
    prefix = list(prefix)[-model.cfg.history_window:] if prefix else []
    with dn.no_grad():
        if not prefix:
            return model.store.values["disc.empty"].copy()
        times = np.array([e.t for e in prefix])
        types = np.array([e.k for e in prefix], dtype=np.int64)
        prev = np.concatenate([[0.0], times[:-1]])
        tau = np.log1p(times - prev)
        hour, wd = calendar_arrays(start_ts, times)
        lvl = np.asarray(model.tax.need_level, dtype=np.int64)[types] - 1
        xs = model._entries(tau[None], hour[None], wd[None], types[None], lvl[None])
        return dn.attention_pool(model.store, "disc.attn", xs, np.ones((1, len(prefix)), dtype=bool)).value[0]


def score(model: DiscriminatorModel, f: DiscFeatures) -> np.ndarray:
    """D(s, a) in (0, 1) for every pair."""
    with dn.no_grad():
        return dn.sigmoid(model.logits(f)).value


def reward(model: DiscriminatorModel, f: DiscFeatures) -> np.ndarray:
    """R(s, a) = log D(s, a), evaluated stably as -softplus(-logit)."""
    with dn.no_grad():
        return dn.log_sigmoid(model.logits(f)).value


def bce_loss(model: DiscriminatorModel, real: DiscFeatures, fake: DiscFeatures, real_label: float = 0.9,
             fake_label: float = 0.0) -> dn.Tensor:
    """Mean binary cross-entropy with smoothed labels over real and fake pairs."""
    logits = model.logits(DiscFeatures.concat([real, fake]))
    y = np.concatenate([np.full(len(real), real_label), np.full(len(fake), fake_label)])
    pos = dn.log_sigmoid(logits)
    neg = dn.log_sigmoid(dn.scale(logits, -1.0))
    ll = dn.add(dn.mul(pos, y), dn.mul(neg, 1.0 - y))
    return dn.scale(dn.tsum(ll), -1.0 / y.size)


def auc(real_scores, fake_scores) -> float:
    """Probability that a random real pair outscores a random fake pair (ties count half)."""
    r = np.asarray(real_scores, dtype=np.float64)
    f = np.asarray(fake_scores, dtype=np.float64)
    if r.size == 0 or f.size == 0:
        raise ContractError("AUC needs both real and fake scores")
    ranks = rankdata(np.concatenate([r, f]))
    return float((ranks[: r.size].sum() - r.size * (r.size + 1) / 2.0) / (r.size * f.size))
