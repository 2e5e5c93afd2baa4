"""Classical baselines: a semi-Markov type chain and a multivariate exponential Hawkes process."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .core import ActivitySequence, ActivityTaxonomy, Event, RngStream
from .errors import ContractError
from .evaluation import INTERVAL_EDGES

# -- semi-Markov -------------------------------------------------------------------


@dataclass
class SemiMarkovModel:
    transition: np.ndarray  # (M, M) row-stochastic
    initial: np.ndarray  # (M,) first-type distribution
    hold_mass: np.ndarray  # (M, n_bins) per-type holding-time histogram
    first_mass: np.ndarray  # (n_bins,) offset of the first event
    edges: np.ndarray  # (n_bins + 1,) finite bin edges; the last bin ends at the largest observation

    @property
    def M(self):
        return self.transition.shape[0]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}


def _hist(x, edges):
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, edges.size - 2)
    return np.bincount(idx, minlength=edges.size - 1).astype(np.float64)


def fit_semi_markov(corpus, M: int | ActivityTaxonomy) -> SemiMarkovModel:
    """Add-one smoothed transitions and per-type holding-time histograms."""
    M = M.M if isinstance(M, ActivityTaxonomy) else int(M)
    counts = np.zeros((M, M))
    first = np.zeros(M)
    holds = [[] for _ in range(M)]
    offsets = []
    for s in corpus:
        if len(s) == 0:
            continue
        t, k = s.times, s.types
        first[k[0]] += 1
        offsets.append(t[0])
        np.add.at(counts, (k[:-1], k[1:]), 1.0)
        gaps = np.diff(t)
        for a, g in zip(k[:-1], gaps):
            holds[a].append(g)
    if counts.sum() < 1:
        raise ContractError("semi-Markov fit needs at least one observed transition")
    trans = (counts + 1.0) / (counts.sum(axis=1, keepdims=True) + M)
    pooled = np.concatenate([np.asarray(h) for h in holds if h])
    top = max(float(pooled.max()), float(max(offsets)), INTERVAL_EDGES[-2]) * (1 + 1e-12)
    edges = np.append(INTERVAL_EDGES[:-1], top)
    hold = np.zeros((M, edges.size - 1))
    for k in range(M):
        h = _hist(np.asarray(holds[k]) if holds[k] else pooled, edges)
        hold[k] = h / h.sum()
    fm = _hist(np.asarray(offsets), edges)
    return SemiMarkovModel(trans, first / first.sum(), hold, fm / fm.sum(), edges)


def _draw_bin(mass, edges, gen) -> float:
    b = int(gen.choice(mass.size, p=mass))
    return float(gen.uniform(edges[b], edges[b + 1]))


def generate_semi_markov(model: SemiMarkovModel, start_ts: int, T: float, rng, user_id: str = "semi-markov",
                         max_events: int = 100_000) -> ActivitySequence:
    """Chain of types with per-type holding times; times are uniform within the drawn bin."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    events = []
    if T > 0:
        t = _draw_bin(model.first_mass, model.edges, gen)
        k = int(gen.choice(model.M, p=model.initial))
        while t < T and len(events) < max_events:
            events.append(Event(t, k))
            t += _draw_bin(model.hold_mass[k], model.edges, gen)
            k = int(gen.choice(model.M, p=model.transition[k]))
            if events and not t > events[-1].t:
                t = np.nextafter(events[-1].t, np.inf)
    return ActivitySequence(user_id, int(start_ts), float(T), tuple(events))


# -- Hawkes ---------------------------------------------------------------------------


@dataclass
class HawkesModel:
    mu: np.ndarray  # (M,) base rates
    alpha: np.ndarray  # (M, M); alpha[k, j] is the jump in lambda_k after a type-j event
    beta: float
    explosive: bool = False
    nll_history: list = field(default_factory=list)

    @property
    def M(self):
        return self.mu.size

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.alpha / self.beta))))

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "alpha": self.alpha.tolist(), "beta": self.beta, "explosive": self.explosive}


def _softplus(x):
    return np.logaddexp(0.0, x)


def _inv_softplus(y):
    return np.log(np.expm1(y))


def _pad(corpus, M):
    seqs = [s for s in corpus]
    N = max((len(s) for s in seqs), default=0)
    S = len(seqs)
    t = np.zeros((S, N))
    k = np.zeros((S, N), dtype=np.int64)
    mask = np.zeros((S, N), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        t[i, :n], k[i, :n], mask[i, :n] = s.times, s.types, True
        if n and s.types.max() >= M:
            raise ContractError("event type outside the model's range")
    T = np.array([s.horizon_T for s in seqs])
    return t, k, mask, T


def hawkes_nll(mu, alpha, beta, data, grad=False):
    """Negative log-likelihood summed over sequences, optionally with gradients.

    Uses the recursion R_j(i) = exp(-beta dt) (R_j(i-1) + [k_{i-1} = j]) so the
    cost is linear in the number of events.
    """
    t, k, mask, T = data
    S, N = t.shape
    M = mu.size
    rows = np.arange(S)
    R = np.zeros((S, M))
    dR = np.zeros((S, M))
    ll = 0.0
    g_mu, g_alpha, g_beta = np.zeros(M), np.zeros((M, M)), 0.0
    for i in range(N):
        m = mask[:, i]
        if not m.any():
            break
        if i > 0:
            dt = np.where(m, t[:, i] - t[:, i - 1], 0.0)
            e = np.exp(-beta * dt)[:, None]
            prev = np.zeros((S, M))
            prev[rows, k[:, i - 1]] = 1.0
            base = R + prev
            if grad:
                dR = e * dR - dt[:, None] * e * base
            R = np.where(m[:, None], e * base, R)
            if grad:
                dR = np.where(m[:, None], dR, 0.0)
        ki = k[:, i]
        lam = mu[ki] + np.einsum("sj,sj->s", alpha[ki], R)
        lam_m = lam[m]
        ll += float(np.sum(np.log(lam_m)))
        if grad:
            inv = np.where(m, 1.0 / np.where(m, lam, 1.0), 0.0)
            np.add.at(g_mu, ki[m], inv[m])
            np.add.at(g_alpha, ki[m], inv[m][:, None] * R[m])
            g_beta += float(np.sum(inv[m] * np.einsum("sj,sj->s", alpha[ki][m], dR[m])))
    # compensator
    ll -= float(mu.sum() * T.sum())
    s = np.where(mask, T[:, None] - t, 0.0)
    decay = np.where(mask, -np.expm1(-beta * s), 0.0)
    per_type = np.zeros(M)
    np.add.at(per_type, k[mask], decay[mask])
    ll -= float(alpha.sum(axis=0) @ per_type) / beta
    if not grad:
        return -ll
    g_mu -= T.sum()
    g_alpha -= per_type[None, :] / beta
    ddecay = np.where(mask, s * np.exp(-beta * s), 0.0)
    per_type_d = np.zeros(M)
    np.add.at(per_type_d, k[mask], ddecay[mask])
    col = alpha.sum(axis=0)
    g_beta -= float(col @ per_type_d) / beta - float(col @ per_type) / beta**2
    return -ll, -g_mu, -g_alpha, -g_beta


def fit_hawkes(corpus, M: int | ActivityTaxonomy, lambda_min: float = 1e-6, maxiter: int = 500,
               init_beta: float = 1.0) -> HawkesModel:
    """Maximum likelihood with softplus-positive parameters and L-BFGS-B line searches."""
    M = M.M if isinstance(M, ActivityTaxonomy) else int(M)
    corpus = list(corpus)
    data = _pad(corpus, M)
    n_events = int(data[2].sum())
    exposure = float(data[3].sum())
    if n_events == 0 or exposure <= 0:
        return HawkesModel(np.full(M, lambda_min), np.zeros((M, M)), float(init_beta))
    counts = np.bincount(data[1][data[2]], minlength=M).astype(np.float64)
    rate = np.maximum(counts / exposure, lambda_min)
    x0 = np.concatenate([_inv_softplus(0.5 * rate), np.full(M * M, _inv_softplus(0.1 * init_beta / M)),
                         [_inv_softplus(init_beta)]])
    scale = 1.0 / len(corpus)
    history = []

    def unpack(x):
        return _softplus(x[:M]) + lambda_min, _softplus(x[M:M + M * M]).reshape(M, M), float(_softplus(x[-1]))

    def fg(x):
        mu, alpha, beta = unpack(x)
        f, gm, ga, gb = hawkes_nll(mu, alpha, beta, data, grad=True)
        g = np.concatenate([gm * expit(x[:M]), (ga.reshape(-1) * expit(x[M:M + M * M])), [gb * expit(x[-1])]])
        return f * scale, g * scale

    res = minimize(fg, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter},
                   callback=lambda xk: history.append(fg(xk)[0]))
    mu, alpha, beta = unpack(res.x)
    model = HawkesModel(mu, alpha, beta, nll_history=history)
    if model.spectral_radius() >= 1.0:
        model.explosive = True
        warnings.warn("fitted Hawkes process is explosive (spectral radius of alpha/beta >= 1)", RuntimeWarning)
    return model


def generate_hawkes(model: HawkesModel, start_ts: int, T: float, rng, user_id: str = "hawkes",
                    max_events: int = 100_000) -> ActivitySequence:
    """Ogata thinning: between events the total intensity only decreases, so its current value bounds it."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    events = []
    R = np.zeros(model.M)  # sum over past type-j events of exp(-beta (t - t_j))
    t = 0.0
    while T > 0 and len(events) < max_events:
        bound = float(np.sum(model.mu + model.alpha @ R))
        s = t + gen.exponential(1.0 / bound)
        if s >= T:
            break
        R = R * math.exp(-model.beta * (s - t))
        t = s
        lam = model.mu + model.alpha @ R
        u = gen.uniform() * bound
        if u >= lam.sum():
            continue
        k = min(int(np.searchsorted(np.cumsum(lam), u, side="right")), model.M - 1)
        events.append(Event(t, k))
        R[k] += 1.0
    return ActivitySequence(user_id, int(start_ts), float(T), tuple(events))
