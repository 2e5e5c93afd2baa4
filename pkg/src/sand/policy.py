"""Conditional-intensity policy: intensities, thinning sampler, rollouts, likelihood."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .core import ActivitySequence, ActivityTaxonomy, Config, Event, RngStream, clock_features
from .dynamics import DynamicsNets, NeedState, substep_points
from .errors import ContractError, DivergenceError, SamplerStallError


class IntensityHead:
    """MLP from the concatenated need states to M clamped softplus intensities."""

    def __init__(self, store: dn.ParamStore, cfg: Config, state_dim: int, M: int, rng=None):
        self.cfg = cfg
        self.store = store
        self.net = dn.Mlp(dn.MlpSpec.make(state_dim, cfg.hidden, M, cfg.depth, head="softplus"), store, "head", rng)

    def __call__(self, z) -> dn.Tensor:
        """Intensities (B, M) from flattened need states (B, state_dim)."""
        lam = self.net(self.store, z)
        return dn.clamp(lam, self.cfg.lambda_min, self.cfg.lambda_max)


class PolicyModel:
    """Need dynamics plus intensity head sharing one parameter store."""

    def __init__(self, cfg: Config, tax: ActivityTaxonomy, store: dn.ParamStore | None = None, seed: int | None = None):
        self.cfg = cfg
        self.tax = tax
        rng = None
        if store is None:
            store = dn.ParamStore()
            rng = RngStream(cfg.seed if seed is None else seed, 0).child("init", "policy").generator()
        self.store = store
        self.dynamics = DynamicsNets(store, cfg, tax, rng)
        self.head = IntensityHead(store, cfg, self.dynamics.state_dim, tax.M, rng)

    @property
    def M(self):
        return self.tax.M

    def lam(self, c, h) -> dn.Tensor:
        return self.head(self.dynamics.flat(c, h))

    def intensities(self, state: NeedState) -> np.ndarray:
        with dn.no_grad():
            return self.head(dn.const(state.vector()[None, :])).value[0]


def intensities(model: PolicyModel, z: NeedState) -> np.ndarray:
    return model.intensities(z)


def type_distribution(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ContractError("intensities must be positive")
    return lam / lam.sum()


# -- batched replay -------------------------------------------------------------


@dataclass
class Timeline:
    """Merged substep grid for a batch: rows are sequences, columns substeps."""

    dt: np.ndarray  # (S, B) substep lengths, 0 for padding
    t0: np.ndarray  # (S, B) substep start times
    k: np.ndarray  # (S, B) event type at the substep end, -1 if none
    start_ts: np.ndarray  # (B,)
    clock: np.ndarray | None  # (S, B, 4)
    n_events: np.ndarray  # (B,)


def build_timeline(seqs, delta: float, with_clock: bool) -> Timeline:
    cols = []
    for s in seqs:
        T = s.horizon_T
        K = int(math.ceil(T / delta)) + 1
        grid = np.arange(1, K + 1, dtype=np.float64) * delta
        grid = grid[grid < T]
        times, types = s.times, s.types
        pts = np.unique(np.concatenate([grid, times, [T]]))
        ks = np.full(pts.size, -1, dtype=np.int64)
        if times.size:
            ks[np.searchsorted(pts, times)] = types
        t0 = np.concatenate([[0.0], pts[:-1]])
        cols.append((pts - t0, t0, ks, T))
    S = max(c[0].size for c in cols) if cols else 0
    B = len(seqs)
    dt = np.zeros((S, B))
    t0 = np.zeros((S, B))
    k = np.full((S, B), -1, dtype=np.int64)
    for b, (d, t, kk, T) in enumerate(cols):
        n = d.size
        dt[:n, b], t0[:n, b], k[:n, b] = d, t, kk
        t0[n:, b] = T
    start_ts = np.array([s.start_ts for s in seqs], dtype=np.int64)
    clock = clock_features(start_ts[None, :], t0) if with_clock else None
    n_events = np.array([len(s) for s in seqs], dtype=np.int64)
    return Timeline(dt, t0, k, start_ts, clock, n_events)


@dataclass
class ReplayResult:
    objective: dn.Tensor  # weighted sum of event log-densities and tails
    loglik: np.ndarray  # (B,) per-sequence log-likelihood values
    event_logp: list  # per sequence: array of per-event log-densities
    states: list | None  # per sequence: (n_events, D) pre-jump states


def replay_batch(model: PolicyModel, seqs, rule: str = "trapezoid", event_weights=None,
                 tail_weight: float = 1.0, collect_states: bool = False) -> ReplayResult:
    """Replay sequences through flow and jumps, accumulating log-densities.

    ``rule`` selects how the compensator is integrated on each substep:
    ``"trapezoid"`` (pre-training likelihood) or ``"left"`` (the piecewise
    constant envelope used by the sampler, so event densities match rollouts
    exactly).  The differentiable ``objective`` is
    ``sum_i w_i * logp_i + tail_weight * sum_b (-tail_integral_b)``.
    """
    if rule not in ("trapezoid", "left"):
        raise ContractError(f"unknown integration rule {rule!r}")
    cfg = model.cfg
    dyn = model.dynamics
    B = len(seqs)
    tl = build_timeline(seqs, cfg.delta, dyn.use_clock)
    if event_weights is None:
        wmat = None
    else:
        wmat = np.zeros((B, max(1, int(tl.n_events.max(initial=0)))))
        for b, w in enumerate(event_weights):
            wmat[b, : len(w)] = w
    c, h = dyn.initial_batch(B)
    lam = model.lam(c, h)
    tot = dn.tsum(lam, axis=-1)
    since = dn.const(np.zeros(B))
    objective = dn.const(0.0)
    counter = np.zeros(B, dtype=np.int64)
    ev_logp = [np.zeros(n) for n in tl.n_events]
    loglik = np.zeros(B)
    states = [np.zeros((n, dyn.state_dim)) for n in tl.n_events] if collect_states else None
    rows_all = np.arange(B)
    for j in range(tl.dt.shape[0]):
        dt_row = tl.dt[j]
        if not dt_row.any() and (tl.k[j] < 0).all():
            continue
        c, h = dyn.flow_step(c, h, dt_row, None if tl.clock is None else tl.clock[j])
        lam_end = model.lam(c, h)
        tot_end = dn.tsum(lam_end, axis=-1)
        if rule == "trapezoid":
            since = dn.add(since, dn.mul(dn.add(tot, tot_end), 0.5 * dt_row))
        else:
            since = dn.add(since, dn.mul(tot, dt_row))
        ks = tl.k[j]
        ev = ks >= 0
        if ev.any():
            lam_ev = lam_end if rule == "trapezoid" else lam
            picked = dn.getitem(lam_ev, (rows_all, np.where(ev, ks, 0)))
            logp = dn.sub(dn.log(picked), since)
            idx = counter[ev]
            vals = logp.value
            for b, i in zip(np.flatnonzero(ev), idx):
                ev_logp[b][i] = vals[b]
            if wmat is None:
                w = ev.astype(np.float64)
            else:
                w = np.zeros(B)
                w[ev] = wmat[ev, idx]
            objective = dn.add(objective, dn.tsum(dn.mul(logp, w)))
            if collect_states:
                zv = dyn.flat(c, h).value
                for b, i in zip(np.flatnonzero(ev), idx):
                    states[b][i] = zv[b]
            counter[ev] += 1
            since = dn.where(ev, 0.0, since)
            h = dyn.jump_step(c, h, ks)
            lam = model.lam(c, h)
            tot = dn.tsum(lam, axis=-1)
        else:
            lam, tot = lam_end, tot_end
    if tail_weight:
        objective = dn.sub(objective, dn.scale(dn.tsum(since), tail_weight))
    tail = since.value
    for b in range(B):
        loglik[b] = ev_logp[b].sum() - tail[b]
    return ReplayResult(objective, loglik, ev_logp, states)


def sequence_log_likelihood(model: PolicyModel, seq: ActivitySequence) -> float:
    """sum_i log lambda_{k_i}(t_i) - int_0^T lambda*(s) ds (trapezoid on the grid)."""
    with dn.no_grad():
        return float(replay_batch(model, [seq]).loglik[0])


# -- thinning sampler -----------------------------------------------------------


class ModelStepper:
    """Single-sequence state holder that the sampler advances between events.

    Generation never needs gradients, so the stepper evaluates the networks
    with plain numpy on a snapshot of the weights instead of going through
    the tape.
    """

    def __init__(self, model: PolicyModel, start_ts: int):
        self.model = model
        self.dyn = dyn = model.dynamics
        self.start_ts = start_ts
        v = model.store.values
        self._flow = _np_layers(v, dyn.flow)
        self._decay = _np_layers(v, dyn.decay)
        self._jump = _np_layers(v, dyn.jump)
        self._head = _np_layers(v, model.head.net)
        self._embed = v["dyn.embed"]
        self._lo, self._hi = model.cfg.lambda_min, model.cfg.lambda_max
        self.c = v["dyn.c0"][:, None, :].copy()
        self.h = v["dyn.h0"][:, None, :].copy()

    def snapshot(self):
        return self.c, self.h

    def restore(self, snap):
        self.c, self.h = snap

    def advance(self, t_from, dt):
        L = self.dyn.levels
        parts = [self.c, self.h]
        if self.dyn.use_clock:
            parts.append(np.broadcast_to(clock_features(self.start_ts, t_from), (L, 1, 4)))
        dc = _np_mlp(np.concatenate(parts, axis=-1), self._flow, True)
        alpha = _np_mlp(self.c, self._decay, True)
        c = self.c + dt * dc
        if not np.isfinite(c).all():
            bad = int(np.flatnonzero((~np.isfinite(c)).reshape(L, -1).any(axis=1))[0])
            raise DivergenceError(f"non-finite internal state at need level {bad + 1}")
        self.h = self.h * np.exp(-alpha * dt)
        self.c = c

    def lam(self) -> np.ndarray:
        return np.clip(_np_mlp(self.state_vector()[None, :], self._head, False)[0], self._lo, self._hi)

    def jump(self, k):
        i = self.dyn.level_index(k)
        L = self.dyn.levels
        emb = np.broadcast_to(self._embed[k], (L, 1, self._embed.shape[1]))
        delta = _np_mlp(np.concatenate([emb, self.c], axis=-1), self._jump, True)
        h = self.h.copy()
        h[i] = h[i] + delta[i]
        if not np.isfinite(h).all():
            raise DivergenceError("non-finite activity memory after a jump")
        self.h = h

    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.h], axis=-1).reshape(-1)

    def need_state(self, t: float) -> NeedState:
        return NeedState(tuple(self.c[:, 0].copy()), tuple(self.h[:, 0].copy()), float(t))


def _np_layers(values, mlp: dn.Mlp):
    return [(values[w], values[b], act) for (w, b), act in zip(mlp.names, mlp.spec.activations)]


def _np_mlp(x, layers, stacked):
    for W, b, act in layers:
        x = dn.activate(x @ W + (b[:, None, :] if stacked else b), act)
    return x


class ConstantStepper:
    """Frozen intensities; used to calibrate the sampler in isolation."""

    def __init__(self, lam):
        self._lam = np.asarray(lam, dtype=np.float64)

    def snapshot(self):
        return None

    def restore(self, snap):
        pass

    def advance(self, t_from, dt):
        pass

    def lam(self):
        return self._lam

    def jump(self, k):
        pass

    def state_vector(self):
        return np.zeros(0)


@dataclass
class Draw:
    t: float
    k: int
    log_lam: float
    integral: float  # compensator since the previous event
    state: np.ndarray  # pre-jump state at t


def _window_end(start: float, lookahead: float, delta: float, T: float) -> float:
    target = start + lookahead
    m = math.ceil(target / delta)
    g = m * delta
    while g < target:
        m += 1
        g = m * delta
    return min(g, T)


def thin_next(stepper, t_now: float, T: float, gen: np.random.Generator, cfg: Config):
    """Next event after ``t_now`` by thinning, or ``(None, tail_integral)``.

    The intensity is held constant on each substep at its value at the
    substep start (the latest grid point or ``t_now``).  Candidates come from
    a homogeneous envelope ``bound_mult * max`` over a lookahead window whose
    end is aligned to the grid.  On success the stepper is left at the
    pre-jump state of the accepted time.
    """
    delta = cfg.delta
    integral = 0.0
    win_start = t_now
    draws = 0
    while True:
        if win_start >= T:
            return None, integral
        win_end = _window_end(win_start, cfg.lookahead, delta, T)
        ends = substep_points(win_start, win_end, delta)
        starts = [win_start] + ends[:-1]
        snaps = [stepper.snapshot()]
        lams = [stepper.lam()]
        for a, b in zip(starts[:-1], ends[:-1]):
            stepper.advance(a, b - a)
            snaps.append(stepper.snapshot())
            lams.append(stepper.lam())
        tots = [float(l.sum()) for l in lams]
        bound = cfg.bound_mult * max(tots)
        s = win_start
        accepted = None
        while True:
            draws += 1
            if draws > cfg.max_candidates:
                raise SamplerStallError(f"more than {cfg.max_candidates} candidate draws near t={s:.3f}")
            s += gen.exponential(1.0 / bound)
            if s >= win_end:
                break
            j = bisect.bisect_right(starts, s) - 1
            if tots[j] > bound:
                bound *= 2.0
                s = win_start
                continue
            if gen.uniform() * bound <= tots[j]:
                accepted = j
                break
        if accepted is None:
            integral += sum(tot * (b - a) for tot, a, b in zip(tots, starts, ends))
            stepper.restore(snaps[-1])
            stepper.advance(starts[-1], ends[-1] - starts[-1])
            win_start = win_end
            continue
        j = accepted
        integral += sum(tot * (b - a) for tot, a, b in zip(tots[:j], starts[:j], ends[:j]))
        integral += tots[j] * (s - starts[j])
        cum = np.cumsum(lams[j])
        k = int(np.searchsorted(cum, gen.uniform() * cum[-1], side="right"))
        k = min(k, cum.size - 1)
        log_lam = math.log(lams[j][k])
        stepper.restore(snaps[j])
        if s > starts[j]:
            stepper.advance(starts[j], s - starts[j])
        return Draw(s, k, log_lam, integral, stepper.state_vector()), integral


def sample_next_event(model: PolicyModel, state_or_stepper, t_now: float, horizon_T: float, rng,
                      start_ts: int = 0):
    """(tau, k) of the next event after ``t_now``, or None if the horizon comes first.

    ``state_or_stepper`` is a stepper (advanced in place) or a NeedState.
    """
    if not t_now < horizon_T:
        raise ContractError("t_now must precede the horizon")
    stepper = state_or_stepper
    if isinstance(state_or_stepper, NeedState):
        stepper = ModelStepper(model, start_ts)
        stepper.c = np.stack(state_or_stepper.c)[:, None, :]
        stepper.h = np.stack(state_or_stepper.h)[:, None, :]
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    draw, _ = thin_next(stepper, t_now, horizon_T, gen, model.cfg)
    if draw is None:
        return None
    return draw.t - t_now, draw.k


# -- rollouts ---------------------------------------------------------------------


@dataclass
class RolloutRecord:
    events: list = field(default_factory=list)
    log_prob: list = field(default_factory=list)  # log lambda_k - compensator since previous event
    states: list = field(default_factory=list)  # pre-jump z(t_i)
    rewards: list = field(default_factory=list)
    tail_integral: float = 0.0
    truncated: bool = False

    def state_matrix(self, dim: int) -> np.ndarray:
        return np.array(self.states).reshape(-1, dim)


def rollout(model: PolicyModel, start_ts: int, horizon_T: float, rng, user_id: str = "sim",
            stepper=None) -> tuple[ActivitySequence, RolloutRecord]:
    """Alternate thinning and jumps from z(0) until the horizon or the event cap."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    rec = RolloutRecord()
    if horizon_T <= 0:
        return ActivitySequence(user_id, int(start_ts), float(horizon_T), ()), rec
    stepper = stepper or ModelStepper(model, start_ts)
    t = 0.0
    while True:
        if len(rec.events) >= model.cfg.max_events:
            rec.truncated = True
            break
        draw, integral = thin_next(stepper, t, horizon_T, gen, model.cfg)
        if draw is None:
            rec.tail_integral = integral
            break
        rec.events.append(Event(draw.t, draw.k))
        rec.log_prob.append(draw.log_lam - draw.integral)
        rec.states.append(draw.state)
        stepper.jump(draw.k)
        t = draw.t
    seq = ActivitySequence(user_id, int(start_ts), float(horizon_T), tuple(rec.events))
    return seq, rec
