"""Need embedding process: per-level spontaneous flow and instantaneous jumps.

Each need level ``i`` carries an internal state ``c_i`` and an activity memory
``h_i``.  Between events ``c_i`` follows a learned drift (forward Euler) and
``h_i`` decays at a learned positive rate (exponential Euler, so the decay is
exact for a frozen rate and never overshoots).  An event of level ``i`` adds
a learned increment to ``h_i`` only.

All integration substeps are aligned to the global grid ``m * delta``
anchored at t = 0; an interval ``[a, b]`` is cut at every grid point strictly
inside it, so integrating ``[a, m] + [m, b]`` and ``[a, b]`` coincide exactly
whenever ``m`` is itself a grid point.

Batched kernels operate on (L, B, n) tensors, one slab per level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffnet as dn
from .core import ActivitySequence, ActivityTaxonomy, Config, Event, clock_features, need_level_of
from .errors import ContractError, DivergenceError

N_CLOCK = 4


@dataclass(frozen=True)
class NeedState:
    """z(t) for one sequence: per-level ``c`` (n1,) and ``h`` (n2,) arrays."""

    c: tuple
    h: tuple
    t: float = 0.0

    @property
    def levels(self):
        return len(self.c)

    def vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([c, h]) for c, h in zip(self.c, self.h)])

    def is_finite(self) -> bool:
        return all(np.isfinite(c).all() for c in self.c) and all(np.isfinite(h).all() for h in self.h)


def substep_points(t_from: float, t_to: float, delta: float) -> list[float]:
    """Substep end points for ``[t_from, t_to]``: interior grid points, then ``t_to``."""
    if t_to < t_from:
        raise ContractError(f"t_to={t_to} precedes t_from={t_from}")
    if not delta > 0:
        raise ContractError("delta must be positive")
    if t_to == t_from:
        return []
    pts = []
    m = math.floor(t_from / delta) + 1
    g = m * delta
    while g <= t_from:
        m += 1
        g = m * delta
    while g < t_to:
        pts.append(g)
        m += 1
        g = m * delta
    pts.append(t_to)
    return pts


class DynamicsNets:
    """Flow, decay and jump networks for every need level plus z(0).

    The per-level networks are stored stacked along a leading level axis
    (``dyn.flow.0.W`` has shape (L, n_in, n_out)) so that all levels advance
    with one batched matmul.  Batched state is a pair of tensors ``c`` of
    shape (L, B, n1) and ``h`` of shape (L, B, n2).
    """

    def __init__(self, store: dn.ParamStore, cfg: Config, tax: ActivityTaxonomy, rng=None):
        self.cfg = cfg
        self.tax = tax
        self.store = store
        self.levels = L = 1 if cfg.disable_need_hierarchy else 3
        levels = np.asarray(tax.need_level, dtype=np.int64) - 1
        self.level_of_type = np.zeros_like(levels) if L == 1 else levels
        self.use_clock = cfg.flow_time_features
        n1, n2, hid, depth = cfg.n1, cfg.n2, cfg.hidden, cfg.depth
        n_decay = 1 if cfg.scalar_decay else n2
        flow_in = n1 + n2 + (N_CLOCK if self.use_clock else 0)
        mk = dn.MlpSpec.make
        self.flow = dn.Mlp(mk(flow_in, hid, n1, depth), store, "dyn.flow", rng, zero_last=True, stack=L)
        self.decay = dn.Mlp(mk(n1, hid, n_decay, depth, head="softplus"), store, "dyn.decay", rng, stack=L)
        self.jump = dn.Mlp(mk(cfg.d_k + n1, hid, n2, depth), store, "dyn.jump", rng, zero_last=True, stack=L)
        if "dyn.c0" not in store:
            store.add("dyn.c0", np.zeros((L, n1)))
            store.add("dyn.h0", np.zeros((L, n2)))
        if "dyn.embed" not in store:
            emb = dn.glorot(rng, tax.M, cfg.d_k) if rng is not None else np.zeros((tax.M, cfg.d_k))
            store.add("dyn.embed", emb)

    @property
    def state_dim(self):
        return self.levels * (self.cfg.n1 + self.cfg.n2)

    # -- single-sequence helpers -------------------------------------------

    def initial_state(self) -> NeedState:
        v = self.store.values
        return NeedState(tuple(v["dyn.c0"].copy()), tuple(v["dyn.h0"].copy()), 0.0)

    def level_index(self, k: int) -> int:
        need_level_of(self.tax, k)
        return int(self.level_of_type[k])

    # -- batched kernels ------------------------------------------------------

    def initial_batch(self, B: int):
        return dn.expand(self.store["dyn.c0"], 1, B), dn.expand(self.store["dyn.h0"], 1, B)

    def derivatives(self, c, h, clock=None):
        """(dc/dt, alpha), each shaped (L, B, .), for batched state."""
        parts = [c, h]
        if self.use_clock:
            L, B = c.value.shape[:2]
            parts.append(dn.const(np.broadcast_to(clock, (L, B, N_CLOCK))))
        dc = self.flow(self.store, dn.concat(parts))
        alpha = self.decay(self.store, c)
        return dc, alpha

    def flow_step(self, c, h, dt, clock=None):
        """Advance all levels by one substep; ``dt`` is a float or a (B,) array."""
        dt = np.asarray(dt, dtype=np.float64)
        dtb = dt[None, :, None] if dt.ndim == 1 else dt
        dc, alpha = self.derivatives(c, h, clock)
        c_new = dn.euler(c, dtb, dc)
        if not np.isfinite(c_new.value).all():
            bad = int(np.flatnonzero((~np.isfinite(c_new.value)).reshape(self.levels, -1).any(axis=1))[0])
            raise DivergenceError(f"non-finite internal state at need level {bad + 1}")
        return c_new, dn.exp_decay(h, alpha, dtb)

    def jump_step(self, c, h, ks):
        """Apply jumps for rows with ``ks >= 0``; rows with -1 are left untouched."""
        ks = np.asarray(ks)
        active = ks >= 0
        if not active.any():
            return h
        safe = np.where(active, ks, 0)
        lvl = np.where(active, self.level_of_type[safe], -1)
        mask = (lvl[None, :] == np.arange(self.levels)[:, None])[:, :, None]
        emb = dn.expand(dn.take_rows(self.store["dyn.embed"], safe), 0, self.levels)
        delta = self.jump(self.store, dn.concat([emb, c]))
        new_h = dn.masked_add(h, delta, mask)
        if not np.isfinite(new_h.value).all():
            raise DivergenceError("non-finite activity memory after a jump")
        return new_h

    def flat(self, c, h):
        """(B, L * (n1 + n2)) rows ``[c_1, h_1, c_2, h_2, ...]``."""
        return dn.levels_to_rows(dn.concat([c, h]))

    def clock(self, start_ts, t):
        if not self.use_clock:
            return None
        return np.atleast_2d(clock_features(start_ts, t))


def _to_batch(state: NeedState):
    return dn.const(np.stack(state.c)[:, None, :]), dn.const(np.stack(state.h)[:, None, :])


def _from_batch(c, h, t, row=0) -> NeedState:
    return NeedState(tuple(c.value[:, row].copy()), tuple(h.value[:, row].copy()), float(t))


def flow_derivative(nets: DynamicsNets, level: int, state: NeedState, start_ts: int = 0):
    """(dc_i/dt, alpha_i) for ``level`` in 1..L at the given state."""
    if not state.is_finite():
        raise ContractError("state must be finite")
    i = level - 1
    c, h = _to_batch(state)
    with dn.no_grad():
        dc, alpha = nets.derivatives(c, h, nets.clock(start_ts, state.t))
    return dc.value[i, 0], alpha.value[i, 0]


def integrate_flow(nets: DynamicsNets, state: NeedState, t_from: float, t_to: float, delta: float,
                   start_ts: int = 0, trajectory: bool = False):
    """Flow ``state`` from ``t_from`` to ``t_to`` on the aligned grid.

    Returns the final state, or ``(state, [(t, NeedState), ...])`` with the
    grid trajectory (including the start point) when ``trajectory`` is set.
    """
    pts = substep_points(t_from, t_to, delta)
    c, h = _to_batch(state)
    traj = [(t_from, state)] if trajectory else None
    prev = t_from
    with dn.no_grad():
        for p in pts:
            c, h = nets.flow_step(c, h, np.array([p - prev]), nets.clock(start_ts, prev))
            prev = p
            if trajectory:
                traj.append((p, _from_batch(c, h, p)))
    out = _from_batch(c, h, t_to) if pts else NeedState(state.c, state.h, float(t_to))
    return (out, traj) if trajectory else out


def apply_jump(nets: DynamicsNets, state: NeedState, event: Event, tax: ActivityTaxonomy | None = None) -> NeedState:
    """Instantaneous jump for ``event``; only the event level's ``h`` changes."""
    i = nets.level_index(event.k)
    c, h = _to_batch(state)
    with dn.no_grad():
        new_h = nets.jump_step(c, h, np.array([event.k]))
    hs = list(state.h)
    hs[i] = new_h.value[i, 0].copy()
    return NeedState(state.c, tuple(hs), state.t)


def replay_state(nets: DynamicsNets, seq: ActivitySequence, t: float, delta: float) -> NeedState:
    """z(t) after replaying every event strictly before ``t`` (left-continuous)."""
    if t > seq.horizon_T:
        raise ContractError("query time beyond the sequence horizon")
    state = nets.initial_state()
    now = 0.0
    for e in seq.events:
        if e.t >= t:
            break
        state = integrate_flow(nets, state, now, e.t, delta, seq.start_ts)
        state = apply_jump(nets, state, e)
        now = e.t
    return integrate_flow(nets, state, now, t, delta, seq.start_ts)
