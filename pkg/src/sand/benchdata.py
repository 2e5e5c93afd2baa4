"""Synthetic ground-truth activity corpus with known structure.

Each type k fires with intensity

    lambda_k(t) = hourly_k[hour(t)] * weekday_k[weekday(t)] * (1 - exp(-(t - t_k) / rho_k))

where ``t_k`` is the time of the user's previous type-k event (the factor is
1 before the first one and when ``rho_k`` is 0).  Sequences are drawn by
thinning against the constant bound ``sum_k max(hourly_k) * max(weekday_k)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import (SECONDS_PER_DAY, SECONDS_PER_HOUR, ActivitySequence, ActivityTaxonomy, Event, RngStream,
                   _EPOCH_WEEKDAY)
from .errors import ContractError

DEFAULT_START_TS = 1474243200  # a Monday, 00:00 UTC


@dataclass(frozen=True)
class GroundTruthSpec:
    hourly: np.ndarray  # (M, 24) events per hour
    weekday: np.ndarray  # (M, 7) multipliers, Monday first
    refractory: np.ndarray  # (M,) hours; 0 disables the suppression
    names: tuple = ()
    start_ts: int = DEFAULT_START_TS

    def __post_init__(self):
        h, w, r = (np.asarray(x, dtype=np.float64) for x in (self.hourly, self.weekday, self.refractory))
        object.__setattr__(self, "hourly", h)
        object.__setattr__(self, "weekday", w)
        object.__setattr__(self, "refractory", r)
        M = h.shape[0]
        if h.ndim != 2 or h.shape[1] != 24:
            raise ContractError("hourly profile must be (M, 24)")
        if w.shape != (M, 7):
            raise ContractError("weekday multipliers must be (M, 7)")
        if r.shape != (M,):
            raise ContractError("refractory scales must have one entry per type")
        if not (np.all(h > 0) and np.all(w > 0)):
            raise ContractError("rates and multipliers must be positive")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ContractError("refractory scales must be finite and non-negative")

    @property
    def M(self):
        return self.hourly.shape[0]

    def bound(self) -> float:
        return float(np.sum(self.hourly.max(axis=1) * self.weekday.max(axis=1)))

    def rates(self, t: float, last: np.ndarray) -> np.ndarray:
        """Per-type intensity at elapsed time ``t`` given last event times (nan = none)."""
        ts = self.start_ts + t * SECONDS_PER_HOUR
        hour = int((ts % SECONDS_PER_DAY) // SECONDS_PER_HOUR)
        wd = int((ts // SECONDS_PER_DAY + _EPOCH_WEEKDAY) % 7)
        lam = self.hourly[:, hour] * self.weekday[:, wd]
        on = (self.refractory > 0) & ~np.isnan(last)
        if on.any():
            gap = t - last[on]
            lam[on] = lam[on] * -np.expm1(-gap / self.refractory[on])
        return lam

    def expected_rates(self) -> np.ndarray:
        """Mean weekly rate per type ignoring refractory suppression (events / hour)."""
        return self.hourly.mean(axis=1) * self.weekday.mean(axis=1)

    def to_dict(self) -> dict:
        types = []
        for k in range(self.M):
            types.append({
                "name": self.names[k] if self.names else str(k),
                "hourly": self.hourly[k].tolist(),
                "weekday": self.weekday[k].tolist(),
                "refractory_hours": float(self.refractory[k]),
            })
        return {"start_ts": int(self.start_ts), "types": types}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthSpec":
        unknown = set(d) - {"start_ts", "types"}
        if unknown:
            raise ContractError(f"unknown spec keys {sorted(unknown)}")
        types = d["types"]
        if not types:
            raise ContractError("spec needs at least one type")
        for t in types:
            extra = set(t) - {"name", "hourly", "weekday", "refractory_hours"}
            if extra:
                raise ContractError(f"unknown type keys {sorted(extra)}")
        return cls(
            hourly=np.array([t["hourly"] for t in types], dtype=np.float64),
            weekday=np.array([t.get("weekday", [1.0] * 7) for t in types], dtype=np.float64),
            refractory=np.array([t.get("refractory_hours", 0.0) for t in types], dtype=np.float64),
            names=tuple(t.get("name", str(i)) for i, t in enumerate(types)),
            start_ts=int(d.get("start_ts", DEFAULT_START_TS)),
        )

    def check_taxonomy(self, tax: ActivityTaxonomy):
        if tax.M != self.M:
            raise ContractError(f"spec has {self.M} types but the taxonomy has {tax.M}")


def load_spec(path=None) -> GroundTruthSpec:
    if path is None:
        text = resources.files("sand").joinpath("data/benchmark_spec.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return GroundTruthSpec.from_dict(json.loads(text))


def default_spec() -> GroundTruthSpec:
    return load_spec()


def flat_spec(rate: float = 1.0, M: int = 1) -> GroundTruthSpec:
    """Homogeneous Poisson types with no refractory suppression."""
    return GroundTruthSpec(np.full((M, 24), rate), np.ones((M, 7)), np.zeros(M))


def generate_user(spec: GroundTruthSpec, T: float, rng: np.random.Generator, user_id: str = "u0") -> ActivitySequence:
    """One sequence on [0, T) by thinning against the constant bound."""
    bound = spec.bound()
    last = np.full(spec.M, np.nan)
    events = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / bound)
        if t >= T:
            break
        lam = spec.rates(t, last)
        u = rng.uniform() * bound
        total = lam.sum()
        if u >= total:
            continue
        k = int(np.searchsorted(np.cumsum(lam), u, side="right"))
        k = min(k, spec.M - 1)
        events.append(Event(t, k))
        last[k] = t
    return ActivitySequence(user_id, int(spec.start_ts), float(T), tuple(events))


def generate_corpus(spec: GroundTruthSpec, n_users: int, T: float = 168.0, seed: int = 0) -> list[ActivitySequence]:
    """``n_users`` sequences; user ``u`` draws from its own stream so corpora nest across sizes."""
    if n_users < 1:
        raise ContractError("n_users must be at least 1")
    if not (T > 0 and math.isfinite(T)):
        raise ContractError("horizon must be positive")
    root = RngStream(seed, 0)
    return [generate_user(spec, T, root.child("user", u).generator(), f"user{u:05d}") for u in range(n_users)]
