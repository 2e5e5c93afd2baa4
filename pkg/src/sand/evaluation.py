"""Fidelity metrics: six activity-pattern histograms compared by Jensen-Shannon divergence."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ActivitySequence, ActivityTaxonomy, atomic_write_text, calendar_arrays
from .dynamics import substep_points
from .errors import ContractError, EmptyMetricError

METRICS = ("macro_int", "micro_int", "daily_act", "act_type", "weekday", "hour")
_ALIASES = {"macroint": "macro_int", "microint": "micro_int", "dailyact": "daily_act", "acttype": "act_type"}

INTERVAL_EDGES = np.append(np.linspace(0.0, 48.0, 25), np.inf)
DAILY_MAX = 20


def _kind(kind: str) -> str:
    k = kind.lower().replace("-", "_")
    k = _ALIASES.get(k.replace("_", ""), k)
    if k not in METRICS:
        raise ContractError(f"unknown metric kind {kind!r}")
    return k


@dataclass
class MetricHistogram:
    kind: str
    edges: np.ndarray | None  # interval bin edges, or None for categorical kinds
    labels: tuple
    mass: np.ndarray
    n_obs: int

    def __post_init__(self):
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-12:
            raise ContractError("histogram mass must be non-negative and sum to one")


def _interval_counts(gaps) -> np.ndarray:
    gaps = np.asarray(gaps, dtype=np.float64)
    idx = np.minimum(np.floor(gaps / 2.0).astype(np.int64), 24)
    return np.bincount(idx, minlength=25).astype(np.float64)


def macro_intervals(corpus) -> np.ndarray:
    parts = [np.diff(s.times) for s in corpus if len(s) > 1]
    return np.concatenate(parts) if parts else np.zeros(0)


def micro_intervals(corpus, k: int) -> np.ndarray:
    """Gaps between consecutive type-``k`` events of the same individual."""
    parts = []
    for s in corpus:
        t = s.times[s.types == k]
        if t.size > 1:
            parts.append(np.diff(t))
    return np.concatenate(parts) if parts else np.zeros(0)


def daily_counts(corpus) -> np.ndarray:
    """Events per elapsed 24 h window per individual (complete windows only)."""
    out = []
    for s in corpus:
        n_days = max(1, int(math.floor(s.horizon_T / 24.0 + 1e-9)))
        day = np.floor(s.times / 24.0).astype(np.int64)
        out.append(np.bincount(day[day < n_days], minlength=n_days))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def histogram(corpus, kind: str, tax: ActivityTaxonomy, k: int | None = None) -> MetricHistogram:
    """Normalised histogram of one metric; ``k`` selects the type for MicroInt."""
    kind = _kind(kind)
    corpus = list(corpus)
    edges = None
    if kind == "macro_int":
        obs = macro_intervals(corpus)
        counts, edges, labels = _interval_counts(obs), INTERVAL_EDGES, ()
    elif kind == "micro_int":
        if k is None:
            raise ContractError("MicroInt needs a type index")
        obs = micro_intervals(corpus, k)
        counts, edges, labels = _interval_counts(obs), INTERVAL_EDGES, ()
    elif kind == "daily_act":
        obs = daily_counts(corpus)
        counts = np.bincount(np.minimum(obs, DAILY_MAX), minlength=DAILY_MAX + 1).astype(np.float64)
        labels = tuple(str(i) for i in range(DAILY_MAX)) + (f">={DAILY_MAX}",)
        if sum(len(s) for s in corpus) == 0:
            obs = np.zeros(0)
    elif kind == "act_type":
        obs = np.concatenate([s.types for s in corpus]) if corpus else np.zeros(0, dtype=np.int64)
        if obs.size and obs.max() >= tax.M:
            raise ContractError("event type outside the taxonomy")
        counts, labels = np.bincount(obs, minlength=tax.M).astype(np.float64), tuple(tax.names)
    else:
        cal = [calendar_arrays(s.start_ts, s.times) for s in corpus]
        i = 1 if kind == "weekday" else 0
        n = 7 if kind == "weekday" else 24
        obs = np.concatenate([c[i] for c in cal]) if cal else np.zeros(0, dtype=np.int64)
        counts, labels = np.bincount(obs, minlength=n).astype(np.float64), tuple(str(x) for x in range(n))
    if obs.size == 0:
        raise EmptyMetricError(kind if k is None else f"{kind}[{k}]")
    return MetricHistogram(kind, edges, labels, counts / counts.sum(), int(obs.size))


def _entropy2(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def jsd(P, Q) -> float:
    """Jensen-Shannon divergence with base-2 logarithms, in [0, 1]."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 1:
        raise ContractError("JSD needs two mass vectors of equal length")
    for v in (P, Q):
        if np.any(v < 0) or not np.all(np.isfinite(v)) or abs(v.sum() - 1.0) > 1e-9:
            raise ContractError("JSD inputs must be non-negative and sum to one")
    M = 0.5 * (P + Q)
    d = _entropy2(M) - 0.5 * (_entropy2(P) + _entropy2(Q))
    return float(min(1.0, max(0.0, d)))


@dataclass
class EvalReport:
    macro_int: float
    micro_int: float
    daily_act: float
    act_type: float
    weekday: float
    hour: float
    warnings: list = field(default_factory=list)
    n_gen: int = 0
    n_real: int = 0
    config_hash: str | None = None

    def values(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}

    def mean(self) -> float:
        return float(np.mean(list(self.values().values())))

    def to_dict(self) -> dict:
        d = self.values()
        d["warnings"] = list(self.warnings)
        d["corpus_sizes"] = {"gen": self.n_gen, "real": self.n_real}
        d["config_hash"] = self.config_hash
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        sizes = d.get("corpus_sizes", {})
        return cls(*(float(d[m]) for m in METRICS), warnings=list(d.get("warnings", [])),
                   n_gen=int(sizes.get("gen", 0)), n_real=int(sizes.get("real", 0)), config_hash=d.get("config_hash"))


def evaluate(gen_corpus, real_corpus, tax: ActivityTaxonomy, config_hash: str | None = None) -> EvalReport:
    """Six JSD values between a generated and a real corpus."""
    gen_corpus, real_corpus = list(gen_corpus), list(real_corpus)
    warnings = []
    vals = {}
    for kind in METRICS:
        if kind == "micro_int":
            continue
        real = histogram(real_corpus, kind, tax)
        try:
            gen = histogram(gen_corpus, kind, tax)
        except EmptyMetricError:
            warnings.append(f"{kind}: generated corpus has no observations; JSD set to 1")
            vals[kind] = 1.0
            continue
        vals[kind] = jsd(gen.mass, real.mass)
    per_type = []
    for k in range(tax.M):
        try:
            real = histogram(real_corpus, "micro_int", tax, k)
        except EmptyMetricError:
            continue
        try:
            gen = histogram(gen_corpus, "micro_int", tax, k)
        except EmptyMetricError:
            warnings.append(f"micro_int[{tax.names[k]}]: type absent from generated intervals; JSD set to 1")
            per_type.append(1.0)
            continue
        per_type.append(jsd(gen.mass, real.mass))
    if not per_type:
        raise EmptyMetricError("micro_int")
    vals["micro_int"] = float(np.mean(per_type))
    return EvalReport(**vals, warnings=warnings, n_gen=len(gen_corpus), n_real=len(real_corpus), config_hash=config_hash)


def mean_jsd(report: EvalReport) -> float:
    return report.mean()


# -- intensity trace ------------------------------------------------------------


def intensity_trace(model, seq: ActivitySequence, delta: float | None = None) -> list[tuple]:
    """Rows ``(t, level sums..., k or None)`` on the delta grid plus one post-jump row per event."""
    from .policy import ModelStepper

    delta = model.cfg.delta if delta is None else delta
    if not delta > 0:
        raise ContractError("delta must be positive")
    levels = np.asarray(model.tax.need_level, dtype=np.int64) - 1

    def level_sums(lam):
        return tuple(float(x) for x in np.bincount(levels, weights=lam, minlength=3))

    stepper = ModelStepper(model, seq.start_ts)
    T = seq.horizon_T
    n_grid = int(math.floor(T / delta + 1e-9))
    rows = []
    marks = [(m * delta, None) for m in range(n_grid + 1)] + [(e.t, e.k) for e in seq.events]
    marks.sort(key=lambda r: (r[0], r[1] is not None))
    now = 0.0
    for t, k in marks:
        prev = now
        for p in substep_points(now, t, delta):
            stepper.advance(prev, p - prev)
            prev = p
        now = t
        if k is not None:
            stepper.jump(k)
        rows.append((t,) + level_sums(stepper.lam()) + (k,))
    return rows


def export_intensity_trace(model, seq: ActivitySequence, delta: float | None, path) -> int:
    """Write the trace CSV; returns the number of data rows."""
    rows = intensity_trace(model, seq, delta)
    buf = io.StringIO()
    buf.write("t,lambda_l1,lambda_l2,lambda_l3,event_k\n")
    for t, a, b, c, k in rows:
        buf.write(f"{t!r},{a!r},{b!r},{c!r},{'' if k is None else k}\n")
    atomic_write_text(path, buf.getvalue())
    return len(rows)
