"""Domain types, dataset I/O, calendar features, configuration and RNG streams."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError, ValidationError

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400
# 1970-01-01 was a Thursday; weekday 0 is Monday.
_EPOCH_WEEKDAY = 3

_SEQUENCE_KEYS = ("user_id", "start_ts", "horizon_T", "events")
_EVENT_KEYS = ("t", "k")


@dataclass(frozen=True)
class Event:
    t: float
    k: int


@dataclass(frozen=True)
class ActivitySequence:
    user_id: str
    start_ts: int
    horizon_T: float
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        if not isinstance(self.events, tuple):
            object.__setattr__(self, "events", tuple(self.events))

    def __len__(self):
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.t for e in self.events], dtype=np.float64)

    @property
    def types(self) -> np.ndarray:
        return np.array([e.k for e in self.events], dtype=np.int64)

    def counts_by_level(self, tax: "ActivityTaxonomy", t: float) -> tuple[int, int, int]:
        """N_i(t): number of level-i events strictly before ``t``."""
        out = [0, 0, 0]
        for e in self.events:
            if e.t >= t:
                break
            out[tax.need_level[e.k] - 1] += 1
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "start_ts": self.start_ts,
            "horizon_T": self.horizon_T,
            "events": [{"t": e.t, "k": e.k} for e in self.events],
        }

    @classmethod
    def from_arrays(cls, user_id, start_ts, horizon_T, times, types):
        events = tuple(Event(float(t), int(k)) for t, k in zip(times, types))
        return cls(str(user_id), int(start_ts), float(horizon_T), events)


@dataclass(frozen=True)
class ActivityTaxonomy:
    M: int
    names: tuple[str, ...]
    need_level: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "need_level", tuple(int(v) for v in self.need_level))
        if self.M < 1 or len(self.names) != self.M or len(self.need_level) != self.M:
            raise ContractError("taxonomy: M, names and need_level must agree in length")
        if any(v not in (1, 2, 3) for v in self.need_level):
            raise ContractError("taxonomy: need levels must be in {1, 2, 3}")
        if set(self.need_level) != {1, 2, 3}:
            raise ContractError("taxonomy: every need level needs at least one activity")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        return {"M": self.M, "names": list(self.names), "need_level": list(self.need_level)}

    @classmethod
    def from_dict(cls, d: dict) -> "ActivityTaxonomy":
        if set(d) != {"M", "names", "need_level"}:
            raise ContractError(f"taxonomy keys must be M, names, need_level; got {sorted(d)}")
        return cls(int(d["M"]), tuple(d["names"]), tuple(d["need_level"]))


def need_level_of(tax: ActivityTaxonomy, k) -> int:
    if isinstance(k, str):
        k = tax.index(k)
    if not 0 <= k < tax.M:
        raise ContractError(f"activity type {k} out of range [0, {tax.M})")
    return tax.need_level[k]


def load_taxonomy(path) -> ActivityTaxonomy:
    with open(path, encoding="utf-8") as fh:
        return ActivityTaxonomy.from_dict(json.load(fh))


def save_taxonomy(tax: ActivityTaxonomy, path) -> None:
    Path(path).write_text(json.dumps(tax.to_dict()) + "\n", encoding="utf-8")


def default_taxonomy() -> ActivityTaxonomy:
    text = resources.files("sand").joinpath("data/taxonomy.json").read_text(encoding="utf-8")
    return ActivityTaxonomy.from_dict(json.loads(text))


# -- calendar ---------------------------------------------------------------


def calendar_features(start_ts: int, t: float) -> tuple[int, int]:
    """(hour of day, weekday with Monday = 0) in UTC for elapsed hours ``t``."""
    if start_ts < 0:
        raise ContractError("start_ts must be non-negative")
    ts = int(start_ts) + int(round(t * SECONDS_PER_HOUR))
    return (ts % SECONDS_PER_DAY) // SECONDS_PER_HOUR, (ts // SECONDS_PER_DAY + _EPOCH_WEEKDAY) % 7


def calendar_arrays(start_ts: int, times) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`calendar_features`."""
    ts = int(start_ts) + np.round(np.asarray(times, dtype=np.float64) * SECONDS_PER_HOUR).astype(np.int64)
    return (ts % SECONDS_PER_DAY) // SECONDS_PER_HOUR, (ts // SECONDS_PER_DAY + _EPOCH_WEEKDAY) % 7


def clock_features(start_ts, times) -> np.ndarray:
    """Continuous daily and weekly phase as (sin, cos, sin, cos), shape (..., 4)."""
    ts = np.asarray(start_ts, dtype=np.float64) + np.asarray(times, dtype=np.float64) * SECONDS_PER_HOUR
    day = 2.0 * math.pi * np.mod(ts, SECONDS_PER_DAY) / SECONDS_PER_DAY
    week = 2.0 * math.pi * np.mod(ts + _EPOCH_WEEKDAY * SECONDS_PER_DAY, 7 * SECONDS_PER_DAY) / (7 * SECONDS_PER_DAY)
    return np.stack([np.sin(day), np.cos(day), np.sin(week), np.cos(week)], axis=-1)


# -- validation & I/O -------------------------------------------------------


def validate_sequence(seq: ActivitySequence, tax: ActivityTaxonomy | None = None) -> list[str]:
    """Return the list of violated invariants; an empty list means the sequence is valid."""
    out = []
    if not seq.horizon_T > 0 or not math.isfinite(seq.horizon_T):
        out.append("horizon must be positive")
    if seq.start_ts < 0:
        out.append("start_ts must be non-negative")
    prev = None
    for i, e in enumerate(seq.events):
        if not math.isfinite(e.t) or e.t < 0:
            out.append(f"event {i}: negative or non-finite time")
        if prev is not None and not e.t > prev:
            out.append(f"event {i}: non-monotonic time")
        if e.t >= seq.horizon_T:
            out.append(f"event {i}: event at/after horizon")
        if e.k < 0 or (tax is not None and e.k >= tax.M):
            out.append(f"event {i}: type out of range")
        prev = e.t
    return out


def _as_int(v, what, line):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{what} must be an integer", line)
    return v


def _as_real(v, what, line):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{what} must be a number", line)
    return float(v)


def sequence_from_dict(d, line=None) -> ActivitySequence:
    if not isinstance(d, dict):
        raise ParseError("expected a JSON object", line)
    keys = set(d)
    if keys != set(_SEQUENCE_KEYS):
        extra = sorted(keys - set(_SEQUENCE_KEYS))
        missing = sorted(set(_SEQUENCE_KEYS) - keys)
        raise ParseError(f"bad keys (unknown={extra}, missing={missing})", line)
    if not isinstance(d["user_id"], str):
        raise ParseError("user_id must be a string", line)
    if not isinstance(d["events"], list):
        raise ParseError("events must be an array", line)
    events = []
    for e in d["events"]:
        if not isinstance(e, dict) or set(e) != set(_EVENT_KEYS):
            raise ParseError('each event must be {"t": number, "k": integer}', line)
        events.append(Event(_as_real(e["t"], "t", line), _as_int(e["k"], "k", line)))
    return ActivitySequence(
        d["user_id"],
        _as_int(d["start_ts"], "start_ts", line),
        _as_real(d["horizon_T"], "horizon_T", line),
        tuple(events),
    )


def parse_dataset(path, tax: ActivityTaxonomy | None = None) -> list[ActivitySequence]:
    """Read a JSONL corpus; every returned sequence is valid."""
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
            seq = sequence_from_dict(obj, lineno)
            problems = validate_sequence(seq, tax)
            if problems:
                raise ValidationError(seq.user_id, problems)
            seqs.append(seq)
    return seqs


def dumps_sequence(seq: ActivitySequence) -> str:
    return json.dumps(seq.to_dict(), separators=(",", ":"))


def write_dataset(seqs: Iterable[ActivitySequence], path) -> None:
    text = "".join(dumps_sequence(s) + "\n" for s in seqs)
    atomic_write_text(path, text)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# -- RNG --------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Counter-based (Philox) random stream keyed by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "RngStream":
        """Derive an independent stream from this one and a tuple of labels."""
        digest = hashlib.blake2b(repr((self.stream_id,) + labels).encode(), digest_size=8).digest()
        return RngStream(self.seed, int.from_bytes(digest, "little"))


# -- configuration ----------------------------------------------------------


@dataclass
class Config:
    # need dynamics
    n1: int = 16
    n2: int = 16
    d_k: int = 8
    hidden: int = 64
    depth: int = 2
    flow_time_features: bool = True
    scalar_decay: bool = False
    delta: float = 0.1
    # policy
    horizon_T: float = 168.0
    lambda_min: float = 1e-6
    lambda_max: float = 50.0
    max_events: int = 200
    lookahead: float = 2.0
    bound_mult: float = 2.0
    max_candidates: int = 1_000_000
    # discriminator
    d_hour: int = 4
    d_weekday: int = 3
    d_type: int = 8
    d_level: int = 2
    attn_dim: int = 32
    disc_hidden: int = 64
    history_window: int = 32
    # training
    batch_size: int = 16
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    policy_lr: float = 1e-4
    disc_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gail_iters: int = 200
    real_label: float = 0.9
    fake_label: float = 0.0
    grad_clip: float = 5.0
    # ablations
    disable_need_hierarchy: bool = False
    disable_gail: bool = False
    disable_pretrain: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.delta > 0:
            raise ContractError("delta must be positive")
        if not self.lambda_max > 0 or not 0 < self.lambda_min < self.lambda_max:
            raise ContractError("need 0 < lambda_min < lambda_max")
        if self.n1 < 1 or self.n2 < 1:
            raise ContractError("n1 and n2 must be at least 1")
        if self.depth < 1 or self.hidden < 1:
            raise ContractError("depth and hidden must be at least 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        return cls(**d)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, pairs: Sequence[str]) -> "Config":
        """Apply ``key=value`` overrides, coercing to the field's type."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        updates = {}
        for pair in pairs:
            if "=" not in pair:
                raise ContractError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            if key not in types:
                raise ContractError(f"unknown config key {key!r}")
            current = getattr(self, key)
            if isinstance(current, bool):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ContractError(f"{key} expects a boolean")
                updates[key] = raw.lower() in ("true", "1")
            elif isinstance(current, int):
                updates[key] = int(raw)
            else:
                updates[key] = float(raw)
        return self.replace(**updates)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path=None, overrides: Sequence[str] = ()) -> Config:
    cfg = Config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = Config.from_dict(json.load(fh))
    return cfg.with_overrides(overrides) if overrides else cfg


def corpus_hash(seqs: Sequence[ActivitySequence]) -> str:
    h = hashlib.sha256()
    for s in seqs:
        h.update(dumps_sequence(s).encode())
    return h.hexdigest()[:16]


__all__ = [
    "ActivitySequence",
    "ActivityTaxonomy",
    "Config",
    "Event",
    "RngStream",
    "calendar_arrays",
    "calendar_features",
    "clock_features",
    "default_taxonomy",
    "load_config",
    "need_level_of",
    "parse_dataset",
    "validate_sequence",
    "write_dataset",
]
