"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation performed on tensors that require a
gradient while it is active.  Records are appended in evaluation order, so
the reversed record list is already a valid topological order for the
backward sweep.  Outside a tape every op is a thin numpy wrapper.

Layers are fused (affine map plus nonlinearity is one record) to keep the
per-op Python overhead low when unrolling thousands of integration steps.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, ContractError

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("tanh", "softplus", "sigmoid", "identity")

_active: "Tape | None" = None


class Tensor:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def const(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _wrap(x):
    return x if isinstance(x, Tensor) else const(x)


class Tape:
    """Records operations for one backward pass; consumed by :meth:`backward`."""

    def __init__(self):
        self.records = []
        self.leaves = {}
        self.consumed = False
        self._prev = None

    def __enter__(self):
        global _active
        self._prev, _active = _active, self
        return self

    def __exit__(self, *exc):
        global _active
        _active = self._prev
        return False

    def leaf(self, store: "ParamStore", name: str) -> Tensor:
        key = (id(store), name)
        entry = self.leaves.get(key)
        if entry is None:
            entry = self.leaves[key] = (Tensor(store.values[name], requires_grad=True), store, name)
        return entry[0]

    def backward(self, loss: Tensor, seed_grad=None) -> None:
        """Accumulate d(loss)/d(param) into every ParamStore that was read."""
        if self.consumed:
            raise ContractError("tape already consumed by a previous backward pass")
        self.consumed = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value) if seed_grad is None else np.asarray(seed_grad, dtype=np.float64)
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)
                out.grad = None
        for t, store, name in self.leaves.values():
            if t.grad is not None:
                store.grads[name] += t.grad
        self.records.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _rec(out: Tensor, fn, *inputs) -> Tensor:
    if _active is not None and any(isinstance(x, Tensor) and x.requires_grad for x in inputs):
        out.requires_grad = True
        _active.records.append((out, fn))
    return out


def _acc(t, g):
    if isinstance(t, Tensor) and t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@contextmanager
def no_grad():
    global _active
    prev, _active = _active, None
    try:
        yield
    finally:
        _active = prev


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value + b.value)

    def back(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return _rec(out, back, a, b)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value - b.value)

    def back(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, -_unbroadcast(g, b.value.shape))

    return _rec(out, back, a, b)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value * b.value)

    def back(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return _rec(out, back, a, b)


def scale(a, c: float):
    out = Tensor(a.value * c)
    return _rec(out, lambda g: _acc(a, g * c), a)


def tanh(x):
    y = np.tanh(x.value)
    return _rec(Tensor(y), lambda g: _acc(x, g * (1.0 - y * y)), x)


def softplus(x):
    y = np.logaddexp(0.0, x.value)
    return _rec(Tensor(y), lambda g: _acc(x, g * expit(x.value)), x)


def sigmoid(x):
    y = expit(x.value)
    return _rec(Tensor(y), lambda g: _acc(x, g * y * (1.0 - y)), x)


def exp(x):
    y = np.exp(x.value)
    return _rec(Tensor(y), lambda g: _acc(x, g * y), x)


def log(x):
    return _rec(Tensor(np.log(x.value)), lambda g: _acc(x, g / x.value), x)


def clamp(x, lo, hi):
    y = np.clip(x.value, lo, hi)

    def back(g):
        _acc(x, g * ((x.value >= lo) & (x.value <= hi)))

    return _rec(Tensor(y), back, x)


def where(mask, a, b):
    """Select ``a`` where ``mask`` (broadcast against the operands) else ``b``."""
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.where(mask, a.value, b.value))

    def back(g):
        _acc(a, _unbroadcast(np.where(mask, g, 0.0), a.value.shape))
        _acc(b, _unbroadcast(np.where(mask, 0.0, g), b.value.shape))

    return _rec(out, back, a, b)


# -- structural ---------------------------------------------------------------


def matmul(x, W):
    x, W = _wrap(x), _wrap(W)
    out = Tensor(x.value @ W.value)

    def back(g):
        _acc(x, g @ W.value.T)
        if W.requires_grad:
            d = x.value.shape[-1]
            _acc(W, x.value.reshape(-1, d).T @ g.reshape(-1, g.shape[-1]))

    return _rec(out, back, x, W)


def concat(xs, axis=-1):
    xs = [_wrap(x) for x in xs]
    vals = [x.value for x in xs]
    out = Tensor(np.concatenate(vals, axis=axis))
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        for x, gi in zip(xs, np.split(g, sizes, axis=axis)):
            _acc(x, gi)

    return _rec(out, back, *xs)


def getitem(x, idx):
    out = Tensor(x.value[idx])

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, idx, g)
        _acc(x, full)

    return _rec(out, back, x)


def take_rows(table, idx):
    """Embedding lookup: ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx)
    out = Tensor(table.value[idx])

    def back(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        _acc(table, full)

    return _rec(out, back, table)


def tsum(x, axis=None):
    out = Tensor(np.asarray(x.value.sum(axis=axis)))

    def back(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.value.shape).copy())
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape).copy())

    return _rec(out, back, x)


def mean(x):
    return scale(tsum(x), 1.0 / x.value.size)


# -- fused ops used by the dynamics -------------------------------------------


def _act(z, act):
    if act == "tanh":
        return np.tanh(z)
    if act == "softplus":
        return np.logaddexp(0.0, z)
    if act == "sigmoid":
        return expit(z)
    return z


activate = _act


def _act_grad(z, y, act):
    if act == "tanh":
        return 1.0 - y * y
    if act == "softplus":
        return expit(z)
    if act == "sigmoid":
        return y * (1.0 - y)
    return None


def dense(x, W, b, act="identity"):
    """``act(x @ W + b)`` as a single record."""
    z = x.value @ W.value + b.value
    y = _act(z, act)

    def back(g):
        d = _act_grad(z, y, act)
        gz = g if d is None else g * d
        _acc(x, gz @ W.value.T)
        if W.requires_grad:
            _acc(W, x.value.reshape(-1, W.value.shape[0]).T @ gz.reshape(-1, W.value.shape[1]))
        if b.requires_grad:
            _acc(b, gz.reshape(-1, W.value.shape[1]).sum(axis=0))

    return _rec(Tensor(y), back, x, W, b)


def euler(c, dt, dc):
    """``c + dt * dc`` with ``dt`` a constant column (B, 1) or scalar."""
    out = Tensor(c.value + dt * dc.value)

    def back(g):
        _acc(c, g)
        _acc(dc, _unbroadcast(g * dt, dc.value.shape))

    return _rec(out, back, c, dc)


def exp_decay(h, alpha, dt):
    """``h * exp(-alpha * dt)``; exact and stable for any positive rate."""
    f = np.exp(-alpha.value * dt)
    y = h.value * f

    def back(g):
        _acc(h, _unbroadcast(g * f, h.value.shape))
        _acc(alpha, _unbroadcast(-g * y * dt, alpha.value.shape))

    return _rec(Tensor(y), back, h, alpha)


def masked_add(h, delta, mask):
    """``where(mask, h + delta, h)``; untouched rows stay bit-identical."""
    y = np.where(mask, h.value + delta.value, h.value)

    def back(g):
        _acc(h, g)
        _acc(delta, _unbroadcast(np.where(mask, g, 0.0), delta.value.shape))

    return _rec(Tensor(y), back, h, delta)


def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to ``mask``; masked entries get 0."""
    s = np.where(mask, scores.value, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(s - m), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    w = e / np.where(z > 0, z, 1.0)

    def back(g):
        _acc(scores, w * (g - (g * w).sum(axis=-1, keepdims=True)))

    return _rec(Tensor(w), back, scores)


def log_sigmoid(x):
    """``log(sigmoid(x)) = -softplus(-x)``, finite for large negative x."""
    y = -np.logaddexp(0.0, -x.value)
    return _rec(Tensor(y), lambda g: _acc(x, g * expit(-x.value)), x)


# -- parameters ---------------------------------------------------------------


@dataclass
class ParamStore:
    """Named float64 arrays plus identically shaped gradient slots."""

    values: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def add(self, name, value):
        if name in self.values:
            raise ContractError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name) -> Tensor:
        """The parameter as a Tensor; a gradient leaf when a tape is active."""
        if _active is not None:
            return _active.leaf(self, name)
        return Tensor(self.values[name])

    def names(self):
        return list(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore(version=self.version)
        for k, v in self.values.items():
            out.add(k, v.copy())
        return out

    def assign(self, other: "ParamStore"):
        """Copy values from ``other`` in place (names and shapes must match)."""
        for k, v in self.values.items():
            v[...] = other.values[k]

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def equals(self, other: "ParamStore") -> bool:
        return self.values.keys() == other.values.keys() and all(
            np.array_equal(v, other.values[k]) for k, v in self.values.items()
        )


def glorot(rng: np.random.Generator, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple  # input width first
    activations: tuple  # one per layer

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ContractError("an MLP needs at least one layer with positive widths")
        if len(self.activations) != len(self.widths) - 1:
            raise ContractError("one activation per layer is required")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ContractError(f"activations must be among {ACTIVATIONS}")

    @classmethod
    def make(cls, n_in, hidden, n_out, depth, head="identity", act="tanh"):
        widths = (n_in,) + (hidden,) * (depth - 1) + (n_out,)
        return cls(widths, (act,) * (depth - 1) + (head,))

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]


class Mlp:
    """An MLP whose weights live in a ParamStore under ``prefix``.

    With ``stack=L`` every weight gets a leading axis of length L and the
    network maps inputs shaped (L, B, n_in) to (L, B, n_out), i.e. L
    independent networks evaluated with one batched matmul per layer.
    """

    def __init__(self, spec: MlpSpec, store: ParamStore, prefix: str, rng=None, zero_last=False, stack=None):
        self.spec = spec
        self.prefix = prefix
        self.stack = stack
        self.names = []
        lead = () if stack is None else (stack,)
        for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            w_name, b_name = f"{prefix}.{i}.W", f"{prefix}.{i}.b"
            if w_name not in store:
                last = i == len(spec.widths) - 2
                if rng is None or (zero_last and last):
                    store.add(w_name, np.zeros(lead + (a, b)))
                else:
                    store.add(w_name, np.stack([glorot(rng, a, b) for _ in range(stack)]) if stack else glorot(rng, a, b))
                store.add(b_name, np.zeros(lead + (b,)))
            self.names.append((w_name, b_name))

    def __call__(self, store: ParamStore, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, store, x, self.names, stacked=self.stack is not None)


def mlp_forward(spec: MlpSpec, store: ParamStore, x, names, stacked=False) -> Tensor:
    """Evaluate every layer of the MLP as one tape record."""
    x = _wrap(x)
    if x.value.shape[-1] != spec.n_in:
        raise ContractError(f"MLP input width {x.value.shape[-1]} != {spec.n_in}")
    params = [(store[w], store[b]) for w, b in names]
    acts = spec.activations
    ins, zs = [], []
    y = x.value
    for (W, b), act in zip(params, acts):
        ins.append(y)
        z = y @ W.value + (b.value[:, None, :] if stacked else b.value)
        zs.append(z)
        y = _act(z, act)

    def back(g):
        for i in range(len(params) - 1, -1, -1):
            W, b = params[i]
            z = zs[i]
            yi = ins[i + 1] if i + 1 < len(ins) else y
            d = _act_grad(z, yi, acts[i])
            gz = g if d is None else g * d
            xin = ins[i]
            if W.requires_grad:
                if stacked:
                    _acc(W, np.matmul(xin.swapaxes(-1, -2), gz))
                    _acc(b, gz.sum(axis=-2))
                else:
                    _acc(W, xin.reshape(-1, xin.shape[-1]).T @ gz.reshape(-1, gz.shape[-1]))
                    _acc(b, gz.reshape(-1, gz.shape[-1]).sum(axis=0))
            if i > 0 or x.requires_grad:
                g = gz @ W.value.swapaxes(-1, -2)
        _acc(x, g)

    return _rec(Tensor(y), back, x, *[t for pair in params for t in pair])


def attention_pool(store: ParamStore, prefix: str, xs, mask=None) -> Tensor:
    """Additive attention: ``sum_i softmax(v . tanh(W x_i)) * value(x_i)``.

    ``xs`` is either a list of equal-length vectors or a Tensor shaped
    (..., L, d) with an optional boolean ``mask`` of shape (..., L).
    """
    if isinstance(xs, (list, tuple)):
        if len(xs) == 0:
            raise ContractError("attention_pool needs at least one element")
        xs = concat([_reshape_row(_wrap(x)) for x in xs], axis=0)
    xs = _wrap(xs)
    if mask is None:
        mask = np.ones(xs.value.shape[:-1], dtype=bool)
    weights = attention_weights(store, prefix, xs, mask)
    values = dense(xs, store[f"{prefix}.Wv"], store[f"{prefix}.bv"])
    pooled = tsum(mul(_expand_last(weights), values), axis=-2)
    return pooled


def attention_weights(store, prefix, xs, mask):
    hidden = dense(xs, store[f"{prefix}.W"], store[f"{prefix}.b"], "tanh")
    scores = _squeeze_last(matmul(hidden, store[f"{prefix}.v"]))
    return masked_softmax(scores, mask)


def init_attention(store: ParamStore, prefix: str, d_in: int, d_attn: int, d_out: int, rng):
    store.add(f"{prefix}.W", glorot(rng, d_in, d_attn))
    store.add(f"{prefix}.b", np.zeros(d_attn))
    store.add(f"{prefix}.v", glorot(rng, d_attn, 1))
    store.add(f"{prefix}.Wv", glorot(rng, d_in, d_out))
    store.add(f"{prefix}.bv", np.zeros(d_out))


def _reshape_row(x):
    out = Tensor(x.value.reshape(1, -1))
    return _rec(out, lambda g: _acc(x, g.reshape(x.value.shape)), x)


def _expand_last(x):
    out = Tensor(x.value[..., None])
    return _rec(out, lambda g: _acc(x, g[..., 0]), x)


def _squeeze_last(x):
    out = Tensor(x.value[..., 0])
    return _rec(out, lambda g: _acc(x, g[..., None]), x)


# -- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.values.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    norm = params.grad_norm()
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        for g in params.grads.values():
            g *= f
    return norm


# -- serialisation ------------------------------------------------------------


def params_to_dict(params: ParamStore) -> dict:
    return {
        name: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
        for name, v in params.values.items()
    }


def save_params(params: ParamStore, path, meta=None) -> None:
    from .core import atomic_write_text

    doc = {"version": params.version, "tensors": params_to_dict(params)}
    if meta is not None:
        doc["meta"] = meta
    atomic_write_text(path, json.dumps(doc, separators=(",", ":")) + "\n")


def read_checkpoint(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or "tensors" not in doc:
        raise CheckpointError(f"{path}: missing 'tensors'")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version {doc.get('version')!r} != {CHECKPOINT_VERSION}")
    return doc


def params_from_dict(tensors: dict, like: ParamStore | None = None) -> ParamStore:
    if like is not None:
        unknown = sorted(set(tensors) - set(like.values))
        if unknown:
            raise CheckpointError(f"unknown parameter names: {unknown}")
        missing = sorted(set(like.values) - set(tensors))
        if missing:
            raise CheckpointError(f"missing parameter names: {missing}")
    out = ParamStore()
    for name, t in tensors.items():
        shape = tuple(t["shape"])
        data = np.array(t["data"], dtype=np.float64)
        if data.size != math.prod(shape):
            raise CheckpointError(f"{name}: {data.size} values for shape {shape}")
        if like is not None and like.values[name].shape != shape:
            raise CheckpointError(f"{name}: shape {shape} != {like.values[name].shape}")
        out.add(name, data.reshape(shape))
    return out


def load_params(path, like: ParamStore | None = None) -> ParamStore:
    return params_from_dict(read_checkpoint(path)["tensors"], like)


# -- gradient checking --------------------------------------------------------


def numeric_grad_check(loss_fn, params: ParamStore, eps=1e-4, max_entries=None, rng=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(params)`` must return a scalar Tensor.  The relative error of a
    parameter tensor is ``|g_a - g_n| / max(|g_a|, |g_n|)`` over the checked
    entries (Euclidean norms).
    """
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn(params)
    tape.backward(loss)
    worst = 0.0
    with no_grad():
        for name, p in params.values.items():
            flat = p.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn(params).value)
                flat[i] = orig - eps
                down = float(loss_fn(params).value)
                flat[i] = orig
                num[j] = (up - down) / (2.0 * eps)
            ana = params.grads[name].reshape(-1)[idx]
            scale_ = max(np.linalg.norm(ana), np.linalg.norm(num))
            if scale_ > 1e-10:
                worst = max(worst, float(np.linalg.norm(ana - num) / scale_))
    params.zero_grad()
    return worst


def grad_check(spec: MlpSpec, seed: int) -> float:
    """Check an MLP built from ``spec`` on a random input and random loss weights."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    net = Mlp(spec, store, "net", rng)
    for name in store.names():
        if name.endswith(".b"):
            store.values[name][...] = rng.normal(0.0, 0.1, store.values[name].shape)
    x = const(rng.normal(size=(3, spec.n_in)))
    w = const(rng.normal(size=(3, spec.n_out)))
    return numeric_grad_check(lambda s: tsum(mul(net(s, x), w)), store)


def expand(x, axis: int, n: int):
    """Insert a new axis of length ``n`` at ``axis`` by repetition."""
    v = np.expand_dims(x.value, axis)
    shape = list(v.shape)
    shape[axis] = n
    out = Tensor(np.broadcast_to(v, shape).copy())
    return _rec(out, lambda g: _acc(x, g.sum(axis=axis)), x)


def levels_to_rows(x):
    """(L, B, n) -> (B, L * n), level-major within each row."""
    L, B, n = x.value.shape
    out = Tensor(x.value.transpose(1, 0, 2).reshape(B, L * n))
    return _rec(out, lambda g: _acc(x, g.reshape(B, L, n).transpose(1, 0, 2)), x)
