"""Maximum-likelihood pre-training and adversarial (GAIL) training of the policy."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .core import ActivityTaxonomy, Config, RngStream, validate_sequence
from .discriminator import DiscriminatorModel, auc, bce_loss, pair_features, reward, score
from .errors import CheckpointError, ContractError, DivergenceError, ValidationError
from .policy import PolicyModel, replay_batch, rollout


@dataclass
class TrainReport:
    kind: str
    seed: int
    config_hash: str
    nll: list = field(default_factory=list)  # per epoch (pre-training)
    disc_loss: list = field(default_factory=list)  # per iteration (GAIL)
    policy_loss: list = field(default_factory=list)
    mean_reward: list = field(default_factory=list)
    disc_auc: list = field(default_factory=list)
    final_nll: float | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class TrainingAborted(DivergenceError):
    """Training stopped on a non-finite value; ``model`` holds the last good parameters."""

    def __init__(self, message, model=None, report=None):
        super().__init__(message)
        self.model = model
        self.report = report


def _check_corpus(corpus, tax):
    corpus = list(corpus)
    if not corpus:
        raise ContractError("corpus must not be empty")
    for s in corpus:
        bad = validate_sequence(s, tax)
        if bad:
            raise ValidationError(s.user_id, bad)
    return corpus


def _emit(progress, record: dict):
    if progress is not None:
        progress(json.dumps(record, sort_keys=True))


def _batches(n: int, size: int, gen: np.random.Generator):
    order = gen.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def init_rates_from_data(model: PolicyModel, corpus) -> None:
    """Set the intensity head's output bias so each type starts at its empirical rate."""
    M = model.M
    counts = np.zeros(M)
    for s in corpus:
        counts += np.bincount(s.types, minlength=M)
    exposure = sum(s.horizon_T for s in corpus)
    rate = np.clip(counts / exposure, model.cfg.lambda_min * 10, model.cfg.lambda_max / 2)
    name = model.head.net.names[-1][1]
    model.store.values[name][...] = np.log(np.expm1(rate))


def corpus_nll(model: PolicyModel, corpus, batch_size: int = 64) -> float:
    """Mean negative log-likelihood per sequence."""
    tot = 0.0
    with dn.no_grad():
        for i in range(0, len(corpus), batch_size):
            tot -= float(replay_batch(model, corpus[i : i + batch_size]).loglik.sum())
    return tot / len(corpus)


def pretrain_mle(corpus, cfg: Config, tax: ActivityTaxonomy, seed: int | None = None, model: PolicyModel | None = None,
                 epochs: int | None = None, progress=None) -> tuple[PolicyModel, TrainReport]:
    """Minimise the mean sequence NLL with Adam over shuffled mini-batches.

    With ``epochs == 0`` the model is returned exactly as initialised.  For
    a positive epoch count the intensity head's output bias is first
    calibrated to the per-type empirical rates.
    """
    corpus = _check_corpus(corpus, tax)
    seed = cfg.seed if seed is None else seed
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    model = model or PolicyModel(cfg, tax, seed=seed)
    report = TrainReport("pretrain", seed, cfg.hash())
    t0 = time.perf_counter()
    if epochs <= 0 or cfg.disable_pretrain:
        report.wall_clock = time.perf_counter() - t0
        return model, report
    init_rates_from_data(model, corpus)
    opt = dn.AdamState(lr=cfg.pretrain_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    root = RngStream(seed, 0).child("pretrain")
    good = model.store.copy()
    for ep in range(epochs):
        gen = root.child("epoch", ep).generator()
        tot = 0.0
        for idx in _batches(len(corpus), cfg.batch_size, gen):
            batch = [corpus[i] for i in idx]
            model.store.zero_grad()
            try:
                with dn.Tape() as tape:
                    res = replay_batch(model, batch)
                    loss = dn.scale(res.objective, -1.0 / len(batch))
                if not math.isfinite(float(loss.value)):
                    raise DivergenceError("non-finite pre-training loss")
                tape.backward(loss)
                if not math.isfinite(model.store.grad_norm()):
                    raise DivergenceError("non-finite pre-training gradient")
            except DivergenceError as exc:
                model.store.assign(good)
                report.wall_clock = time.perf_counter() - t0
                raise TrainingAborted(f"epoch {ep}: {exc}", model, report) from exc
            dn.clip_grad_norm(model.store, cfg.grad_clip)
            dn.adam_step(model.store, model.store.grads, opt)
            tot -= float(res.loglik.sum())
        good = model.store.copy()
        report.nll.append(tot / len(corpus))
        _emit(progress, {"phase": "pretrain", "epoch": ep, "nll": report.nll[-1]})
    report.final_nll = corpus_nll(model, corpus)
    report.wall_clock = time.perf_counter() - t0
    return model, report


# -- adversarial training ---------------------------------------------------------


def rollout_batch(model: PolicyModel, templates, stream: RngStream, user_prefix: str = "sim"):
    """One rollout per template sequence (same start time and horizon)."""
    seqs, recs = [], []
    for b, tpl in enumerate(templates):
        seq, rec = rollout(model, tpl.start_ts, tpl.horizon_T, stream.child(b), user_id=f"{user_prefix}{b:05d}")
        seqs.append(seq)
        recs.append(rec)
    return seqs, recs


def real_states(model: PolicyModel, seqs):
    """Pre-jump need states at every real event, replayed through the current dynamics."""
    with dn.no_grad():
        return replay_batch(model, seqs, rule="left", tail_weight=0.0, collect_states=True).states


def _pairs(model, seqs, states, tax):
    return pair_features(seqs, states, tax, model.cfg.history_window)


def discriminator_step(disc: DiscriminatorModel, real, fake, opt: dn.AdamState, cfg: Config) -> float:
    disc.store.zero_grad()
    with dn.Tape() as tape:
        loss = bce_loss(disc, real, fake, cfg.real_label, cfg.fake_label)
    tape.backward(loss)
    dn.adam_step(disc.store, disc.store.grads, opt)
    return float(loss.value)


def policy_step(model: PolicyModel, seqs, rewards_per_seq, baseline: float, opt: dn.AdamState, cfg: Config) -> float:
    """REINFORCE: ascend sum_i (R_i - b) log p(a_i | s_i), averaged over actions."""
    n = sum(len(r) for r in rewards_per_seq)
    if n == 0:
        return 0.0
    weights = [np.asarray(r) - baseline for r in rewards_per_seq]
    model.store.zero_grad()
    with dn.Tape() as tape:
        res = replay_batch(model, seqs, rule="left", event_weights=weights, tail_weight=0.0)
        loss = dn.scale(res.objective, -1.0 / n)
    if not math.isfinite(float(loss.value)):
        raise DivergenceError("non-finite policy loss")
    tape.backward(loss)
    if not math.isfinite(model.store.grad_norm()):
        raise DivergenceError("non-finite policy gradient")
    dn.clip_grad_norm(model.store, cfg.grad_clip)
    dn.adam_step(model.store, model.store.grads, opt)
    return float(loss.value)


def _split(values, seqs):
    out, i = [], 0
    for s in seqs:
        out.append(values[i : i + len(s)])
        i += len(s)
    return out


def train_gail(corpus, cfg: Config, tax: ActivityTaxonomy, model: PolicyModel, seed: int | None = None,
               disc: DiscriminatorModel | None = None, iters: int | None = None,
               progress=None) -> tuple[PolicyModel, DiscriminatorModel, TrainReport]:
    """Alternate one discriminator step and one policy step per iteration."""
    corpus = _check_corpus(corpus, tax)
    seed = cfg.seed if seed is None else seed
    iters = cfg.gail_iters if iters is None else iters
    disc = disc or DiscriminatorModel(cfg, tax, model.dynamics.state_dim, seed=seed)
    report = TrainReport("gail", seed, cfg.hash())
    t0 = time.perf_counter()
    if cfg.disable_gail or iters <= 0:
        report.wall_clock = time.perf_counter() - t0
        return model, disc, report
    popt = dn.AdamState(lr=cfg.policy_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    dopt = dn.AdamState(lr=cfg.disc_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    root = RngStream(seed, 0).child("gail")
    good = model.store.copy()
    B = min(cfg.batch_size, len(corpus))
    for it in range(iters):
        gen = root.child("batch", it).generator()
        real = [corpus[i] for i in np.sort(gen.choice(len(corpus), B, replace=False))]
        try:
            fake, recs = rollout_batch(model, real, root.child("rollout", it))
            rp = _pairs(model, real, real_states(model, real), tax)
            fp = _pairs(model, fake, [r.states for r in recs], tax)
            d_loss = discriminator_step(disc, rp, fp, dopt, cfg) if len(fp) else float("nan")
            if len(fp):
                r = reward(disc, fp)
                baseline = float(r.mean())
                p_loss = policy_step(model, fake, _split(r, fake), baseline, popt, cfg)
                a = auc(score(disc, rp), score(disc, fp))
            else:
                baseline, p_loss, a = float("nan"), 0.0, float("nan")
        except DivergenceError as exc:
            model.store.assign(good)
            report.wall_clock = time.perf_counter() - t0
            raise TrainingAborted(f"iteration {it}: {exc}", model, report) from exc
        good = model.store.copy()
        report.disc_loss.append(d_loss)
        report.policy_loss.append(p_loss)
        report.mean_reward.append(baseline)
        report.disc_auc.append(a)
        _emit(progress, {"phase": "gail", "iter": it, "disc_loss": d_loss, "policy_loss": p_loss,
                         "mean_reward": baseline, "auc": a, "n_fake": len(fp)})
    report.wall_clock = time.perf_counter() - t0
    return model, disc, report


def train_discriminator_frozen(corpus, cfg: Config, tax: ActivityTaxonomy, model: PolicyModel, iters: int,
                               seed: int | None = None, pool: int = 64, eval_every: int = 10, progress=None):
    """Train only the discriminator against a frozen generator; returns (disc, [(iter, auc), ...]).

    Because the generator never changes, rollouts and real replay states are
    drawn once into fixed pools; AUC is measured on held-out real and
    generated sequences.
    """
    corpus = _check_corpus(corpus, tax)
    seed = cfg.seed if seed is None else seed
    root = RngStream(seed, 0).child("disc-only")
    gen = root.child("split").generator()
    order = gen.permutation(len(corpus))
    n_hold = max(1, min(len(corpus) // 5, pool // 2))
    held, train = [corpus[i] for i in order[:n_hold]], [corpus[i] for i in order[n_hold:]]
    if not train:
        train = held
    fake_train, rec_train = rollout_batch(model, [train[i % len(train)] for i in range(pool)], root.child("fake"))
    fake_held, rec_held = rollout_batch(model, held, root.child("fake-held"))
    real_pairs = _pairs(model, train, real_states(model, train), tax)
    fake_pairs = _pairs(model, fake_train, [r.states for r in rec_train], tax)
    held_real = _pairs(model, held, real_states(model, held), tax)
    held_fake = _pairs(model, fake_held, [r.states for r in rec_held], tax)
    disc = DiscriminatorModel(cfg, tax, model.dynamics.state_dim, seed=seed)
    opt = dn.AdamState(lr=cfg.disc_lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    per_seq = max(1, len(real_pairs) // max(1, len(train)))
    n_pairs = cfg.batch_size * per_seq
    trace = []
    for it in range(iters):
        g = root.child("iter", it).generator()
        rb = real_pairs.take(g.choice(len(real_pairs), min(n_pairs, len(real_pairs)), replace=False))
        fb = fake_pairs.take(g.choice(len(fake_pairs), min(n_pairs, len(fake_pairs)), replace=False))
        loss = discriminator_step(disc, rb, fb, opt, cfg)
        if (it + 1) % eval_every == 0 or it + 1 == iters:
            a = auc(score(disc, held_real), score(disc, held_fake))
            trace.append((it + 1, a))
            _emit(progress, {"phase": "disc-only", "iter": it, "disc_loss": loss, "auc": a})
    return disc, trace


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, model: PolicyModel, disc: DiscriminatorModel | None = None, extra: dict | None = None) -> None:
    """Policy (and optionally discriminator) parameters plus the config and taxonomy needed to rebuild them."""
    store = dn.ParamStore()
    for src in (model.store, disc.store if disc is not None else None):
        if src is not None:
            for name, v in src.values.items():
                store.add(name, v)
    meta = {"config": model.cfg.to_dict(), "taxonomy": model.tax.to_dict(), "has_disc": disc is not None}
    if extra:
        meta.update(extra)
    dn.save_params(store, path, meta)


def load_checkpoint(path) -> tuple[PolicyModel, DiscriminatorModel | None, dict]:
    doc = dn.read_checkpoint(path)
    meta = doc.get("meta")
    if not isinstance(meta, dict) or "config" not in meta or "taxonomy" not in meta:
        raise CheckpointError(f"{path}: missing config/taxonomy metadata")
    try:
        cfg = Config.from_dict(meta["config"])
        tax = ActivityTaxonomy.from_dict(meta["taxonomy"])
    except ContractError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    tensors = doc["tensors"]
    pol = {k: v for k, v in tensors.items() if not k.startswith("disc.")}
    like = PolicyModel(cfg, tax, seed=0).store
    model = PolicyModel(cfg, tax, store=dn.params_from_dict(pol, like))
    disc = None
    if meta.get("has_disc"):
        dt = {k: v for k, v in tensors.items() if k.startswith("disc.")}
        dlike = DiscriminatorModel(cfg, tax, model.dynamics.state_dim, seed=0).store
        disc = DiscriminatorModel(cfg, tax, model.dynamics.state_dim, store=dn.params_from_dict(dt, dlike))
    return model, disc, meta
