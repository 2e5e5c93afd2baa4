"""Command-line entry point: ``sand <subcommand> [options]``.

Exit codes: 0 on success, 1 on contract or validation errors (including
bad usage), 2 on numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .core import (Config, RngStream, atomic_write_text, corpus_hash, default_taxonomy, load_config, load_taxonomy,
                   parse_dataset, write_dataset)
from .errors import DivergenceError, SandError

EXIT_OK, EXIT_CONTRACT, EXIT_DIVERGENCE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_manifest(out_path, command: str, cfg: Config | None, inputs: dict, outputs: dict, seed, started: float):
    """Write ``<out>.manifest.json`` next to a primary output."""
    doc = {
        "command": command,
        "config": cfg.to_dict() if cfg is not None else None,
        "config_hash": cfg.hash() if cfg is not None else None,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "started": started,
        "finished": time.time(),
        "git": _git_describe(),
    }
    atomic_write_text(f"{out_path}.manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _seed(args, cfg: Config | None = None) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("SAND_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise SandError(f"SAND_SEED must be an integer, got {env!r}") from None
    return cfg.seed if cfg is not None else 0


def _config(args) -> Config:
    cfg = load_config(args.config, args.set or ())
    seed = _seed(args, cfg)
    return cfg.replace(seed=seed)


def _taxonomy(args):
    return load_taxonomy(args.taxonomy) if getattr(args, "taxonomy", None) else default_taxonomy()


def _progress(line: str):
    print(line, flush=True)


# -- subcommands --------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from .benchdata import generate_corpus, load_spec

    started = time.time()
    seed = _seed(args)
    spec = load_spec(args.spec)
    seqs = generate_corpus(spec, args.users, args.horizon, seed)
    write_dataset(seqs, args.out)
    write_manifest(args.out, "synth-data", None, {"spec": args.spec}, {"corpus": args.out,
                   "corpus_hash": corpus_hash(seqs)}, seed, started)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .training import TrainingAborted, pretrain_mle, save_checkpoint

    started = time.time()
    cfg = _config(args)
    tax = _taxonomy(args)
    corpus = parse_dataset(args.data, tax)
    try:
        model, report = pretrain_mle(corpus, cfg, tax, progress=_progress)
    except TrainingAborted as exc:
        if exc.model is not None:
            save_checkpoint(args.out, exc.model, extra={"aborted": str(exc)})
        raise
    save_checkpoint(args.out, model)
    report_path = args.report or f"{args.out}.report.json"
    rep = report.to_dict()
    wall = rep.pop("wall_clock")
    atomic_write_text(report_path, json.dumps(rep, sort_keys=True) + "\n")
    write_manifest(args.out, "pretrain", cfg, {"data": args.data},
                   {"checkpoint": args.out, "report": report_path, "wall_clock": wall}, cfg.seed, started)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainingAborted, load_checkpoint, pretrain_mle, save_checkpoint, train_gail

    started = time.time()
    cfg = _config(args)
    tax = _taxonomy(args)
    corpus = parse_dataset(args.data, tax)
    reports = {}
    try:
        if args.init:
            model, _, meta = load_checkpoint(args.init)
            if model.cfg.disable_need_hierarchy != cfg.disable_need_hierarchy:
                raise SandError("--init checkpoint and config disagree on disable_need_hierarchy")
            model.cfg = cfg
            model.dynamics.cfg = cfg
            model.head.cfg = cfg
        else:
            model, rep = pretrain_mle(corpus, cfg, tax, progress=_progress)
            reports["pretrain"] = rep.to_dict()
        model, disc, rep = train_gail(corpus, cfg, tax, model, progress=_progress)
        reports["gail"] = rep.to_dict()
        # timings go to the manifest so the report itself is reproducible
        wall = {k: r.pop("wall_clock") for k, r in reports.items()}
    except TrainingAborted as exc:
        if exc.model is not None:
            save_checkpoint(args.out, exc.model, extra={"aborted": str(exc)})
        raise
    save_checkpoint(args.out, model, disc)
    report_path = args.report or f"{args.out}.report.json"
    atomic_write_text(report_path, json.dumps(reports, sort_keys=True) + "\n")
    write_manifest(args.out, "train", cfg, {"data": args.data, "init": args.init},
                   {"checkpoint": args.out, "report": report_path, "wall_clock": wall}, cfg.seed, started)
    return EXIT_OK


def _templates(args, cfg):
    from .benchdata import DEFAULT_START_TS

    if args.like:
        return [(s.start_ts, s.horizon_T) for s in parse_dataset(args.like)]
    horizon = args.horizon if args.horizon is not None else cfg.horizon_T
    return [(DEFAULT_START_TS, horizon)] * args.users


def _generate_chunk(job):
    from .policy import rollout
    from .training import load_checkpoint

    ckpt, seed, items = job
    model, _, _ = load_checkpoint(ckpt)
    root = RngStream(seed, 0).child("generate")
    return [rollout(model, ts, T, root.child(i), user_id=f"gen{i:05d}")[0] for i, ts, T in items]


def generate_sequences(ckpt, seed: int, templates, jobs: int = 1):
    """Roll out one sequence per template; sequence ``i`` always uses stream ``i``."""
    items = [(i, ts, T) for i, (ts, T) in enumerate(templates)]
    if jobs <= 1 or len(items) < 2:
        return _generate_chunk((ckpt, seed, items))
    chunks = [items[j::jobs] for j in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        parts = list(ex.map(_generate_chunk, [(ckpt, seed, c) for c in chunks if c]))
    out = [None] * len(items)
    for chunk, seqs in zip([c for c in chunks if c], parts):
        for (i, _, _), s in zip(chunk, seqs):
            out[i] = s
    return out


def cmd_generate(args) -> int:
    from .training import load_checkpoint

    started = time.time()
    model, _, _ = load_checkpoint(args.ckpt)
    seed = _seed(args, model.cfg)
    if args.jobs < 1:
        raise SandError("--jobs must be at least 1")
    seqs = generate_sequences(args.ckpt, seed, _templates(args, model.cfg), args.jobs)
    write_dataset(seqs, args.out)
    write_manifest(args.out, "generate", model.cfg, {"checkpoint": args.ckpt, "like": args.like},
                   {"corpus": args.out, "corpus_hash": corpus_hash(seqs)}, seed, started)
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .baselines import fit_hawkes, fit_semi_markov, generate_hawkes, generate_semi_markov

    started = time.time()
    seed = _seed(args)
    tax = _taxonomy(args)
    corpus = parse_dataset(args.data, tax)
    root = RngStream(seed, 0).child("baseline", args.kind)
    if args.kind == "semi-markov":
        model = fit_semi_markov(corpus, tax)
        seqs = [generate_semi_markov(model, s.start_ts, s.horizon_T, root.child(i), f"sm{i:05d}")
                for i, s in enumerate(corpus)]
    else:
        model = fit_hawkes(corpus, tax)
        seqs = [generate_hawkes(model, s.start_ts, s.horizon_T, root.child(i), f"hp{i:05d}")
                for i, s in enumerate(corpus)]
    write_dataset(seqs, args.out)
    write_manifest(args.out, f"baseline {args.kind}", None, {"data": args.data},
                   {"corpus": args.out, "model": model.to_dict()}, seed, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    started = time.time()
    tax = _taxonomy(args)
    gen = parse_dataset(args.gen, tax)
    real = parse_dataset(args.real, tax)
    report = evaluate(gen, real, tax)
    atomic_write_text(args.out, report.to_json() + "\n")
    write_manifest(args.out, "eval", None, {"gen": args.gen, "real": args.real}, {"report": args.out}, None, started)
    print(report.to_json())
    return EXIT_OK


def cmd_trace(args) -> int:
    from .evaluation import export_intensity_trace
    from .policy import rollout
    from .training import load_checkpoint

    started = time.time()
    model, _, _ = load_checkpoint(args.ckpt)
    seed = _seed(args, model.cfg)
    if args.data:
        seqs = parse_dataset(args.data, model.tax)
        if not 0 <= args.index < len(seqs):
            raise SandError(f"--index {args.index} outside [0, {len(seqs)})")
        seq = seqs[args.index]
    else:
        from .benchdata import DEFAULT_START_TS

        seq, _ = rollout(model, DEFAULT_START_TS, model.cfg.horizon_T, RngStream(seed, 0).child("trace"))
    n = export_intensity_trace(model, seq, args.delta, args.out)
    write_manifest(args.out, "trace", model.cfg, {"checkpoint": args.ckpt, "data": args.data},
                   {"trace": args.out, "rows": n}, seed, started)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import PATHS, TOLERANCE, run_all

    seeds = tuple(range(args.seeds))
    errors = run_all(seeds, PATHS)
    failed = [p for p, e in errors.items() if not e < TOLERANCE]
    print(json.dumps({"tolerance": TOLERANCE, "seeds": list(seeds), "max_rel_error": errors, "failed": failed},
                     sort_keys=True))
    return EXIT_CONTRACT if failed else EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sand", description="Need-driven activity sequence simulator.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True, taxonomy=True):
        sp.add_argument("--seed", type=int, default=None, help="random seed (falls back to SAND_SEED)")
        if config:
            sp.add_argument("--config", default=None, help="JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if taxonomy:
            sp.add_argument("--taxonomy", default=None, help="taxonomy JSON (default: bundled)")

    sp = sub.add_parser("synth-data", help="sample the synthetic benchmark corpus")
    sp.add_argument("--spec", default=None, help="ground-truth spec JSON (default: bundled)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--users", type=int, default=500)
    sp.add_argument("--horizon", type=float, default=168.0)
    common(sp, config=False, taxonomy=False)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("pretrain", help="maximum-likelihood pre-training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", default=None)
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="adversarial training (pre-trains first unless --init is given)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--init", default=None, help="pre-trained checkpoint")
    sp.add_argument("--report", default=None)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="roll out sequences from a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--users", type=int, default=500)
    sp.add_argument("--horizon", type=float, default=None)
    sp.add_argument("--like", default=None, help="copy start times and horizons from this corpus")
    sp.add_argument("--jobs", type=int, default=1)
    common(sp, config=False, taxonomy=False)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("baseline", help="fit a classical baseline and generate from it")
    sp.add_argument("--kind", choices=("semi-markov", "hawkes"), required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("eval", help="six-metric JSD report")
    sp.add_argument("--gen", required=True)
    sp.add_argument("--real", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--taxonomy", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("trace", help="export per-level intensities on the grid as CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", default=None, help="corpus holding the sequence to replay")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--delta", type=float, default=None)
    common(sp, config=False, taxonomy=False)
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("grad-check", help="central-difference gradient checks")
    sp.add_argument("--seeds", type=int, default=3)
    sp.set_defaults(func=cmd_grad_check)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"sand: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (SandError, ValueError, OSError) as exc:
        print(f"sand: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
