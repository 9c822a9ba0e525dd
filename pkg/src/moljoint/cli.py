"""Batch command-line surface.

Commands: pretrain, finetune, sample, optimize, evaluate. Every run
writes its resolved configuration to ``config_echo.json`` in the output
directory (enough to re-run the command identically) plus a manifest of
produced files. Fixed --seed makes every command reproducible
end-to-end; JT_SEED in the environment is the seed fallback.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import generation as gen
from . import model as mdl
from . import objectives as obj
from . import training as tr
from .numerics import NonFiniteError, Rng
from .smiles import TokenizeError, build_vocabulary, validate
from .training import Checkpoint, Dataset, TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # unknown flags and bad values are configuration errors (exit 1)
    def error(self, message):
        raise ConfigError(message)


def _seed_default() -> int:
    return int(os.environ.get("JT_SEED", "0"))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="seed (fallback: JT_SEED env, then 0)")
    p.add_argument("--out-dir", default=None, help="output directory (default: runs/<timestamp>-<cmd>)")


def _add_model_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model")
    g.add_argument("--max-len", type=int, default=128)
    g.add_argument("--embed-dim", type=int, default=256)
    g.add_argument("--n-layers", type=int, default=6)
    g.add_argument("--n-heads", type=int, default=8)
    g.add_argument("--ff-dim", type=int, default=1024)
    g.add_argument("--dropout-rate", type=float, default=0.1)
    g.add_argument("--predictor-hidden-dim", type=int, default=100)
    g.add_argument("--predictor-layers", type=int, default=1)


_TRAIN_FLAGS = [f.name for f in fields(TrainConfig)]


def _add_train_flags(p: argparse.ArgumentParser, finetune: bool):
    defaults = TrainConfig.finetune_defaults() if finetune else TrainConfig()
    g = p.add_argument_group("training")
    for f in fields(TrainConfig):
        if f.name in ("seed",):
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name in ("decay_lr", "encoder_term", "generation_task"):
            g.add_argument(flag, type=lambda v: v.lower() in ("1", "true", "yes"),
                           default=default, metavar="BOOL")
        elif f.name == "decay_iters":
            g.add_argument(flag, type=int, default=None)
        else:
            g.add_argument(flag, type=type(default), default=default)


def _train_config(args, seed: int) -> TrainConfig:
    kwargs = {name: getattr(args, name) for name in _TRAIN_FLAGS if name != "seed"}
    return TrainConfig(seed=seed, **kwargs)


def _resolve_out_dir(args, command: str) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    else:
        out = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{command}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir: Path, command: str, seed: int, resolved: dict) -> None:
    doc = {"command": command, "seed": seed, **resolved}
    (out_dir / "config_echo.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


def _write_manifest(out_dir: Path, entries: list[str]) -> None:
    (out_dir / "manifest.json").write_text(json.dumps({"outputs": sorted(entries)}, indent=1))


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _require_path(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{kind} path does not exist: {path}")
    return p


def _load_checkpoint(path: str) -> Checkpoint:
    _require_path(path, "checkpoint")
    try:
        return Checkpoint.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}") from None


def cmd_pretrain(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    data_path = _require_path(args.data, "data")
    out_dir = _resolve_out_dir(args, "pretrain")
    lines = tr.read_smiles_lines(data_path)
    if not lines:
        raise DataError(f"no usable lines in {data_path}")
    try:
        vocab = build_vocabulary(lines)
        dataset = tr.encode_corpus(lines, vocab, args.max_len)
    except TokenizeError as e:
        raise DataError(str(e)) from None
    mcfg = mdl.ModelConfig(
        vocab_size=len(vocab), max_len=args.max_len, embed_dim=args.embed_dim,
        n_layers=args.n_layers, n_heads=args.n_heads, ff_dim=args.ff_dim,
        dropout_rate=args.dropout_rate, predictor_hidden_dim=args.predictor_hidden_dim,
        predictor_layers=args.predictor_layers,
    )
    tcfg = _train_config(args, seed)
    _echo_config(out_dir, "pretrain", seed, {
        "data": str(data_path), "model": mcfg.to_dict(), "train": tcfg.to_dict(),
    })
    loss_log = (out_dir / "loss.log").open("w")
    loss_log.write("iter\ttask\tloss\n")

    def log_cb(it, loss, task):
        loss_log.write(f"{it}\t{task.value}\t{loss:.6f}\n")

    ckpt_dir = out_dir / "checkpoint"
    state = tr.pretrain(dataset, vocab, mcfg, tcfg, log_cb=log_cb, checkpoint_dir=ckpt_dir)
    loss_log.close()
    report = ev.MetricsReport(sample_count=0, metadata={
        "seed": seed, "checkpoint": str(ckpt_dir), "iterations": state.iteration,
        "config_hash": _config_hash(tcfg.to_dict() | mcfg.to_dict()),
    })
    (out_dir / "metrics.json").write_text(report.to_json())
    _write_manifest(out_dir, ["config_echo.json", "loss.log", "checkpoint", "metrics.json"])
    print(f"pretrained {state.iteration} iterations -> {ckpt_dir}")
    return EXIT_OK


def _sampled_strings(state: Checkpoint, n: int, seed: int) -> list[str]:
    cfg = gen.SamplerConfig(seed=seed)
    return [s.smiles for s in gen.sample_batch(state.params, state.vocab, cfg, n)]


def cmd_finetune(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    base = _load_checkpoint(args.checkpoint)
    out_dir = _resolve_out_dir(args, "finetune")
    if args.data is None and args.objective is None:
        raise ConfigError("finetune needs --data (SMILES<TAB>y) or --objective for auto-labeling")

    objective = obj.make_objective(args.objective, args.objective_params) if args.objective else None
    try:
        if args.data is not None:
            data_path = _require_path(args.data, "data")
            if objective is not None:
                lines = tr.read_smiles_lines(data_path)
                dataset = tr.encode_corpus(lines, base.vocab, base.model_config.max_len)
                dataset = obj.label_dataset(dataset, objective, base.vocab)
            else:
                lines, ys = tr.read_labeled_lines(data_path)
                dataset = tr.encode_corpus(lines, base.vocab, base.model_config.max_len, targets=ys)
        else:
            raise ConfigError("--objective without --data has nothing to label")
    except (TokenizeError, ValueError) as e:
        raise DataError(str(e)) from None

    tcfg = _train_config(args, seed)
    _echo_config(out_dir, "finetune", seed, {
        "checkpoint": args.checkpoint, "data": args.data,
        "objective": objective.params_dict() if objective else None,
        "train": tcfg.to_dict(),
    })

    eval_n = args.eval_samples
    before = _sampled_strings(base, eval_n, seed) if eval_n else []
    loss_log = (out_dir / "loss.log").open("w")
    loss_log.write("iter\ttask\tloss\n")

    def log_cb(it, loss, task):
        loss_log.write(f"{it}\t{task.value}\t{loss:.6f}\n")

    ckpt_dir = out_dir / "checkpoint"
    state = tr.finetune(base, dataset, tcfg, log_cb=log_cb, checkpoint_dir=ckpt_dir)
    loss_log.close()

    metrics = {"seed": seed, "config_hash": _config_hash(tcfg.to_dict())}
    if eval_n:
        after = _sampled_strings(state, eval_n, seed)
        metrics["validity_before"] = ev.validity(before)
        metrics["validity_after"] = ev.validity(after)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    _write_manifest(out_dir, ["config_echo.json", "loss.log", "checkpoint", "metrics.json"])
    print(f"finetuned {state.iteration} iterations -> {ckpt_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    state = _load_checkpoint(args.checkpoint)
    out_dir = _resolve_out_dir(args, "sample")
    cfg = gen.SamplerConfig(
        temperature=args.temperature, top_k=args.top_k,
        max_new_tokens=args.max_new_tokens, seed=seed, sample_y=args.sample_y,
    )
    _echo_config(out_dir, "sample", seed, {
        "checkpoint": args.checkpoint, "n": args.n, "sampler": vars(cfg).copy(),
    })
    samples = gen.sample_batch(state.params, state.vocab, cfg, args.n)
    out_file = out_dir / "samples.tsv"
    with out_file.open("w") as fh:
        for s in samples:
            fh.write(f"{s.smiles}\t{s.y:.6f}\n")
    _write_manifest(out_dir, ["config_echo.json", "samples.tsv"])
    print(f"wrote {len(samples)} samples -> {out_file}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    state = _load_checkpoint(args.checkpoint)
    out_dir = _resolve_out_dir(args, "optimize")
    objective = obj.make_objective(args.objective, args.objective_params) if args.objective else None
    pcfg = gen.PbboConfig(y_c=args.y_c, eval_budget=args.eval_budget, sample_budget=args.sample_budget)
    scfg = gen.SamplerConfig(temperature=args.temperature, top_k=args.top_k, seed=seed)
    _echo_config(out_dir, "optimize", seed, {
        "checkpoint": args.checkpoint, "y_c": pcfg.y_c,
        "eval_budget": pcfg.eval_budget, "sample_budget": pcfg.sample_budget,
        "objective": objective.params_dict() if objective else None,
        "sampler": vars(scfg).copy(),
    })
    fn = (lambda s: obj.evaluate(objective, s)) if objective else None
    result = gen.pbbo_optimize(state.params, state.vocab, pcfg, scfg, objective=fn)
    trace_file = out_dir / "trace.jsonl"
    with trace_file.open("w") as fh:
        for rec in result.trace:
            fh.write(json.dumps(vars(rec)) + "\n")
    summary = {
        "seed": seed,
        "y_c": pcfg.y_c,
        "eval_budget": pcfg.eval_budget,
        "sample_budget": pcfg.sample_budget,
        "draws_used": result.draws_used,
        "accepted_count": result.accepted_count,
        "top1": result.top1(),
        "best_accepted": (vars(max(result.accepted, key=lambda r: r.oracle if r.oracle is not None else r.y_pred))
                          if result.accepted else None),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_manifest(out_dir, ["config_echo.json", "trace.jsonl", "summary.json"])
    print(f"{result.accepted_count} accepted in {result.draws_used} draws; top1 = {result.top1()}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    seed = args.seed if args.seed is not None else _seed_default()
    out_dir = _resolve_out_dir(args, "evaluate")
    if args.samples is None and args.checkpoint is None:
        raise ConfigError("evaluate needs --samples and/or --checkpoint")

    state = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    if args.samples is not None:
        sample_lines = tr.read_smiles_lines(_require_path(args.samples, "samples"))
        if not sample_lines:
            raise DataError(f"no usable lines in {args.samples}")
    elif args.n_samples > 0:
        sample_lines = _sampled_strings(state, args.n_samples, seed)
    else:
        sample_lines = []

    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    report = ev.MetricsReport(sample_count=len(sample_lines))
    report.metadata = {"seed": seed, "checkpoint": args.checkpoint,
                       "config_hash": _config_hash(resolved)}
    if sample_lines:
        report.validity = ev.validity(sample_lines)
        report.uniqueness = ev.uniqueness(sample_lines)
    reference = None
    if args.data is not None:
        reference = tr.read_smiles_lines(_require_path(args.data, "data"))
        if sample_lines:
            report.novelty = ev.novelty(sample_lines, reference)
            report.feature_kl = ev.feature_kl(sample_lines, reference)
    if args.test is not None and state is not None:
        try:
            lines, ys = tr.read_labeled_lines(_require_path(args.test, "test data"))
            test_set = tr.encode_corpus(lines, state.vocab, state.model_config.max_len, targets=ys)
        except (TokenizeError, ValueError) as e:
            raise DataError(str(e)) from None
        report.mae = ev.mae(state.params, test_set)
    if args.objective is not None and state is not None:
        objective = obj.make_objective(args.objective, args.objective_params)
        m, kept = ev.mae_sampled(state.params, state.vocab, objective,
                                 max(args.n_samples, 1), gen.SamplerConfig(seed=seed))
        report.mae_sampled = m
        report.mae_sampled_retained = kept

    outputs = ["config_echo.json", "metrics.json"]
    if args.histograms and sample_lines and reference:
        rows = ev.feature_histograms(sample_lines, reference)
        with (out_dir / "histograms.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        outputs.append("histograms.csv")

    _echo_config(out_dir, "evaluate", seed, resolved)
    (out_dir / "metrics.json").write_text(report.to_json())
    _write_manifest(out_dir, outputs)
    print(report.to_json())
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="moljoint", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="unsupervised training from a SMILES corpus")
    p.add_argument("--data", required=True, help="text file, one SMILES per line")
    _add_model_flags(p)
    _add_train_flags(p, finetune=False)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="SMILES<TAB>float file, or plain SMILES with --objective")
    p.add_argument("--objective", help="auto-label --data with this objective")
    p.add_argument("--objective-params", default="", help="key=value,... objective parameters")
    p.add_argument("--eval-samples", type=int, default=0,
                   help="sample count for before/after validity (0 = skip)")
    _add_train_flags(p, finetune=True)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="write n sampled (SMILES, y_pred) lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--max-new-tokens", type=int, default=None)
    p.add_argument("--sample-y", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("optimize", help="budgeted draw-and-filter optimization")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--y-c", type=float, required=True, help="acceptance threshold on predicted y")
    p.add_argument("--eval-budget", type=int, required=True)
    p.add_argument("--sample-budget", type=int, required=True)
    p.add_argument("--objective", help="re-score accepted samples with this objective")
    p.add_argument("--objective-params", default="")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="metrics over a sample file or checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--samples", help="sample file (one SMILES per line); default: sample fresh")
    p.add_argument("--n-samples", type=int, default=500)
    p.add_argument("--data", help="training corpus for novelty/feature-distribution metrics")
    p.add_argument("--test", help="held-out SMILES<TAB>float file for MAE")
    p.add_argument("--objective", help="objective for MAE on sampled molecules")
    p.add_argument("--objective-params", default="")
    p.add_argument("--histograms", action="store_true", help="emit feature histogram CSV")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
