"""Command-line pipeline: ingest, train, eval, gen, analyze.

Every subcommand writes a resolved-config snapshot next to its outputs so a
run can be repeated exactly. Per-record problems (bad dates, malformed
benchmark lines, invalid completions) go to reject files; only fatal errors
abort with a non-zero exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from . import __version__
from .benchgen import ChatClient, ClientConfig, ResponseCache, generate, load_timelines
from .corpus import ByteTokenizer, ExternalVocabTokenizer, TimeWindow, default_windows, ingest
from .errors import ChronomixError, ConfigError
from .evaluation import (
    evaluate,
    load_benchmark,
    report_single_experts,
    save_benchmark,
)
from .lm import ExpertConfig
from .mixture import MixturePredictor, Strategy, load_strategy
from .temporal import load_registry
from .train import (
    OptimizerOpts,
    WSDSchedule,
    train_expert,
    train_stage2,
    wsd_for_total,
)


def _write_snapshot(out_dir, name: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


def _set_threads(n: int) -> None:
    torch.set_num_threads(max(1, n))


def _tokenizer_from_args(args):
    if args.vocab_file:
        return ExternalVocabTokenizer.from_file(args.vocab_file, strict=args.strict_vocab)
    return ByteTokenizer()


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    tokenizer = _tokenizer_from_args(args)
    windows = default_windows(args.first_year, args.last_year, args.span)
    with open(args.input, encoding="utf-8") as f:
        result = ingest(f, windows, tokenizer, args.seq_len, args.out_dir)

    rejects_path = os.path.join(args.out_dir, "rejects.jsonl")
    with open(rejects_path, "w", encoding="utf-8") as f:
        for lineno, reason in result.rejects:
            f.write(json.dumps({"line": lineno, "reason": reason}) + "\n")
    stats = {
        label: {"docs": s.n_docs, "tokens": s.n_tokens, "rows": s.n_rows}
        for label, s in result.stats.items()
    }
    _write_snapshot(args.out_dir, "ingest_config.json", {
        "command": "ingest", "input": args.input, "out_dir": args.out_dir,
        "first_year": args.first_year, "last_year": args.last_year, "span": args.span,
        "seq_len": args.seq_len, "vocab_file": args.vocab_file,
        "strict_vocab": args.strict_vocab, "stats": stats,
    })

    print(f"{'bin':<12}{'docs':>8}{'tokens':>12}{'rows':>8}")
    for label, s in stats.items():
        print(f"{label:<12}{s['docs']:>8}{s['tokens']:>12}{s['rows']:>8}")
    if result.rejects:
        print(f"{len(result.rejects)} rejected records -> {rejects_path}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_STAGE1_KEYS = {
    "mode", "model", "window", "shards", "schedule", "steps", "token_budget",
    "batch_size", "out", "log", "seed",
}
_STAGE2_KEYS = {
    "mode", "registry", "shards", "lr", "token_budget", "batch_size", "router",
    "out_router", "out_expert_dir", "log", "seed",
}
_SCHEDULE_KEYS = {
    "max_lr", "warmup_steps", "stable_steps", "decay_steps", "final_lr_ratio", "total_steps",
}
_ROUTER_KEYS = {"hidden_dim", "input", "weights_per"}


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _schedule_from(doc: dict, steps: int) -> WSDSchedule:
    _check_keys(doc, _SCHEDULE_KEYS, "schedule")
    if "warmup_steps" in doc:
        return WSDSchedule(
            max_lr=float(doc["max_lr"]),
            warmup_steps=int(doc["warmup_steps"]),
            stable_steps=int(doc["stable_steps"]),
            decay_steps=int(doc["decay_steps"]),
            final_lr_ratio=float(doc.get("final_lr_ratio", 0.1)),
        )
    total = int(doc.get("total_steps", steps))
    return wsd_for_total(total, float(doc["max_lr"]))


def cmd_train(args) -> int:
    with open(args.config, encoding="utf-8") as f:
        doc = json.load(f)
    mode = doc.get("mode")
    if mode not in ("stage1", "stage2_learned_avg", "stage2_coadapt"):
        raise ConfigError(f"unknown train mode {mode!r}")
    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is None:
        raise ConfigError("--seed is required for training runs")
    seed = int(seed)

    if mode == "stage1":
        _check_keys(doc, _STAGE1_KEYS, "config")
        model_doc = dict(doc.get("model", {}))
        model_doc.pop("seed", None)
        config = ExpertConfig(seed=seed, **model_doc)
        window = TimeWindow.from_dict(doc["window"])
        steps = doc.get("steps")
        token_budget = doc.get("token_budget")
        batch_size = int(doc.get("batch_size", 8))
        if steps is None and token_budget is None:
            raise ConfigError("stage1 config needs steps or token_budget")
        est_steps = int(steps) if steps is not None else max(
            1, int(token_budget) // (batch_size * 1)
        )
        schedule = _schedule_from(doc.get("schedule", {"max_lr": 1e-4}), est_steps)
        out = doc.get("out") or os.path.join(os.path.dirname(args.config), f"expert_{window.label}.ckpt")
        log = doc.get("log") or out + ".log.jsonl"
        result = train_expert(
            config, doc["shards"], window, schedule,
            seed=seed,
            batch_size=batch_size,
            steps=int(steps) if steps is not None else None,
            token_budget=int(token_budget) if token_budget is not None else None,
            out_path=out, log_path=log,
        )
        resolved = dict(doc)
        resolved.update({"seed": seed, "out": str(out), "log": str(log)})
        _write_snapshot(os.path.dirname(os.path.abspath(out)) or ".", "train_config.json", resolved)
        print(f"stage1 {window.label}: {len(result.log)} steps, "
              f"final loss {result.log[-1].loss:.4f} -> {out}")
        return 0

    _check_keys(doc, _STAGE2_KEYS, "config")
    registry = load_registry(doc["registry"])
    router_doc = dict(doc.get("router", {}))
    _check_keys(router_doc, _ROUTER_KEYS, "router")
    stage2_mode = "learned_avg" if mode == "stage2_learned_avg" else "coadapt"
    out_router = doc.get("out_router") or os.path.join(
        os.path.dirname(args.config), f"router_{stage2_mode}.ckpt"
    )
    result = train_stage2(
        registry, stage2_mode, doc["shards"],
        lr=float(doc.get("lr", 1e-5 if stage2_mode == "learned_avg" else 1e-4)),
        token_budget=int(doc["token_budget"]),
        batch_size=int(doc.get("batch_size", 8)),
        seed=seed,
        router_hidden_dim=router_doc.get("hidden_dim"),
        router_input=router_doc.get("input", "latest"),
        weights_per=router_doc.get("weights_per", "position"),
        out_router=out_router,
        out_expert_dir=doc.get("out_expert_dir"),
        log_path=doc.get("log") or str(out_router) + ".log.jsonl",
    )
    resolved = dict(doc)
    resolved.update({"seed": seed, "out_router": str(out_router)})
    _write_snapshot(os.path.dirname(os.path.abspath(out_router)) or ".", "train_config.json", resolved)
    print(f"{mode}: {len(result.log)} steps, final loss {result.log[-1].loss:.4f} -> {out_router}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _strategy_from_args(args, registry) -> Strategy:
    if args.strategy in ("year", "avg"):
        return Strategy(args.strategy, strict_masking=args.strict_masking)
    if not args.router:
        raise ConfigError(f"strategy {args.strategy!r} needs --router")
    strategy = load_strategy(args.router)
    if strategy.kind != args.strategy:
        raise ConfigError(
            f"router checkpoint was trained for {strategy.kind!r}, not {args.strategy!r}"
        )
    if args.strict_masking:
        strategy.strict_masking = True
    return strategy


def cmd_eval(args) -> int:
    registry = load_registry(args.registry)
    items, rejects = load_benchmark(args.benchmark)
    os.makedirs(args.out_dir, exist_ok=True)
    rejects_path = os.path.join(args.out_dir, "rejects.jsonl")
    with open(rejects_path, "w", encoding="utf-8") as f:
        for lineno, reason in rejects:
            f.write(json.dumps({"line": lineno, "reason": reason}) + "\n")

    strategy = _strategy_from_args(args, registry)
    predictor = MixturePredictor(registry, strategy)
    report = evaluate(predictor, items, mode=args.scoring, default_year=args.default_year)

    with open(os.path.join(args.out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(include_results=False), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(args.out_dir, "results.jsonl"), "w", encoding="utf-8") as f:
        for r in report.results:
            f.write(json.dumps(r.to_dict()) + "\n")

    print(f"{'metric':<24}{'value':>10}")
    print(f"{'items':<24}{report.n_items:>10}")
    print(f"{'accuracy':<24}{report.accuracy:>10.4f}")
    for tag, frac in report.tag_distribution.items():
        print(f"{'chosen ' + tag:<24}{frac:>10.4f}")
    for year, acc in report.per_year_accuracy.items():
        print(f"{'year ' + str(year):<24}{acc:>10.4f}")

    snapshot = {
        "command": "eval", "registry": args.registry, "benchmark": args.benchmark,
        "strategy": args.strategy, "router": args.router, "scoring": args.scoring,
        "default_year": args.default_year, "strict_masking": args.strict_masking,
        "single_experts": args.single_experts,
    }
    if args.single_experts:
        summary = report_single_experts(registry, items, mode=args.scoring)
        with open(os.path.join(args.out_dir, "single_experts.json"), "w", encoding="utf-8") as f:
            json.dump(summary.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"{'expert mean accuracy':<24}{summary.mean_accuracy:>10.4f}")
        print(f"{'expert max accuracy':<24}{summary.max_accuracy:>10.4f} ({summary.best_label})")
    _write_snapshot(args.out_dir, "eval_config.json", snapshot)
    if rejects:
        print(f"{len(rejects)} malformed benchmark lines -> {rejects_path}")
    return 0


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    timelines = load_timelines(args.timelines)
    config = ClientConfig(
        endpoint_url=args.endpoint,
        model=args.model,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        auth_env=args.auth_env,
        max_attempts=args.max_attempts,
    )
    client = ChatClient(config)
    cache = ResponseCache(args.cache_dir) if args.cache_dir else None
    result = generate(timelines, client, cache=cache, concurrency=args.concurrency)

    os.makedirs(args.out_dir, exist_ok=True)
    bench_path = os.path.join(args.out_dir, "benchmark.jsonl")
    save_benchmark(bench_path, result.items)
    rejects_path = os.path.join(args.out_dir, "rejects.jsonl")
    with open(rejects_path, "w", encoding="utf-8") as f:
        for r in result.rejects:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    _write_snapshot(args.out_dir, "gen_config.json", {
        "command": "gen", "timelines": args.timelines, "endpoint": args.endpoint,
        "model": args.model, "temperature": args.temperature, "max_tokens": args.max_tokens,
        "concurrency": args.concurrency, "cache_dir": args.cache_dir,
        "auth_env": args.auth_env, "max_attempts": args.max_attempts,
    })
    print(f"{len(result.items)} items -> {bench_path}")
    print(f"{len(result.rejects)} rejects -> {rejects_path} ({result.retries} retries)")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    from .analysis import distance_series, series_rows, write_series_csv

    registry = load_registry(args.registry)
    targets = [t for part in args.targets for t in part.split(",") if t]
    series = distance_series(registry, args.anchor, targets)
    write_series_csv(args.out, series)
    print(f"{'window':<12}{'anchor':<16}{'target':<16}{'cosine':>10}{'distance':>10}")
    for row in series_rows(series):
        print(
            f"{row['window_label']:<12}{row['anchor']:<16}{row['target']:<16}"
            f"{row['cosine_similarity']:>10.4f}{row['distance']:>10.4f}"
        )
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_snapshot(out_dir, "analyze_config.json", {
        "command": "analyze", "registry": args.registry, "anchor": args.anchor,
        "targets": targets, "out": args.out,
    })
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chronomix",
        description="Train time-sliced LM experts and query them with a causal time mask.",
    )
    parser.add_argument("--version", action="version", version=f"chronomix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="bin, tokenize, and pack a timestamped corpus")
    p.add_argument("--input", required=True, help="newline-delimited {id, text, timestamp} records")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--first-year", type=int, default=2013)
    p.add_argument("--last-year", type=int, default=2024)
    p.add_argument("--span", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--vocab-file", default=None, help="external vocabulary JSON (default: byte-level)")
    p.add_argument("--strict-vocab", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="stage-1 expert or stage-2 router training")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="multiple-choice evaluation of a registry")
    p.add_argument("--registry", required=True,
                   help="registry manifest JSON or a directory of expert checkpoints")
    p.add_argument("--strategy", choices=("year", "avg", "learned_avg", "coadapt"), default="avg")
    p.add_argument("--router", default=None, help="router checkpoint for learned strategies")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scoring", choices=("final_token", "sum"), default="final_token")
    p.add_argument("--default-year", type=int, default=None)
    p.add_argument("--strict-masking", action="store_true")
    p.add_argument("--single-experts", action="store_true",
                   help="also report per-expert, mean, and max accuracy")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen", help="generate benchmark items from answer timelines")
    p.add_argument("--timelines", required=True)
    p.add_argument("--endpoint", required=True, help="chat-completion endpoint URL")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--auth-env", default="CHRONOMIX_API_TOKEN")
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("analyze", help="cross-slice cosine similarity series")
    p.add_argument("--registry", required=True)
    p.add_argument("--anchor", required=True)
    p.add_argument("--targets", required=True, nargs="+", help="target words (comma or space separated)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(getattr(args, "threads", 1))
    try:
        return args.func(args)
    except ChronomixError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
