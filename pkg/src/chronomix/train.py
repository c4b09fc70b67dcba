"""Stage-1 expert pretraining and stage-2 router training.

Stage 1 fits one expert per time bin with AdamW under a warmup-stable-decay
schedule. Stage 2 trains the router against the mixed distribution's NLL,
masking each row by its document year; in co-adapt mode the expert whose
window contains that year is unfrozen as well, and gradient flow to every
other expert is exactly zero because their forwards run outside the graph.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import Shard, TimeWindow, read_shards
from .errors import (
    BinMismatchError,
    EmptyBinError,
    NoEligibleExpertError,
    OutOfRangeError,
    ShapeMismatchError,
    TokenizerMismatchError,
)
from .lm import ExpertConfig, TimeExpert, save_expert, sequence_nll
from .mixture import Router, Strategy, compute_weights, mix, save_router
from .temporal import ExpertRegistry, containing_index, eligible_set


def set_reference_mode(threads: int = 1) -> None:
    """Single-threaded deterministic execution for bit-reproducible runs."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WSDSchedule:
    """Linear warmup to max_lr, constant plateau, linear decay to a floor."""

    max_lr: float
    warmup_steps: int
    stable_steps: int
    decay_steps: int
    final_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if min(self.warmup_steps, self.stable_steps, self.decay_steps) < 0:
            raise ValueError("step counts must be non-negative")
        if not 0.0 <= self.final_lr_ratio <= 1.0:
            raise ValueError("final_lr_ratio must be in [0, 1]")


def lr_at(schedule: WSDSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    w, s, d = schedule.warmup_steps, schedule.stable_steps, schedule.decay_steps
    floor = schedule.final_lr_ratio * schedule.max_lr
    if step < w:
        return schedule.max_lr * step / w
    if step < w + s:
        return schedule.max_lr
    if d > 0 and step < w + s + d:
        frac = (step - w - s) / d
        return schedule.max_lr * (1.0 - (1.0 - schedule.final_lr_ratio) * frac)
    return floor


def wsd_for_total(
    total_steps: int,
    max_lr: float,
    warmup_frac: float = 0.02,
    decay_frac: float = 0.20,
    final_lr_ratio: float = 0.1,
) -> WSDSchedule:
    """Default phase split: 2% warmup, 78% stable, 20% decay."""
    warmup = int(round(total_steps * warmup_frac))
    decay = int(round(total_steps * decay_frac))
    stable = max(total_steps - warmup - decay, 0)
    return WSDSchedule(max_lr, warmup, stable, decay, final_lr_ratio)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerOpts:
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0


def _param_groups(named_params, weight_decay: float):
    """Decay matrices; leave biases and layernorm gains undecayed."""
    decay, no_decay = [], []
    for _, p in named_params:
        (decay if p.dim() >= 2 else no_decay).append(p)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": weight_decay})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return groups


def _make_optimizer(named_params, lr: float, opts: OptimizerOpts) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        _param_groups(named_params, opts.weight_decay), lr=lr, betas=opts.betas
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    tokens_seen: int

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "lr": self.lr, "loss": self.loss, "tokens_seen": self.tokens_seen}
        )


def _write_log(log_path, entries: Sequence[StepLog]) -> None:
    with open(log_path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(e.to_json() + "\n")


def _shards_digest(paths: Sequence[str]) -> str:
    h = hashlib.sha256()
    for p in paths:
        with open(p, "rb") as f:
            h.update(hashlib.sha256(f.read()).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

@dataclass
class Stage1Result:
    model: TimeExpert
    log: list[StepLog]
    checkpoint_path: Optional[str] = None


def _check_shard_for(config: ExpertConfig, shard: Shard) -> None:
    if shard.n_rows == 0:
        raise EmptyBinError("bin has no packed rows")
    if shard.vocab_size != config.vocab_size:
        raise TokenizerMismatchError(
            f"shard vocab {shard.vocab_size} != model vocab {config.vocab_size}"
        )
    if shard.length > config.context_length:
        raise ShapeMismatchError(
            f"shard rows of length {shard.length} exceed context {config.context_length}"
        )


def train_expert(
    config: ExpertConfig,
    shard_paths: Sequence[str],
    window: TimeWindow,
    schedule: WSDSchedule,
    *,
    seed: int,
    batch_size: int = 8,
    steps: Optional[int] = None,
    token_budget: Optional[int] = None,
    opts: OptimizerOpts = OptimizerOpts(),
    out_path=None,
    log_path=None,
) -> Stage1Result:
    """Pretrain one expert on the shards of a single bin.

    Rows whose year falls outside `window` are rejected up front, so an
    expert can never silently absorb another slice's data. In reference mode
    the run is a pure function of (config, seed, shards).
    """
    if steps is None and token_budget is None:
        raise ValueError("give either steps or token_budget")
    shard = read_shards(shard_paths)
    _check_shard_for(config, shard)
    years = shard.years.astype(int)
    bad = (years < window.start_year) | (years > window.end_year)
    if bad.any():
        raise BinMismatchError(
            f"{int(bad.sum())} rows carry years outside window {window.label}; "
            "shards from different bins cannot train one expert"
        )

    torch.manual_seed(seed)
    model = TimeExpert(config, window=window, tokenizer_hash=shard.tokenizer_hash)
    model.train()
    optimizer = _make_optimizer(model.named_parameters(), schedule.max_lr, opts)
    gen = torch.Generator().manual_seed(seed)
    rows = torch.from_numpy(shard.tokens.astype(np.int64))

    if steps is None:
        steps = max(1, math.ceil(token_budget / (batch_size * shard.length)))

    log: list[StepLog] = []
    tokens_seen = 0
    order = torch.randperm(shard.n_rows, generator=gen)
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > shard.n_rows:
            order = torch.randperm(shard.n_rows, generator=gen)
            cursor = 0
        take = order[cursor:cursor + batch_size] if shard.n_rows >= batch_size else order
        cursor += batch_size
        batch = rows[take]
        lr = lr_at(schedule, step)
        _set_lr(optimizer, lr)
        out = model(batch)
        loss = sequence_nll(out.logprobs, batch)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if opts.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opts.grad_clip)
        optimizer.step()
        tokens_seen += batch.numel()
        log.append(StepLog(step, lr, float(loss.detach()), tokens_seen))

    model.eval()
    result = Stage1Result(model, log)
    if out_path is not None:
        save_expert(
            out_path, model,
            extra={"data_hash": _shards_digest(shard_paths), "seed": seed, "steps": steps},
        )
        result.checkpoint_path = str(out_path)
    if log_path is not None:
        _write_log(log_path, log)
    return result


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def mixture_nll(
    models: Sequence[TimeExpert],
    windows: Sequence[TimeWindow],
    strategy: Strategy,
    rows: torch.Tensor,
    year: int,
    trainable: frozenset[int] | str = frozenset(),
) -> torch.Tensor:
    """Next-token NLL of the mixed distribution under the year's mask.

    `trainable` names the expert indices whose forwards stay in the autograd
    graph ("all" for every eligible expert); the rest run under no_grad, so
    their gradients are exactly zero by construction.
    """
    mask = eligible_set(windows, year, strict=strategy.strict_masking)
    idx = mask.indices
    outputs = []
    for i in idx:
        if trainable == "all" or i in trainable:
            outputs.append(models[i](rows))
        else:
            with torch.no_grad():
                outputs.append(models[i](rows))
    hidden = None
    if strategy.kind in ("learned_avg", "coadapt") and strategy.router_input != "token_embedding":
        if strategy.router_input == "mean":
            hidden = torch.stack([o.hidden_last for o in outputs]).mean(dim=0)
        else:
            hidden = outputs[-1].hidden_last
    weights = compute_weights(
        strategy, mask, hidden=hidden, tokens=rows, shape=tuple(rows.shape),
        dtype=outputs[0].logprobs.dtype,
    )
    mixed = mix([o.logprobs for o in outputs], weights[:, :, idx])
    return sequence_nll(mixed, rows)


@dataclass
class Stage2Result:
    strategy: Strategy
    log: list[StepLog]
    expert_grad_norms: list[dict[int, float]] = field(default_factory=list)
    router_path: Optional[str] = None
    expert_paths: dict[int, str] = field(default_factory=dict)


def _year_batches(years: np.ndarray, batch_size: int) -> list[tuple[int, np.ndarray]]:
    batches = []
    for year in sorted(set(int(y) for y in years)):
        idx = np.flatnonzero(years == year)
        for off in range(0, len(idx), batch_size):
            batches.append((year, idx[off:off + batch_size]))
    return batches


def train_stage2(
    registry: ExpertRegistry,
    mode: str,
    shard_paths: Sequence[str],
    *,
    lr: float,
    token_budget: int,
    seed: int,
    batch_size: int = 8,
    opts: OptimizerOpts = OptimizerOpts(),
    router_hidden_dim: Optional[int] = None,
    router_input: str = "latest",
    weights_per: str = "position",
    out_router=None,
    out_expert_dir=None,
    log_path=None,
) -> Stage2Result:
    """Train the router (learned_avg) or router plus present expert (coadapt).

    Batches are grouped by document year so each step has a single mask and,
    for co-adapt, a single unfrozen expert. learned_avg never touches expert
    parameters at all.
    """
    if mode not in ("learned_avg", "coadapt"):
        raise ValueError(f"unknown stage-2 mode {mode!r}")
    shard = read_shards(shard_paths, expect_hash=registry.tokenizer_hash)
    if shard.n_rows == 0:
        raise EmptyBinError("stage-2 shards contain no rows")
    years = shard.years.astype(int)
    if (years < registry.earliest_year).any():
        raise NoEligibleExpertError(
            "some rows predate the earliest expert window; no mask exists for them"
        )
    if mode == "coadapt" and (years > registry.latest_year).any():
        raise OutOfRangeError("co-adapt rows need a containing expert window")

    models = registry.experts()
    d_model = models[0].config.d_model
    for m in models:
        if m.config.d_model != d_model:
            raise ShapeMismatchError("stage-2 requires a uniform d_model across experts")
    _check_shard_for(models[0].config, shard)

    torch.manual_seed(seed)
    router = Router(
        d_model, len(registry), hidden_dim=router_hidden_dim,
        vocab_size=models[0].config.vocab_size if router_input == "token_embedding" else None,
        seed=seed,
    )
    strategy = Strategy(mode, router=router, router_input=router_input, weights_per=weights_per)
    windows = registry.windows

    named = list(router.named_parameters())
    if mode == "coadapt":
        for i, m in enumerate(models):
            named += [(f"expert{i}.{n}", p) for n, p in m.named_parameters()]
            m.train()
    optimizer = _make_optimizer(named, lr, opts)
    all_params = [p for _, p in named]

    gen = torch.Generator().manual_seed(seed)
    batches = _year_batches(years, batch_size)
    rows_all = torch.from_numpy(shard.tokens.astype(np.int64))

    log: list[StepLog] = []
    grad_norms: list[dict[int, float]] = []
    tokens_seen = 0
    step = 0
    while tokens_seen < token_budget:
        order = torch.randperm(len(batches), generator=gen).tolist()
        for b in order:
            if tokens_seen >= token_budget:
                break
            year, idx = batches[b]
            batch = rows_all[torch.from_numpy(idx.astype(np.int64))]
            trainable = frozenset()
            if mode == "coadapt":
                trainable = frozenset({containing_index(windows, year)})
            loss = mixture_nll(models, windows, strategy, batch, year, trainable=trainable)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if opts.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(all_params, opts.grad_clip)
            norms = {}
            for i, m in enumerate(models):
                sq = 0.0
                for p in m.parameters():
                    if p.grad is not None:
                        sq += float(p.grad.pow(2).sum())
                norms[i] = math.sqrt(sq)
            grad_norms.append(norms)
            optimizer.step()
            tokens_seen += batch.numel()
            log.append(StepLog(step, lr, float(loss.detach()), tokens_seen))
            step += 1

    for m in models:
        m.eval()
    result = Stage2Result(strategy, log, grad_norms)
    if out_router is not None:
        save_router(out_router, router, strategy, registry.fingerprint())
        result.router_path = str(out_router)
    if mode == "coadapt" and out_expert_dir is not None:
        os.makedirs(out_expert_dir, exist_ok=True)
        for i, m in enumerate(models):
            path = os.path.join(out_expert_dir, f"expert_{m.window.label}.ckpt")
            save_expert(path, m, extra={"stage2": mode, "seed": seed})
            result.expert_paths[i] = path
    if log_path is not None:
        _write_log(log_path, log)
    return result
