import json
import math

import pytest
import torch

from chronomix import (
    ByteTokenizer,
    ExpertRegistry,
    TimeExpert,
    TimeWindow,
    WSDSchedule,
    compute_weights,
    eligible_set,
    lr_at,
    mixture_nll,
    pack,
    train_expert,
    train_stage2,
    write_shard,
    wsd_for_total,
)
from chronomix.errors import (
    BinMismatchError,
    EmptyBinError,
    NoEligibleExpertError,
    TokenizerMismatchError,
)
from chronomix.lm import sequence_nll
from chronomix.mixture import Strategy
from helpers import micro_config, random_tokens

torch.set_num_threads(1)

TOK = ByteTokenizer()
SENTENCE = "the cat sat on the mat and looked at the moon. "


def make_shard(path, docs, length=32):
    rows = list(pack([(y, TOK.encode(t)) for y, t in docs], length, TOK.eot_id))
    write_shard(path, rows, length, TOK.vocab_size, TOK.identity_hash())
    return str(path), rows


def repeated_docs(year, n=40, text=SENTENCE):
    return [(year, text) for _ in range(n)]


class TestSchedule:
    SCHED = WSDSchedule(max_lr=1e-4, warmup_steps=100, stable_steps=300, decay_steps=100)

    def test_warmup_starts_at_zero(self):
        assert lr_at(self.SCHED, 0) == 0.0

    def test_warmup_is_linear(self):
        assert lr_at(self.SCHED, 50) == pytest.approx(5e-5)

    def test_plateau_holds_max(self):
        assert lr_at(self.SCHED, 100 + 150) == 1e-4

    def test_decay_endpoint_hits_floor(self):
        assert lr_at(self.SCHED, 500) == pytest.approx(1e-5)

    def test_clamped_after_decay(self):
        assert lr_at(self.SCHED, 10_000) == pytest.approx(1e-5)

    def test_decay_is_linear(self):
        mid = lr_at(self.SCHED, 450)
        assert mid == pytest.approx((1e-4 + 1e-5) / 2)

    def test_zero_warmup_starts_at_max(self):
        sched = WSDSchedule(1e-3, 0, 10, 0)
        assert lr_at(sched, 0) == 1e-3

    def test_default_split_proportions(self):
        sched = wsd_for_total(1000, 1e-4)
        assert (sched.warmup_steps, sched.stable_steps, sched.decay_steps) == (20, 780, 200)

    def test_invalid_schedules_rejected(self):
        with pytest.raises(ValueError):
            WSDSchedule(0.0, 1, 1, 1)
        with pytest.raises(ValueError):
            WSDSchedule(1e-4, -1, 1, 1)
        with pytest.raises(ValueError):
            WSDSchedule(1e-4, 1, 1, 1, final_lr_ratio=2.0)


class TestStage1:
    def test_deterministic_checkpoints(self, tmp_path):
        shard, _ = make_shard(tmp_path / "bin.tmsh", repeated_docs(2013, 12))
        outs = []
        for run in ("r1", "r2"):
            out = tmp_path / run / "expert.ckpt"
            out.parent.mkdir()
            train_expert(
                micro_config(), [shard], TimeWindow(2013, 2014),
                wsd_for_total(10, 1e-3), seed=7, batch_size=4, steps=10, out_path=out,
            )
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_different_seed_changes_checkpoint(self, tmp_path):
        shard, _ = make_shard(tmp_path / "bin.tmsh", repeated_docs(2013, 12))
        blobs = []
        for seed in (1, 2):
            out = tmp_path / f"e{seed}.ckpt"
            train_expert(
                micro_config(), [shard], TimeWindow(2013, 2014),
                wsd_for_total(5, 1e-3), seed=seed, batch_size=4, steps=5, out_path=out,
            )
            blobs.append(out.read_bytes())
        assert blobs[0] != blobs[1]

    def test_overfits_repeated_sentence(self, tmp_path):
        shard, _ = make_shard(tmp_path / "bin.tmsh", repeated_docs(2013, 40))
        cfg = micro_config(d_model=32, n_heads=4)
        result = train_expert(
            cfg, [shard], TimeWindow(2013, 2014), wsd_for_total(250, 2e-3),
            seed=0, batch_size=8, steps=250,
        )
        assert result.log[-1].loss < 0.05

    def test_mixed_bin_rows_rejected(self, tmp_path):
        shard, _ = make_shard(
            tmp_path / "mixed.tmsh", repeated_docs(2013, 6) + repeated_docs(2015, 6)
        )
        with pytest.raises(BinMismatchError):
            train_expert(
                micro_config(), [shard], TimeWindow(2013, 2014),
                wsd_for_total(5, 1e-3), seed=0, steps=5,
            )

    def test_empty_bin_rejected(self, tmp_path):
        shard, _ = make_shard(tmp_path / "empty.tmsh", [])
        with pytest.raises(EmptyBinError):
            train_expert(
                micro_config(), [shard], TimeWindow(2013, 2014),
                wsd_for_total(5, 1e-3), seed=0, steps=5,
            )

    def test_vocab_mismatch_rejected(self, tmp_path):
        shard, _ = make_shard(tmp_path / "bin.tmsh", repeated_docs(2013, 6))
        with pytest.raises(TokenizerMismatchError):
            train_expert(
                micro_config(vocab_size=300), [shard], TimeWindow(2013, 2014),
                wsd_for_total(5, 1e-3), seed=0, steps=5,
            )

    def test_token_budget_sets_step_count(self, tmp_path):
        shard, rows = make_shard(tmp_path / "bin.tmsh", repeated_docs(2013, 12))
        result = train_expert(
            micro_config(), [shard], TimeWindow(2013, 2014),
            wsd_for_total(10, 1e-3), seed=0, batch_size=4,
            token_budget=4 * 32 * 6,
        )
        assert len(result.log) == 6
        assert result.log[-1].tokens_seen == 4 * 32 * 6

    def test_step_log_schema(self, tmp_path):
        shard, _ = make_shard(tmp_path / "bin.tmsh", repeated_docs(2013, 8))
        log_path = tmp_path / "train.log.jsonl"
        train_expert(
            micro_config(), [shard], TimeWindow(2013, 2014),
            wsd_for_total(3, 1e-3), seed=0, steps=3, log_path=log_path,
        )
        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert len(lines) == 3
        assert set(lines[0]) == {"step", "lr", "loss", "tokens_seen"}

    def test_full_range_window_accepts_union_of_bins(self, tmp_path):
        # the non-modular baseline: one expert over every bin's rows
        shard, _ = make_shard(
            tmp_path / "all.tmsh", repeated_docs(2013, 6) + repeated_docs(2015, 6)
        )
        result = train_expert(
            micro_config(), [shard], TimeWindow(2013, 2024),
            wsd_for_total(4, 1e-3), seed=0, steps=4,
        )
        assert result.model.window == TimeWindow(2013, 2024)


@pytest.fixture
def two_expert_setup(tmp_path):
    shard_a, rows = make_shard(tmp_path / "a.tmsh", repeated_docs(2013, 40))
    cfg = micro_config(d_model=32, n_heads=4, seed=0)
    trained = train_expert(
        cfg, [shard_a], TimeWindow(2013, 2014), wsd_for_total(250, 2e-3),
        seed=0, batch_size=8, steps=250,
    ).model
    untrained = TimeExpert(
        micro_config(d_model=32, n_heads=4, seed=99),
        window=TimeWindow(2015, 2016), tokenizer_hash=TOK.identity_hash(),
    )
    registry = ExpertRegistry.from_models([trained, untrained])
    stage2_rows = [(2015, r) for _, r in rows[:40]]
    shard_s2 = tmp_path / "s2.tmsh"
    write_shard(shard_s2, stage2_rows, 32, TOK.vocab_size, TOK.identity_hash())
    held_out = torch.tensor([r for _, r in rows[40:50]], dtype=torch.long)
    return registry, str(shard_s2), held_out


class TestStage2:
    def test_learned_avg_leaves_experts_bit_identical(self, two_expert_setup):
        registry, shard, _ = two_expert_setup
        before = [
            {n: p.clone() for n, p in registry.expert(i).named_parameters()}
            for i in range(2)
        ]
        train_stage2(registry, "learned_avg", [shard], lr=0.05,
                     token_budget=20 * 8 * 32, seed=1, batch_size=8)
        for i in range(2):
            for n, p in registry.expert(i).named_parameters():
                assert torch.equal(p, before[i][n]), f"expert {i} tensor {n} changed"

    def test_router_separates_perfect_from_uniform_expert(self, two_expert_setup):
        registry, shard, held_out = two_expert_setup
        result = train_stage2(registry, "learned_avg", [shard], lr=0.05,
                              token_budget=80 * 8 * 32, seed=1, batch_size=8)
        with torch.no_grad():
            outs = [registry.expert(i)(held_out) for i in range(2)]
            mask = eligible_set(registry.windows, 2015)
            w = compute_weights(result.strategy, mask, hidden=outs[-1].hidden_last)
        assert float(w[..., 0].mean()) > 0.9

    def test_coadapt_grad_norms_zero_except_containing(self, two_expert_setup):
        registry, shard, _ = two_expert_setup
        result = train_stage2(registry, "coadapt", [shard], lr=1e-3,
                              token_budget=10 * 8 * 32, seed=2, batch_size=8)
        assert result.expert_grad_norms
        for norms in result.expert_grad_norms:
            assert norms[0] == 0.0  # 2013-2014 never contains year 2015
            assert norms[1] > 0.0

    def test_coadapt_updates_only_containing_expert(self, two_expert_setup):
        registry, shard, _ = two_expert_setup
        before = [
            {n: p.clone() for n, p in registry.expert(i).named_parameters()}
            for i in range(2)
        ]
        train_stage2(registry, "coadapt", [shard], lr=1e-3,
                     token_budget=10 * 8 * 32, seed=2, batch_size=8)
        unchanged = all(
            torch.equal(p, before[0][n]) for n, p in registry.expert(0).named_parameters()
        )
        changed = any(
            not torch.equal(p, before[1][n]) for n, p in registry.expert(1).named_parameters()
        )
        assert unchanged and changed

    def test_rows_predating_registry_rejected(self, two_expert_setup, tmp_path):
        registry, _, _ = two_expert_setup
        old = tmp_path / "old.tmsh"
        rows = list(pack([(2012, TOK.encode(SENTENCE * 3))], 32, TOK.eot_id))
        write_shard(old, rows, 32, TOK.vocab_size, TOK.identity_hash())
        with pytest.raises(NoEligibleExpertError):
            train_stage2(registry, "learned_avg", [str(old)], lr=0.01,
                         token_budget=256, seed=0)

    def test_zero_router_loss_equals_avg_loss(self, two_expert_setup):
        registry, _, held_out = two_expert_setup
        models = [registry.expert(i) for i in range(2)]
        from chronomix.mixture import Router

        zero_router = Router(32, 2)
        learned = mixture_nll(models, registry.windows,
                              Strategy("learned_avg", router=zero_router), held_out, 2015)
        avg = mixture_nll(models, registry.windows, Strategy("avg"), held_out, 2015)
        assert abs(float(learned.detach()) - float(avg)) < 1e-6

    def test_mixture_loss_bounded_by_best_expert_minus_log_n(self, two_expert_setup):
        registry, _, held_out = two_expert_setup
        models = [registry.expert(i) for i in range(2)]
        avg = float(mixture_nll(models, registry.windows, Strategy("avg"), held_out, 2015))
        singles = [
            float(sequence_nll(m(held_out).logprobs, held_out)) for m in models
        ]
        assert avg >= min(singles) - math.log(2) - 1e-6

    def test_router_checkpoint_written(self, two_expert_setup, tmp_path):
        registry, shard, _ = two_expert_setup
        out = tmp_path / "router.ckpt"
        result = train_stage2(registry, "learned_avg", [shard], lr=0.05,
                              token_budget=5 * 8 * 32, seed=1, out_router=out)
        assert out.exists() and result.router_path == str(out)
        from chronomix.mixture import load_router

        loaded, meta = load_router(out)
        assert meta["registry_fingerprint"] == registry.fingerprint()
