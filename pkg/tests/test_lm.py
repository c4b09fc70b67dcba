import math

import pytest
import torch

from chronomix import ExpertConfig, TimeExpert, TimeWindow, load_expert, loss_and_grads, save_expert
from chronomix.errors import (
    ChecksumMismatchError,
    InvalidConfigError,
    ShapeMismatchError,
    TokenOutOfRangeError,
    VersionMismatchError,
)
from chronomix.lm import sequence_nll
from helpers import finite_diff_grad, grad_agreement, micro_config, random_tokens

torch.set_num_threads(1)


class TestConfig:
    def test_indivisible_heads_rejected(self):
        with pytest.raises(InvalidConfigError):
            TimeExpert(micro_config(d_model=16, n_heads=3))

    def test_context_too_short_rejected(self):
        with pytest.raises(InvalidConfigError):
            TimeExpert(micro_config(context_length=1))

    def test_bad_dropout_rejected(self):
        with pytest.raises(InvalidConfigError):
            TimeExpert(micro_config(dropout=1.5))


class TestInit:
    def test_same_config_and_seed_is_bit_identical(self):
        a = TimeExpert(micro_config(seed=11))
        b = TimeExpert(micro_config(seed=11))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = TimeExpert(micro_config(seed=1))
        b = TimeExpert(micro_config(seed=2))
        assert not torch.equal(a.wte.weight, b.wte.weight)

    def test_param_count_matches_closed_form(self):
        cfg = micro_config()
        model = TimeExpert(cfg)
        d, v, L = cfg.d_model, cfg.vocab_size, cfg.context_length
        per_block = (
            2 * d              # ln1 weight+bias
            + 3 * d * d + 3 * d  # qkv
            + d * d + d          # attention out projection
            + 2 * d              # ln2
            + 4 * d * d + 4 * d  # mlp up
            + 4 * d * d + d      # mlp down
        )
        expected = v * d + L * d + cfg.n_layers * per_block + 2 * d
        if not cfg.tie_embeddings:
            expected += v * d
        assert model.param_count() == expected

    def test_untied_head_adds_vocab_by_d(self):
        tied = TimeExpert(micro_config(tie_embeddings=True))
        untied = TimeExpert(micro_config(tie_embeddings=False))
        cfg = micro_config()
        assert untied.param_count() - tied.param_count() == cfg.vocab_size * cfg.d_model


class TestForward:
    def test_rows_normalize_to_one(self):
        for seed in (0, 5, 9):
            model = TimeExpert(micro_config(seed=seed))
            out = model(random_tokens(3, 12, seed=seed))
            mass = out.logprobs.exp().sum(dim=-1)
            assert bool(((mass - 1.0).abs() < 1e-5).all())

    def test_zeroed_output_projection_is_uniform(self):
        model = TimeExpert(micro_config())
        with torch.no_grad():
            model.lm_head.weight.zero_()
        out = model(random_tokens(2, 8))
        expected = -math.log(model.config.vocab_size)
        assert bool(((out.logprobs - expected).abs() < 1e-6).all())

    def test_causality_prefix_bitwise_invariant_to_suffix(self):
        model = TimeExpert(micro_config(seed=4))
        tokens = random_tokens(2, 10, seed=4)
        base = model(tokens)
        t = 6
        edited = tokens.clone()
        edited[:, t + 1:] = (edited[:, t + 1:] + 17) % 260
        perturbed = model(edited)
        assert torch.equal(base.logprobs[:, : t + 1, :], perturbed.logprobs[:, : t + 1, :])
        assert torch.equal(base.hidden_last[:, : t + 1, :], perturbed.hidden_last[:, : t + 1, :])

    def test_hidden_last_shape(self):
        model = TimeExpert(micro_config())
        out = model(random_tokens(2, 8))
        assert out.hidden_last.shape == (2, 8, 16)

    def test_too_long_sequence_rejected(self):
        model = TimeExpert(micro_config(context_length=8))
        with pytest.raises(ShapeMismatchError):
            model(random_tokens(1, 9))

    def test_out_of_range_token_rejected(self):
        model = TimeExpert(micro_config())
        bad = torch.full((1, 4), 260, dtype=torch.long)
        with pytest.raises(TokenOutOfRangeError):
            model(bad)

    def test_3d_input_rejected(self):
        model = TimeExpert(micro_config())
        with pytest.raises(ShapeMismatchError):
            model(torch.zeros(1, 2, 3, dtype=torch.long))


class TestLoss:
    def test_uniform_model_nll_is_log_vocab(self):
        model = TimeExpert(micro_config())
        with torch.no_grad():
            model.lm_head.weight.zero_()
        loss, _ = loss_and_grads(model, random_tokens(2, 8))
        assert abs(loss - math.log(260)) < 1e-6

    def test_single_token_rows_rejected(self):
        model = TimeExpert(micro_config())
        with pytest.raises(ShapeMismatchError):
            loss_and_grads(model, random_tokens(2, 1))

    def test_gradients_match_finite_differences(self):
        # double precision oracle over every parameter entry; h = 1e-4 keeps
        # central-difference truncation well under the 1e-4 relative gate
        cfg = micro_config(context_length=8)
        model = TimeExpert(cfg, dtype=torch.float64)
        tokens = random_tokens(2, 6, seed=3)
        _, grads = loss_and_grads(model, tokens)

        def f():
            with torch.no_grad():
                return float(sequence_nll(model(tokens).logprobs, tokens))

        worst = 0.0
        for name, p in model.named_parameters():
            fd = finite_diff_grad(f, p, h=1e-4)
            ok, rel = grad_agreement(grads[name], fd, rtol=1e-4, atol=1e-6)
            assert ok, f"gradient mismatch for {name}: max rel err {rel:.3e}"
            worst = max(worst, rel)
        assert worst < 1e-4

    def test_overfits_one_repeated_batch(self):
        # 200 optimizer steps on a fixed batch must beat 0.1 * ln(V)
        torch.manual_seed(0)
        model = TimeExpert(micro_config(seed=8))
        tokens = random_tokens(1, 16, seed=8)
        optimizer = torch.optim.AdamW(model.parameters(), lr=1e-2, betas=(0.9, 0.95))
        loss = None
        for _ in range(200):
            out = model(tokens)
            loss = sequence_nll(out.logprobs, tokens)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
        assert float(loss) < 0.1 * math.log(260)


class TestCheckpoint:
    def make_model(self):
        return TimeExpert(
            micro_config(seed=21),
            window=TimeWindow(2013, 2014),
            tokenizer_hash=b"\x07" * 32,
        )

    def test_round_trip_bit_identical_forward(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "m.ckpt"
        save_expert(path, model)
        again = load_expert(path)
        assert again.window == model.window
        assert again.tokenizer_hash == model.tokenizer_hash
        assert again.config == model.config
        tokens = random_tokens(2, 8, seed=2)
        assert torch.equal(model(tokens).logprobs, again(tokens).logprobs)

    def test_truncated_file_fails_checksum(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_expert(path, self.make_model())
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(ChecksumMismatchError):
            load_expert(path)

    def test_flipped_byte_fails_checksum(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_expert(path, self.make_model())
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load_expert(path)

    def test_version_mismatch(self, tmp_path, monkeypatch):
        path = tmp_path / "m.ckpt"
        import chronomix.lm as lm_mod

        monkeypatch.setattr(lm_mod, "CKPT_VERSION", lm_mod.CKPT_VERSION + 1)
        save_expert(path, self.make_model())
        monkeypatch.undo()
        with pytest.raises(VersionMismatchError):
            load_expert(path)
