"""Minimal pre-norm GPT-style decoder and its checkpoint format.

One expert = learned token + position embeddings, n_layers of causal
multi-head attention and 4x GELU MLP with pre-layernorm residuals, a final
layernorm, and a (by default tied) output projection. `forward` returns
per-position next-token log-probabilities together with the final-layer
hidden states, which double as analysis embeddings and router inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import TimeWindow
from .errors import (
    ChecksumMismatchError,
    FileFormatError,
    InvalidConfigError,
    ShapeMismatchError,
    TokenOutOfRangeError,
    VersionMismatchError,
)

CKPT_MAGIC = b"TMCK"
CKPT_VERSION = 1


@dataclass
class ExpertConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    context_length: int = 256
    vocab_size: int = 260
    dropout: float = 0.0
    tie_embeddings: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise InvalidConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.context_length < 2:
            raise InvalidConfigError("context_length must be >= 2")
        if min(self.n_layers, self.n_heads, self.d_model, self.vocab_size) < 1:
            raise InvalidConfigError("n_layers, n_heads, d_model, vocab_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError("dropout must be in [0, 1)")


@dataclass
class ForwardOutput:
    logprobs: torch.Tensor     # (B, T, V), rows normalized
    hidden_last: torch.Tensor  # (B, T, d_model), post final layernorm


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ExpertConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.qkv = nn.Linear(config.d_model, 3 * config.d_model)
        self.proj = nn.Linear(config.d_model, config.d_model)
        self.attn_dropout = nn.Dropout(config.dropout)
        self.resid_dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        hs = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_heads, hs).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hs).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hs).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hs)
        mask = torch.triu(torch.ones(T, T, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = self.attn_dropout(F.softmax(att, dim=-1))
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.resid_dropout(self.proj(y))


class MLP(nn.Module):
    def __init__(self, config: ExpertConfig):
        super().__init__()
        self.fc = nn.Linear(config.d_model, 4 * config.d_model)
        self.proj = nn.Linear(4 * config.d_model, config.d_model)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.proj(F.gelu(self.fc(x))))


class Block(nn.Module):
    def __init__(self, config: ExpertConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.mlp = MLP(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TimeExpert(nn.Module):
    """Decoder-only expert bound to one training window and one tokenizer."""

    def __init__(
        self,
        config: ExpertConfig,
        window: Optional[TimeWindow] = None,
        tokenizer_hash: bytes = b"\x00" * 32,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        config.validate()
        self.config = config
        self.window = window
        self.tokenizer_hash = tokenizer_hash
        self.wte = nn.Embedding(config.vocab_size, config.d_model)
        self.wpe = nn.Embedding(config.context_length, config.d_model)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        if config.tie_embeddings:
            self.lm_head.weight = self.wte.weight
        self.reset_parameters()
        self.to(dtype)

    def reset_parameters(self) -> None:
        """Deterministic init: (config, seed) fully determines every weight."""
        g = torch.Generator().manual_seed(self.config.seed)
        std = 0.02
        resid_std = std / math.sqrt(2 * self.config.n_layers)
        for p in self.parameters():
            with torch.no_grad():
                p.zero_()
        with torch.no_grad():
            self.wte.weight.normal_(0.0, std, generator=g)
            self.wpe.weight.normal_(0.0, std, generator=g)
            for block in self.blocks:
                block.ln1.weight.fill_(1.0)
                block.ln2.weight.fill_(1.0)
                block.attn.qkv.weight.normal_(0.0, std, generator=g)
                block.attn.proj.weight.normal_(0.0, resid_std, generator=g)
                block.mlp.fc.weight.normal_(0.0, std, generator=g)
                block.mlp.proj.weight.normal_(0.0, resid_std, generator=g)
            self.ln_f.weight.fill_(1.0)
            if not self.config.tie_embeddings:
                self.lm_head.weight.normal_(0.0, std, generator=g)

    def _check_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 2:
            raise ShapeMismatchError(f"expected (B, T) token batch, got shape {tuple(tokens.shape)}")
        if tokens.shape[1] < 1 or tokens.shape[1] > self.config.context_length:
            raise ShapeMismatchError(
                f"sequence length {tokens.shape[1]} not in [1, {self.config.context_length}]"
            )
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise TokenOutOfRangeError(
                f"token ids must lie in [0, {self.config.vocab_size}); "
                f"got range [{int(tokens.min())}, {int(tokens.max())}]"
            )
        return tokens

    def forward(self, tokens) -> ForwardOutput:
        tokens = self._check_tokens(as_token_tensor(tokens))
        B, T = tokens.shape
        pos = torch.arange(T, device=tokens.device)
        x = self.embed_dropout(self.wte(tokens) + self.wpe(pos))
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        logits = self.lm_head(hidden)
        return ForwardOutput(F.log_softmax(logits, dim=-1), hidden)

    @property
    def dtype(self) -> torch.dtype:
        return self.wte.weight.dtype

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def as_token_tensor(tokens) -> torch.Tensor:
    if isinstance(tokens, torch.Tensor):
        return tokens.long()
    arr = np.asarray(tokens)
    if not np.issubdtype(arr.dtype, np.integer):
        raise TokenOutOfRangeError(f"token array must be integer, got dtype {arr.dtype}")
    return torch.from_numpy(arr.astype(np.int64))


def sequence_nll(logprobs: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL: positions 1..T-1 scored from their prefixes."""
    if tokens.shape[1] < 2:
        raise ShapeMismatchError("need rows of length >= 2 to form next-token targets")
    pred = logprobs[:, :-1, :]
    tgt = tokens[:, 1:]
    return -pred.gather(2, tgt.unsqueeze(-1)).mean()


def loss_and_grads(model: TimeExpert, tokens) -> tuple[float, dict[str, torch.Tensor]]:
    """Next-token NLL and exact gradients for every trainable parameter."""
    tokens = as_token_tensor(tokens)
    model.zero_grad(set_to_none=True)
    out = model(tokens)
    loss = sequence_nll(out.logprobs, tokens)
    loss.backward()
    grads = {
        name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


# ---------------------------------------------------------------------------
# Checkpoint container: manifest JSON + raw little-endian float32 tensors +
# trailing SHA-256 over everything before it. Shared by expert and router
# checkpoints.
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sII")


def write_tensor_file(path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    records = []
    payload = bytearray()
    for name, t in tensors.items():
        data = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        records.append(
            {"name": name, "shape": list(t.shape), "offset": len(payload), "nbytes": len(data)}
        )
        payload.extend(data)
    manifest = dict(meta)
    manifest["format_version"] = CKPT_VERSION
    manifest["tensors"] = records
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(mbytes)) + mbytes + bytes(payload)
    with open(path, "wb") as f:
        f.write(blob)
        f.write(hashlib.sha256(blob).digest())


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CKPT_HEADER.size + 32:
        raise ChecksumMismatchError(f"{path}: file too short to hold a checkpoint")
    blob, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise ChecksumMismatchError(f"{path}: content hash mismatch")
    magic, version, mlen = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    manifest = json.loads(blob[_CKPT_HEADER.size:_CKPT_HEADER.size + mlen].decode("utf-8"))
    body = blob[_CKPT_HEADER.size + mlen:]
    tensors = {}
    for rec in manifest["tensors"]:
        arr = np.frombuffer(
            body, dtype="<f4", count=rec["nbytes"] // 4, offset=rec["offset"]
        ).reshape(rec["shape"])
        tensors[rec["name"]] = arr.copy()
    return manifest, tensors


def content_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def save_expert(path, model: TimeExpert, extra: dict | None = None) -> None:
    meta = {
        "kind": "expert",
        "config": asdict(model.config),
        "window": model.window.to_dict() if model.window is not None else None,
        "tokenizer_hash": model.tokenizer_hash.hex(),
    }
    if extra:
        meta["extra"] = extra
    write_tensor_file(path, meta, dict(model.named_parameters()))


def load_expert(path, dtype: torch.dtype = torch.float32) -> TimeExpert:
    meta, tensors = read_tensor_file(path)
    if meta.get("kind") != "expert":
        raise FileFormatError(f"{path}: not an expert checkpoint (kind={meta.get('kind')!r})")
    config = ExpertConfig(**meta["config"])
    window = TimeWindow.from_dict(meta["window"]) if meta.get("window") else None
    model = TimeExpert(
        config, window=window, tokenizer_hash=bytes.fromhex(meta["tokenizer_hash"]), dtype=dtype
    )
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        raise FileFormatError(f"{path}: tensor names do not match the architecture")
    with torch.no_grad():
        for name, arr in tensors.items():
            if tuple(params[name].shape) != arr.shape:
                raise ShapeMismatchError(f"{path}: tensor {name} has shape {arr.shape}")
            params[name].copy_(torch.from_numpy(arr).to(dtype))
    return model
