"""Time-masked log-probability mixing over eligible experts.

The mixed distribution is log(sum_k w_k * exp(logP_k)) computed with a
running max over the contributing experts, so scores around -1e4 neither
overflow nor lose the shift structure. Ineligible experts get weight exactly
zero and are never evaluated at all, which is what makes the temporal mask
airtight: their parameters cannot perturb the output even at the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import (
    DegenerateWeightsError,
    FileFormatError,
    MissingHiddenError,
    NoEligibleExpertError,
    ShapeMismatchError,
)
from .lm import as_token_tensor, read_tensor_file, write_tensor_file
from .temporal import EligibilityMask, ExpertRegistry, eligible_set

STRATEGY_KINDS = ("year", "avg", "learned_avg", "coadapt")
ROUTER_INPUTS = ("latest", "mean", "token_embedding")


class Router(nn.Module):
    """Affine map from a d_model feature to per-expert logits.

    Output layers start at zero so an untrained router reproduces the uniform
    average exactly; when a feature-producing layer (hidden layer, token
    embedding) is present it gets a small normal init instead, otherwise no
    gradient could ever reach it through the zero output weights.
    """

    def __init__(
        self,
        d_model: int,
        n_experts: int,
        hidden_dim: Optional[int] = None,
        vocab_size: Optional[int] = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.d_model = d_model
        self.n_experts = n_experts
        self.hidden_dim = hidden_dim
        self.vocab_size = vocab_size
        g = torch.Generator().manual_seed(seed)
        self.embed = None
        if vocab_size is not None:
            self.embed = nn.Embedding(vocab_size, d_model)
            with torch.no_grad():
                self.embed.weight.normal_(0.0, 0.02, generator=g)
        self.fc = None
        if hidden_dim is not None:
            self.fc = nn.Linear(d_model, hidden_dim)
            with torch.no_grad():
                self.fc.weight.normal_(0.0, 0.02, generator=g)
                self.fc.bias.zero_()
            out_in = hidden_dim
        else:
            out_in = d_model
        self.out = nn.Linear(out_in, n_experts)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()
        self.to(dtype)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.d_model:
            raise ShapeMismatchError(
                f"router expects features of width {self.d_model}, got {features.shape[-1]}"
            )
        h = features
        if self.fc is not None:
            h = torch.nn.functional.gelu(self.fc(h))
        return self.out(h)

    @property
    def dtype(self) -> torch.dtype:
        return self.out.weight.dtype


@dataclass
class Strategy:
    """How per-expert weights are produced at each position."""

    kind: str
    router: Optional[Router] = None
    router_input: str = "latest"
    weights_per: str = "position"
    strict_masking: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        needs_router = self.kind in ("learned_avg", "coadapt")
        if needs_router and self.router is None:
            raise ValueError(f"strategy {self.kind!r} requires a router")
        if not needs_router and self.router is not None:
            raise ValueError(f"strategy {self.kind!r} must not carry a router")
        if self.router_input not in ROUTER_INPUTS:
            raise ValueError(f"unknown router_input {self.router_input!r}")
        if self.weights_per not in ("position", "sequence"):
            raise ValueError(f"unknown weights_per {self.weights_per!r}")


@dataclass
class MixtureOutput:
    logprobs: torch.Tensor  # (B, T, V)
    weights: torch.Tensor   # (B, T, n_experts); exact zeros for ineligible
    mask: EligibilityMask


def mix(expert_logprobs: Sequence[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
    """log(sum_k w_k exp(logp_k)) per position, stable under large shifts.

    The running max is taken only over entries with w_k > 0, so zero-weight
    inputs cannot influence the result in any bit.
    """
    if len(expert_logprobs) == 0:
        raise ShapeMismatchError("mix needs at least one expert")
    lp = torch.stack(list(expert_logprobs), dim=2)  # (B, T, N, V)
    B, T, N, V = lp.shape
    if weights.shape != (B, T, N):
        raise ShapeMismatchError(
            f"weights shape {tuple(weights.shape)} does not match experts {(B, T, N)}"
        )
    if bool((weights < 0).any()):
        raise DegenerateWeightsError("mixture weights must be non-negative")
    if bool((weights.sum(dim=-1) == 0).any()):
        raise DegenerateWeightsError("all mixture weights are zero at some position")
    w = weights.unsqueeze(-1)  # (B, T, N, 1)
    neg_inf = torch.tensor(float("-inf"), dtype=lp.dtype, device=lp.device)
    contributing = w > 0
    masked = torch.where(contributing, lp, neg_inf)
    m = masked.amax(dim=2)  # (B, T, V)
    finite = m > float("-inf")
    m_safe = torch.where(finite, m, torch.zeros_like(m))
    scaled = torch.where(
        contributing, (lp - m_safe.unsqueeze(2)).exp() * w, torch.zeros_like(lp)
    )
    total = scaled.sum(dim=2)
    return torch.where(finite, m_safe + total.log(), torch.full_like(m, float("-inf")))


def compute_weights(
    strategy: Strategy,
    mask: EligibilityMask,
    hidden: Optional[torch.Tensor] = None,
    tokens: Optional[torch.Tensor] = None,
    shape: Optional[tuple[int, int]] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Per-position weight vectors over all registry entries.

    Ineligible entries come out exactly zero: router logits are masked to
    -inf before the softmax, and fixed strategies only ever write to
    eligible slots.
    """
    n = len(mask.eligible)
    if mask.n_eligible == 0:
        raise NoEligibleExpertError(f"no eligible expert at year {mask.query_year}")
    if hidden is not None:
        B, T = hidden.shape[0], hidden.shape[1]
        dtype = hidden.dtype
    elif tokens is not None:
        B, T = tokens.shape
    elif shape is not None:
        B, T = shape
    else:
        B, T = 1, 1

    eligible = torch.tensor(mask.eligible, dtype=torch.bool)

    if strategy.kind == "avg":
        w = torch.zeros(B, T, n, dtype=dtype)
        w[:, :, eligible] = 1.0 / mask.n_eligible
        return w

    if strategy.kind == "year":
        if mask.containing_index is None:
            raise NoEligibleExpertError(f"no expert window contains year {mask.query_year}")
        w = torch.zeros(B, T, n, dtype=dtype)
        w[:, :, mask.containing_index] = 1.0
        return w

    router = strategy.router
    if strategy.router_input == "token_embedding":
        if tokens is None:
            raise MissingHiddenError("token_embedding router input requires the token batch")
        if router.embed is None:
            raise ShapeMismatchError("router was built without a token embedding table")
        features = router.embed(as_token_tensor(tokens))
    else:
        if hidden is None:
            raise MissingHiddenError(f"strategy {strategy.kind!r} requires hidden states")
        features = hidden
    if strategy.weights_per == "sequence":
        features = features.mean(dim=1, keepdim=True)
    logits = router(features)
    if logits.shape[-1] != n:
        raise ShapeMismatchError(
            f"router emits {logits.shape[-1]} logits but registry has {n} entries"
        )
    logits = logits.masked_fill(~eligible.view(1, 1, -1), float("-inf"))
    w = torch.softmax(logits, dim=-1)
    if strategy.weights_per == "sequence":
        w = w.expand(B, T, n)
    return w


def predict(
    registry: ExpertRegistry,
    strategy: Strategy,
    tokens,
    query_year: Optional[int] = None,
) -> MixtureOutput:
    """Mixed next-token log-probabilities for a token batch at a query year.

    Only eligible experts run a forward pass. Queries without a year default
    to the latest registry year (an up-to-date model).
    """
    tokens = as_token_tensor(tokens)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if query_year is None:
        query_year = registry.latest_year
    mask = eligible_set(registry.windows, query_year, strict=strategy.strict_masking)
    B, T = tokens.shape
    n = len(registry)

    if strategy.kind == "year":
        if mask.containing_index is None:
            raise NoEligibleExpertError(f"no expert window contains year {query_year}")
        out = registry.expert(mask.containing_index)(tokens)
        weights = torch.zeros(B, T, n, dtype=out.logprobs.dtype)
        weights[:, :, mask.containing_index] = 1.0
        return MixtureOutput(out.logprobs, weights, mask)

    idx = mask.indices
    outputs = [registry.expert(i)(tokens) for i in idx]

    hidden = None
    if strategy.kind in ("learned_avg", "coadapt") and strategy.router_input != "token_embedding":
        if strategy.router_input == "mean":
            hidden = torch.stack([o.hidden_last for o in outputs]).mean(dim=0)
        else:
            hidden = outputs[-1].hidden_last  # latest eligible expert
    weights = compute_weights(
        strategy, mask, hidden=hidden, tokens=tokens, shape=(B, T),
        dtype=outputs[0].logprobs.dtype,
    )
    mixed = mix([o.logprobs for o in outputs], weights[:, :, idx])
    return MixtureOutput(mixed, weights, mask)


class MixturePredictor:
    """Callable scoring interface over a registry plus strategy."""

    accepts_timestamp = True

    def __init__(self, registry: ExpertRegistry, strategy: Strategy):
        self.registry = registry
        self.strategy = strategy

    @property
    def context_length(self) -> int:
        return min(m.config.context_length for m in self.registry.experts())

    def token_logprobs(self, token_ids: Sequence[int], query_year: Optional[int] = None) -> torch.Tensor:
        """(T, V) next-token log-probabilities for one sequence."""
        with torch.no_grad():
            out = predict(self.registry, self.strategy, [list(token_ids)], query_year)
        return out.logprobs[0]


class SingleExpertPredictor:
    """Scoring interface for one expert; knows nothing about timestamps."""

    accepts_timestamp = False

    def __init__(self, model):
        self.model = model

    @property
    def context_length(self) -> int:
        return self.model.config.context_length

    def token_logprobs(self, token_ids: Sequence[int], query_year: Optional[int] = None) -> torch.Tensor:
        with torch.no_grad():
            out = self.model(torch.tensor([list(token_ids)], dtype=torch.long))
        return out.logprobs[0]


# ---------------------------------------------------------------------------
# Router persistence (same container format as expert checkpoints)
# ---------------------------------------------------------------------------

def save_router(path, router: Router, strategy: Strategy, registry_fingerprint: str) -> None:
    meta = {
        "kind": "router",
        "strategy": strategy.kind,
        "router_input": strategy.router_input,
        "weights_per": strategy.weights_per,
        "strict_masking": strategy.strict_masking,
        "registry_fingerprint": registry_fingerprint,
        "router_config": {
            "d_model": router.d_model,
            "n_experts": router.n_experts,
            "hidden_dim": router.hidden_dim,
            "vocab_size": router.vocab_size,
        },
    }
    write_tensor_file(path, meta, dict(router.named_parameters()))


def load_router(path, dtype: torch.dtype = torch.float32) -> tuple[Router, dict]:
    meta, tensors = read_tensor_file(path)
    if meta.get("kind") != "router":
        raise FileFormatError(f"{path}: not a router checkpoint (kind={meta.get('kind')!r})")
    cfg = meta["router_config"]
    router = Router(
        cfg["d_model"], cfg["n_experts"], hidden_dim=cfg.get("hidden_dim"),
        vocab_size=cfg.get("vocab_size"), dtype=dtype,
    )
    params = dict(router.named_parameters())
    if set(params) != set(tensors):
        raise FileFormatError(f"{path}: tensor names do not match the router architecture")
    with torch.no_grad():
        for name, arr in tensors.items():
            params[name].copy_(torch.from_numpy(arr).to(dtype))
    return router, meta


def load_strategy(path, dtype: torch.dtype = torch.float32) -> Strategy:
    router, meta = load_router(path, dtype=dtype)
    return Strategy(
        kind=meta["strategy"],
        router=router,
        router_input=meta.get("router_input", "latest"),
        weights_per=meta.get("weights_per", "position"),
        strict_masking=bool(meta.get("strict_masking", False)),
    )
