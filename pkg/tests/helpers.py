"""Shared test utilities: micro model configs and finite-difference oracles."""

from __future__ import annotations

import torch

from chronomix import ExpertConfig


def micro_config(**kw) -> ExpertConfig:
    base = dict(
        n_layers=2, n_heads=2, d_model=16, context_length=32,
        vocab_size=260, dropout=0.0, tie_embeddings=True, seed=0,
    )
    base.update(kw)
    return ExpertConfig(**base)


def random_tokens(batch: int, length: int, vocab: int = 260, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, vocab, (batch, length), generator=g)


def finite_diff_grad(f, param: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central differences of scalar-valued f() with respect to one tensor.

    Mutates param in place entry by entry; f must recompute the loss from the
    current parameter values on every call.
    """
    flat = param.data.view(-1)
    fd = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        fd[i] = (f_plus - f_minus) / (2.0 * h)
    return fd.view(param.shape)


def grad_agreement(
    analytic: torch.Tensor,
    fd: torch.Tensor,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> tuple[bool, float]:
    """(all entries agree, max relative error among non-tiny entries).

    Entries below `atol`-scale carry finite-difference truncation noise of
    about h^2, so they are held to the absolute bound; everything else must
    meet the relative bound.
    """
    diff = (analytic - fd).abs()
    scale = torch.maximum(analytic.abs(), fd.abs())
    ok = bool((diff <= atol + rtol * scale).all())
    significant = scale >= 1e-3
    if bool(significant.any()):
        rel = (diff[significant] / scale[significant]).max()
        return ok, float(rel)
    return ok, 0.0
