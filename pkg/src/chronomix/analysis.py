"""Cross-slice semantic drift: per-expert embeddings and cosine series.

A text's embedding under one expert is the final position of the last hidden
layer from a single forward pass. Comparing the same word pair across every
expert in a registry traces how strongly the slices associate the two terms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import torch

from .corpus import ByteTokenizer, TimeWindow
from .errors import ContextOverflowError, EmptyTextError, ZeroVectorError


def embed(model, text: str, tokenizer=None) -> torch.Tensor:
    """Final-token last-hidden-layer embedding of `text` under one expert."""
    if not text:
        raise EmptyTextError("cannot embed empty text")
    tokenizer = tokenizer or ByteTokenizer()
    ids = tokenizer.encode(text)
    if not ids:
        raise EmptyTextError(f"{text!r} tokenizes to nothing")
    if len(ids) > model.config.context_length:
        raise ContextOverflowError(
            f"text tokenizes to {len(ids)} tokens, context is {model.config.context_length}"
        )
    with torch.no_grad():
        out = model(torch.tensor([ids], dtype=torch.long))
    return out.hidden_last[0, -1].clone()


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise ZeroVectorError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine of a zero vector is undefined")
    value = float(torch.dot(a.flatten(), b.flatten())) / (na * nb)
    return max(-1.0, min(1.0, value))


@dataclass(frozen=True)
class DistancePoint:
    window: TimeWindow
    similarity: float

    @property
    def distance(self) -> float:
        return 1.0 - self.similarity


@dataclass(frozen=True)
class DistanceSeries:
    anchor: str
    target: str
    points: tuple[DistancePoint, ...]


def distance_series(registry, anchor: str, targets: Sequence[str], tokenizer=None) -> list[DistanceSeries]:
    """One similarity point per (registry window, target) for a fixed anchor."""
    series = []
    anchor_vecs = {
        i: embed(registry.expert(i), anchor, tokenizer) for i in range(len(registry))
    }
    for target in targets:
        points = []
        for i in range(len(registry)):
            vec = embed(registry.expert(i), target, tokenizer)
            points.append(
                DistancePoint(registry.entries[i].window, cosine(anchor_vecs[i], vec))
            )
        series.append(DistanceSeries(anchor, target, tuple(points)))
    return series


def series_rows(series: Sequence[DistanceSeries]) -> list[dict]:
    rows = []
    for s in series:
        for p in s.points:
            rows.append(
                {
                    "window_label": p.window.label,
                    "anchor": s.anchor,
                    "target": s.target,
                    "cosine_similarity": p.similarity,
                    "distance": p.distance,
                }
            )
    return rows


def write_series_csv(path, series: Sequence[DistanceSeries]) -> None:
    rows = series_rows(series)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(
            f, fieldnames=["window_label", "anchor", "target", "cosine_similarity", "distance"]
        )
        writer.writeheader()
        writer.writerows(rows)
