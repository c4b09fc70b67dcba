"""Expert registry and the causal eligibility rule.

An expert is eligible for a query year when its window starts at or before
that year, so the newest eligible expert is the one whose window contains the
query. A stricter variant (window must END at or before the query year) is
kept behind a flag for ablation.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .corpus import TimeWindow, validate_windows
from .errors import (
    ChecksumMismatchError,
    NoEligibleExpertError,
    OutOfRangeError,
    TokenizerMismatchError,
)
from .lm import TimeExpert, content_hash, load_expert

REGISTRY_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class EligibilityMask:
    """Per-entry eligibility for one query year.

    Eligibility is monotone: entries are sorted by window, so the eligible
    entries always form a prefix [0, n_eligible).
    """

    query_year: int
    eligible: tuple[bool, ...]
    containing_index: Optional[int] = None

    @property
    def indices(self) -> list[int]:
        return [i for i, e in enumerate(self.eligible) if e]

    @property
    def n_eligible(self) -> int:
        return sum(self.eligible)


def eligible_set(
    windows: Sequence[TimeWindow], query_year: int, strict: bool = False
) -> EligibilityMask:
    """Mask of experts allowed to contribute for a query at `query_year`."""
    validate_windows(windows)
    if strict:
        flags = tuple(w.end_year <= query_year for w in windows)
    else:
        flags = tuple(w.start_year <= query_year for w in windows)
    if not any(flags):
        raise NoEligibleExpertError(
            f"query year {query_year} predates every expert window "
            f"(earliest is {windows[0].label})"
        )
    containing = next((i for i, w in enumerate(windows) if w.contains(query_year)), None)
    return EligibilityMask(query_year, flags, containing)


def containing_index(windows: Sequence[TimeWindow], year: int) -> int:
    """Index of the unique window covering `year`."""
    validate_windows(windows)
    for i, w in enumerate(windows):
        if w.contains(year):
            return i
    raise OutOfRangeError(
        f"no expert window contains year {year} "
        f"(registry spans {windows[0].start_year}-{windows[-1].end_year})"
    )


@dataclass
class RegistryEntry:
    window: TimeWindow
    path: Optional[str] = None
    checkpoint_hash: Optional[str] = None


class ExpertRegistry:
    """Ordered, immutable collection of experts sharing one tokenizer.

    Experts may live in memory (tests, small runs) or be loaded lazily from
    checkpoint files recorded in a manifest.
    """

    def __init__(
        self,
        entries: Sequence[RegistryEntry],
        tokenizer_hash: bytes,
        models: Optional[Sequence[Optional[TimeExpert]]] = None,
        dtype: torch.dtype = torch.float32,
    ):
        if not entries:
            raise ValueError("registry needs at least one entry")
        validate_windows([e.window for e in entries])
        self.entries = list(entries)
        self.tokenizer_hash = tokenizer_hash
        self._dtype = dtype
        self._models: dict[int, TimeExpert] = {}
        if models is not None:
            if len(models) != len(entries):
                raise ValueError("models and entries must align")
            self._models = {i: m for i, m in enumerate(models) if m is not None}

    @classmethod
    def from_models(cls, models: Sequence[TimeExpert]) -> "ExpertRegistry":
        if not models:
            raise ValueError("registry needs at least one expert")
        tok_hash = models[0].tokenizer_hash
        for m in models:
            if m.window is None:
                raise ValueError("every registry expert needs a window")
            if m.tokenizer_hash != tok_hash:
                raise TokenizerMismatchError("registry experts disagree on tokenizer identity")
        ordered = sorted(models, key=lambda m: m.window.start_year)
        entries = [RegistryEntry(m.window) for m in ordered]
        return cls(entries, tok_hash, models=ordered)

    @classmethod
    def from_checkpoints(cls, paths: Sequence[str], dtype: torch.dtype = torch.float32) -> "ExpertRegistry":
        models = [load_expert(p, dtype=dtype) for p in paths]
        order = sorted(range(len(models)), key=lambda i: models[i].window.start_year)
        entries = [
            RegistryEntry(models[i].window, str(paths[i]), content_hash(paths[i])) for i in order
        ]
        reg = cls(entries, models[order[0]].tokenizer_hash, models=[models[i] for i in order], dtype=dtype)
        for m in reg._models.values():
            if m.tokenizer_hash != reg.tokenizer_hash:
                raise TokenizerMismatchError("checkpoints disagree on tokenizer identity")
        return reg

    @property
    def windows(self) -> list[TimeWindow]:
        return [e.window for e in self.entries]

    @property
    def latest_year(self) -> int:
        return self.entries[-1].window.end_year

    @property
    def earliest_year(self) -> int:
        return self.entries[0].window.start_year

    def __len__(self) -> int:
        return len(self.entries)

    def expert(self, index: int) -> TimeExpert:
        if index not in self._models:
            entry = self.entries[index]
            if entry.path is None:
                raise ValueError(f"registry entry {index} has no model or checkpoint path")
            if entry.checkpoint_hash and content_hash(entry.path) != entry.checkpoint_hash:
                raise ChecksumMismatchError(f"{entry.path}: checkpoint changed since registration")
            model = load_expert(entry.path, dtype=self._dtype)
            if model.tokenizer_hash != self.tokenizer_hash:
                raise TokenizerMismatchError(
                    f"{entry.path}: checkpoint tokenizer differs from registry tokenizer"
                )
            self._models[index] = model
        return self._models[index]

    def experts(self) -> list[TimeExpert]:
        return [self.expert(i) for i in range(len(self))]

    def fingerprint(self) -> str:
        """Stable identity over windows, checkpoint hashes, and tokenizer."""
        parts = [self.tokenizer_hash.hex()]
        for e in self.entries:
            parts.append(f"{e.window.start_year}:{e.window.end_year}:{e.checkpoint_hash or ''}")
        return hashlib.sha256("|".join(parts).encode()).hexdigest()

    def save_manifest(self, path) -> None:
        base = os.path.dirname(os.path.abspath(path))
        entries = []
        for e in self.entries:
            if e.path is None:
                raise ValueError("cannot write a manifest for in-memory-only experts")
            rel = os.path.relpath(os.path.abspath(e.path), base)
            entries.append(
                {
                    "start_year": e.window.start_year,
                    "end_year": e.window.end_year,
                    "label": e.window.label,
                    "checkpoint": rel,
                    "content_hash": e.checkpoint_hash or content_hash(e.path),
                }
            )
        doc = {
            "version": REGISTRY_MANIFEST_VERSION,
            "tokenizer_hash": self.tokenizer_hash.hex(),
            "entries": entries,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_directory(cls, path, dtype: torch.dtype = torch.float32) -> "ExpertRegistry":
        """Registry over every *.ckpt file in a directory."""
        import glob

        paths = sorted(glob.glob(os.path.join(str(path), "*.ckpt")))
        if not paths:
            raise ValueError(f"no *.ckpt files under {path}")
        return cls.from_checkpoints(paths, dtype=dtype)

    @classmethod
    def from_manifest(cls, path, dtype: torch.dtype = torch.float32) -> "ExpertRegistry":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        base = os.path.dirname(os.path.abspath(path))
        entries = []
        for rec in doc["entries"]:
            ckpt = rec["checkpoint"]
            if not os.path.isabs(ckpt):
                ckpt = os.path.join(base, ckpt)
            entries.append(
                RegistryEntry(
                    TimeWindow(int(rec["start_year"]), int(rec["end_year"]), rec.get("label", "")),
                    ckpt,
                    rec.get("content_hash"),
                )
            )
        return cls(entries, bytes.fromhex(doc["tokenizer_hash"]), dtype=dtype)


def load_registry(path, dtype: torch.dtype = torch.float32) -> ExpertRegistry:
    """Accepts either a registry manifest file or a directory of checkpoints."""
    if os.path.isdir(path):
        return ExpertRegistry.from_directory(path, dtype=dtype)
    return ExpertRegistry.from_manifest(path, dtype=dtype)
