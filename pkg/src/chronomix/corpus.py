"""Timestamped-document ingestion: time binning, tokenization, and packing.

Documents are assigned to year windows by their timestamp, tokenized with a
single shared vocabulary, concatenated with an end-of-text separator, and cut
into fixed-length rows. Each bin becomes one binary shard ("TMSH" format)
whose rows carry the year of the document that contributed their first token.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from datetime import date, datetime
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    FileFormatError,
    OutOfRangeError,
    TokenizerMismatchError,
    UnknownTokenError,
    VersionMismatchError,
)

# Byte-level vocabulary: 256 byte values + end-of-text, padded to 260 so the
# embedding width stays a multiple of 4.
BYTE_EOT_ID = 256
BYTE_VOCAB_SIZE = 260

SHARD_MAGIC = b"TMSH"
SHARD_VERSION = 1


@dataclass(frozen=True, order=True)
class TimeWindow:
    """Inclusive interval of years identifying one expert's training slice."""

    start_year: int
    end_year: int
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if self.start_year > self.end_year:
            raise ValueError(f"start_year {self.start_year} > end_year {self.end_year}")
        if not self.label:
            object.__setattr__(self, "label", f"{self.start_year}-{self.end_year}")

    def contains(self, year: int) -> bool:
        return self.start_year <= year <= self.end_year

    def to_dict(self) -> dict:
        return {"start_year": self.start_year, "end_year": self.end_year, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeWindow":
        return cls(int(d["start_year"]), int(d["end_year"]), d.get("label", ""))


def default_windows(first_year: int = 2013, last_year: int = 2024, span: int = 2) -> list[TimeWindow]:
    """Consecutive fixed-span windows covering [first_year, last_year]."""
    windows = []
    start = first_year
    while start <= last_year:
        end = min(start + span - 1, last_year)
        windows.append(TimeWindow(start, end))
        start = end + 1
    return windows


def validate_windows(windows: Sequence[TimeWindow]) -> None:
    """Windows must be non-empty, sorted, disjoint, and gap-free."""
    if not windows:
        raise ValueError("empty window registry")
    for prev, cur in zip(windows, windows[1:]):
        if cur.start_year != prev.end_year + 1:
            raise ValueError(
                f"windows {prev.label} and {cur.label} are not consecutive disjoint intervals"
            )


def assign_bin(timestamp: date, windows: Sequence[TimeWindow]) -> TimeWindow:
    """Return the unique window containing the timestamp's year."""
    validate_windows(windows)
    year = timestamp.year
    for w in windows:
        if w.contains(year):
            return w
    raise OutOfRangeError(f"no window covers year {year}")


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    timestamp: date

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")


def parse_document(line: str) -> Document:
    """Parse one newline-delimited ingestion record {id, text, timestamp}."""
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise FileFormatError(f"not valid JSON: {e}") from e
    if not isinstance(rec, dict):
        raise FileFormatError("record is not an object")
    for key in ("id", "text", "timestamp"):
        if key not in rec:
            raise FileFormatError(f"missing field {key!r}")
    try:
        ts = datetime.strptime(str(rec["timestamp"])[:10], "%Y-%m-%d").date()
    except ValueError as e:
        raise FileFormatError(f"bad timestamp {rec['timestamp']!r}: {e}") from e
    try:
        return Document(id=str(rec["id"]), text=str(rec["text"]), timestamp=ts)
    except ValueError as e:
        raise FileFormatError(str(e)) from e


# ---------------------------------------------------------------------------
# Tokenizers
# ---------------------------------------------------------------------------

class ByteTokenizer:
    """Identity mapping over UTF-8 bytes; id 256 is end-of-text.

    Zero training data means zero cross-slice leakage, and every expert plus
    the router trivially share one vocabulary.
    """

    scheme = "byte_level"

    def __init__(self, vocab_size: int = BYTE_VOCAB_SIZE, eot_id: int = BYTE_EOT_ID):
        if not (256 <= eot_id < vocab_size):
            raise ValueError(f"eot_id {eot_id} must satisfy 256 <= eot_id < vocab_size {vocab_size}")
        self.vocab_size = vocab_size
        self.eot_id = eot_id

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8")

    def encode_bytes(self, raw: bytes) -> list[int]:
        return list(raw)

    def decode_bytes(self, ids: Sequence[int]) -> bytes:
        return bytes(i for i in ids if i < 256)

    def identity_hash(self) -> bytes:
        ident = f"byte_level:v1:{self.vocab_size}:{self.eot_id}"
        return hashlib.sha256(ident.encode()).digest()


class ExternalVocabTokenizer:
    """Greedy longest-match tokenizer over a pretrained vocabulary file.

    The file is a JSON object {"tokens": [...], "eot_token": "..."} where a
    token's id is its list index. In strict mode, text that matches no token
    raises UnknownTokenError; otherwise the offending character is dropped.
    """

    scheme = "external_vocab"

    def __init__(self, tokens: Sequence[str], eot_token: str, strict: bool = False):
        if eot_token not in tokens:
            raise ValueError("eot_token must be present in the vocabulary")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.vocab_size = len(self.tokens)
        self.eot_id = self.tokens.index(eot_token)
        self.strict = strict
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        self._max_len = max(len(t) for t in self.tokens)

    @classmethod
    def from_file(cls, path, strict: bool = False) -> "ExternalVocabTokenizer":
        with open(path, encoding="utf-8") as f:
            spec = json.load(f)
        return cls(spec["tokens"], spec["eot_token"], strict=strict)

    def encode(self, text: str) -> list[int]:
        out = []
        i = 0
        while i < len(text):
            for ln in range(min(self._max_len, len(text) - i), 0, -1):
                tid = self._ids.get(text[i:i + ln])
                if tid is not None:
                    out.append(tid)
                    i += ln
                    break
            else:
                if self.strict:
                    raise UnknownTokenError(f"no token matches text at offset {i}: {text[i:i+8]!r}")
                i += 1
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i != self.eot_id)

    def identity_hash(self) -> bytes:
        ident = json.dumps(
            {"scheme": "external_vocab", "tokens": self.tokens, "eot_id": self.eot_id},
            ensure_ascii=False, sort_keys=True,
        )
        return hashlib.sha256(ident.encode()).digest()


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

def pack(
    token_docs: Iterable[tuple[int, Sequence[int]]],
    length: int,
    eot_id: int,
) -> Iterator[tuple[int, list[int]]]:
    """Concatenate (doc_year, tokens) streams with eot separators into rows.

    Yields (row_year, row) where row has exactly `length` tokens and row_year
    is the year of the document that contributed the row's first token. The
    trailing partial chunk is dropped. Deterministic given input order.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    pending: list[tuple[int, list[int]]] = []  # (year, remaining tokens) per doc
    buffered = 0
    for year, toks in token_docs:
        pending.append((int(year), list(toks) + [eot_id]))
        buffered += len(toks) + 1
        while buffered >= length:
            row: list[int] = []
            row_year = pending[0][0]
            need = length
            while need > 0:
                y, chunk = pending[0]
                take = chunk[:need]
                row.extend(take)
                need -= len(take)
                if len(take) == len(chunk):
                    pending.pop(0)
                else:
                    pending[0] = (y, chunk[len(take):])
            buffered -= length
            yield row_year, row


# ---------------------------------------------------------------------------
# Shard files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIII32s")


@dataclass
class Shard:
    length: int
    vocab_size: int
    tokenizer_hash: bytes
    years: np.ndarray   # (N,) uint16
    tokens: np.ndarray  # (N, length) uint32

    @property
    def n_rows(self) -> int:
        return int(self.tokens.shape[0])


def write_shard(
    path,
    rows: Iterable[tuple[int, Sequence[int]]],
    length: int,
    vocab_size: int,
    tokenizer_hash: bytes,
) -> int:
    """Write rows to a TMSH shard; returns the number of rows written."""
    if len(tokenizer_hash) != 32:
        raise ValueError("tokenizer_hash must be 32 bytes")
    n = 0
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, length, vocab_size, tokenizer_hash))
        for year, row in rows:
            arr = np.asarray(row, dtype=np.uint32)
            if arr.shape != (length,):
                raise ValueError(f"row has {arr.shape} tokens, expected {length}")
            f.write(struct.pack("<H", int(year)))
            f.write(arr.astype("<u4").tobytes())
            n += 1
    return n


def read_shard(path) -> Shard:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FileFormatError(f"{path}: shorter than shard header")
    magic, version, length, vocab_size, tok_hash = _HEADER.unpack_from(raw, 0)
    if magic != SHARD_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise VersionMismatchError(f"{path}: shard version {version}, expected {SHARD_VERSION}")
    body = raw[_HEADER.size:]
    row_bytes = 2 + 4 * length
    if len(body) % row_bytes != 0:
        raise FileFormatError(f"{path}: truncated shard body")
    n = len(body) // row_bytes
    years = np.empty(n, dtype=np.uint16)
    tokens = np.empty((n, length), dtype=np.uint32)
    for i in range(n):
        off = i * row_bytes
        years[i] = struct.unpack_from("<H", body, off)[0]
        tokens[i] = np.frombuffer(body, dtype="<u4", count=length, offset=off + 2)
    if tokens.size and int(tokens.max()) >= vocab_size:
        raise FileFormatError(f"{path}: token id {int(tokens.max())} >= vocab_size {vocab_size}")
    return Shard(length, vocab_size, tok_hash, years, tokens)


def read_shards(paths, expect_hash: bytes | None = None) -> Shard:
    """Read and concatenate shards, enforcing a single tokenizer identity."""
    shards = [read_shard(p) for p in paths]
    if not shards:
        raise ValueError("no shard paths given")
    first = shards[0]
    for p, s in zip(paths, shards):
        if s.tokenizer_hash != first.tokenizer_hash:
            raise TokenizerMismatchError(f"{p}: tokenizer hash differs across shards")
        if (s.length, s.vocab_size) != (first.length, first.vocab_size):
            raise FileFormatError(f"{p}: shard geometry differs across shards")
    if expect_hash is not None and first.tokenizer_hash != expect_hash:
        raise TokenizerMismatchError("shards were produced by a different tokenizer")
    return Shard(
        first.length,
        first.vocab_size,
        first.tokenizer_hash,
        np.concatenate([s.years for s in shards]),
        np.concatenate([s.tokens for s in shards]),
    )


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

@dataclass
class BinStats:
    window: TimeWindow
    n_docs: int = 0
    n_tokens: int = 0
    n_rows: int = 0


@dataclass
class IngestResult:
    stats: dict[str, BinStats]
    shard_paths: dict[str, str]
    rejects: list[tuple[int, str]]  # (line number, reason)


def ingest(
    lines: Iterable[str],
    windows: Sequence[TimeWindow],
    tokenizer,
    length: int,
    out_dir,
) -> IngestResult:
    """Bin, tokenize, and pack newline-delimited document records.

    Per-record failures (bad JSON, bad date, out-of-range year) are collected
    as rejects rather than aborting the run. Packing folds documents in input
    order, so the output is byte-identical across re-runs.
    """
    import os

    validate_windows(windows)
    os.makedirs(out_dir, exist_ok=True)
    by_bin: dict[str, list[tuple[int, list[int]]]] = {w.label: [] for w in windows}
    stats = {w.label: BinStats(w) for w in windows}
    rejects: list[tuple[int, str]] = []

    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = parse_document(line)
            window = assign_bin(doc.timestamp, windows)
        except (FileFormatError, OutOfRangeError) as e:
            rejects.append((lineno, str(e)))
            continue
        toks = tokenizer.encode(doc.text)
        by_bin[window.label].append((doc.timestamp.year, toks))
        stats[window.label].n_docs += 1
        stats[window.label].n_tokens += len(toks)

    tok_hash = tokenizer.identity_hash()
    shard_paths: dict[str, str] = {}
    for w in windows:
        path = os.path.join(out_dir, f"bin_{w.label}.tmsh")
        rows = pack(by_bin[w.label], length, tokenizer.eot_id)
        stats[w.label].n_rows = write_shard(path, rows, length, tokenizer.vocab_size, tok_hash)
        shard_paths[w.label] = path
    return IngestResult(stats, shard_paths, rejects)
