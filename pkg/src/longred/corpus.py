"""Tokenisation, fixed-length packing, mixed batch drawing and a seeded
synthetic corpus with key/value recall probes."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TOKEN_DTYPE = np.dtype("<u2")


class ByteTokenizer:
    """Bytes map to ids 0..255; optional specials follow."""

    def __init__(self, specials: Sequence[str] = ()):
        self.specials = list(specials)

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.specials)

    def encode(self, text: bytes | str) -> np.ndarray:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> bytes:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() > 255):
            raise ValueError("only byte ids can be decoded to bytes")
        return ids.astype(np.uint8).tobytes()


class CharTokenizer:
    def __init__(self, alphabet: str):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet has duplicate characters")
        self.alphabet = alphabet
        self._index = {c: i for i, c in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    def encode(self, text: bytes | str) -> np.ndarray:
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        try:
            return np.array([self._index[c] for c in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.alphabet[int(i)] for i in ids)


def tokenize(text: bytes | str, mode: str = "byte", alphabet: str | None = None) -> np.ndarray:
    if mode == "byte":
        return ByteTokenizer().encode(text)
    if mode == "char":
        if alphabet is None:
            raise ValueError("char mode needs an alphabet")
        return CharTokenizer(alphabet).encode(text)
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def detokenize(ids) -> bytes:
    return ByteTokenizer().decode(ids)


@dataclass
class PackedDataset:
    name: str
    sequence_length: int
    sequences: np.ndarray  # [count, sequence_length]
    digest: str = ""

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64).reshape(-1, self.sequence_length)
        if not self.digest:
            self.digest = _digest(self.sequence_length, self.sequences)

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.sequences.size


def _digest(length: int, seqs: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(int(length)).encode())
    h.update(np.ascontiguousarray(seqs, dtype=TOKEN_DTYPE).tobytes())
    return h.hexdigest()


def pack_corpus(tokens, length: int, name: str = "D") -> PackedDataset:
    """Cut the stream into consecutive non-overlapping windows; drop the remainder."""
    if length < 2:
        raise ValueError("sequence length must be >= 2")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size // length
    if n == 0:
        raise ValueError(f"corpus of {tokens.size} tokens is shorter than one window of {length}")
    return PackedDataset(name, length, tokens[: n * length].reshape(n, length))


def save_packed(ds: PackedDataset, directory: str | Path) -> Path:
    """Write ``<name>.bin`` (little-endian uint16) and a JSON sidecar ``<name>.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if ds.sequences.size and ds.sequences.max() > np.iinfo(TOKEN_DTYPE).max:
        raise ValueError("token ids do not fit in uint16")
    ds.sequences.astype(TOKEN_DTYPE).tofile(d / f"{ds.name}.bin")
    meta = {
        "name": ds.name,
        "sequence_length": ds.sequence_length,
        "count": len(ds),
        "dtype": "uint16-le",
        "digest": ds.digest,
    }
    (d / f"{ds.name}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return d / f"{ds.name}.bin"


def load_packed(directory: str | Path, name: str) -> PackedDataset:
    d = Path(directory)
    meta = json.loads((d / f"{name}.json").read_text())
    raw = np.fromfile(d / f"{name}.bin", dtype=TOKEN_DTYPE).astype(np.int64)
    length, count = int(meta["sequence_length"]), int(meta["count"])
    if raw.size != length * count:
        raise ValueError(f"{name}.bin holds {raw.size} tokens, sidecar promises {length * count}")
    ds = PackedDataset(meta["name"], length, raw.reshape(count, length))
    if ds.digest != meta["digest"]:
        raise ValueError(f"{name}: digest mismatch")
    return ds


# ---------------------------------------------------------------------------
# Mixed batches
# ---------------------------------------------------------------------------


def batch_counts(mix_ratio: Sequence[float], batch_tokens: int, lengths: Sequence[int]) -> list[int]:
    """Sequences per dataset so token counts follow ``mix_ratio``."""
    if len(mix_ratio) != len(lengths):
        raise ValueError("mix_ratio and lengths differ in size")
    if any(r < 0 for r in mix_ratio) or sum(mix_ratio) <= 0:
        raise ValueError("mix ratio entries must be nonnegative with a positive sum")
    if batch_tokens < lengths[0]:
        raise ValueError("batch_tokens is smaller than one long sequence")
    total = float(sum(mix_ratio))
    counts = []
    for r, n in zip(mix_ratio, lengths):
        if r == 0:
            counts.append(0)
        else:
            counts.append(max(1, int(math.floor(batch_tokens * r / total / n + 0.5))))
    return counts


class MixedBatcher:
    """Draws (b1, b2, b3) per step, without replacement inside each epoch."""

    def __init__(
        self,
        datasets: Sequence[PackedDataset],
        mix_ratio: Sequence[float],
        batch_tokens: int,
        rng: np.random.Generator,
    ):
        self.datasets = list(datasets)
        self.counts = batch_counts(mix_ratio, batch_tokens, [d.sequence_length for d in datasets])
        for ds, c in zip(self.datasets, self.counts):
            if c and len(ds) == 0:
                raise ValueError(f"dataset {ds.name} is empty")
            if c > len(ds):
                raise ValueError(f"dataset {ds.name} has {len(ds)} sequences, a batch needs {c}")
        self.rng = rng
        self._orders = [np.empty(0, dtype=np.int64) for _ in datasets]
        self._cursor = [0] * len(datasets)
        self.epochs = [0] * len(datasets)

    def _take(self, i: int, n: int) -> np.ndarray:
        ds = self.datasets[i]
        if n == 0:
            return np.zeros((0, ds.sequence_length), dtype=np.int64)
        if self._cursor[i] + n > len(self._orders[i]):
            self._orders[i] = self.rng.permutation(len(ds))
            self._cursor[i] = 0
            self.epochs[i] += 1
        idx = self._orders[i][self._cursor[i] : self._cursor[i] + n]
        self._cursor[i] += n
        return ds.sequences[idx]

    def draw(self) -> tuple[np.ndarray, ...]:
        return tuple(self._take(i, c) for i, c in enumerate(self.counts))


def draw_batch(datasets, mix_ratio, batch_tokens: int, rng: np.random.Generator):
    """One mixed batch from a fresh epoch; use MixedBatcher to keep epoch state."""
    return MixedBatcher(datasets, mix_ratio, batch_tokens, rng).draw()


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_BRACE_KEYS = "ABCDEFGHIJKLM"
_BRACKET_KEYS = "NOPQRSTUVWXYZ"


@dataclass
class RecallDoc:
    """A document plus the offsets of every value byte a model should recall."""

    data: bytes
    value_positions: list[int] = field(default_factory=list)


class SyntheticCorpus:
    """Order-1 Markov word text with embedded key/value recall records.

    A record is defined as ``{K42}`` and later queried as ``{?K42}``; the
    two digits after the key can only be predicted by looking back at the
    definition. ``{}`` records use keys A-M and ``[]`` records keys N-Z.
    """

    def __init__(self, seed: int = 0, n_words: int = 48, fanout: int = 4):
        rng = np.random.default_rng(seed)
        words: set[str] = set()
        while len(words) < n_words:
            n = int(rng.integers(2, 6))
            words.add("".join(rng.choice(list(_LETTERS), n)))
        self.words = sorted(words)
        self.succ = rng.integers(0, n_words, size=(n_words, fanout))
        self.probs = rng.dirichlet(np.full(fanout, 0.7), size=n_words)

    def filler(self, rng: np.random.Generator, n_bytes: int) -> bytes:
        if n_bytes <= 0:
            return b""
        out: list[str] = []
        size = 0
        w = int(rng.integers(len(self.words)))
        while size < n_bytes:
            tok = self.words[w] + " "
            out.append(tok)
            size += len(tok)
            w = int(self.succ[w, rng.choice(self.succ.shape[1], p=self.probs[w])])
        return "".join(out).encode()[:n_bytes]

    @staticmethod
    def _record(rng: np.random.Generator, key: str, brackets: str = "{}") -> tuple[bytes, bytes]:
        val = f"{int(rng.integers(100)):02d}"
        o, c = brackets
        return f"{o}{key}{val}{c}".encode(), f"{o}?{key}{val}{c}".encode()

    @staticmethod
    def _keys(rng: np.random.Generator, brackets: str, n: int) -> list[str]:
        pool = _BRACE_KEYS if brackets == "{}" else _BRACKET_KEYS
        return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]

    def short_document(
        self,
        rng: np.random.Generator,
        n_records: int = 2,
        max_gap: int = 24,
        brackets: str | None = None,
    ) -> RecallDoc:
        """Filler with ``n_records`` definitions, each queried at most
        ``max_gap`` bytes after the last definition. ``brackets`` picks the
        record delimiters; by default a coin flip between ``{}`` and ``[]``."""
        if brackets is None:
            brackets = "{}" if rng.random() < 0.5 else "[]"
        recs = [self._record(rng, k, brackets) for k in self._keys(rng, brackets, n_records)]
        out = bytearray(self.filler(rng, int(rng.integers(2, 12))))
        for d, _ in recs:
            out += d + self.filler(rng, int(rng.integers(1, 8)))
        values = []
        for i in rng.permutation(n_records):
            out += self.filler(rng, int(rng.integers(1, max_gap // n_records)))
            values += [len(out) + 3, len(out) + 4]
            out += recs[i][1]
        out += self.filler(rng, int(rng.integers(2, 12))) + b"\n"
        return RecallDoc(bytes(out), values)

    def dense_document(
        self, rng: np.random.Generator, n_records: int = 5, brackets: str | None = None
    ) -> RecallDoc:
        """Definitions back to back, then every key queried in shuffled order."""
        if brackets is None:
            brackets = "{}" if rng.random() < 0.5 else "[]"
        recs = [self._record(rng, k, brackets) for k in self._keys(rng, brackets, n_records)]
        out = bytearray()
        for d, _ in recs:
            out += d + self.filler(rng, int(rng.integers(0, 3)))
        values = []
        for i in rng.permutation(n_records):
            out += self.filler(rng, int(rng.integers(0, 3)))
            values += [len(out) + 3, len(out) + 4]
            out += recs[i][1]
        return RecallDoc(bytes(out) + b"\n", values)

    def short_stream(
        self,
        rng: np.random.Generator,
        n_bytes: int,
        brackets: str | None = None,
        dense: float = 0.0,
    ) -> bytes:
        """Concatenated short documents; a ``dense`` fraction are record-dense."""
        chunks, size = [], 0
        while size < n_bytes:
            if dense and rng.random() < dense:
                doc = self.dense_document(rng, brackets=brackets).data
            else:
                doc = self.short_document(rng, brackets=brackets).data
            chunks.append(doc)
            size += len(doc)
        return b"".join(chunks)[:n_bytes]

    def _whole_docs(self, rng: np.random.Generator, budget: int, dense: float) -> bytes:
        """Complete ``{}`` documents totalling at most ``budget`` bytes."""
        out = bytearray()
        while True:
            if dense and rng.random() < dense:
                doc = self.dense_document(rng, brackets="{}").data
            else:
                doc = self.short_document(rng, brackets="{}").data
            if len(out) + len(doc) > budget:
                return bytes(out)
            out += doc

    def long_document(
        self, rng: np.random.Generator, length: int, n_pairs: int = 2, dense: float = 0.0
    ) -> RecallDoc:
        """Exactly ``length`` bytes: ``n_pairs`` ``[]`` definitions at the
        start, whole ``{}`` documents in the middle, and the matching queries
        in the last quarter. No document is cut, so the local text matches
        the short stream; only the ``[]`` recalls span the long range.
        ``dense`` is passed on to the middle documents."""
        recs = [self._record(rng, k, "[]") for k in self._keys(rng, "[]", n_pairs)]
        head = bytearray(self.filler(rng, int(rng.integers(2, 12))))
        for d, _ in recs:
            head += d + self.filler(rng, int(rng.integers(1, 8)))
        head += b"\n"
        tail = bytearray()
        positions_in_tail = []
        for i in rng.permutation(n_pairs):
            tail += self.filler(rng, int(rng.integers(2, 12)))
            positions_in_tail.append(len(tail) + 3)
            tail += recs[i][1]
        tail += self.filler(rng, int(rng.integers(2, 12))) + b"\n"
        room = length - len(head) - len(tail)
        if room < length // 4:
            raise ValueError("long document too short for its records")
        middle = self._whole_docs(rng, room, dense)
        middle += self.filler(rng, room - len(middle))
        doc = bytes(head) + middle + bytes(tail)
        start = len(head) + len(middle)
        values = []
        for p in positions_in_tail:
            values += [start + p, start + p + 1]
        return RecallDoc(doc, values)

    def long_stream(self, rng: np.random.Generator, length: int, count: int, dense: float = 0.0) -> bytes:
        return b"".join(self.long_document(rng, length, dense=dense).data for _ in range(count))
