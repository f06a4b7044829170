"""Byte ingestion, tokenization, datasets and synthetic corpora.

Token ids: bytes 0-255 map to themselves, 256 is end-of-file (appended once),
257 is PAD (frozen all-zero embedding) used for right padding. Long inputs are
read through `TokenSource` objects so the scan never needs the whole file in
memory.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import EOF_ID, PAD_ID

log = logging.getLogger(__name__)

TOKEN_DTYPE = np.uint16


class DataError(Exception):
    """Unreadable, missing or malformed dataset input."""


# --------------------------------------------------------------------------
# token sources


class TokenSource:
    """Random access to a token sequence: bytes, then EOF, then PAD up to min_length."""

    n_bytes: int
    min_length: int

    def __len__(self) -> int:
        return max(self.n_bytes + 1, self.min_length)

    def _read_bytes(self, start: int, stop: int) -> np.ndarray:
        raise NotImplementedError

    def read(self, start: int, stop: int) -> np.ndarray:
        start = max(0, start)
        stop = min(len(self), stop)
        out = np.full(max(0, stop - start), PAD_ID, dtype=TOKEN_DTYPE)
        if stop <= start:
            return out
        b_stop = min(stop, self.n_bytes)
        if start < b_stop:
            out[: b_stop - start] = self._read_bytes(start, b_stop)
        if start <= self.n_bytes < stop:
            out[self.n_bytes - start] = EOF_ID
        return out

    def read_all(self) -> np.ndarray:
        return self.read(0, len(self))

    def windows(self, starts: Sequence[int], width: int) -> np.ndarray:
        """Gather [n, width] token windows at the given start offsets."""
        out = np.empty((len(starts), width), dtype=TOKEN_DTYPE)
        for i, s in enumerate(starts):
            out[i] = self.read(int(s), int(s) + width)
        return out


class ArrayTokens(TokenSource):
    """Wraps an already tokenized sequence (no EOF/PAD is added)."""

    def __init__(self, tokens: np.ndarray):
        self.tokens = np.asarray(tokens, dtype=TOKEN_DTYPE)
        self.n_bytes = len(self.tokens)
        self.min_length = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def read(self, start: int, stop: int) -> np.ndarray:
        return self.tokens[max(0, start):stop]

    def windows(self, starts, width):
        starts = np.asarray(starts, dtype=np.intp)
        return self.tokens[starts[:, None] + np.arange(width)]


class BytesTokens(TokenSource):
    def __init__(self, raw: bytes | np.ndarray, min_length: int = 0):
        self.raw = np.frombuffer(bytes(raw), dtype=np.uint8) if not isinstance(raw, np.ndarray) else raw
        self.n_bytes = len(self.raw)
        self.min_length = min_length

    def _read_bytes(self, start, stop):
        return self.raw[start:stop]


class FileTokens(TokenSource):
    """Memory-mapped file; only the requested slices are ever copied."""

    def __init__(self, path: str | os.PathLike, min_length: int = 0):
        self.path = Path(path)
        self.min_length = min_length
        try:
            self.n_bytes = self.path.stat().st_size
            self._map = np.memmap(self.path, dtype=np.uint8, mode="r") if self.n_bytes else np.zeros(0, np.uint8)
        except OSError as e:
            raise DataError(f"cannot read {self.path}: {e}") from e

    def _read_bytes(self, start, stop):
        return self._map[start:stop]


class RandomTokens(TokenSource):
    """Deterministic pseudo-random bytes generated block by block on demand."""

    BLOCK = 1 << 16

    def __init__(self, n_bytes: int, seed: int = 0, min_length: int = 0):
        self.n_bytes = n_bytes
        self.seed = seed
        self.min_length = min_length

    def _block(self, k: int) -> np.ndarray:
        return np.random.default_rng([self.seed, k]).integers(0, 256, self.BLOCK, dtype=np.uint8)

    def _read_bytes(self, start, stop):
        parts = []
        for k in range(start // self.BLOCK, (stop - 1) // self.BLOCK + 1):
            blk = self._block(k)
            lo = max(start, k * self.BLOCK) - k * self.BLOCK
            hi = min(stop, (k + 1) * self.BLOCK) - k * self.BLOCK
            parts.append(blk[lo:hi])
        return np.concatenate(parts)


def as_source(tokens, min_length: int = 0) -> TokenSource:
    if isinstance(tokens, TokenSource):
        return tokens
    if isinstance(tokens, (bytes, bytearray)):
        return BytesTokens(tokens, min_length)
    if isinstance(tokens, (str, os.PathLike)):
        return FileTokens(tokens, min_length)
    return ArrayTokens(tokens)


def tokenize(raw: bytes, min_length: int = 0) -> np.ndarray:
    """Bytes -> ids, one EOF, then PAD so the result has at least min_length ids."""
    return BytesTokens(raw, min_length).read_all()


# --------------------------------------------------------------------------
# labelled index


@dataclass
class Record:
    path: Path
    label: int
    byte_length: int


@dataclass
class DatasetIndex:
    records: list[Record]
    split: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


def load_index(labels_csv: str | os.PathLike, split: str = "") -> DatasetIndex:
    """Read a `path,label` CSV. Relative paths resolve against the CSV's directory."""
    labels_csv = Path(labels_csv)
    if not labels_csv.is_file():
        raise DataError(f"labels file not found: {labels_csv}")
    base = labels_csv.parent
    records = []
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise DataError(f"{labels_csv}:1: expected header 'path,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{labels_csv}:{lineno}: expected 2 fields, got {len(row)}")
            path, label = row[0].strip(), row[1].strip()
            if label not in ("0", "1"):
                raise DataError(f"{labels_csv}:{lineno}: label must be 0 or 1, got {label!r}")
            p = Path(path)
            if not p.is_absolute():
                p = base / p
            if not p.is_file():
                raise DataError(f"{labels_csv}:{lineno}: file not found: {p}")
            records.append(Record(p, int(label), p.stat().st_size))
    return DatasetIndex(records, split)


def write_index(index: DatasetIndex, labels_csv: str | os.PathLike) -> None:
    labels_csv = Path(labels_csv)
    with open(labels_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write("path,label\n")
        for r in index.records:
            try:
                p = r.path.relative_to(labels_csv.parent)
            except ValueError:
                p = r.path
            fh.write(f"{p.as_posix()},{r.label}\n")


def batcher(index: DatasetIndex, batch_size: int, seed: int, epoch: int = 0,
            min_length: int = 0, shuffle: bool = True,
            skipped: list | None = None) -> Iterator[list[tuple[TokenSource, int, int]]]:
    """Yield batches of (tokens, label, record position), shuffled per epoch.

    Samples stay separate: the low-memory scan handles each at its own length.
    Unreadable files are skipped with a warning and appended to `skipped`.
    """
    order = np.arange(len(index))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(index))
    batch = []
    for i in order:
        rec = index.records[i]
        try:
            src = FileTokens(rec.path, min_length)
        except DataError as e:
            log.warning("skipping sample: %s", e)
            if skipped is not None:
                skipped.append(str(rec.path))
            continue
        batch.append((src, rec.label, int(i)))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


# --------------------------------------------------------------------------
# synthetic corpora


def default_motifs(task: str, seed: int = 1234, length: int = 200) -> list[str]:
    """Runs of one repeated byte value, a distinct value per motif.

    Runs this long never occur in uniform random background, and a conv
    filter can pick them up from random init within an epoch. Short
    high-entropy motifs are far harder to find in 100 KB of noise.
    """
    values = np.random.default_rng(seed).permutation(256)
    n = 1 if task == "A" else 4
    return [bytes([int(values[i])]).hex() * length for i in range(n)]


# Task B sample kinds: (key present, which motif is planted: 0 none, 1 m1, 2 m2)
TASK_B_KINDS = ((1, 1), (1, 2), (1, 0), (0, 1), (0, 2), (0, 0))
# Default proportions for TASK_B_KINDS. Key, m1 and m2 each shift the label
# rate on their own, so detectors get a gradient signal, yet a rule that
# ignores the key scores 0.70 and an additive rule scores 0.90.
TASK_B_MIX = (0.30, 0.10, 0.05, 0.20, 0.20, 0.15)


def task_b_label(key: int, motif: int) -> int:
    return int(motif == 1) if key else int(motif == 2)


@dataclass
class SyntheticSpec:
    """Task A: label 1 iff motif 0 is present.

    Task B: motifs are [key, m1, m2, distractors...]. The key sits in the
    first KB. Label 1 iff (key present and m1 present at least sep_min bytes
    from the key) or (key absent and m2 present).

    mix gives the proportion of each sample kind: [positive, negative] for
    task A, one weight per TASK_B_KINDS entry for task B.

    background "random" (task A default) fills each sample with fresh uniform
    bytes. "pool" (task B default) tiles it with blocks drawn from a small
    shared set of random blocks, so background content carries no per-sample
    identity that a network could memorize instead of finding the motifs.
    """

    task: str = "B"
    n_samples: int = 2500
    len_min: int = 80_000
    len_max: int = 120_000
    seed: int = 0
    motifs: list[str] = field(default_factory=list)
    n_test: int = 0
    receptive_field: int = 256
    sep_min: int | None = None
    header_bytes: int = 1024
    mix: list[float] = field(default_factory=list)
    background: str = ""
    pool_blocks: int = 16
    block_bytes: int = 4096

    def __post_init__(self):
        self.task = self.task.upper()
        if self.task not in ("A", "B"):
            raise DataError(f"unknown synthetic task {self.task!r}")
        if not self.mix:
            self.mix = [0.5, 0.5] if self.task == "A" else list(TASK_B_MIX)
        n_kinds = 2 if self.task == "A" else len(TASK_B_KINDS)
        if len(self.mix) != n_kinds or min(self.mix) < 0 or sum(self.mix) <= 0:
            raise DataError(f"mix must hold {n_kinds} non-negative weights")
        if not self.motifs:
            self.motifs = default_motifs(self.task)
        if self.sep_min is None:
            self.sep_min = 10 * self.receptive_field
        need = 1 if self.task == "A" else 3
        if len(self.motifs) < need:
            raise DataError(f"task {self.task} needs at least {need} motifs")
        for m in self.motif_bytes:
            if not 0 < len(m) < self.receptive_field:
                raise DataError("motif lengths must be in (0, receptive_field)")
        if not self.background:
            self.background = "random" if self.task == "A" else "pool"
        if self.background not in ("pool", "random"):
            raise DataError(f"background must be 'pool' or 'random', got {self.background!r}")
        if self.pool_blocks < 1 or self.block_bytes < 1:
            raise DataError("pool_blocks and block_bytes must be positive")
        if self.n_test >= self.n_samples:
            raise DataError("n_test must be smaller than n_samples")
        if self.len_min > self.len_max:
            raise DataError("len_min > len_max")
        if self.task == "B" and self.len_min < self.header_bytes + self.sep_min + 2 * self.receptive_field:
            raise DataError("len_min too small to fit the key/motif separation")

    @property
    def motif_bytes(self) -> list[bytes]:
        return [bytes.fromhex(m) for m in self.motifs]

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def _label_task_a(data: bytes, motifs: list[bytes]) -> int:
    return int(motifs[0] in data)


def _label_task_b(data: bytes, motifs: list[bytes], spec: SyntheticSpec) -> int:
    key, m1, m2 = motifs[:3]
    k = data.find(key, 0, spec.header_bytes)
    if k >= 0:
        lo = k + len(key) + spec.sep_min
        return int(data.find(m1, lo) >= 0)
    return int(m2 in data)


def oracle_label(data: bytes, spec: SyntheticSpec) -> int:
    """The documented labelling rule, recomputed from file bytes."""
    motifs = spec.motif_bytes
    return _label_task_a(data, motifs) if spec.task == "A" else _label_task_b(data, motifs, spec)


def motif_only_best_accuracy(samples: list[bytes], labels: np.ndarray, motifs: list[bytes]) -> float:
    """Best accuracy any rule over motif presence can reach (majority label per presence pattern)."""
    keys = [tuple(m in s for m in motifs) for s in samples]
    counts: dict[tuple, list[int]] = {}
    for k, y in zip(keys, labels):
        counts.setdefault(k, [0, 0])[int(y)] += 1
    return sum(max(c) for c in counts.values()) / len(samples)


def _contains_any(data: bytes, motifs: list[bytes]) -> bool:
    return any(m in data for m in motifs)


def _block_pool(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    while True:
        pool = rng.integers(0, 256, (spec.pool_blocks, spec.block_bytes), dtype=np.uint8)
        # a motif could only appear inside a block or across a join of two blocks
        joined = b"".join(bytes(pool[i]) + bytes(pool[j]) for i in range(len(pool)) for j in range(len(pool)))
        if not _contains_any(joined, spec.motif_bytes):
            return pool


def _background(rng: np.random.Generator, spec: SyntheticSpec, n: int, pool: np.ndarray | None) -> bytearray:
    while True:
        if pool is None:
            buf = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        else:
            picks = rng.integers(0, len(pool), -(-n // spec.block_bytes))
            buf = pool[picks].tobytes()[:n]
        if not _contains_any(buf, spec.motif_bytes):
            return bytearray(buf)


def _make_sample(rng: np.random.Generator, spec: SyntheticSpec, kind: int,
                 pool: np.ndarray | None = None) -> bytearray:
    motifs = spec.motif_bytes
    n = int(rng.integers(spec.len_min, spec.len_max + 1))
    buf = _background(rng, spec, n, pool)
    taken: list[tuple[int, int]] = []

    def place(m: bytes, lo: int, hi: int) -> int:
        for _ in range(1000):
            p = int(rng.integers(lo, hi - len(m) + 1))
            if all(p + len(m) <= a or p >= b for a, b in taken):
                buf[p: p + len(m)] = m
                taken.append((p, p + len(m)))
                return p
        raise DataError("could not place motif without overlap")

    if spec.task == "A":
        if kind == 0:
            place(motifs[0], 0, n)
        return buf

    key, m1, m2 = motifs[:3]
    with_key, which = TASK_B_KINDS[kind]
    kpos = place(key, 0, spec.header_bytes) if with_key else int(rng.integers(0, spec.header_bytes - len(key)))
    far = kpos + len(key) + spec.sep_min
    if which:
        place(m1 if which == 1 else m2, far, n)
    for d in motifs[3:]:
        if rng.random() < 0.5:
            place(d, spec.header_bytes, n)
    return buf


def _kind_sequence(rng: np.random.Generator, mix: list[float], n: int) -> np.ndarray:
    """Exactly proportional kind counts (largest remainder), shuffled."""
    w = np.asarray(mix, dtype=np.float64) / sum(mix)
    counts = np.floor(w * n).astype(np.int64)
    rest = np.argsort(-(w * n - counts), kind="stable")[: n - counts.sum()]
    counts[rest] += 1
    kinds = np.repeat(np.arange(len(w)), counts)
    rng.shuffle(kinds)
    return kinds


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike) -> dict:
    """Write a synthetic corpus: .bin samples, labels.csv, train.csv/test.csv and report.json.

    Returns the report (oracle accuracies and counts). Raises DataError if
    the generated corpus violates the label-rule checks.
    """
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e}") from e
    rng = np.random.default_rng(spec.seed)
    pool = _block_pool(rng, spec) if spec.background == "pool" else None
    kinds = _kind_sequence(rng, spec.mix, spec.n_samples)

    records, samples, labels, oracle = [], [], [], []
    for i, kind in enumerate(kinds):
        data = bytes(_make_sample(rng, spec, int(kind), pool))
        label = int(kind == 0) if spec.task == "A" else task_b_label(*TASK_B_KINDS[kind])
        path = out / "samples" / f"{i:06d}.bin"
        try:
            path.write_bytes(data)
        except OSError as e:
            raise DataError(f"cannot write {path}: {e}") from e
        records.append(Record(path, label, len(data)))
        samples.append(data)
        labels.append(label)
        oracle.append(oracle_label(data, spec))

    labels_arr = np.array(labels)
    oracle_acc = float(np.mean(np.array(oracle) == labels_arr))
    report = {
        "task": spec.task,
        "n_samples": spec.n_samples,
        "positives": int(labels_arr.sum()),
        "oracle_accuracy": oracle_acc,
    }
    if oracle_acc != 1.0:
        raise DataError(f"label rule disagrees with generated labels (accuracy {oracle_acc})")
    if spec.task == "B":
        # grep classifiers that ignore the key may use every other motif
        report["motif_only_best_accuracy"] = motif_only_best_accuracy(
            samples, labels_arr, spec.motif_bytes[1:])
        report["key_only_best_accuracy"] = motif_only_best_accuracy(
            samples, labels_arr, spec.motif_bytes[:1])
        if report["motif_only_best_accuracy"] > 0.75:
            raise DataError("motif-only baseline exceeds 0.75; corpus is not context-dependent")

    full = DatasetIndex(records)
    write_index(full, out / "labels.csv")
    if spec.n_test:
        n_train = spec.n_samples - spec.n_test
        write_index(DatasetIndex(records[:n_train], "train"), out / "train.csv")
        write_index(DatasetIndex(records[n_train:], "test"), out / "test.csv")
    report["spec"] = spec.to_dict()
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
