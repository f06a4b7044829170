"""Temporal max pooling whose activation memory does not depend on input length.

Training a conv -> gate -> global-max-pool network only needs the C winning
time steps, one per channel. We find them with a gradient-free pass over
overlapping chunks (length 3W, stride 2W), then recompute only the winning
receptive fields with backward state kept.

The subnet protocol used here (see models.Trunk):

    subnet.width, subnet.stride, subnet.channels
    subnet.signal(window_tokens, z=None) -> [n, C] float32, no backward state
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import TokenSource, as_source
from .numerics import InputError, NumericError

# target number of conv windows evaluated per scan step; bounds scan memory
SCAN_BLOCK_WINDOWS = 128


@dataclass(frozen=True)
class ChunkPlan:
    length: int
    window: int
    starts: range  # a range, so the plan costs O(1) memory at any length

    @property
    def chunk_len(self) -> int:
        return 3 * self.window

    @property
    def scan_stride(self) -> int:
        return 2 * self.window

    def __len__(self) -> int:
        return len(self.starts)

    def ownership(self, i: int) -> tuple[int, int]:
        """Window start offsets [lo, hi) owned by chunk i."""
        lo = self.starts[i]
        return lo, min(lo + self.scan_stride, self.length - self.window + 1)

    def span(self, i: int) -> tuple[int, int]:
        lo = self.starts[i]
        return lo, min(lo + self.chunk_len, self.length)


def plan_chunks(T: int, window: int) -> ChunkPlan:
    """Chunks of 3W bytes every 2W bytes; each window start is owned by one chunk."""
    if window < 1:
        raise InputError("window must be positive")
    if T < window:
        raise InputError(f"input length {T} shorter than receptive field {window}")
    n_positions = T - window + 1
    n_chunks = -(-n_positions // (2 * window))
    return ChunkPlan(T, window, range(0, n_chunks * 2 * window, 2 * window))


@dataclass
class WinnerSet:
    values: np.ndarray     # [C]
    out_index: np.ndarray  # [C] absolute conv output step
    stride: int
    window: int

    @property
    def byte_start(self) -> np.ndarray:
        return self.out_index * self.stride

    @property
    def channels(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        return (isinstance(other, WinnerSet)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.out_index, other.out_index)
                and self.stride == other.stride and self.window == other.window)


def _owned_outputs(plan: ChunkPlan, lo_chunk: int, hi_chunk: int, stride: int) -> tuple[int, int]:
    """Conv output indices [first, last) whose window starts fall in chunks [lo_chunk, hi_chunk)."""
    lo = plan.ownership(lo_chunk)[0]
    hi = plan.ownership(hi_chunk - 1)[1]
    return -(-lo // stride), -(-hi // stride)


def _scan_block(source: TokenSource, subnet, plan: ChunkPlan, lo_chunk: int, hi_chunk: int, z):
    W, S = subnet.width, subnet.stride
    first, last = _owned_outputs(plan, lo_chunk, hi_chunk, S)
    if last <= first:
        return None
    toks = source.read(first * S, (last - 1) * S + W)
    windows = sliding_window_view(toks, W)[::S]
    sig = subnet.signal(windows, z)
    if np.isnan(sig).any():
        raise NumericError("NaN in scanned activations")
    idx = np.argmax(sig, axis=0)
    return sig[idx, np.arange(sig.shape[1])], idx + first


def scan_winners(tokens, subnet, plan: ChunkPlan | None = None, context: np.ndarray | None = None,
                 chunks_per_block: int | None = None, workers: int = 1) -> WinnerSet:
    """Gradient-free pass returning each channel's max value and its time step.

    `context` is the precomputed gate vector z for a gated feature path.
    Consecutive chunks are evaluated together `chunks_per_block` at a time;
    the default keeps about SCAN_BLOCK_WINDOWS windows per step, which fixes
    the transient memory independently of T. Ties keep the lower index.
    """
    source = as_source(tokens)
    if plan is None:
        plan = plan_chunks(len(source), subnet.width)
    if plan.window != subnet.width or plan.length != len(source):
        raise InputError("chunk plan does not match this input/subnet")
    if chunks_per_block is None:
        per_chunk = max(1, plan.scan_stride // subnet.stride)
        chunks_per_block = max(1, SCAN_BLOCK_WINDOWS // per_chunk)
    blocks = [(lo, min(lo + chunks_per_block, len(plan))) for lo in range(0, len(plan), chunks_per_block)]

    def run(block):
        return _scan_block(source, subnet, plan, block[0], block[1], context)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, blocks))
    else:
        results = map(run, blocks)

    best_val = best_idx = None
    for res in results:  # in chunk order, so strict '>' keeps the earliest tie
        if res is None:
            continue
        val, idx = res
        if best_val is None:
            best_val, best_idx = val.copy(), idx.copy()
            continue
        better = val > best_val
        best_val[better] = val[better]
        best_idx[better] = idx[better]
    return WinnerSet(best_val, best_idx.astype(np.int64), subnet.stride, subnet.width)


# --------------------------------------------------------------------------
# gathering


@dataclass
class GatherPlan:
    regions: list[tuple[int, int]]       # (byte_start, byte_len), sorted by start
    channel_to_region: np.ndarray        # [C]
    window: int
    stride: int
    winner_starts: np.ndarray = field(repr=False, default=None)

    @property
    def total_bytes(self) -> int:
        return sum(n for _, n in self.regions)

    def window_starts(self) -> np.ndarray:
        """Every valid window start inside some region, sorted and unique."""
        parts = []
        for start, n in self.regions:
            if n < self.window:
                raise InputError(f"region at {start} shorter than the receptive field")
            parts.append(start + self.stride * np.arange((n - self.window) // self.stride + 1))
        return np.unique(np.concatenate(parts)).astype(np.int64)


def build_gather_plan(winners: WinnerSet, length: int | None = None, merge: bool = False) -> GatherPlan:
    """One region per distinct winning window; with merge, starts closer than W/2 coalesce."""
    W, S = winners.window, winners.stride
    starts = winners.byte_start.astype(np.int64)
    uniq = np.unique(starts)
    groups: list[list[int]] = []
    for s in uniq:
        if merge and groups and s - groups[-1][-1] < W / 2:
            groups[-1].append(int(s))
        else:
            groups.append([int(s)])
    regions = []
    for g in groups:
        lo, hi = g[0], g[-1] + W
        if length is not None:
            lo, hi = max(0, lo), min(length, hi)
        regions.append((lo, hi - lo))
    region_starts = np.array([r[0] for r in regions])
    region_ends = region_starts + np.array([r[1] for r in regions])
    c2r = np.searchsorted(region_starts, starts, side="right") - 1
    # every winner window must sit inside its region
    assert np.all(region_starts[c2r] <= starts) and np.all(starts + W <= region_ends[c2r])
    return GatherPlan(regions, c2r.astype(np.int64), W, S, starts)


@dataclass
class GatheredWindows:
    tokens: np.ndarray      # [n, W] token windows to recompute
    positions: np.ndarray   # [n] absolute conv output index, -1 for windows that straddle regions


def gather_windows(tokens, plan: GatherPlan, exact: bool = True) -> GatheredWindows:
    """Collect the windows to recompute with backward state.

    exact: each region is convolved separately over its valid windows only,
    so every value is one the full-length pass also computed.
    concat: regions are joined into one short sequence and convolved with
    the same stride; windows across a join are new and carry position -1.
    """
    source = as_source(tokens)
    W, S = plan.window, plan.stride
    if exact:
        starts = plan.window_starts()
        return GatheredWindows(source.windows(starts, W), starts // S)
    seq = np.concatenate([source.read(s, s + n) for s, n in plan.regions])
    offsets = np.cumsum([0] + [n for _, n in plan.regions])
    win_starts = np.arange(0, len(seq) - W + 1, S)
    positions = np.full(len(win_starts), -1, dtype=np.int64)
    for (rs, n), off in zip(plan.regions, offsets[:-1]):
        inside = (win_starts >= off) & (win_starts + W <= off + n)
        abs_start = rs + win_starts[inside] - off
        aligned = abs_start % S == 0
        positions[np.flatnonzero(inside)[aligned]] = abs_start[aligned] // S
    return GatheredWindows(sliding_window_view(seq, W)[::S].copy(), positions)


def pad_gathered(gw: GatheredWindows, rows: int) -> GatheredWindows:
    """Fill the recompute batch up to `rows` with copies of its first window.

    Fixed-size batches make the recompute footprint the same for every input
    length. Copies sit after the original, so the first-hit argmax never
    picks one and they receive no gradient.
    """
    n = len(gw.tokens)
    if n >= rows or n == 0:
        return gw
    fill = np.zeros(rows - n, dtype=np.intp)
    return GatheredWindows(np.concatenate([gw.tokens, gw.tokens[fill]]),
                           np.concatenate([gw.positions, gw.positions[fill]]))


def pool_gathered(signal: np.ndarray, positions: np.ndarray):
    """Max over gathered rows per channel. Rows are in ascending position, so
    argmax's first-hit rule reproduces the lowest-index tie-break.
    Returns (values, row index, absolute output index)."""
    if np.isnan(signal).any():
        raise NumericError("NaN in recomputed activations")
    rows = np.argmax(signal, axis=0)
    return signal[rows, np.arange(signal.shape[1])], rows, positions[rows]


def plan_and_gather(tokens, subnet, context=None, merge=False, exact=True,
                    chunks_per_block=None, workers=1, pad_rows: int = 0):
    """scan -> gather plan -> windows, the full no-grad half of a lowmem step."""
    source = as_source(tokens)
    winners = scan_winners(source, subnet, plan_chunks(len(source), subnet.width), context,
                           chunks_per_block, workers)
    gplan = build_gather_plan(winners, len(source), merge)
    gw = gather_windows(source, gplan, exact)
    return winners, gplan, pad_gathered(gw, pad_rows) if pad_rows else gw
