"""Benchmark and explanation reports: TSV tables plus PNG figures."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402

from . import fixedmem  # noqa: E402
from .data import RandomTokens  # noqa: E402
from .meter import PeakMeter  # noqa: E402
from .models import Explanation, Model  # noqa: E402

# dense activations at this length already take gigabytes
DENSE_LIMIT = 2 ** 24


@dataclass
class BenchRow:
    length: int
    mode: str
    step_seconds: float
    scan_seconds: float
    peak_bytes: int
    logit: float
    workspace_bytes: int = 0

    @property
    def ns_per_byte(self) -> float:
        return 1e9 * self.scan_seconds / self.length

    @property
    def activation_bytes(self) -> int:
        return max(0, self.peak_bytes - self.workspace_bytes)


def weight_workspace(model: Model) -> int:
    """Peak bytes of a dense step on a single window.

    Nothing in that step scales with input length: it is the float64 weight
    matrices and gradient buffers every step needs. Subtracting it from a
    step's peak leaves the activation memory.
    """
    with PeakMeter() as m:
        model.loss_and_grad(RandomTokens(model.window, 0), 1, "dense")
    return m.peak


def bench_length(model: Model, length: int, mode: str = "lowmem", seed: int = 0, label: int = 1,
                 workers: int = 1, workspace: int = 0) -> BenchRow:
    """One instrumented training step plus one timed winner scan on random bytes."""
    from .models import LowmemOptions

    src = RandomTokens(length, seed, min_length=model.window)
    opts = LowmemOptions(workers=workers)
    t0 = time.perf_counter()
    with PeakMeter() as m:
        res = model.loss_and_grad(src, label, mode, opts)
    step = time.perf_counter() - t0
    scan = time_scan(model, src, workers=workers) if mode == "lowmem" else float("nan")
    return BenchRow(length, mode, step, scan, m.peak, res.logit, workspace)


def time_scan(model: Model, src, workers: int = 1) -> float:
    trunk = model.context_trunk() if hasattr(model, "context_trunk") else model.trunk()
    t0 = time.perf_counter()
    fixedmem.scan_winners(src, trunk, workers=workers)
    return time.perf_counter() - t0


@dataclass
class ScanFit:
    slope: float       # seconds per byte
    intercept: float
    r2: float


def fit_scan_time(lengths, seconds) -> ScanFit:
    r = stats.linregress(np.asarray(lengths, dtype=np.float64), np.asarray(seconds, dtype=np.float64))
    return ScanFit(float(r.slope), float(r.intercept), float(r.rvalue ** 2))


def memory_ratio(rows: list[BenchRow]) -> float:
    """Largest over smallest activation footprint; 1.0 means flat."""
    peaks = [r.activation_bytes for r in rows]
    return max(peaks) / max(1, min(peaks))


def memory_growth(rows: list[BenchRow]) -> float:
    """Activation bytes at the longest length over those at the shortest."""
    rows = sorted(rows, key=lambda r: r.length)
    return rows[-1].activation_bytes / max(1, rows[0].activation_bytes)


def write_bench_tsv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["length", "mode", "step_seconds", "scan_seconds", "scan_ns_per_byte",
                    "peak_bytes", "workspace_bytes", "activation_bytes", "logit"])
        for r in rows:
            w.writerow([r.length, r.mode, f"{r.step_seconds:.4f}", f"{r.scan_seconds:.4f}",
                        f"{r.ns_per_byte:.3f}", r.peak_bytes, r.workspace_bytes, r.activation_bytes,
                        f"{r.logit:.7g}"])


def plot_bench(rows: list[BenchRow], path: str | Path, fit: ScanFit | None = None) -> None:
    fig, (ax_mem, ax_time) = plt.subplots(1, 2, figsize=(9, 3.6))
    for mode, marker in (("lowmem", "o"), ("dense", "s")):
        sel = sorted((r for r in rows if r.mode == mode), key=lambda r: r.length)
        if not sel:
            continue
        ax_mem.loglog([r.length for r in sel], [max(1, r.activation_bytes) for r in sel],
                      marker=marker, label=mode)
        if mode == "lowmem":
            x = np.array([r.length for r in sel], dtype=float)
            ax_time.loglog(x, [r.scan_seconds for r in sel], marker=marker, label="scan")
            ax_time.loglog(x, [r.step_seconds for r in sel], marker="^", ls="--", label="train step")
            if fit is not None:
                ax_time.loglog(x, np.maximum(fit.slope * x + fit.intercept, 1e-6), ls=":", c="k",
                               label=f"linear fit, R²={fit.r2:.3f}")
    ax_mem.set_xlabel("input length (bytes)")
    ax_mem.set_ylabel("activation bytes")
    ax_mem.legend(frameon=False)
    ax_time.set_xlabel("input length (bytes)")
    ax_time.set_ylabel("seconds")
    ax_time.legend(frameon=False, fontsize=8)
    for ax in (ax_mem, ax_time):
        ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def table1_markdown(rows: list[BenchRow]) -> str:
    """Rows of length / mode / step time / peak memory, ready to paste into a README."""
    lines = ["| length | mode | train step (s) | activations (MiB) | peak incl. weights (MiB) |",
             "|---:|:---|---:|---:|---:|"]
    for r in sorted(rows, key=lambda r: (r.length, r.mode)):
        lines.append(f"| 2^{int(np.log2(r.length))} | {r.mode} | {r.step_seconds:.2f} | "
                     f"{r.activation_bytes / 2 ** 20:.2f} | {r.peak_bytes / 2 ** 20:.2f} |")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# explanations


def write_explain_tsv(exp: Explanation, path: str | Path) -> None:
    rows = exp.rows()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_regions_tsv(exp: Explanation, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["byte_start", "byte_end", "n_channels"])
        for s, n, c in exp.regions:
            w.writerow([s, s + n, c])


def explain_text(exp: Explanation) -> str:
    """Plain-text table: byte ranges with how many channels picked them."""
    out = [f"length {exp.length} bytes, receptive field {exp.window}, {exp.channels} channels",
           f"{'byte range':>24}  channels"]
    for s, n, c in sorted(exp.regions, key=lambda r: -r[2]):
        out.append(f"{f'[{s}, {s + n})':>24}  {c}")
    return "\n".join(out)


def plot_explanation(exp: Explanation, path: str | Path, marks: list[tuple[int, int]] = ()) -> None:
    """Winner positions along the file, before and after gating; gate value as colour.

    `marks` are byte ranges to shade, e.g. known planted content.
    """
    gated = exp.post_gate is not None
    n_rows = 3 if gated else 1
    fig, axes = plt.subplots(n_rows, 1, figsize=(9, 1.2 + 1.1 * n_rows), sharex=True, squeeze=False)
    axes = axes[:, 0]
    ch = np.arange(exp.channels)

    def panel(ax, offsets, title, gate=None):
        for lo, hi in marks:
            ax.axvspan(lo, hi, color="0.85", lw=0)
        kw = dict(s=10, marker="|")
        if gate is None:
            ax.scatter(offsets + exp.window / 2, ch, c="k", **kw)
        else:
            sc = ax.scatter(offsets + exp.window / 2, ch, c=gate, cmap="viridis", vmin=0, vmax=1, **kw)
            fig.colorbar(sc, ax=ax, pad=0.01, label="gate")
        ax.set_ylabel("channel")
        ax.set_title(title, fontsize=9, loc="left")

    if gated:
        panel(axes[0], exp.context_offset, "context path winners")
        panel(axes[1], exp.pre_offset, "feature winners before gating", exp.pre_gate)
        panel(axes[2], exp.post_offset, "feature winners after gating", exp.post_gate)
    else:
        panel(axes[0], exp.post_offset, "winners")
    axes[-1].set_xlim(0, exp.length)
    axes[-1].set_xlabel("byte offset")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
