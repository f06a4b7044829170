"""AdamW, the epoch loop, binary metrics and checkpoint files."""

from __future__ import annotations

import io
import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .data import DataError, DatasetIndex, FileTokens, batcher
from .meter import PeakMeter
from .models import LowmemOptions, Model, ModelConfig, model_from_params
from .numerics import InputError

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               frozen_rows: dict[str, tuple[int, ...]] | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    Frozen rows (the PAD embedding) stay exactly zero.
    """
    frozen_rows = frozen_rows or {}
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros(p.shape) if m is None else m.astype(np.float64)
        v = np.zeros(p.shape) if v is None else v.astype(np.float64)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        p64 = p.astype(np.float64)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.lr * state.weight_decay * p64
        new = p64 - update
        for r in frozen_rows.get(name, ()):
            new[r] = 0.0
            m[r] = 0.0
            v[r] = 0.0
        p[...] = new.astype(p.dtype)
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)


# --------------------------------------------------------------------------
# metrics


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney rank statistic with midranks for ties; None for a single class."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    return float(np.mean((np.asarray(scores) >= threshold) == np.asarray(labels).astype(bool)))


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"LMCVCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, truncated or corrupted checkpoint."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamWState
    seed: int = 0
    log: list[dict] = field(default_factory=list)

    def model(self) -> Model:
        return model_from_params(self.config, self.params)


def _tensor_items(ck: Checkpoint):
    for k in sorted(ck.params):
        yield "param/" + k, ck.params[k]
    for k in sorted(ck.optimizer.m):
        yield "adam_m/" + k, ck.optimizer.m[k]
    for k in sorted(ck.optimizer.v):
        yield "adam_v/" + k, ck.optimizer.v[k]


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """magic | u32 version | u64 meta length | JSON meta | f32 LE payload | u32 CRC32(payload)."""
    payload = io.BytesIO()
    directory = []
    for name, arr in _tensor_items(ck):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": payload.tell()})
        payload.write(data)
    meta = {
        "config": ck.config.to_dict(),
        "optimizer": ck.optimizer.hyper(),
        "seed": ck.seed,
        "log": ck.log,
        "tensors": directory,
    }
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = payload.getvalue()
    return (MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(meta_b)) + meta_b + body
            + struct.pack("<I", zlib.crc32(body)))


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    head = len(MAGIC) + 12
    if len(raw) < head + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack("<IQ", raw[len(MAGIC): head])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if head + meta_len + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[head: head + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata") from e
    body = raw[head + meta_len: -4]
    (crc,) = struct.unpack("<I", raw[-4:])
    expected = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in meta["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")

    tensors = {}
    for t in meta["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    pick = lambda prefix: {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    opt = AdamWState(**meta["optimizer"], m=pick("adam_m/"), v=pick("adam_v/"))
    config = ModelConfig(**meta["config"])
    return Checkpoint(config, pick("param/"), opt, meta["seed"], meta["log"])


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "lowmem"
    merge_regions: bool = False
    exact: bool = True
    workers: int = 1
    track_memory: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be >= 1 and epochs >= 0")
        if self.mode not in ("dense", "lowmem"):
            raise InputError(f"mode must be dense or lowmem, got {self.mode!r}")

    def lowmem(self) -> LowmemOptions:
        return LowmemOptions(exact=self.exact, merge=self.merge_regions, workers=self.workers)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    log: list[dict]
    checkpoints: list[Path]
    optimizer: AdamWState
    skipped: list[str]


def train_step(model: Model, batch, opt: AdamWState, config: TrainConfig):
    """Mean-loss gradient over the batch, then one AdamW update. Returns (loss, logits)."""
    grads: dict[str, np.ndarray] = {}
    losses, logits = [], []
    for tokens, label in batch:
        res = model.loss_and_grad(tokens, label, config.mode, config.lowmem())
        losses.append(res.loss)
        logits.append(res.logit)
        for k, g in res.grads.items():
            if k in grads:
                grads[k] += g.astype(np.float64)
            else:
                grads[k] = g.astype(np.float64)
    n = len(batch)
    adamw_step(model.params, {k: g / n for k, g in grads.items()}, opt, model.frozen_rows)
    return float(np.mean(losses)), logits


def train(index: DatasetIndex, model: Model, config: TrainConfig, out_dir: str | Path | None = None,
          test_index: DatasetIndex | None = None, optimizer: AdamWState | None = None,
          on_epoch: Callable[[dict], bool] | None = None) -> TrainResult:
    """Epoch loop. Writes epoch_NNN.ckpt and train_log.jsonl to out_dir when given.

    `on_epoch` sees each epoch record after it is logged; returning True
    ends training there.

    Per-epoch accuracy/AUC come from the training predictions made during the
    epoch; test metrics are added when a test index is supplied. Peak
    transient bytes are measured on the first batch of each epoch.
    """
    if len(index) == 0:
        raise DataError("training set is empty")
    opt = optimizer or AdamWState(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    records, ckpts, skipped = [], [], []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses, scores, labels, peak = [], [], [], 0
        for b, batch in enumerate(batcher(index, config.batch_size, config.seed, epoch,
                                          min_length=model.window, skipped=skipped)):
            samples = [(src, y) for src, y, _ in batch]
            if b == 0 and config.track_memory:
                with PeakMeter() as meter:
                    loss, logits = train_step(model, samples, opt, config)
                peak = meter.peak
            else:
                loss, logits = train_step(model, samples, opt, config)
            losses.append(loss * len(batch))
            scores.extend(expit(logits).tolist())
            labels.extend(y for _, y in samples)
        rec = {
            "epoch": epoch,
            "loss": float(np.sum(losses) / max(1, len(labels))),
            "acc": accuracy(scores, labels),
            "auc": roc_auc(scores, labels),
            "peak_bytes": int(peak),
        }
        if test_index is not None:
            ev = evaluate(test_index, model, config.mode, config.lowmem())
            rec["test_acc"], rec["test_auc"] = ev["accuracy"], ev["auc"]
        rec["wall_seconds"] = time.perf_counter() - t0
        if skipped:
            rec["skipped"] = sorted(set(skipped))
        records.append(rec)
        log.info("epoch %d loss %.4f acc %.4f auc %s%s", epoch, rec["loss"], rec["acc"], rec["auc"],
                 f" test_acc {rec['test_acc']:.4f}" if "test_acc" in rec else "")
        if out:
            with open(out / "train_log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            summary = [{k: r[k] for k in ("epoch", "loss", "acc", "auc")} for r in records]
            path = out / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(Checkpoint(model.config, model.params, opt, config.seed, summary), path)
            ckpts.append(path)
        if on_epoch is not None and on_epoch(rec):
            break
    return TrainResult(records, ckpts, opt, sorted(set(skipped)))


def evaluate(index: DatasetIndex, model: Model, mode: str = "lowmem",
             options: LowmemOptions | None = None) -> dict:
    """Accuracy at 0.5 on sigmoid(logit) and rank AUC. Unreadable files are skipped."""
    scores, labels, paths = [], [], []
    for rec in index.records:
        try:
            src = FileTokens(rec.path, model.window)
        except DataError as e:
            log.warning("skipping sample: %s", e)
            continue
        scores.append(float(expit(model.forward(src, mode, options))))
        labels.append(rec.label)
        paths.append(str(rec.path))
    if not scores:
        raise DataError("no readable samples to evaluate")
    return {"accuracy": accuracy(scores, labels), "auc": roc_auc(scores, labels),
            "scores": scores, "labels": labels, "paths": paths}
