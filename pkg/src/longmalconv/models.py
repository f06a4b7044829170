"""MalConv and MalConv with global channel gating.

Both architectures run two ways:

* ``dense``: the whole sequence is embedded and convolved, every activation
  is kept, and gradients flow back through full-length tensors. This is the
  reference path.
* ``lowmem``: winners are found by the chunked scan, then only the winning
  windows are recomputed with backward state (see fixedmem).

Parameters live in a flat ``dict[str, np.ndarray]``; gradients use the same keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fixedmem
from .data import TokenSource, as_source
from .gcg import (GcgParams, gcg_apply, gcg_apply_backward, gcg_backward, gcg_context,
                  gcg_context_backward, gcg_forward, gcg_gates)
from .numerics import (PAD_ID, VOCAB_SIZE, Conv1dLayer, InputError, LinearLayer, bce_with_logits,
                       check_finite, conv1d_backward, conv1d_forward, conv1d_windows,
                       conv1d_windows_backward, embed, embed_backward, glu_backward, glu_gate,
                       linear_backward, linear_forward, relu_backward, relu_forward,
                       temporal_max_pool, temporal_max_pool_backward)

ARCHS = ("malconv", "malconv-gcg")


@dataclass
class ModelConfig:
    arch: str = "malconv"
    channels: int = 128
    kernel: int = 512
    stride: int = 512
    embed_dim: int = 8
    hidden: int | None = None
    context_glu: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise InputError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.hidden is None:
            self.hidden = self.channels
        if min(self.channels, self.kernel, self.stride, self.embed_dim, self.hidden) < 1:
            raise InputError("model dimensions must be positive")
        if self.stride > self.kernel:
            raise InputError("stride must not exceed the kernel width")

    @classmethod
    def full(cls, arch: str) -> "ModelConfig":
        if arch == "malconv":
            return cls(arch, channels=128, kernel=512, stride=512, embed_dim=8)
        return cls(arch, channels=256, kernel=256, stride=64, embed_dim=8)

    @classmethod
    def desk(cls, arch: str) -> "ModelConfig":
        """Reduced width for CPU-sized runs; receptive field and stride as in full()."""
        if arch == "malconv":
            return cls(arch, channels=32, kernel=512, stride=512, embed_dim=8)
        return cls(arch, channels=32, kernel=256, stride=64, embed_dim=8)

    def to_dict(self) -> dict:
        return asdict(self)


# hyperparameter search ranges
BOUNDS = {
    "channels": (32, 1024),
    "stride": (4, 512),
    "embed_dim": {"malconv": (4, 64), "malconv-gcg": (4, 16)},
}


def validate_bounds(cfg: ModelConfig) -> None:
    lo, hi = BOUNDS["channels"]
    if not lo <= cfg.channels <= hi:
        raise InputError(f"channels must be in [{lo}, {hi}], got {cfg.channels}")
    lo, hi = BOUNDS["stride"]
    if not lo <= cfg.stride <= hi or cfg.stride & (cfg.stride - 1):
        raise InputError(f"stride must be a power of two in [{lo}, {hi}], got {cfg.stride}")
    lo, hi = BOUNDS["embed_dim"][cfg.arch]
    if not lo <= cfg.embed_dim <= hi:
        raise InputError(f"embed_dim must be in [{lo}, {hi}] for {cfg.arch}, got {cfg.embed_dim}")


@dataclass
class LowmemOptions:
    exact: bool = True
    merge: bool = False
    chunks_per_block: int | None = None
    workers: int = 1
    # pad the recompute batch to C windows so its size never depends on T
    fixed_batch: bool = True


@dataclass
class StepResult:
    loss: float
    logit: float
    grads: dict[str, np.ndarray]
    info: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# embedding -> conv pair -> GLU


class Trunk:
    """The convolutional front end shared by every path.

    Keys under ``prefix``: embed, conv_a.w, conv_a.b and, when gated,
    conv_b.w, conv_b.b. With ``glu=False`` the output is conv_a alone.
    """

    def __init__(self, params: dict, prefix: str, stride: int, glu: bool = True):
        self.params = params
        self.prefix = prefix
        self.glu = glu
        p = lambda k: params[prefix + k]
        if glu:
            w = np.concatenate([p("conv_a.w"), p("conv_b.w")])
            b = np.concatenate([p("conv_a.b"), p("conv_b.b")])
        else:
            w, b = p("conv_a.w"), p("conv_a.b")
        self.conv = Conv1dLayer(w, b, stride)
        self.table = p("embed")
        self.channels = p("conv_a.w").shape[0]
        self._matrix = None

    @property
    def width(self) -> int:
        return self.conv.width

    @property
    def stride(self) -> int:
        return self.conv.stride

    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = self.conv.matrix()
        return self._matrix

    def _gate(self, H):
        if not self.glu:
            return H
        C = self.channels
        return glu_gate(H[:, :C], H[:, C:])

    def _gate_backward(self, dG, H):
        if not self.glu:
            return dG
        C = self.channels
        dA, dB = glu_backward(dG, H[:, :C], H[:, C:])
        return np.concatenate([dA, dB], axis=1)

    def _conv_grads(self, d_emb, d_w, d_b) -> dict:
        pre, C = self.prefix, self.channels
        g = {pre + "embed": d_emb, pre + "conv_a.w": d_w[:C], pre + "conv_a.b": d_b[:C]}
        if self.glu:
            g[pre + "conv_b.w"] = d_w[C:]
            g[pre + "conv_b.b"] = d_b[C:]
        return g

    # windows ---------------------------------------------------------------

    def signal(self, window_tokens: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
        X = embed(window_tokens, self.table)
        G = self._gate(conv1d_windows(X, self.conv, self.matrix))
        if z is not None:
            G, _ = gcg_apply(G, z)
        return G

    def forward_windows(self, window_tokens: np.ndarray, z: np.ndarray | None = None):
        X = embed(window_tokens, self.table)
        H = conv1d_windows(X, self.conv, self.matrix)
        G = self._gate(H)
        out, s = (G, None) if z is None else gcg_apply(G, z)
        return out, {"tokens": window_tokens, "X": X, "H": H, "G": G, "z": z, "s": s}

    def backward_windows(self, d_out: np.ndarray, cache: dict):
        """Returns (grads, dz); dz is None for an ungated trunk."""
        dz = None
        dG = d_out
        if cache["z"] is not None:
            dG, dz = gcg_apply_backward(d_out, cache["G"], cache["z"], cache["s"])
        dH = self._gate_backward(dG, cache["H"])
        dX, dW, db = conv1d_windows_backward(dH, cache["X"], self.conv, self.matrix)
        d_emb = embed_backward(cache["tokens"], dX, self.table)
        return self._conv_grads(d_emb, dW, db), dz

    # full length -----------------------------------------------------------

    def forward_dense(self, tokens: np.ndarray):
        X = embed(tokens, self.table)
        H = conv1d_forward(X, self.conv)
        return self._gate(H), {"tokens": tokens, "X": X, "H": H}

    def backward_dense(self, dG: np.ndarray, cache: dict) -> dict:
        dH = self._gate_backward(dG, cache["H"])
        dX, dW, db = conv1d_backward(dH, cache["X"], self.conv)
        return self._conv_grads(embed_backward(cache["tokens"], dX, self.table), dW, db)


# --------------------------------------------------------------------------
# models


class Model:
    """Common parameter handling, head and training entry points."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        missing = set(self.param_shapes()) - set(params)
        if missing:
            raise InputError(f"missing parameters: {sorted(missing)}")
        for k, shape in self.param_shapes().items():
            if params[k].shape != shape:
                raise InputError(f"parameter {k} has shape {params[k].shape}, expected {shape}")

    @staticmethod
    def create(config: ModelConfig, seed: int = 0) -> "Model":
        cls = MalConvGcgModel if config.arch == "malconv-gcg" else MalConvModel
        return cls(config, cls.init_params(config, seed))

    # structure -------------------------------------------------------------

    @classmethod
    def _trunk_shapes(cls, cfg: ModelConfig, prefix: str, glu: bool = True) -> dict:
        C, E, W = cfg.channels, cfg.embed_dim, cfg.kernel
        s = {prefix + "embed": (VOCAB_SIZE, E),
             prefix + "conv_a.w": (C, E, W), prefix + "conv_a.b": (C,)}
        if glu:
            s[prefix + "conv_b.w"] = (C, E, W)
            s[prefix + "conv_b.b"] = (C,)
        return s

    @classmethod
    def _head_shapes(cls, cfg: ModelConfig) -> dict:
        C, H = cfg.channels, cfg.hidden
        return {"fc1.w": (H, C), "fc1.b": (H,), "fc2.w": (1, H), "fc2.b": (1,)}

    @classmethod
    def shapes_for(cls, cfg: ModelConfig) -> dict:
        raise NotImplementedError

    def param_shapes(self) -> dict:
        return self.shapes_for(self.config)

    @classmethod
    def init_params(cls, cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
        """Embeddings ~ N(0, 1); conv and linear ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.shapes_for(cfg).items():
            if name.endswith("embed"):
                w = rng.standard_normal(shape).astype(np.float32)
                w[PAD_ID] = 0.0
            elif name.startswith("gcg"):
                bound = 1.0 / math.sqrt(shape[0])
                w = rng.uniform(-bound, bound, shape).astype(np.float32)
            else:
                layer = name.rsplit(".", 1)[0]
                wshape = cls.shapes_for(cfg)[layer + ".w"]
                fan_in = int(np.prod(wshape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                w = rng.uniform(-bound, bound, shape).astype(np.float32)
            params[name] = w
        return params

    @property
    def window(self) -> int:
        return self.config.kernel

    @property
    def stride(self) -> int:
        return self.config.stride

    @property
    def frozen_rows(self) -> dict[str, tuple[int, ...]]:
        return {k: (PAD_ID,) for k in self.params if k.endswith("embed")}

    def trunk(self, prefix: str = "", glu: bool = True) -> Trunk:
        return Trunk(self.params, prefix, self.config.stride, glu)

    def _source(self, tokens) -> TokenSource:
        src = as_source(tokens)
        if len(src) < self.window:
            raise InputError(f"input of {len(src)} tokens is shorter than the receptive field "
                             f"{self.window}; pad with PAD first")
        return src

    # head ------------------------------------------------------------------

    def _head(self, pooled):
        p = self.params
        fc1 = LinearLayer(p["fc1.w"], p["fc1.b"])
        fc2 = LinearLayer(p["fc2.w"], p["fc2.b"])
        h = linear_forward(pooled, fc1)
        a = relu_forward(h)
        logit = linear_forward(a, fc2)
        return float(check_finite(logit, "logit")[0]), (pooled, h, a, fc1, fc2)

    def _head_backward(self, d_logit: float, cache):
        pooled, h, a, fc1, fc2 = cache
        dy = np.array([d_logit], dtype=np.float32)
        da, dw2, db2 = linear_backward(dy, a, fc2)
        dh = relu_backward(da, h)
        dpooled, dw1, db1 = linear_backward(dh, pooled, fc1)
        return dpooled, {"fc1.w": dw1, "fc1.b": db1, "fc2.w": dw2, "fc2.b": db2}

    def _finish(self, logit, label, head_cache):
        loss, d_logit = bce_with_logits(logit, label)
        dpooled, grads = self._head_backward(d_logit, head_cache)
        return loss, dpooled, grads

    # public ----------------------------------------------------------------

    def forward(self, tokens, mode: str = "lowmem", options: LowmemOptions | None = None) -> float:
        """Logit for one sample. Low-memory inference needs only the scans."""
        raise NotImplementedError

    def loss_and_grad(self, tokens, label: int, mode: str = "lowmem",
                      options: LowmemOptions | None = None) -> StepResult:
        src = self._source(tokens)
        options = options or LowmemOptions()
        if mode == "dense":
            res = self._dense_step(src.read_all(), label)
        elif mode == "lowmem":
            res = self._lowmem_step(src, label, options)
        else:
            raise InputError(f"mode must be 'dense' or 'lowmem', got {mode!r}")
        for k, g in res.grads.items():
            check_finite(g, f"gradient of {k}")
        return res

    def predict_proba(self, tokens, mode: str = "lowmem", options=None) -> float:
        from scipy.special import expit
        return float(expit(self.forward(tokens, mode, options)))


class MalConvModel(Model):
    """embed -> conv pair -> GLU -> temporal max pool -> FC -> ReLU -> FC."""

    @classmethod
    def shapes_for(cls, cfg):
        return {**cls._trunk_shapes(cfg, ""), **cls._head_shapes(cfg)}

    def forward(self, tokens, mode="lowmem", options=None):
        src = self._source(tokens)
        options = options or LowmemOptions()
        trunk = self.trunk()
        if mode == "dense":
            G, _ = trunk.forward_dense(src.read_all())
            pooled, _ = temporal_max_pool(G)
        else:
            pooled = fixedmem.scan_winners(src, trunk, chunks_per_block=options.chunks_per_block,
                                           workers=options.workers).values
        return self._head(pooled)[0]

    def _dense_step(self, toks, label):
        trunk = self.trunk()
        G, cache = trunk.forward_dense(toks)
        pooled, idx = temporal_max_pool(G)
        logit, hc = self._head(pooled)
        loss, dpooled, grads = self._finish(logit, label, hc)
        grads.update(trunk.backward_dense(temporal_max_pool_backward(dpooled, idx, len(G)), cache))
        return StepResult(loss, logit, grads, {"pooled": pooled, "winner_index": idx})

    def _lowmem_step(self, src, label, opt):
        trunk = self.trunk()
        winners, gplan, gw = fixedmem.plan_and_gather(src, trunk, None, opt.merge, opt.exact,
                                                      opt.chunks_per_block, opt.workers, _pad(trunk, opt))
        out, cache = trunk.forward_windows(gw.tokens)
        pooled, rows, pos = fixedmem.pool_gathered(out, gw.positions)
        logit, hc = self._head(pooled)
        loss, dpooled, grads = self._finish(logit, label, hc)
        d_out = np.zeros_like(out)
        d_out[rows, np.arange(out.shape[1])] = dpooled
        grads.update(trunk.backward_windows(d_out, cache)[0])
        return StepResult(loss, logit, grads, {
            "pooled": pooled, "winner_index": pos, "scan_winners": winners,
            "gather_plan": gplan, "gathered_windows": len(gw.tokens)})

    def explain(self, tokens, options=None) -> "Explanation":
        src = self._source(tokens)
        options = options or LowmemOptions()
        w = fixedmem.scan_winners(src, self.trunk(), chunks_per_block=options.chunks_per_block)
        return Explanation(length=len(src), window=self.window, stride=self.stride,
                           post_offset=w.byte_start, post_value=w.values,
                           pre_offset=w.byte_start, pre_value=w.values,
                           regions=_region_counts(w, len(src)))


class MalConvGcgModel(Model):
    """A context trunk pooled to g, a feature trunk gated by GCG(W, g), then pool and head."""

    @classmethod
    def shapes_for(cls, cfg):
        C = cfg.channels
        return {**cls._trunk_shapes(cfg, "ctx.", cfg.context_glu),
                **cls._trunk_shapes(cfg, "feat."),
                "gcg.w": (C, C),
                **cls._head_shapes(cfg)}

    @property
    def gcg(self) -> GcgParams:
        return GcgParams(self.params["gcg.w"])

    def context_trunk(self) -> Trunk:
        return self.trunk("ctx.", self.config.context_glu)

    def feature_trunk(self) -> Trunk:
        return self.trunk("feat.")

    def forward(self, tokens, mode="lowmem", options=None):
        src = self._source(tokens)
        options = options or LowmemOptions()
        if mode == "dense":
            toks = src.read_all()
            Gc, _ = self.context_trunk().forward_dense(toks)
            g, _ = temporal_max_pool(Gc)
            Gf, _ = self.feature_trunk().forward_dense(toks)
            Y, _ = gcg_forward(Gf, g, self.gcg)
            pooled, _ = temporal_max_pool(Y)
        else:
            kw = dict(chunks_per_block=options.chunks_per_block, workers=options.workers)
            g = fixedmem.scan_winners(src, self.context_trunk(), **kw).values
            z = gcg_context(g, self.gcg)
            pooled = fixedmem.scan_winners(src, self.feature_trunk(), context=z, **kw).values
        return self._head(pooled)[0]

    def _dense_step(self, toks, label):
        ctx, feat = self.context_trunk(), self.feature_trunk()
        Gc, ccache = ctx.forward_dense(toks)
        g, cidx = temporal_max_pool(Gc)
        Gf, fcache = feat.forward_dense(toks)
        Y, gcache = gcg_forward(Gf, g, self.gcg)
        pooled, idx = temporal_max_pool(Y)
        logit, hc = self._head(pooled)
        loss, dpooled, grads = self._finish(logit, label, hc)
        dY = temporal_max_pool_backward(dpooled, idx, len(Y))
        dGf, dg, dW = gcg_backward(dY, Gf, g, self.gcg, gcache)
        grads["gcg.w"] = dW
        grads.update(feat.backward_dense(dGf, fcache))
        grads.update(ctx.backward_dense(temporal_max_pool_backward(dg, cidx, len(Gc)), ccache))
        return StepResult(loss, logit, grads, {
            "pooled": pooled, "winner_index": idx, "context": g, "context_index": cidx,
            "gates": gcache.s})

    def _lowmem_step(self, src, label, opt):
        ctx, feat = self.context_trunk(), self.feature_trunk()
        args = (opt.merge, opt.exact, opt.chunks_per_block, opt.workers, _pad(feat, opt))
        cwin, cplan, cgw = fixedmem.plan_and_gather(src, ctx, None, *args)
        c_out, ccache = ctx.forward_windows(cgw.tokens)
        g, crows, cpos = fixedmem.pool_gathered(c_out, cgw.positions)
        # z is computed once and shared by the scan and the recompute
        z = gcg_context(g, self.gcg)
        fwin, fplan, fgw = fixedmem.plan_and_gather(src, feat, z, *args)
        f_out, fcache = feat.forward_windows(fgw.tokens, z)
        pooled, rows, pos = fixedmem.pool_gathered(f_out, fgw.positions)

        logit, hc = self._head(pooled)
        loss, dpooled, grads = self._finish(logit, label, hc)
        d_out = np.zeros_like(f_out)
        d_out[rows, np.arange(f_out.shape[1])] = dpooled
        fgrads, dz = feat.backward_windows(d_out, fcache)
        grads.update(fgrads)
        dg, dW = gcg_context_backward(dz, g, self.gcg, z)
        grads["gcg.w"] = dW
        dc = np.zeros_like(c_out)
        dc[crows, np.arange(c_out.shape[1])] = dg
        grads.update(ctx.backward_windows(dc, ccache)[0])
        return StepResult(loss, logit, grads, {
            "pooled": pooled, "winner_index": pos, "context": g, "context_index": cpos,
            "scan_winners": fwin, "context_winners": cwin, "gather_plan": fplan,
            "context_gather_plan": cplan,
            "gathered_windows": len(fgw.tokens) + len(cgw.tokens)})

    def explain(self, tokens, options=None) -> "Explanation":
        """Winner offsets and gate values for every channel, before and after gating."""
        src = self._source(tokens)
        options = options or LowmemOptions()
        kw = dict(chunks_per_block=options.chunks_per_block, workers=options.workers)
        ctx, feat = self.context_trunk(), self.feature_trunk()
        cw = fixedmem.scan_winners(src, ctx, **kw)
        z = gcg_context(cw.values, self.gcg)
        pre = fixedmem.scan_winners(src, feat, **kw)
        post = fixedmem.scan_winners(src, feat, context=z, **kw)
        W = self.window

        def gates_at(offsets):
            # row c is channel c's own winning window
            return gcg_gates(feat.signal(src.windows(offsets, W)), z)

        return Explanation(
            length=len(src), window=W, stride=self.stride,
            context_offset=cw.byte_start, context_value=cw.values,
            pre_offset=pre.byte_start, pre_value=pre.values, pre_gate=gates_at(pre.byte_start),
            post_offset=post.byte_start, post_value=post.values, post_gate=gates_at(post.byte_start),
            regions=_region_counts(post, len(src)))


def _pad(trunk: Trunk, opt: LowmemOptions) -> int:
    return trunk.channels if opt.fixed_batch else 0


def _region_counts(winners: fixedmem.WinnerSet, length: int) -> list[tuple[int, int, int]]:
    """(byte_start, byte_len, n_channels) for merged post-gate winner regions."""
    plan = fixedmem.build_gather_plan(winners, length, merge=True)
    counts = np.bincount(plan.channel_to_region, minlength=len(plan.regions))
    return [(s, n, int(c)) for (s, n), c in zip(plan.regions, counts)]


@dataclass
class Explanation:
    length: int
    window: int
    stride: int
    post_offset: np.ndarray
    post_value: np.ndarray
    pre_offset: np.ndarray
    pre_value: np.ndarray
    regions: list[tuple[int, int, int]]
    post_gate: np.ndarray | None = None
    pre_gate: np.ndarray | None = None
    context_offset: np.ndarray | None = None
    context_value: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return len(self.post_offset)

    def rows(self) -> list[dict]:
        out = []
        for c in range(self.channels):
            r = {"channel": c,
                 "pre_offset": int(self.pre_offset[c]), "pre_value": float(self.pre_value[c]),
                 "post_offset": int(self.post_offset[c]), "post_value": float(self.post_value[c])}
            if self.post_gate is not None:
                r["pre_gate"] = float(self.pre_gate[c])
                r["post_gate"] = float(self.post_gate[c])
                r["context_offset"] = int(self.context_offset[c])
                r["context_value"] = float(self.context_value[c])
            out.append(r)
        return out


def model_from_params(config: ModelConfig, params: dict) -> Model:
    cls = MalConvGcgModel if config.arch == "malconv-gcg" else MalConvModel
    return cls(config, params)
