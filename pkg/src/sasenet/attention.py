"""Feature-modulation mechanisms.

Five related modules, ordered by how much of the attention tensor they learn:

* ``SqueezeExcite``  - per-channel gate from a global squeeze of the map itself.
* ``SkipLayerExcite`` - per-channel gate computed from a *different* (lower
  resolution) source map; SE is the special case source == target.
* ``SASESynthesis``  - full channel-by-space modulation built from per-head
  channel query vectors and spatial key masks, normalized by the mask sum.
* ``SASERecognition`` - the drop-in replacement for a 3x3 conv: per-head query
  gates, key maps, value maps, channel softmax, elementwise modulation.
* ``MHSA``           - token-pairwise baseline, quadratic in N = H*W.

Naive loop oracles for the recognition mechanisms live here too so the fast
paths are always checkable against direct summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .nn import (AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Module, _prod,
                 avg_pool2d, global_avg_pool, inject_noise, uniform_fanin,
                 upsample_bilinear)


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class SEConfig:
    channels: int
    reduction: int = 16

    def __post_init__(self):
        if self.channels % self.reduction:
            raise ShapeError(f"channels {self.channels} must divide reduction {self.reduction}")


@dataclass
class SLEConfig:
    source_channels: int
    target_channels: int
    pool_target: tuple[int, int] = (4, 4)
    mid_channels: int | None = None      # defaults to target_channels
    mid_activation: str = "leaky_relu"   # or "relu"
    mid_slope: float = 0.1

    @property
    def mid(self) -> int:
        return self.mid_channels if self.mid_channels is not None else self.target_channels


@dataclass
class SASESynthConfig:
    source_channels: int
    target_shape: tuple[int, int, int]   # (C_Y, H_Y, W_Y)
    heads: int = 4
    channel_mid: int | None = None       # per-head width of the query branch
    spatial_squeeze: int = 4             # channel reduction inside the mask branch
    dilation: int = 1
    eps: float = 1e-6
    noise_std: float = 0.0               # Gaussian noise on the pre-sigmoid masks

    def __post_init__(self):
        if self.source_channels % self.heads:
            raise ShapeError(f"source channels {self.source_channels} must divide {self.heads} heads")

    @property
    def ch_mid(self) -> int:
        if self.channel_mid is not None:
            return self.channel_mid
        return max(1, self.target_shape[0] // self.heads)

    @property
    def sp_mid(self) -> int:
        return max(1, self.source_channels // (self.heads * self.spatial_squeeze))


@dataclass
class SASERecogConfig:
    channels: int
    heads: int = 4
    key_squeeze: int = 4        # channel reduction between the two key convs
    query_reduction: int = 4    # reduction inside the per-head query gate
    stride: int = 1
    padding_mode: str = "zeros"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} must divide {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def query_mid(self) -> int:
        return max(1, self.head_dim // self.query_reduction)

    @property
    def key_mid(self) -> int:
        return max(1, self.head_dim // self.key_squeeze)


@dataclass
class MHSAConfig:
    channels: int
    heads: int = 4

    def __post_init__(self):
        if self.channels % self.heads:
            raise ShapeError(f"channels {self.channels} must divide {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


# ---------------------------------------------------------------------------
# SE
# ---------------------------------------------------------------------------

class SqueezeExcite(Module):
    """Channel gate: sigmoid(fc2(relu(fc1(global_pool(y))))), applied per channel."""

    def __init__(self, cfg: SEConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        mid = cfg.channels // cfg.reduction
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = self.child("fc1", Conv2d(cfg.channels, mid, 1, bias=True, rng=rng, dtype=dtype))
        self.fc2 = self.child("fc2", Conv2d(mid, cfg.channels, 1, bias=True, rng=rng, dtype=dtype))
        self.last_gate: np.ndarray | None = None

    def gate(self, y: Tensor) -> Tensor:
        z = global_avg_pool(y)
        a = T.sigmoid(self.fc2(T.relu(self.fc1(z))))
        self.last_gate = np.squeeze(a.data)
        return a

    def forward(self, y: Tensor) -> Tensor:
        return T.mul(y, self.gate(y))

    def cost(self, in_shape):
        C, H, W = in_shape
        mid = C // self.cfg.reduction
        entries = [("pool", 0, C, (C, 1, 1))]
        sub, _ = self.child_cost("fc1", (C, 1, 1))
        entries += sub
        entries.append(("act", 0, mid, (mid, 1, 1)))
        sub, _ = self.child_cost("fc2", (mid, 1, 1))
        entries += sub
        entries.append(("gate", 0, C, (C, 1, 1)))           # sigmoid
        entries.append(("modulate", 0, C * H * W, in_shape))
        return entries, in_shape


# ---------------------------------------------------------------------------
# SLE
# ---------------------------------------------------------------------------

class SkipLayerExcite(Module):
    """Channel gate for a target map computed from a lower-resolution source map.

    gate = sigmoid(conv1x1(act(conv_pxp(adaptive_pool_pxp(x))))); the first conv
    kernel equals the pool target so its output is spatially 1x1.
    """

    def __init__(self, cfg: SLEConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pool = self.child("pool", AdaptiveAvgPool2d(cfg.pool_target))
        self.conv1 = self.child("conv1", Conv2d(cfg.source_channels, cfg.mid,
                                                cfg.pool_target, bias=True, rng=rng, dtype=dtype))
        self.conv2 = self.child("conv2", Conv2d(cfg.mid, cfg.target_channels, 1,
                                                bias=True, rng=rng, dtype=dtype))
        self.last_gate: np.ndarray | None = None

    def _act(self, z: Tensor) -> Tensor:
        if self.cfg.mid_activation == "relu":
            return T.relu(z)
        return T.leaky_relu(z, self.cfg.mid_slope)

    def gate(self, x: Tensor) -> Tensor:
        if x.shape[-2] < self.cfg.pool_target[0] or x.shape[-1] < self.cfg.pool_target[1]:
            raise ShapeError(f"source spatial extent {x.shape[-2:]} below pool target")
        b = T.sigmoid(self.conv2(self._act(self.conv1(self.pool(x)))))
        self.last_gate = np.squeeze(b.data)
        return b

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        if y.shape[-3] != self.cfg.target_channels:
            raise ShapeError(f"target has {y.shape[-3]} channels, config says {self.cfg.target_channels}")
        return T.mul(y, self.gate(x))

    def cost(self, in_shapes):
        x_shape, y_shape = in_shapes
        entries, s = self.child_cost("pool", x_shape)
        sub, s = self.child_cost("conv1", s)
        entries += sub
        entries.append(("act", 0, _prod(s), s))
        sub, s = self.child_cost("conv2", s)
        entries += sub
        entries.append(("gate", 0, _prod(s), s))
        entries.append(("modulate", 0, _prod(y_shape), y_shape))
        return entries, y_shape


# ---------------------------------------------------------------------------
# SASE, synthesis form
# ---------------------------------------------------------------------------

def combine_masked_queries(queries: list[Tensor], keys: list[Tensor], eps: float) -> Tensor:
    """Normalized sum of per-head query/key outer products:

        W = sum_i(q_i * k_i) / (sum_i(k_i) + eps)

    q_i broadcasts over space, k_i over channels; accumulation is in head
    order so results are bit-reproducible.
    """
    if len(queries) != len(keys) or not queries:
        raise ShapeError("need one key per query head")
    num = T.mul(queries[0], keys[0])
    den = keys[0]
    for q, k in zip(queries[1:], keys[1:]):
        num = T.add(num, T.mul(q, k))
        den = T.add(den, k)
    eps_t = T.full((1,) * den.ndim, eps, dtype=den.dtype)
    return T.div(num, T.add(den, eps_t))


class SASESynthesis(Module):
    """3-D modulation of a target map from a source map.

    Per head, a channel branch squeezes the source spatially into a query
    vector (the latent style code) and a spatial branch squeezes it
    channel-wise into a key mask (the latent layout). Queries and keys are
    broadcast-multiplied, summed over heads, and normalized by the key sum.
    """

    def __init__(self, cfg: SASESynthConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        g = cfg.heads
        cy = cfg.target_shape[0]
        d = cfg.dilation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.q_pool = self.child("q_pool", AdaptiveAvgPool2d((4, 4)))
        self.q_conv1 = self.child("q_conv1", Conv2d(cfg.source_channels, g * cfg.ch_mid, 4,
                                                    groups=g, bias=True, rng=rng, dtype=dtype))
        self.q_conv2 = self.child("q_conv2", Conv2d(g * cfg.ch_mid, g * cy, 1,
                                                    groups=g, bias=True, rng=rng, dtype=dtype))
        self.k_conv1 = self.child("k_conv1", Conv2d(cfg.source_channels, g * cfg.sp_mid, 3,
                                                    padding=d, dilation=d, groups=g,
                                                    bias=True, rng=rng, dtype=dtype))
        self.k_conv2 = self.child("k_conv2", Conv2d(g * cfg.sp_mid, g, 3,
                                                    padding=d, dilation=d, groups=g,
                                                    bias=True, rng=rng, dtype=dtype))
        self.last_weight: np.ndarray | None = None
        self.last_queries: list[np.ndarray] = []
        self.last_keys: list[np.ndarray] = []

    def _branches(self, x: Tensor, seed: int | None):
        cfg = self.cfg
        if x.shape[-2] < 4 or x.shape[-1] < 4:
            raise ShapeError("source spatial extent must be at least 4x4")
        q = T.sigmoid(self.q_conv2(T.leaky_relu(self.q_conv1(self.q_pool(x)), 0.1)))
        k_pre = self.k_conv2(T.leaky_relu(self.k_conv1(x), 0.1))
        if cfg.noise_std > 0:
            if seed is None:
                raise ValueError("a seed is required when mask noise is enabled")
            k_pre = inject_noise(k_pre, seed, cfg.noise_std)
        k = T.sigmoid(k_pre)
        k = upsample_bilinear(k, cfg.target_shape[1:])
        # q: (B?, g*C_Y, 1, 1) -> g tensors (B?, C_Y, 1, 1); k likewise per head
        ch_axis = q.ndim - 3
        qs = T.split(q, ch_axis, cfg.heads)
        ks = T.split(k, ch_axis, cfg.heads)
        return qs, ks

    def weights(self, x: Tensor, seed: int | None = None) -> Tensor:
        qs, ks = self._branches(x, seed)
        w = combine_masked_queries(qs, ks, self.cfg.eps)
        self.last_queries = [np.squeeze(q.data) for q in qs]
        self.last_keys = [np.squeeze(k.data) for k in ks]
        self.last_weight = w.data
        return w

    def forward(self, x: Tensor, y: Tensor, seed: int | None = None) -> Tensor:
        if tuple(y.shape[-3:]) != tuple(self.cfg.target_shape):
            raise ShapeError(f"target shape {y.shape[-3:]} != configured {self.cfg.target_shape}")
        return T.mul(self.weights(x, seed), y)

    def cost(self, in_shapes):
        x_shape, y_shape = in_shapes
        cfg = self.cfg
        g = cfg.heads
        cy, hy, wy = cfg.target_shape
        entries, s = self.child_cost("q_pool", x_shape)
        sub, s = self.child_cost("q_conv1", s)
        entries += sub
        entries.append(("q_act", 0, _prod(s), s))
        sub, s = self.child_cost("q_conv2", s)
        entries += sub
        entries.append(("q_gate", 0, _prod(s), s))
        sub, ks = self.child_cost("k_conv1", x_shape)
        entries += sub
        entries.append(("k_act", 0, _prod(ks), ks))
        sub, ks = self.child_cost("k_conv2", ks)
        entries += sub
        noise = _prod(ks) if cfg.noise_std > 0 else 0
        entries.append(("k_noise", 0, noise, ks))
        entries.append(("k_gate", 0, _prod(ks), ks))
        entries.append(("k_resize", 0, g * hy * wy, (g, hy, wy)))
        chw, hw = cy * hy * wy, hy * wy
        combine = (2 * g + 1) * chw + g * hw
        entries.append(("combine", 0, combine, y_shape))
        return entries, y_shape


# ---------------------------------------------------------------------------
# SASE, recognition form
# ---------------------------------------------------------------------------

class SASERecognition(Module):
    """Conv replacement: per-head query gates, key maps, value maps, channel
    softmax, elementwise modulation of the value.

    Per head i over the channel split of x:
        q_i = gate(x_i)                     (d, 1, 1), squeeze-excitation style
        k_i = conv3x3(relu(bn(conv3x3(x_i))))   (d, H, W)
        v_i = conv3x3(x_i)                  (d, H, W)
        a_i = softmax_over_d(q_i * k_i)
        out = concat_i(a_i * v_i)

    When strided, the value conv carries the stride and the query/key branches
    consume a 2x2 average-pooled input.
    """

    def __init__(self, cfg: SASERecogConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        c, g = cfg.channels, cfg.heads
        pm = cfg.padding_mode
        rng = rng if rng is not None else np.random.default_rng(0)
        self.q_fc1 = self.child("q_fc1", Conv2d(c, g * cfg.query_mid, 1,
                                                groups=g, bias=True, rng=rng, dtype=dtype))
        self.q_fc2 = self.child("q_fc2", Conv2d(g * cfg.query_mid, c, 1,
                                                groups=g, bias=True, rng=rng, dtype=dtype))
        km = g * cfg.key_mid
        self.k_conv1 = self.child("k_conv1", Conv2d(c, km, 3, padding=1, groups=g,
                                                    bias=False, padding_mode=pm, rng=rng, dtype=dtype))
        self.k_bn = self.child("k_bn", BatchNorm2d(km, dtype=dtype))
        self.k_conv2 = self.child("k_conv2", Conv2d(km, c, 3, padding=1, groups=g,
                                                    bias=False, padding_mode=pm, rng=rng, dtype=dtype))
        self.v_conv = self.child("v_conv", Conv2d(c, c, 3, padding=1, stride=cfg.stride,
                                                  groups=g, bias=False, padding_mode=pm,
                                                  rng=rng, dtype=dtype))
        self.last_attention: list[np.ndarray] = []

    def _branches(self, x: Tensor):
        cfg = self.cfg
        xkq = avg_pool2d(x, 2, 2) if cfg.stride == 2 else x
        q = T.sigmoid(self.q_fc2(T.relu(self.q_fc1(global_avg_pool(xkq)))))
        k = self.k_conv2(T.relu(self.k_bn(self.k_conv1(xkq))))
        v = self.v_conv(x)
        return q, k, v

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[-3] != cfg.channels:
            raise ShapeError(f"expected {cfg.channels} channels, got {x.shape[-3]}")
        q, k, v = self._branches(x)
        g, d = cfg.heads, cfg.head_dim
        lead = v.shape[:-3]
        hw = v.shape[-2:]
        logits = T.mul(q, k)
        a = T.softmax(T.reshape(logits, lead + (g, d) + hw), axis=len(lead) + 1)
        out = T.mul(a, T.reshape(v, lead + (g, d) + hw))
        self.last_attention = [np.ascontiguousarray(h) for h in
                               a.data.reshape((-1, g, d) + hw)[0]]
        return T.reshape(out, lead + (g * d,) + hw)

    def branch_arrays(self, x: Tensor):
        """Numpy (q, k, v) for the loop oracle; no tape recording."""
        with T.no_grad():
            q, k, v = self._branches(x)
        return q.data, k.data, v.data

    def out_shape(self, in_shape):
        C, H, W = in_shape
        s = self.cfg.stride
        return (C, H // s, W // s)

    def cost(self, in_shape):
        cfg = self.cfg
        C, H, W = in_shape
        g, d = cfg.heads, cfg.head_dim
        entries = []
        if cfg.stride == 2:
            kq_shape = (C, H // 2, W // 2)
            entries.append(("kq_pool", 0, _prod(kq_shape), kq_shape))
        else:
            kq_shape = in_shape
        entries.append(("query.pool", 0, C, (C, 1, 1)))
        sub, s = self.child_cost("q_fc1", (C, 1, 1))
        entries += sub
        entries.append(("query.act", 0, _prod(s), s))
        sub, s = self.child_cost("q_fc2", s)
        entries += sub
        entries.append(("query.gate", 0, C, (C, 1, 1)))
        sub, ks = self.child_cost("k_conv1", kq_shape)
        entries += sub
        sub, ks = self.child_cost("k_bn", ks)
        entries += sub
        entries.append(("key.act", 0, _prod(ks), ks))
        sub, ks = self.child_cost("k_conv2", ks)
        entries += sub
        sub, vs = self.child_cost("v_conv", in_shape)
        entries += sub
        n = _prod(vs)
        entries.append(("attend", 0, 3 * n, vs))   # q*k, softmax, a*v
        return entries, vs


def sase_recog_loop_oracle(module: SASERecognition, x: Tensor) -> np.ndarray:
    """Recompute the attention/modulation stage scalar-by-scalar from the
    module's query/key/value maps; independent of the vectorized softmax path."""
    q, k, v = module.branch_arrays(x)
    if q.ndim == 3:
        q, k, v = q[None], k[None], v[None]
    B, c, H, W = v.shape
    g = module.cfg.heads
    d = c // g
    out = np.zeros_like(v)
    for b in range(B):
        for gi in range(g):
            for h in range(H):
                for w in range(W):
                    logits = [q[b, gi * d + dd, 0, 0] * k[b, gi * d + dd, h, w] for dd in range(d)]
                    m = max(logits)
                    exps = [math.exp(val - m) for val in logits]
                    z = sum(exps)
                    for dd in range(d):
                        out[b, gi * d + dd, h, w] = (exps[dd] / z) * v[b, gi * d + dd, h, w]
    return out if x.ndim == 4 else out[0]


# ---------------------------------------------------------------------------
# MHSA baseline
# ---------------------------------------------------------------------------

class MHSA(Module):
    """Token-pairwise self-attention over the H*W spatial positions.

    Channels map through three c-by-c projections, split into heads; the
    per-head N x N attention is softmax(q k^T / sqrt(d)). No positional
    encoding. Quadratic in N by construction.
    """

    def __init__(self, cfg: MHSAConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        rng = rng if rng is not None else np.random.default_rng(0)
        self.wq = self.param("wq", _proj(rng, c, dtype))
        self.wk = self.param("wk", _proj(rng, c, dtype))
        self.wv = self.param("wv", _proj(rng, c, dtype))
        self.last_attention: list[np.ndarray] = []

    def _attend_single(self, x2: Tensor):
        # x2: (c, N)
        cfg = self.cfg
        g, d = cfg.heads, cfg.head_dim
        scale = 1.0 / math.sqrt(d)
        q = T.split(T.matmul(self.wq, x2), 0, g)
        k = T.split(T.matmul(self.wk, x2), 0, g)
        v = T.split(T.matmul(self.wv, x2), 0, g)
        outs = []
        self.last_attention = []
        for i in range(g):
            qi = T.transpose(q[i])                         # (N, d)
            ki = k[i]                                      # (d, N)
            vi = T.transpose(v[i])                         # (N, d)
            scores = T.mul(T.matmul(qi, ki), T.full((1, 1), scale, dtype=x2.dtype))
            a = T.softmax(scores, axis=1)
            self.last_attention.append(a.data)
            outs.append(T.matmul(a, vi))                   # (N, d)
        return T.transpose(T.concat(outs, axis=1))         # (c, N)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.shape[-3] != cfg.channels:
            raise ShapeError(f"expected {cfg.channels} channels, got {x.shape[-3]}")
        batched = x.ndim == 4
        c = cfg.channels
        H, W = x.shape[-2:]
        n = H * W
        if not batched:
            y = self._attend_single(T.reshape(x, (c, n)))
            return T.reshape(y, (c, H, W))
        outs = []
        for xb in T.split(x, 0, x.shape[0]):
            y = self._attend_single(T.reshape(xb, (c, n)))
            outs.append(T.reshape(y, (1, c, H, W)))
        return T.concat(outs, axis=0) if len(outs) > 1 else outs[0]

    def core_flops(self, in_shape) -> int:
        """The token-pairwise part only: scores, scale, softmax, apply."""
        C, H, W = in_shape
        g, d = self.cfg.heads, self.cfg.head_dim
        n = H * W
        return g * (n * d * n + n * n + n * n + n * d * n)

    def cost(self, in_shape):
        C, H, W = in_shape
        n = H * W
        proj = 3 * C * C * n
        entries = [("proj", 3 * C * C, proj, (3 * C, H, W)),
                   ("attend", 0, self.core_flops(in_shape), in_shape)]
        return entries, in_shape


def _proj(rng, c, dtype):
    return uniform_fanin(rng, (c, c), c, dtype)


def mhsa_naive_oracle(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
                      heads: int) -> np.ndarray:
    """Explicit O(N^2) pairwise computation of the MHSA forward, loops only."""
    c, H, W = x.shape
    n = H * W
    d = c // heads
    tokens = x.reshape(c, n)
    q = np.zeros((c, n))
    k = np.zeros((c, n))
    v = np.zeros((c, n))
    for t in range(n):
        for row in range(c):
            q[row, t] = float(np.dot(wq[row], tokens[:, t]))
            k[row, t] = float(np.dot(wk[row], tokens[:, t]))
            v[row, t] = float(np.dot(wv[row], tokens[:, t]))
    out = np.zeros((c, n))
    for i in range(heads):
        qs, ks, vs = (m[i * d:(i + 1) * d] for m in (q, k, v))
        for t in range(n):
            scores = [sum(qs[dd, t] * ks[dd, u] for dd in range(d)) / math.sqrt(d)
                      for u in range(n)]
            m = max(scores)
            exps = [math.exp(s - m) for s in scores]
            z = sum(exps)
            for dd in range(d):
                out[i * d + dd, t] = sum((exps[u] / z) * vs[dd, u] for u in range(n))
    return out.reshape(c, H, W)
