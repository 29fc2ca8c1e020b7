"""Layer primitives: convolution, pooling, normalization, GLU, upsampling,
noise injection, and the Module container they hang off.

Every layer has two faces kept deliberately independent:

* ``forward`` executes tensor primitives (which feed the runtime FLOP counter),
* ``cost(in_shape)`` returns closed-form (params, flops, out_shape) entries.

The test suite asserts the two agree to the integer.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import (NumericError, ShapeError, Tensor, mul, record_op, relu,
                     leaky_relu, sigmoid, split, tanh)
from . import tensor as T


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _prod(shape) -> int:
    return int(np.prod(shape)) if len(shape) else 1


# ---------------------------------------------------------------------------
# parameter init: fan-in-scaled uniform; one fixed rule keeps builds seeded
# ---------------------------------------------------------------------------

def uniform_fanin(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(3.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------

def _ensure_4d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")


def _restore(x: Tensor, squeezed: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeezed else x


def _pad_hw(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    spec = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    if mode == "zeros":
        return np.pad(x, spec)
    if mode == "circular":
        if ph >= x.shape[2] or pw >= x.shape[3]:
            raise ShapeError("circular padding must be smaller than the spatial extent")
        return np.pad(x, spec, mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}")


def _fold_pad_hw(gp: np.ndarray, H: int, W: int, ph: int, pw: int, mode: str) -> np.ndarray:
    # adjoint of _pad_hw
    if ph == 0 and pw == 0:
        return gp
    if mode == "zeros":
        return np.ascontiguousarray(gp[:, :, ph:ph + H, pw:pw + W])
    g = gp[:, :, ph:ph + H, :].copy()
    g[:, :, H - ph:H, :] += gp[:, :, :ph, :]
    g[:, :, 0:ph, :] += gp[:, :, H + ph:, :]
    out = g[:, :, :, pw:pw + W].copy()
    out[:, :, :, W - pw:W] += g[:, :, :, :pw]
    out[:, :, :, 0:pw] += g[:, :, :, W + pw:]
    return out


def conv_out_hw(hw, kernel, stride, padding, dilation) -> tuple[int, int]:
    H, W = hw
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    Ho = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    Wo = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"convolution output extent would be empty for input {hw}")
    return Ho, Wo


def _conv_fwd_data(x, w, stride, padding, dilation, groups, mode):
    B, Cin, H, W = x.shape
    Cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    Ho, Wo = conv_out_hw((H, W), (kh, kw), stride, padding, dilation)
    xp = _pad_hw(x, ph, pw, mode)
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    cpg = Cout // groups
    for gi in range(groups):
        xg = xp[:, gi * cg:(gi + 1) * cg]
        wg = w[gi * cpg:(gi + 1) * cpg]
        og = out[:, gi * cpg:(gi + 1) * cpg]
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, i * dh: i * dh + sh * (Ho - 1) + 1: sh,
                        j * dw: j * dw + sw * (Wo - 1) + 1: sw]
                og += np.tensordot(wg[:, :, i, j], xs, axes=(1, 1)).transpose(1, 0, 2, 3)
    return out


def _conv_bwd_input_data(gy, w, x_hw, stride, padding, dilation, groups, mode):
    B = gy.shape[0]
    Cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    H, W = x_hw
    Ho, Wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros((B, cg * groups, H + 2 * ph, W + 2 * pw), dtype=gy.dtype)
    cpg = Cout // groups
    for gi in range(groups):
        gg = gy[:, gi * cpg:(gi + 1) * cpg]
        wg = w[gi * cpg:(gi + 1) * cpg]
        dst = gxp[:, gi * cg:(gi + 1) * cg]
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(wg[:, :, i, j], gg, axes=(0, 1)).transpose(1, 0, 2, 3)
                dst[:, :, i * dh: i * dh + sh * (Ho - 1) + 1: sh,
                    j * dw: j * dw + sw * (Wo - 1) + 1: sw] += contrib
    return _fold_pad_hw(gxp, H, W, ph, pw, mode)


def _conv_bwd_weight_data(x, gy, wshape, stride, padding, dilation, groups, mode):
    Cout, cg, kh, kw = wshape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    Ho, Wo = gy.shape[2], gy.shape[3]
    xp = _pad_hw(x, ph, pw, mode)
    gw = np.zeros(wshape, dtype=x.dtype)
    cpg = Cout // groups
    for gi in range(groups):
        xg = xp[:, gi * cg:(gi + 1) * cg]
        gg = gy[:, gi * cpg:(gi + 1) * cpg]
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, i * dh: i * dh + sh * (Ho - 1) + 1: sh,
                        j * dw: j * dw + sw * (Wo - 1) + 1: sw]
                gw[gi * cpg:(gi + 1) * cpg, :, i, j] = np.tensordot(gg, xs, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0,
           dilation=1, groups: int = 1, padding_mode: str = "zeros") -> Tensor:
    """Cross-correlation (no kernel flip) with stride/padding/dilation/groups.

    x: (B?, C_in, H, W); w: (C_out, C_in/groups, kh, kw); b: (C_out,).
    """
    x4, squeezed = _ensure_4d(x)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    B, Cin, H, W = x4.shape
    Cout, cg, kh, kw = w.shape
    if Cin != cg * groups or Cout % groups != 0:
        raise ShapeError(f"conv2d channel mismatch: x has {Cin}, weight {w.shape}, groups {groups}")
    out = _conv_fwd_data(x4.data, w.data, stride, padding, dilation, groups, padding_mode)
    if b is not None:
        if b.shape != (Cout,):
            raise ShapeError(f"bias must be ({Cout},), got {b.shape}")
        out = out + b.data[:, None, None]
    Ho, Wo = out.shape[2], out.shape[3]
    flops = B * Cout * Ho * Wo * cg * kh * kw + (B * Cout * Ho * Wo if b is not None else 0)

    parents = (x4, w) if b is None else (x4, w, b)

    def backward_fn(g):
        gx = _conv_bwd_input_data(g, w.data, (H, W), stride, padding, dilation, groups, padding_mode)
        gw = _conv_bwd_weight_data(x4.data, g, w.shape, stride, padding, dilation, groups, padding_mode)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    y = record_op(out, parents, backward_fn, "conv2d", flops)
    return _restore(y, squeezed)


def conv2d_naive_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                        stride=1, padding=0, dilation=1, groups: int = 1,
                        padding_mode: str = "zeros") -> np.ndarray:
    """Reference convolution: per-output-pixel patch gather and summation.

    Forward only, numpy in/out; shares no code path with conv2d.
    """
    if x.ndim == 3:
        x = x[None]
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    sh, sw = stride
    dh, dw = dilation
    B, Cin, H, W = x.shape
    Cout, cg, kh, kw = w.shape
    Ho, Wo = conv_out_hw((H, W), (kh, kw), stride, padding, dilation)
    xp = _pad_hw(x, padding[0], padding[1], padding_mode)
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    cpg = Cout // groups
    for bi in range(B):
        for co in range(Cout):
            gi = co // cpg
            for ho in range(Ho):
                for wo in range(Wo):
                    patch = xp[bi, gi * cg:(gi + 1) * cg,
                               ho * sh: ho * sh + dh * (kh - 1) + 1: dh,
                               wo * sw: wo * sw + dw * (kw - 1) + 1: dw]
                    val = float((patch * w[co]).sum())
                    if b is not None:
                        val += float(b[co])
                    out[bi, co, ho, wo] = val
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride=1, padding=0, dilation=1) -> Tensor:
    """Transposed convolution, the exact adjoint of conv2d for matching specs.

    x: (B?, C_in, H, W); w: (C_in, C_out, kh, kw);
    output spatial extent = (H-1)*stride - 2*pad + dilation*(kh-1) + 1.
    """
    x4, squeezed = _ensure_4d(x)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    B, Cin, H, W = x4.shape
    wc_in, Cout, kh, kw = w.shape
    if wc_in != Cin:
        raise ShapeError(f"conv_transpose2d: x has {Cin} channels, weight expects {wc_in}")
    Ho = (H - 1) * stride[0] - 2 * padding[0] + dilation[0] * (kh - 1) + 1
    Wo = (W - 1) * stride[1] - 2 * padding[1] + dilation[1] * (kw - 1) + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv_transpose2d output extent would be empty")
    out = _conv_bwd_input_data(x4.data, w.data, (Ho, Wo), stride, padding, dilation, 1, "zeros")
    if b is not None:
        if b.shape != (Cout,):
            raise ShapeError(f"bias must be ({Cout},), got {b.shape}")
        out = out + b.data[:, None, None]
    flops = B * Cin * H * W * Cout * kh * kw + (B * Cout * Ho * Wo if b is not None else 0)

    parents = (x4, w) if b is None else (x4, w, b)

    def backward_fn(g):
        gx = _conv_fwd_data(g, w.data, stride, padding, dilation, 1, "zeros")
        gw = _conv_bwd_weight_data(g, x4.data, w.shape, stride, padding, dilation, 1, "zeros")
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    y = record_op(out, parents, backward_fn, "conv_transpose2d", flops)
    return _restore(y, squeezed)


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Fixed-window average pooling (window must tile the input exactly)."""
    x4, squeezed = _ensure_4d(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    B, C, H, W = x4.shape
    if (H - kh) % sh or (W - kw) % sw or H < kh or W < kw:
        raise ShapeError(f"avg_pool2d window {kh}x{kw}/{sh} does not tile input {H}x{W}")
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    out = np.zeros((B, C, Ho, Wo), dtype=x4.dtype)
    for i in range(kh):
        for j in range(kw):
            out += x4.data[:, :, i: i + sh * (Ho - 1) + 1: sh, j: j + sw * (Wo - 1) + 1: sw]
    out /= kh * kw

    def backward_fn(g):
        gx = np.zeros_like(x4.data)
        gs = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i: i + sh * (Ho - 1) + 1: sh, j: j + sw * (Wo - 1) + 1: sw] += gs
        return (gx,)

    y = record_op(out, (x4,), backward_fn, "avg_pool2d", B * C * Ho * Wo)
    return _restore(y, squeezed)


def _bin_edges(n: int, bins: int) -> list[tuple[int, int]]:
    # floor partition: bin i covers [i*n//bins, (i+1)*n//bins)
    return [(i * n // bins, (i + 1) * n // bins) for i in range(bins)]


def adaptive_avg_pool2d(x: Tensor, target) -> Tensor:
    """Average pooling onto a (th, tw) grid of floor-partitioned bins."""
    x4, squeezed = _ensure_4d(x)
    th, tw = _pair(target)
    B, C, H, W = x4.shape
    if th > H or tw > W:
        raise ShapeError(f"adaptive pool target {th}x{tw} exceeds input {H}x{W}")
    rows, cols = _bin_edges(H, th), _bin_edges(W, tw)
    out = np.zeros((B, C, th, tw), dtype=x4.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x4.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward_fn(g):
        gx = np.zeros_like(x4.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    y = record_op(out, (x4,), backward_fn, "adaptive_avg_pool2d", B * C * th * tw)
    return _restore(y, squeezed)


def global_avg_pool(x: Tensor) -> Tensor:
    return adaptive_avg_pool2d(x, (1, 1))


def avg_pool(x: Tensor, target) -> Tensor:
    """target is either the string "global" or an adaptive (h, w) grid."""
    if target == "global":
        return global_avg_pool(x)
    return adaptive_avg_pool2d(x, target)


def max_pool2d(x: Tensor, kernel, stride, padding=0) -> Tensor:
    x4, squeezed = _ensure_4d(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x4.shape
    Ho, Wo = conv_out_hw((H, W), (kh, kw), (sh, sw), (ph, pw), (1, 1))
    xp = np.pad(x4.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    stack = np.stack([xp[:, :, i: i + sh * (Ho - 1) + 1: sh, j: j + sw * (Wo - 1) + 1: sw]
                      for i in range(kh) for j in range(kw)])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        for p in range(kh * kw):
            i, j = divmod(p, kw)
            view = gxp[:, :, i: i + sh * (Ho - 1) + 1: sh, j: j + sw * (Wo - 1) + 1: sw]
            view += g * (arg == p)
        if ph or pw:
            return (np.ascontiguousarray(gxp[:, :, ph:ph + H, pw:pw + W]),)
        return (gxp,)

    y = record_op(np.ascontiguousarray(out), (x4,), backward_fn, "max_pool2d", B * C * Ho * Wo)
    return _restore(y, squeezed)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the channel axis: a * sigmoid(b)."""
    ch_axis = x.ndim - 3
    if x.ndim not in (3, 4) or x.shape[ch_axis] % 2:
        raise ShapeError(f"glu needs an even channel extent, got shape {x.shape}")
    a, b = split(x, ch_axis, 2)
    return mul(a, sigmoid(b))


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    scale = int(scale)
    if scale < 2:
        raise ShapeError("nearest upsampling expects an integer scale >= 2")
    x4, squeezed = _ensure_4d(x)
    B, C, H, W = x4.shape
    out = np.repeat(np.repeat(x4.data, scale, axis=2), scale, axis=3)

    def backward_fn(g):
        return (g.reshape(B, C, H, scale, W, scale).sum(axis=(3, 5)),)

    y = record_op(out, (x4,), backward_fn, "upsample_nearest", out.size)
    return _restore(y, squeezed)


def _bilinear_coords(n_in: int, n_out: int):
    # half-pixel centers (align_corners=false)
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def upsample_bilinear(x: Tensor, target) -> Tensor:
    """Bilinear resize to (out_h, out_w), half-pixel-centers convention."""
    x4, squeezed = _ensure_4d(x)
    out_h, out_w = _pair(target)
    B, C, H, W = x4.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear target must be positive")
    i0, i1, fi = _bilinear_coords(H, out_h)
    j0, j1, fj = _bilinear_coords(W, out_w)
    fi = fi.astype(x4.dtype)
    fj = fj.astype(x4.dtype)
    fi_col = fi[:, None]
    rows = x4.data[:, :, i0, :] * (1 - fi_col) + x4.data[:, :, i1, :] * fi_col
    out = rows[:, :, :, j0] * (1 - fj) + rows[:, :, :, j1] * fj

    def backward_fn(g):
        grows = np.zeros((B, C, out_h, W), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), j0), g * (1 - fj))
        np.add.at(grows, (slice(None), slice(None), slice(None), j1), g * fj)
        gx = np.zeros_like(x4.data)
        np.add.at(gx, (slice(None), slice(None), i0), grows * (1 - fi_col))
        np.add.at(gx, (slice(None), slice(None), i1), grows * fi_col)
        return (gx,)

    y = record_op(np.ascontiguousarray(out), (x4,), backward_fn, "upsample_bilinear",
                  B * C * out_h * out_w)
    return _restore(y, squeezed)


def upsample(x: Tensor, scale=None, mode: str = "nearest", target=None) -> Tensor:
    if mode == "nearest":
        return upsample_nearest(x, scale)
    if mode == "bilinear":
        if target is None:
            hw = x.shape[-2] * int(scale), x.shape[-1] * int(scale)
        else:
            hw = _pair(target)
        return upsample_bilinear(x, hw)
    raise ValueError(f"unknown upsample mode {mode!r}")


def inject_noise(x: Tensor, seed: int, std: float) -> Tensor:
    """x + std * eps with eps ~ N(0,1) from the given seed; std=0 is the identity."""
    if std < 0:
        raise ValueError("noise std must be >= 0")
    if std == 0:
        return x
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    noise = (std * rng.standard_normal(x.shape)).astype(x.dtype)

    def backward_fn(g):
        return (g,)

    return record_op(x.data + noise, (x,), backward_fn, "inject_noise", x.size)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, eps: float, momentum: float,
               training: bool) -> Tensor:
    """Per-channel batch normalization; running stats are updated in place
    (train mode) with the unbiased variance, following the momentum rule."""
    x4, squeezed = _ensure_4d(x)
    B, C, H, W = x4.shape
    if training:
        if B < 2:
            raise ShapeError("train-mode batchnorm requires batch extent >= 2")
        axes = (0, 2, 3)
        m = B * H * W
        mean = x4.data.mean(axis=axes)
        var = x4.data.var(axis=axes)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        running_var *= (1 - momentum)
        running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean, running_var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x4.data - mean[:, None, None]) * ivar[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    if training:
        def backward_fn(g):
            m_ = B * H * W
            dxhat = g * gamma.data[:, None, None]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
            gx = (ivar[:, None, None] / m_) * (m_ * dxhat
                                               - sum_dxhat[:, None, None]
                                               - xhat * sum_dxhat_xhat[:, None, None])
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        def backward_fn(g):
            gx = g * (gamma.data * ivar)[:, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    y = record_op(out, (x4, gamma, beta), backward_fn, "batch_norm", x4.size)
    return _restore(y, squeezed)


# ---------------------------------------------------------------------------
# module container
# ---------------------------------------------------------------------------

class Module:
    """Base class holding named parameters and children.

    Subclasses implement ``forward`` and the analytic ``cost(in_shape)``
    returning (entries, out_shape) where each entry is
    (name, params, flops, out_shape) for a batchless input shape.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield (prefix + name, t)
        for cname, child in self._children.items():
            yield from child.parameters(prefix + cname + ".")

    def buffers(self, prefix: str = ""):
        """Non-trainable state (e.g. batchnorm running stats)."""
        for cname, child in self._children.items():
            yield from child.buffers(prefix + cname + ".")

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.parameters()}
        out.update({name: arr for name, arr in self.buffers()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.parameters())
        bufs = dict(self.buffers())
        for name, arr in arrays.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise ShapeError(f"checkpoint shape mismatch for {name}")
                params[name].data = np.ascontiguousarray(arr)
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unknown state entry {name!r}")

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for child in self._children.values():
            child.set_training(flag)

    def zero_grads(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def cost(self, in_shape):
        raise NotImplementedError(f"{type(self).__name__} has no cost model")

    def child_cost(self, name: str, in_shape):
        entries, out_shape = self._children[name].cost(in_shape)
        return [(f"{name}.{e[0]}" if e[0] else name, e[1], e[2], e[3]) for e in entries], out_shape


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 dilation=1, groups=1, bias=True, padding_mode="zeros",
                 rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError("channels must divide groups")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel = _pair(kernel)
        self.stride, self.padding, self.dilation = _pair(stride), _pair(padding), _pair(dilation)
        self.groups = groups
        self.padding_mode = padding_mode
        cg = in_channels // groups
        fan_in = cg * self.kernel[0] * self.kernel[1]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = self.param("w", uniform_fanin(rng, (out_channels, cg) + self.kernel, fan_in, dtype))
        self.b = self.param("b", np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x):
        return conv2d(x, self.w, self.b, self.stride, self.padding,
                      self.dilation, self.groups, self.padding_mode)

    def out_shape(self, in_shape):
        C, H, W = in_shape
        Ho, Wo = conv_out_hw((H, W), self.kernel, self.stride, self.padding, self.dilation)
        return (self.out_channels, Ho, Wo)

    def cost(self, in_shape):
        C, H, W = in_shape
        if C != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {C}")
        out_shape = self.out_shape(in_shape)
        macs = _prod(out_shape) * (self.in_channels // self.groups) * self.kernel[0] * self.kernel[1]
        if self.b is not None:
            macs += _prod(out_shape)
        params = self.w.size + (self.b.size if self.b is not None else 0)
        return [("", params, macs, out_shape)], out_shape


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 bias=True, rng=None, dtype=np.float64):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel = _pair(kernel)
        self.stride, self.padding = _pair(stride), _pair(padding)
        fan_in = in_channels * self.kernel[0] * self.kernel[1]
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = self.param("w", uniform_fanin(rng, (in_channels, out_channels) + self.kernel,
                                               fan_in, dtype))
        self.b = self.param("b", np.zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x):
        return conv_transpose2d(x, self.w, self.b, self.stride, self.padding)

    def out_shape(self, in_shape):
        C, H, W = in_shape
        Ho = (H - 1) * self.stride[0] - 2 * self.padding[0] + self.kernel[0]
        Wo = (W - 1) * self.stride[1] - 2 * self.padding[1] + self.kernel[1]
        return (self.out_channels, Ho, Wo)

    def cost(self, in_shape):
        C, H, W = in_shape
        out_shape = self.out_shape(in_shape)
        macs = C * H * W * self.out_channels * self.kernel[0] * self.kernel[1]
        if self.b is not None:
            macs += _prod(out_shape)
        params = self.w.size + (self.b.size if self.b is not None else 0)
        return [("", params, macs, out_shape)], out_shape


class BatchNorm2d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def buffers(self, prefix: str = ""):
        yield (prefix + "running_mean", self.running_mean)
        yield (prefix + "running_var", self.running_var)

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.eps, self.momentum, self.training)

    def cost(self, in_shape):
        return [("", 2 * self.channels, _prod(in_shape), in_shape)], in_shape


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w = self.param("w", uniform_fanin(rng, (in_features, out_features), in_features, dtype))
        self.b = self.param("b", np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x):
        squeezed = x.ndim == 1
        if squeezed:
            x = T.reshape(x, (1,) + x.shape)
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = y + T.reshape(self.b, (1, self.out_features))
        return T.reshape(y, (self.out_features,)) if squeezed else y

    def cost(self, in_shape):
        flops = self.in_features * self.out_features
        if self.b is not None:
            flops += self.out_features
        params = self.w.size + (self.b.size if self.b is not None else 0)
        return [("", params, flops, (self.out_features,))], (self.out_features,)


class ReLU(Module):
    def forward(self, x):
        return relu(x)

    def cost(self, in_shape):
        return [("", 0, _prod(in_shape), in_shape)], in_shape


class LeakyReLU(Module):
    def __init__(self, slope=0.1):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return leaky_relu(x, self.slope)

    def cost(self, in_shape):
        return [("", 0, _prod(in_shape), in_shape)], in_shape


class Sigmoid(Module):
    def forward(self, x):
        return sigmoid(x)

    def cost(self, in_shape):
        return [("", 0, _prod(in_shape), in_shape)], in_shape


class Tanh(Module):
    def forward(self, x):
        return tanh(x)

    def cost(self, in_shape):
        return [("", 0, _prod(in_shape), in_shape)], in_shape


class GLU(Module):
    def forward(self, x):
        return glu(x)

    def cost(self, in_shape):
        C, H, W = in_shape
        out_shape = (C // 2, H, W)
        # sigmoid on one half + elementwise product
        return [("", 0, C * H * W, out_shape)], out_shape


class MaxPool2d(Module):
    def __init__(self, kernel, stride, padding=0):
        super().__init__()
        self.kernel, self.stride, self.padding = _pair(kernel), _pair(stride), _pair(padding)

    def forward(self, x):
        return max_pool2d(x, self.kernel, self.stride, self.padding)

    def cost(self, in_shape):
        C, H, W = in_shape
        Ho, Wo = conv_out_hw((H, W), self.kernel, self.stride, self.padding, (1, 1))
        out_shape = (C, Ho, Wo)
        return [("", 0, _prod(out_shape), out_shape)], out_shape


class AvgPool2d(Module):
    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = _pair(kernel)
        self.stride = _pair(stride if stride is not None else kernel)

    def forward(self, x):
        return avg_pool2d(x, self.kernel, self.stride)

    def cost(self, in_shape):
        C, H, W = in_shape
        Ho = (H - self.kernel[0]) // self.stride[0] + 1
        Wo = (W - self.kernel[1]) // self.stride[1] + 1
        out_shape = (C, Ho, Wo)
        return [("", 0, _prod(out_shape), out_shape)], out_shape


class AdaptiveAvgPool2d(Module):
    def __init__(self, target):
        super().__init__()
        self.target = _pair(target)

    def forward(self, x):
        return adaptive_avg_pool2d(x, self.target)

    def cost(self, in_shape):
        C, H, W = in_shape
        out_shape = (C,) + self.target
        return [("", 0, _prod(out_shape), out_shape)], out_shape


class UpsampleNearest(Module):
    def __init__(self, scale=2):
        super().__init__()
        self.scale = int(scale)

    def forward(self, x):
        return upsample_nearest(x, self.scale)

    def cost(self, in_shape):
        C, H, W = in_shape
        out_shape = (C, H * self.scale, W * self.scale)
        return [("", 0, _prod(out_shape), out_shape)], out_shape


class NoiseInjection(Module):
    """Additive seeded Gaussian noise; the seed is fixed per instance so a
    forward pass is a pure function of the module state."""

    def __init__(self, std=1.0, seed=0):
        super().__init__()
        self.std = float(std)
        self.seed = int(seed)

    def reseed(self, seed: int):
        self.seed = int(seed)

    def forward(self, x):
        return inject_noise(x, self.seed, self.std)

    def cost(self, in_shape):
        return [("", 0, _prod(in_shape) if self.std > 0 else 0, in_shape)], in_shape


class Sequential(Module):
    def __init__(self, steps: Sequence[tuple[str, Module]]):
        super().__init__()
        self.order = []
        for name, mod in steps:
            self.child(name, mod)
            self.order.append(name)

    def forward(self, x):
        for name in self.order:
            x = self._children[name](x)
        return x

    def cost(self, in_shape):
        entries = []
        for name in self.order:
            sub, in_shape = self.child_cost(name, in_shape)
            entries.extend(sub)
        return entries, in_shape
