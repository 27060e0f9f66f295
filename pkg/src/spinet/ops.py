"""Network primitives: convolution, normalization, attention, resampling, loss.

Numerics conventions that matter here:

  * conv2d dispatches on dtype. f32 runs im2col + BLAS GEMM (fast path,
    matches the naive oracle to ~1e-7 relative). f64 runs a shift-and-
    accumulate loop whose per-element summation order (cin, kh, kw) matches
    conv2d_oracle exactly, so the two are bit-equal at f64.
  * Reductions whose summand order would change under a temporal permutation
    (attention softmax and value mixing, batch-norm statistics) accumulate in
    float64 before casting back, which keeps f32 outputs stable to well below
    the contractual 1e-6.
  * Both resamplers use half-pixel centers with edge clamping and compute in
    an anchored form (nearest sample plus weighted differences), so constant
    inputs are reproduced bit-exactly and size-preserving calls are identity.
"""

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError, StateError, ValidationError
from .tensor import Tensor, make


# -- convolution -----------------------------------------------------------------


def _conv_checks(x, w, b, stride, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} / {w.shape}")
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeError(f"conv2d bias shape {b.shape} does not match Cout={w.shape[0]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input Cin={x.shape[1]}, weight Cin={w.shape[1]}")
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError(f"conv2d stride must be a positive int, got {stride}")
    if not isinstance(pad, int) or pad < 0:
        raise ConfigError(f"conv2d pad must be a non-negative int, got {pad}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    return n, cin, h, wd, cout, kh, kw, oh, ow


def _pad_nchw(d, pad):
    if pad == 0:
        return d
    return np.pad(d, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, differentiable in x, w, b."""
    n, cin, h, wd, cout, kh, kw, oh, ow = _conv_checks(x, w, b, stride, pad)
    dt = x.dtype
    if w.dtype != dt or b.dtype != dt:
        raise ValidationError(f"conv2d dtype mismatch: {dt} vs {w.dtype}/{b.dtype}")
    xp = _pad_nchw(x.data, pad)

    if dt == np.float64:
        out = _conv_forward_seq(xp, w.data, b.data, stride, oh, ow)
    else:
        out = _conv_forward_gemm(xp, w.data, b.data, stride, oh, ow)

    def bwd(g):
        return _conv_backward(g, xp, x.data.shape, w.data, stride, pad, oh, ow)

    return make(out, (x, w, b), bwd, "conv2d")


def _tap_slice(i, j, stride, oh, ow):
    return (
        slice(i, i + stride * (oh - 1) + 1, stride),
        slice(j, j + stride * (ow - 1) + 1, stride),
    )


# channels-last im2col is used while cin*kh*kw stays below this; wider inputs
# switch to per-tap plane GEMMs (whose contraction is then long enough)
_IM2COL_MAX_K = 1536
_COL_CHUNK_BYTES = 96 * 1024 * 1024


def _conv_forward_gemm(xp, w, b, stride, oh, ow):
    out = _conv_forward_core(xp, w, stride, oh, ow)
    out += b[None, :, None, None]
    return out


def _conv_forward_core(xp, w, stride, oh, ow):
    cin, kh, kw = w.shape[1:]
    if cin * kh * kw <= _IM2COL_MAX_K:
        return _conv_forward_im2col(xp, w, stride, oh, ow)
    return _conv_forward_planes(xp, w, stride, oh, ow)


def _conv_forward_im2col(xp, w, stride, oh, ow):
    """Columns in channels-last order: one long-K GEMM per row chunk."""
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    k2ci = kh * kw * cin
    xpcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # [n, hp, wp, cin]
    wcl = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(k2ci, cout))
    out_cl = np.empty((n, oh, ow, cout), dtype=w.dtype)
    row_bytes = ow * k2ci * w.dtype.itemsize
    rows = max(1, int(_COL_CHUNK_BYTES // max(row_bytes, 1)))
    cols = np.empty((min(rows, oh) * ow, k2ci), dtype=w.dtype)
    for ni in range(n):
        for y0 in range(0, oh, rows):
            y1 = min(y0 + rows, oh)
            block = cols[: (y1 - y0) * ow].reshape(y1 - y0, ow, k2ci)
            for i in range(kh):
                for j in range(kw):
                    sy = slice(y0 * stride + i, (y1 - 1) * stride + i + 1, stride)
                    sx = slice(j, j + stride * (ow - 1) + 1, stride)
                    block[:, :, (i * kw + j) * cin : (i * kw + j + 1) * cin] = xpcl[ni, sy, sx, :]
            out_cl[ni, y0:y1] = (block.reshape(-1, k2ci) @ wcl).reshape(y1 - y0, ow, cout)
    return np.ascontiguousarray(out_cl.transpose(0, 3, 1, 2))


def _conv_forward_planes(xp, w, stride, oh, ow):
    """One full-plane GEMM per kernel tap, then shifted accumulation."""
    n, cin, hp, wp = xp.shape
    cout = w.shape[0]
    kh, kw = w.shape[2:]
    planes = xp.reshape(n, cin, hp * wp)
    out = np.zeros((n, cout, oh, ow), dtype=w.dtype)
    for i in range(kh):
        for j in range(kw):
            full = np.matmul(w[None, :, :, i, j], planes).reshape(n, cout, hp, wp)
            sy, sx = _tap_slice(i, j, stride, oh, ow)
            out += full[:, :, sy, sx]
    return out


def _conv_forward_seq(xp, w, b, stride, oh, ow):
    """Accumulate taps in (cin, kh, kw) order; bit-matches conv2d_oracle at f64."""
    n = xp.shape[0]
    cout, cin, kh, kw = w.shape
    out = np.empty((n, cout, oh, ow), dtype=w.dtype)
    out[:] = b[None, :, None, None]
    for ci in range(cin):
        for i in range(kh):
            for j in range(kw):
                sy, sx = _tap_slice(i, j, stride, oh, ow)
                xs = xp[:, ci, sy, sx]
                out += xs[:, None, :, :] * w[None, :, ci, i, j, None, None]
    return out


def _conv_backward(g, xp, x_shape, w, stride, pad, oh, ow):
    dt = w.dtype
    db = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
    dw = _conv_grad_weight(g, xp, w, stride, oh, ow)
    dx = _conv_grad_input(g, xp, x_shape, w, stride, pad, oh, ow)
    return dx, dw, db


def _conv_grad_weight(g, xp, w, stride, oh, ow):
    cout, cin, kh, kw = w.shape
    n = xp.shape[0]
    k2ci = kh * kw * cin
    dt = w.dtype
    g3 = g.reshape(n, cout, oh * ow)
    if k2ci > _IM2COL_MAX_K:
        g_cl = np.ascontiguousarray(g3.swapaxes(1, 2))  # [n, oh*ow, cout]
        dw = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                sy, sx = _tap_slice(i, j, stride, oh, ow)
                xs = np.ascontiguousarray(xp[:, :, sy, sx]).reshape(n, cin, oh * ow)
                dw[:, :, i, j] = np.matmul(xs, g_cl).sum(axis=0).T
        return dw
    xpcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    dwcl = np.zeros((k2ci, cout), dtype=np.float64)
    row_bytes = ow * k2ci * dt.itemsize
    rows = max(1, int(_COL_CHUNK_BYTES // max(row_bytes, 1)))
    cols = np.empty((min(rows, oh) * ow, k2ci), dtype=dt)
    for ni in range(n):
        for y0 in range(0, oh, rows):
            y1 = min(y0 + rows, oh)
            block = cols[: (y1 - y0) * ow].reshape(y1 - y0, ow, k2ci)
            for i in range(kh):
                for j in range(kw):
                    sy = slice(y0 * stride + i, (y1 - 1) * stride + i + 1, stride)
                    sx = slice(j, j + stride * (ow - 1) + 1, stride)
                    block[:, :, (i * kw + j) * cin : (i * kw + j + 1) * cin] = xpcl[ni, sy, sx, :]
            g_cl = g3[ni, :, y0 * ow : y1 * ow].T  # [rows*ow, cout]
            dwcl += block.reshape(-1, k2ci).T @ g_cl
    return np.ascontiguousarray(dwcl.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)).astype(dt)


def _conv_grad_input(g, xp, x_shape, w, stride, pad, oh, ow):
    """dL/dx as a stride-1 convolution of the (zero-inserted) output gradient
    with the flipped, channel-transposed kernel.

    The gradient of the zero-padded input is computed first (its extent always
    covers every tap the forward pass touched), then cropped by ``pad``.
    """
    n, cin, h, wd = x_shape
    cout, _, kh, kw = w.shape
    if stride > 1:
        gd = np.zeros((n, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    hh = gp.shape[2] - kh + 1  # rows of the padded input the forward pass read
    ww = gp.shape[3] - kw + 1
    part = _conv_forward_core(gp, wf, 1, hh, ww)
    hp, wp = h + 2 * pad, wd + 2 * pad
    if (hh, ww) == (hp, wp) and pad == 0:
        return part
    dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
    dxp[:, :, :hh, :ww] = part
    return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + wd])


def conv2d_oracle(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Naive six-nested-loop convolution; the reference conv2d is checked against.

    Accumulates each output element in a float64 scalar over (cin, kh, kw) in
    that order, starting from the bias. Not differentiable (verification only).
    """
    n, cin, h, wd, cout, kh, kw, oh, ow = _conv_checks(x, w, b, stride, pad)
    xp = _pad_nchw(x.data, pad)
    out = np.empty((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = float(b.data[co])
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += float(xp[ni, ci, oy * stride + i, ox * stride + j]) * float(
                                    w.data[co, ci, i, j]
                                )
                    out[ni, co, oy, ox] = acc
    return Tensor(out)


# -- batch normalization ------------------------------------------------------------


class BatchNormState:
    """Running statistics for one batch-norm layer (uninitialized until a train step).

    All fields are arrays (updated in place) so they can round-trip through
    checkpoints generically; ``batches`` counts train-mode updates.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches = np.zeros(1, dtype=dtype)

    @property
    def initialized(self):
        return self.batches[0] > 0


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [N,C,H,W] or [N,T,C,H,W] input.

    In the 5-D form statistics pool over batch, time and space together, so
    the layer stays temporally equivariant. Train mode normalizes by batch
    statistics (biased variance) and folds them into the running buffers;
    eval mode uses the running buffers and fails if none were ever written.
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be positive, got {eps}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim == 4:
        ch_axis, axes = 1, (0, 2, 3)
    elif x.ndim == 5:
        ch_axis, axes = 2, (0, 1, 3, 4)
    else:
        raise ShapeError(f"batch_norm expects 4-D or 5-D input, got {x.shape}")
    c = x.shape[ch_axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm gamma/beta must be [{c}], got {gamma.shape}/{beta.shape}")
    dt = x.dtype
    bshape = [1] * x.ndim
    bshape[ch_axis] = c
    d = x.data

    if mode == "train":
        mu = d.mean(axis=axes, dtype=np.float64)
        centered = d - mu.astype(dt).reshape(bshape)
        var = np.square(centered).mean(axis=axes, dtype=np.float64)
        inv = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = centered * inv.reshape(bshape)
        sdt = state.running_mean.dtype
        state.running_mean *= sdt.type(1.0 - momentum)
        state.running_mean += (momentum * mu).astype(sdt)
        state.running_var *= sdt.type(1.0 - momentum)
        state.running_var += (momentum * var).astype(sdt)
        state.batches += 1
    else:
        if not state.initialized:
            raise StateError("batch_norm eval mode before any train step (running stats uninitialized)")
        inv = (1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)).astype(dt)
        xhat = (d - state.running_mean.astype(dt).reshape(bshape)) * inv.reshape(bshape)

    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(dt)
        dbeta = g.sum(axis=axes, dtype=np.float64).astype(dt)
        scale = (gamma.data * inv).reshape(bshape)
        if mode == "eval":
            return np.ascontiguousarray(g * scale), dgamma, dbeta
        gm = g.mean(axis=axes, dtype=np.float64).astype(dt).reshape(bshape)
        gxm = (g * xhat).mean(axis=axes, dtype=np.float64).astype(dt).reshape(bshape)
        dx = scale * (g - gm - xhat * gxm)
        return np.ascontiguousarray(dx), dgamma, dbeta

    return make(out, (x, gamma, beta), bwd, "batch_norm")


# -- temporal self-attention -----------------------------------------------------------


def temporal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the middle (time) axis of [N,T,D].

    Computed internally in float64 so the softmax normalization and the value
    mixing do not pick up order-dependent rounding; permuting T therefore
    permutes the output bit-stably.
    """
    for t, nm in ((q, "q"), (k, "k"), (v, "v")):
        if t.ndim != 3:
            raise ShapeError(f"temporal_attention {nm} must be [N,T,D], got {t.shape}")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"temporal_attention shapes differ: {q.shape}/{k.shape}/{v.shape}")
    if q.shape[1] == 0:
        raise EmptyInputError("temporal_attention over zero frames")
    dt = q.dtype
    d = q.shape[2]
    scale = 1.0 / np.sqrt(float(d))
    q64 = q.data.astype(np.float64)
    k64 = k.data.astype(np.float64)
    v64 = v.data.astype(np.float64)
    s = np.matmul(q64, k64.swapaxes(-1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(attn, v64).astype(dt)

    def bwd(g):
        g64 = g.astype(np.float64)
        dv = np.matmul(attn.swapaxes(-1, -2), g64)
        da = np.matmul(g64, v64.swapaxes(-1, -2))
        ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, k64) * scale
        dk = np.matmul(ds.swapaxes(-1, -2), q64) * scale
        return dq.astype(dt), dk.astype(dt), dv.astype(dt)

    return make(out, (q, k, v), bwd, "temporal_attention")


# -- pixel shuffle ----------------------------------------------------------------------


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange [N, C*r*r, H, W] -> [N, C, r*H, r*W] (channel c*r*r + dy*r + dx
    lands on output pixel (y*r + dy, x*r + dx))."""
    if not isinstance(r, int) or r < 1:
        raise ConfigError(f"pixel_shuffle factor must be a positive int, got {r}")
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects 4-D input, got {x.shape}")
    n, crr, h, w = x.shape
    if crr % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {crr} channels not divisible by r^2={r * r}")
    c = crr // (r * r)
    out = np.ascontiguousarray(
        x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)
    )

    def bwd(g):
        return (_s2d_array(g, r),)

    return make(out, (x,), bwd, "pixel_shuffle")


def _s2d_array(d, r):
    n, c, hr, wr = d.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(d.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w))


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """Exact inverse of pixel_shuffle."""
    if not isinstance(r, int) or r < 1:
        raise ConfigError(f"space_to_depth factor must be a positive int, got {r}")
    if x.ndim != 4:
        raise ShapeError(f"space_to_depth expects 4-D input, got {x.shape}")
    n, c, hr, wr = x.shape
    if hr % r or wr % r:
        raise ShapeError(f"space_to_depth: spatial dims {hr}x{wr} not divisible by {r}")
    out = _s2d_array(x.data, r)

    def bwd(g):
        h, w = hr // r, wr // r
        return (
            np.ascontiguousarray(
                g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr)
            ),
        )

    return make(out, (x,), bwd, "space_to_depth")


# -- resampling ---------------------------------------------------------------------------


def _half_pixel_src(n_out, n_in):
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def _linear_taps(n_in, n_out):
    src = _half_pixel_src(n_out, n_in)
    i0 = np.floor(src).astype(np.int64)
    w = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, w


def _linear_matrix(n_in, n_out, dtype):
    lo, hi, w = _linear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), lo), 1.0 - w)
    np.add.at(m, (np.arange(n_out), hi), w)
    return m.astype(dtype)


def _lerp_axis(d, axis, lo, hi, w):
    a = np.take(d, lo, axis=axis)
    b = np.take(d, hi, axis=axis)
    shape = [1] * d.ndim
    shape[axis] = len(w)
    return a + w.astype(d.dtype).reshape(shape) * (b - a)


def bilinear_resample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers and edge clamping.

    The anchored lerp form reproduces constants exactly and is the identity
    when the target size equals the source size.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resample expects 4-D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear_resample target must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    ylo, yhi, wy = _linear_taps(h, out_h)
    xlo, xhi, wx = _linear_taps(w, out_w)
    tmp = _lerp_axis(x.data, 2, ylo, yhi, wy)
    out = _lerp_axis(tmp, 3, xlo, xhi, wx)

    def bwd(g):
        ah = _linear_matrix(h, out_h, x.dtype)
        aw = _linear_matrix(w, out_w, x.dtype)
        gx = np.einsum("yh,ncyx,xw->nchw", ah, g, aw, optimize=True)
        return (np.ascontiguousarray(gx),)

    return make(np.ascontiguousarray(out), (x,), bwd, "bilinear_resample")


def _cubic_kernel(s, a=-0.5):
    s = np.abs(s)
    w = np.where(
        s <= 1.0,
        (a + 2.0) * s**3 - (a + 3.0) * s**2 + 1.0,
        np.where(s < 2.0, a * (s**3 - 5.0 * s**2 + 8.0 * s - 4.0), 0.0),
    )
    return w


def _cubic_taps(n_in, n_out):
    src = _half_pixel_src(n_out, n_in)
    i1 = np.floor(src).astype(np.int64)
    t = src - i1
    idx = [np.clip(i1 + k, 0, n_in - 1) for k in (-1, 0, 1, 2)]
    wts = [_cubic_kernel(t + 1.0), _cubic_kernel(t), _cubic_kernel(1.0 - t), _cubic_kernel(2.0 - t)]
    return idx, wts


def _cubic_axis(d, axis, idx, wts):
    taps = [np.take(d, i, axis=axis) for i in idx]
    shape = [1] * d.ndim
    shape[axis] = len(wts[0])
    anchor = taps[1]
    out = anchor.copy()
    for k in (0, 2, 3):
        out += wts[k].astype(d.dtype).reshape(shape) * (taps[k] - anchor)
    return out


def _cubic_matrix(n_in, n_out, dtype):
    idx, wts = _cubic_taps(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for i, w in zip(idx, wts):
        np.add.at(m, (rows, i), w)
    return m.astype(dtype)


def bicubic_resample(x: Tensor, scale: int) -> Tensor:
    """Separable Catmull-Rom (a = -0.5) upscaling by an integer factor.

    Half-pixel centers, edge clamping; constants are reproduced exactly and
    interior samples of a linear ramp are interpolated exactly.
    """
    if not isinstance(scale, int) or scale < 1:
        raise ConfigError(f"bicubic_resample scale must be a positive int, got {scale}")
    if x.ndim != 4:
        raise ShapeError(f"bicubic_resample expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h * scale, w * scale
    yidx, ywts = _cubic_taps(h, oh)
    xidx, xwts = _cubic_taps(w, ow)
    tmp = _cubic_axis(x.data, 2, yidx, ywts)
    out = _cubic_axis(tmp, 3, xidx, xwts)

    def bwd(g):
        bh = _cubic_matrix(h, oh, x.dtype)
        bw_ = _cubic_matrix(w, ow, x.dtype)
        gx = np.einsum("yh,ncyx,xw->nchw", bh, g, bw_, optimize=True)
        return (np.ascontiguousarray(gx),)

    return make(np.ascontiguousarray(out), (x,), bwd, "bicubic_resample")


# -- per-frame dynamic filtering -------------------------------------------------------------


def frame_depthwise_filter(x: Tensor, filters: Tensor) -> Tensor:
    """Apply one K x K filter per (sample, frame) across all channels, zero-padded.

    x: [N,T,C,H,W], filters: [N,T,K,K] -> [N,T,C,H,W]. K must be odd so the
    filter has a center tap.
    """
    if x.ndim != 5:
        raise ShapeError(f"frame_depthwise_filter expects 5-D input, got {x.shape}")
    if filters.ndim != 4 or filters.shape[:2] != x.shape[:2]:
        raise ShapeError(f"filters must be [N,T,K,K] matching input, got {filters.shape} for {x.shape}")
    kh, kw = filters.shape[2:]
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"registration filter must be square with odd size, got {kh}x{kw}")
    n, t, c, h, w = x.shape
    p = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
    f = filters.data
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += f[:, :, i, j, None, None, None] * xp[:, :, :, i : i + h, j : j + w]

    def bwd(g):
        dxp = np.zeros_like(xp)
        df = np.empty_like(f)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, :, i : i + h, j : j + w] += f[:, :, i, j, None, None, None] * g
                df[:, :, i, j] = (g * xp[:, :, :, i : i + h, j : j + w]).sum(axis=(2, 3, 4), dtype=np.float64)
        dx = dxp[:, :, :, p : p + h, p : p + w]
        return np.ascontiguousarray(dx), df

    return make(out, (x, filters), bwd, "frame_depthwise_filter")


# -- loss -----------------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy from logits, in the overflow-safe softplus form.

    loss = mean( max(z,0) - z*t + log1p(exp(-|z|)) ); the gradient w.r.t. each
    logit is (sigmoid(z) - t) / count.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits shapes differ: {logits.shape} vs {targets.shape}")
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("bce_with_logits targets must be exactly 0 or 1")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    val = np.asarray(per.mean(dtype=np.float64), dtype=logits.dtype)

    def bwd(g):
        e = np.exp(-np.abs(z))
        sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        dz = ((sig - t) * (float(g) / count)).astype(logits.dtype)
        return dz, None

    return make(val, (logits, targets), bwd, "bce_with_logits")
