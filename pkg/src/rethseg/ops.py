"""Structured tensor operations: convolutions, pooling, resizing, losses.

Layout conventions, fixed across the package:

* feature maps are channels-last ``(H, W, C)``; volumetric maps ``(T, H, W, C)``
* 2-d kernels are ``(kh, kw, C_in, C_out)`` with odd spatial extents
* convolution means cross-correlation (no kernel flip)
* "same" padding keeps ``out = ceil(in / stride)`` and puts the extra pixel of
  an odd padding total on the bottom/right

Forward passes gather sliding windows and contract with one GEMM; backward
passes scatter through a loop over kernel taps, which stays vectorised over
the whole feature map.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _from_data, _record

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "depthwise_separable_conv",
    "conv3d",
    "global_avg_pool",
    "fully_connected",
    "bilinear_resize",
    "softmax_cross_entropy",
    "scale_channels",
    "add_channels",
    "normalize_channels",
]


def _same_extent(extent: int, stride: int, eff_k: int) -> tuple[int, int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + eff_k - extent, 0)
    lo = total // 2
    return out, lo, total - lo


def _check_conv_args(stride: int, padding: str, dilation: int) -> None:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same",
           dilation: int = 1) -> Tensor:
    """Cross-correlate ``(H, W, C_in)`` with ``(kh, kw, C_in, C_out)``."""
    xd, kd = x.data, kernel.data
    if xd.ndim != 3:
        raise ValueError(f"conv2d input must be (H, W, C), got shape {xd.shape}")
    if kd.ndim != 4:
        raise ValueError(f"conv2d kernel must be (kh, kw, C_in, C_out), got shape {kd.shape}")
    kh, kw, cin, cout = kd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[2] != cin:
        raise ValueError(f"input has {xd.shape[2]} channels, kernel expects {cin}")
    _check_conv_args(stride, padding, dilation)

    h, w, _ = xd.shape
    if kh == 1 and kw == 1 and stride == 1 and dilation == 1:
        return _conv1x1(x, kernel)

    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    if padding == "same":
        oh, pt, pb = _same_extent(h, stride, eff_h)
        ow, pl, pr = _same_extent(w, stride, eff_w)
    else:
        if h < eff_h or w < eff_w:
            raise ValueError(
                f"valid conv needs input >= {eff_h}x{eff_w}, got {h}x{w}")
        oh = (h - eff_h) // stride + 1
        ow = (w - eff_w) // stride + 1
        pt = pb = pl = pr = 0

    padded = pt or pb or pl or pr
    xp = np.pad(xd, ((pt, pb), (pl, pr), (0, 0))) if padded else xd
    win = sliding_window_view(xp, (eff_h, eff_w), axis=(0, 1))[::stride, ::stride]
    if dilation > 1:
        win = win[..., ::dilation, ::dilation]
    out = np.ascontiguousarray(np.tensordot(win, kd, axes=([3, 4, 2], [0, 1, 2])))
    res = _from_data(out)

    def bwd(g):
        gk = gx = None
        if kernel.requires_grad:
            gk = np.tensordot(win, g, axes=([0, 1], [0, 1])).transpose(1, 2, 0, 3)
            gk = np.ascontiguousarray(gk)
        if x.requires_grad:
            dcol = np.tensordot(g, kd, axes=([2], [3]))  # (oh, ow, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                ia = a * dilation
                for b in range(kw):
                    ib = b * dilation
                    gxp[ia:ia + stride * oh:stride,
                        ib:ib + stride * ow:stride] += dcol[:, :, a, b, :]
            gx = np.ascontiguousarray(gxp[pt:pt + h, pl:pl + w]) if padded else gxp
        return (gx, gk)

    return _record((x, kernel), res, bwd)


def _conv1x1(x: Tensor, kernel: Tensor) -> Tensor:
    xd, kd = x.data, kernel.data
    h, w, cin = xd.shape
    mat = kd[0, 0]
    out = xd.reshape(h * w, cin) @ mat
    res = _from_data(np.ascontiguousarray(out.reshape(h, w, mat.shape[1])))

    def bwd(g):
        gk = gx = None
        g2 = g.reshape(h * w, mat.shape[1])
        if kernel.requires_grad:
            gk = (xd.reshape(h * w, cin).T @ g2).reshape(kd.shape)
        if x.requires_grad:
            gx = np.ascontiguousarray((g2 @ mat.T).reshape(xd.shape))
        return (gx, gk)

    return _record((x, kernel), res, bwd)


def depthwise_conv2d(x: Tensor, dw_kernel: Tensor, stride: int = 1,
                     padding: str = "same") -> Tensor:
    """Per-channel convolution with a ``(kh, kw, C)`` kernel."""
    xd, kd = x.data, dw_kernel.data
    if xd.ndim != 3:
        raise ValueError(f"depthwise input must be (H, W, C), got shape {xd.shape}")
    if kd.ndim != 3:
        raise ValueError(f"depthwise kernel must be (kh, kw, C), got shape {kd.shape}")
    kh, kw, c = kd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[2] != c:
        raise ValueError(f"input has {xd.shape[2]} channels, kernel expects {c}")
    _check_conv_args(stride, padding, 1)

    h, w, _ = xd.shape
    if padding == "same":
        oh, pt, pb = _same_extent(h, stride, kh)
        ow, pl, pr = _same_extent(w, stride, kw)
    else:
        if h < kh or w < kw:
            raise ValueError(f"valid conv needs input >= {kh}x{kw}, got {h}x{w}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pt = pb = pl = pr = 0

    padded = pt or pb or pl or pr
    xp = np.pad(xd, ((pt, pb), (pl, pr), (0, 0))) if padded else xd
    out = np.zeros((oh, ow, c), dtype=xd.dtype)
    for a in range(kh):
        for b in range(kw):
            out += xp[a:a + stride * oh:stride, b:b + stride * ow:stride] * kd[a, b]
    res = _from_data(out)

    def bwd(g):
        gk = gx = None
        if dw_kernel.requires_grad:
            gk = np.zeros_like(kd)
            for a in range(kh):
                for b in range(kw):
                    view = xp[a:a + stride * oh:stride, b:b + stride * ow:stride]
                    gk[a, b] = (view * g).sum(axis=(0, 1))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[a:a + stride * oh:stride,
                        b:b + stride * ow:stride] += g * kd[a, b]
            gx = np.ascontiguousarray(gxp[pt:pt + h, pl:pl + w]) if padded else gxp
        return (gx, gk)

    return _record((x, dw_kernel), res, bwd)


def depthwise_separable_conv(x: Tensor, dw_kernel: Tensor, pw_kernel: Tensor,
                             stride: int = 1, padding: str = "same") -> Tensor:
    """Depthwise conv followed by a 1x1 pointwise conv."""
    pd = pw_kernel.data
    if pd.ndim != 4 or pd.shape[0] != 1 or pd.shape[1] != 1:
        raise ValueError(f"pointwise kernel must be (1, 1, C_in, C_out), got shape {pd.shape}")
    mid = depthwise_conv2d(x, dw_kernel, stride=stride, padding=padding)
    return conv2d(mid, pw_kernel)


def conv3d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlate ``(T, H, W, C_in)`` with ``(kt, kh, kw, C_in, C_out)``.

    Stride is fixed at 1; "same" padding applies to all three leading axes.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 4:
        raise ValueError(f"conv3d input must be (T, H, W, C), got shape {xd.shape}")
    if kd.ndim != 5:
        raise ValueError(f"conv3d kernel must be (kt, kh, kw, C_in, C_out), got shape {kd.shape}")
    kt, kh, kw, cin, cout = kd.shape
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kt}x{kh}x{kw}")
    if xd.shape[3] != cin:
        raise ValueError(f"input has {xd.shape[3]} channels, kernel expects {cin}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    t, h, w, _ = xd.shape
    if padding == "same":
        pads = ((kt // 2, kt // 2), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0))
        xp = np.pad(xd, pads)
        ot, oh, ow = t, h, w
    else:
        if t < kt or h < kh or w < kw:
            raise ValueError(f"valid conv needs input >= {kt}x{kh}x{kw}, got {t}x{h}x{w}")
        xp = xd
        ot, oh, ow = t - kt + 1, h - kh + 1, w - kw + 1

    win = sliding_window_view(xp, (kt, kh, kw), axis=(0, 1, 2))
    out = np.ascontiguousarray(np.tensordot(win, kd, axes=([4, 5, 6, 3], [0, 1, 2, 3])))
    res = _from_data(out)

    def bwd(g):
        gk = gx = None
        if kernel.requires_grad:
            gk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 3, 0, 4)
            gk = np.ascontiguousarray(gk)
        if x.requires_grad:
            dcol = np.tensordot(g, kd, axes=([3], [4]))  # (ot, oh, ow, kt, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        gxp[a:a + ot, b:b + oh, c:c + ow] += dcol[:, :, :, a, b, c, :]
            if padding == "same":
                gx = np.ascontiguousarray(
                    gxp[kt // 2:kt // 2 + t, kh // 2:kh // 2 + h, kw // 2:kw // 2 + w])
            else:
                gx = gxp
        return (gx, gk)

    return _record((x, kernel), res, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``(H, W, C) -> (C,)``."""
    xd = x.data
    if xd.ndim != 3:
        raise ValueError(f"global_avg_pool input must be (H, W, C), got shape {xd.shape}")
    h, w, c = xd.shape
    if h < 1 or w < 1:
        raise ValueError(f"empty spatial extent {h}x{w}")
    out = _from_data(xd.mean(axis=(0, 1)))

    def bwd(g):
        return (np.broadcast_to(g / (h * w), xd.shape).copy(),)

    return _record((x,), out, bwd)


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a vector: ``(C_in,) @ (C_in, C_out) + (C_out,)``."""
    xd, wd, bd = x.data, weights.data, bias.data
    if xd.ndim != 1 or wd.ndim != 2 or bd.ndim != 1:
        raise ValueError(
            f"fully_connected expects 1-d input, 2-d weights, 1-d bias; got "
            f"{xd.shape}, {wd.shape}, {bd.shape}")
    if xd.shape[0] != wd.shape[0] or wd.shape[1] != bd.shape[0]:
        raise ValueError(
            f"fully_connected shape mismatch: {xd.shape} x {wd.shape} + {bd.shape}")
    out = _from_data(xd @ wd + bd)

    def bwd(g):
        gx = wd @ g if x.requires_grad else None
        gw = np.outer(xd, g) if weights.requires_grad else None
        gb = g.copy() if bias.requires_grad else None
        return (gx, gw, gb)

    return _record((x, weights, bias), out, bwd)


_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    hit = _INTERP_CACHE.get(key)
    if hit is not None:
        return hit
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        for o in range(n_out):
            src = (o + 0.5) * n_in / n_out - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            i0 = min(int(np.floor(src)), n_in - 2)
            frac = src - i0
            m[o, i0] += 1.0 - frac
            m[o, i0 + 1] += frac
    _INTERP_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation of ``(H, W, C)`` maps, half-pixel centres.

    The operation is separable, so it is applied as two small dense matrix
    contractions; the adjoint is the exact transpose.  Resizing to the input
    extent returns the input unchanged.
    """
    xd = x.data
    if xd.ndim != 3:
        raise ValueError(f"bilinear_resize input must be (H, W, C), got shape {xd.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extent must be positive, got {out_h}x{out_w}")
    h, w, c = xd.shape
    if (out_h, out_w) == (h, w):
        return x
    rows = _interp_matrix(h, out_h, xd.dtype)
    cols = _interp_matrix(w, out_w, xd.dtype)
    tmp = np.tensordot(rows, xd, axes=(1, 0))            # (out_h, W, C)
    out = np.tensordot(cols, tmp, axes=(1, 1))           # (out_w, out_h, C)
    res = _from_data(np.ascontiguousarray(out.transpose(1, 0, 2)))

    def bwd(g):
        back = np.tensordot(rows, g, axes=(0, 0))        # (H, out_w, C)
        gx = np.tensordot(cols, back, axes=(0, 1))       # (W, H, C)
        return (np.ascontiguousarray(gx.transpose(1, 0, 2)),)

    return _record((x,), res, bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          ignore_index: int = 255) -> Tensor:
    """Mean per-pixel cross entropy of ``(H, W, K)`` logits.

    ``labels`` is an integer ``(H, W)`` map; pixels equal to ``ignore_index``
    contribute neither loss nor gradient.  The log-sum-exp is max-shifted.
    """
    ld = logits.data
    if ld.ndim != 3:
        raise ValueError(f"logits must be (H, W, K), got shape {ld.shape}")
    lab = np.asarray(labels)
    if lab.shape != ld.shape[:2]:
        raise ValueError(f"labels shape {lab.shape} does not match logits {ld.shape[:2]}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {lab.dtype}")
    k = ld.shape[2]
    scored = lab != ignore_index
    bad = scored & ((lab < 0) | (lab >= k))
    if bad.any():
        where = np.argwhere(bad)[0]
        raise ValueError(
            f"label {int(lab[tuple(where)])} at {tuple(int(v) for v in where)} "
            f"outside [0, {k})")
    count = int(scored.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every pixel is ignored")

    m = ld.max(axis=2)
    z = ld - m[..., None]
    lse = np.log(np.exp(z).sum(axis=2)) + m
    safe = np.where(scored, lab, 0)
    picked = np.take_along_axis(ld, safe[..., None], axis=2)[..., 0]
    per_pixel = lse - picked
    total = float((per_pixel * scored).sum())
    out = _from_data(np.asarray(total / count, dtype=ld.dtype))

    def bwd(g):
        soft = np.exp(ld - lse[..., None])
        hot = np.zeros_like(ld)
        np.put_along_axis(hot, safe[..., None], 1.0, axis=2)
        gl = (soft - hot) * scored[..., None]
        gl *= float(g) / count
        return (gl,)

    return _record((logits,), out, bwd)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each trailing-axis channel of ``x`` by scalar ``s[c]``."""
    xd, sd = x.data, s.data
    if sd.ndim != 1 or xd.ndim < 1 or xd.shape[-1] != sd.shape[0]:
        raise ValueError(
            f"scale_channels: input {xd.shape} incompatible with scale {sd.shape}")
    out = _from_data(xd * sd)
    lead = tuple(range(xd.ndim - 1))

    def bwd(g):
        gx = g * sd if x.requires_grad else None
        gs = (g * xd).sum(axis=lead) if s.requires_grad else None
        return (gx, gs)

    return _record((x, s), out, bwd)


def add_channels(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b[c]`` along the trailing axis."""
    xd, bd = x.data, b.data
    if bd.ndim != 1 or xd.ndim < 1 or xd.shape[-1] != bd.shape[0]:
        raise ValueError(
            f"add_channels: input {xd.shape} incompatible with bias {bd.shape}")
    out = _from_data(xd + bd)
    lead = tuple(range(xd.ndim - 1))

    def bwd(g):
        gb = g.sum(axis=lead) if b.requires_grad else None
        return (g, gb)

    return _record((x, b), out, bwd)


def normalize_channels(x: Tensor, gamma: Tensor, beta: Tensor,
                       eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise each channel over the spatial extent, then apply affine.

    Statistics come from the map itself (a batch of one).  Returns the output
    tensor together with the raw per-channel mean and (biased) variance so
    the caller can maintain running estimates.
    """
    xd, gd, bd = x.data, gamma.data, beta.data
    if xd.ndim != 3:
        raise ValueError(f"normalize_channels input must be (H, W, C), got shape {xd.shape}")
    c = xd.shape[2]
    if gd.shape != (c,) or bd.shape != (c,):
        raise ValueError(
            f"normalize_channels: gamma {gd.shape} / beta {bd.shape} do not match {c} channels")
    n = xd.shape[0] * xd.shape[1]
    mu = xd.mean(axis=(0, 1))
    centered = xd - mu
    var = (centered * centered).mean(axis=(0, 1))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = _from_data(xhat * gd + bd)

    def bwd(g):
        dbeta = g.sum(axis=(0, 1))
        dgamma = (g * xhat).sum(axis=(0, 1))
        gx = None
        if x.requires_grad:
            gx = (gd * inv / n) * (n * g - dbeta - xhat * dgamma)
        return (gx,
                dgamma if gamma.requires_grad else None,
                dbeta if beta.requires_grad else None)

    _record((x, gamma, beta), out, bwd)
    return out, mu, var
