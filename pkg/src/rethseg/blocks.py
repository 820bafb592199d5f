"""Residual blocks that re-examine a feature map object by object.

Each block computes ``u + SE(u) * core(u)``.  The core is one of:

* ``baseline_c``   - a plain 3x3 convolution
* ``rethinker_d``  - a 3-d convolution over the raster patch sequence
* ``rethinker_e``  - a convolutional LSTM stepped across the patch sequence

The ConvLSTM uses peephole connections: the input and forget gates read the
previous cell state, the output gate reads the fresh one.  With ``v`` the
current patch and ``(h, c)`` the carried state:

    i   = sigmoid(w_vi * v + w_hi * h + w_ci . c + b_i)
    f   = sigmoid(w_vf * v + w_hf * h + w_cf . c + b_f)
    c'  = f . c + i . tanh(w_vc * v + w_hc * h + b_c)
    o   = sigmoid(w_vo * v + w_ho * h + w_co . c' + b_o)
    h'  = o . tanh(c')

where ``*`` is a same-padded convolution and ``.`` the Hadamard product.
State starts at zero, so patch ``t`` only ever sees patches ``<= t``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import ops
from .patches import PatchSequence, image2patches, patches2image
from .tensor import Tensor, add, concat, mul, relu, sigmoid, slice_channels, stack0, take0, tanh

__all__ = [
    "BLOCK_VARIANTS",
    "SEParams",
    "ConvLSTMParams",
    "ConvLSTMState",
    "StepDetail",
    "se_gate",
    "se_apply",
    "convlstm_step",
    "convlstm_step_detail",
    "local_convlstm",
    "local_conv3d",
    "rethinker_block",
]

BLOCK_VARIANTS = ("baseline_c", "rethinker_d", "rethinker_e")


@dataclass
class SEParams:
    """Squeeze-and-excitation weights: pool -> fc1 -> relu -> fc2 -> sigmoid."""

    w1: Tensor  # (D, D // r)
    b1: Tensor  # (D // r,)
    w2: Tensor  # (D // r, D)
    b2: Tensor  # (D,)

    def depth(self) -> int:
        return self.w1.shape[0]


def se_gate(u: Tensor, p: SEParams) -> Tensor:
    """Per-channel gate in (0, 1) from globally pooled statistics."""
    if u.ndim != 3 or u.shape[2] != p.depth():
        raise ValueError(
            f"se_gate: input shape {u.shape} does not match gate depth {p.depth()}")
    squeezed = ops.global_avg_pool(u)
    hidden = relu(ops.fully_connected(squeezed, p.w1, p.b1))
    return sigmoid(ops.fully_connected(hidden, p.w2, p.b2))


def se_apply(u: Tensor, gate: Tensor) -> Tensor:
    """Scale each channel of ``u`` by the matching gate entry."""
    if gate.ndim != 1 or u.shape[-1] != gate.shape[0]:
        raise ValueError(
            f"se_apply: gate shape {gate.shape} does not match input {u.shape}")
    return ops.scale_channels(u, gate)


@dataclass
class ConvLSTMParams:
    """Gate kernels ``(k, k, D, D)``, peepholes ``(H', W', D)``, biases ``(D,)``."""

    w_vi: Tensor
    w_hi: Tensor
    w_vf: Tensor
    w_hf: Tensor
    w_vc: Tensor
    w_hc: Tensor
    w_vo: Tensor
    w_ho: Tensor
    w_ci: Tensor
    w_cf: Tensor
    w_co: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    def depth(self) -> int:
        return self.w_vi.shape[3]

    def peephole_extent(self) -> tuple[int, int]:
        return self.w_ci.shape[0], self.w_ci.shape[1]

    def validate(self) -> None:
        k0, k1, din, d = self.w_vi.shape
        for name in ("w_vi", "w_hi", "w_vf", "w_hf", "w_vc", "w_hc", "w_vo", "w_ho"):
            shape = getattr(self, name).shape
            if shape != (k0, k1, d, d):
                raise ValueError(f"{name} shape {shape} != {(k0, k1, d, d)}")
        if din != d:
            raise ValueError(f"gate kernels must map D -> D, got {din} -> {d}")
        ph, pw = self.peephole_extent()
        for name in ("w_ci", "w_cf", "w_co"):
            shape = getattr(self, name).shape
            if shape != (ph, pw, d):
                raise ValueError(f"{name} shape {shape} != {(ph, pw, d)}")
        for name in ("b_i", "b_f", "b_c", "b_o"):
            shape = getattr(self, name).shape
            if shape != (d,):
                raise ValueError(f"{name} shape {shape} != {(d,)}")


@dataclass
class ConvLSTMState:
    h: Tensor  # (H', W', D)
    c: Tensor  # (H', W', D)


@dataclass
class StepDetail:
    """Everything one recurrence step computes, for inspection in tests."""

    i: Tensor
    f: Tensor
    o: Tensor
    c: Tensor
    h: Tensor


def _fuse_gate_kernels(p: ConvLSTMParams) -> tuple[Tensor, Tensor, Tensor]:
    """Stack the gate kernels of each stream along the output channels.

    Gate order is i, f, candidate, o.  Keeping the input and hidden streams
    as two separate convolutions (rather than one over a channel concat)
    keeps the pre-activation grouping ``(Wv*v + Wh*h) + b`` explicit, so the
    scalar case reduces to plain rounded float arithmetic; the total work is
    the same either way.
    """
    kv = concat((p.w_vi, p.w_vf, p.w_vc, p.w_vo), axis=3)
    kh = concat((p.w_hi, p.w_hf, p.w_hc, p.w_ho), axis=3)
    bias = concat((p.b_i, p.b_f, p.b_c, p.b_o), axis=0)
    return kv, kh, bias


def convlstm_step_detail(v: Tensor, state: ConvLSTMState, p: ConvLSTMParams,
                         _fused: Optional[tuple[Tensor, Tensor, Tensor]] = None,
                         ) -> StepDetail:
    """Advance the recurrence by one patch, returning the gates as well."""
    d = p.depth()
    if v.ndim != 3 or v.shape[2] != d:
        raise ValueError(f"step input shape {v.shape} does not match depth {d}")
    if state.h.shape != v.shape or state.c.shape != v.shape:
        raise ValueError(
            f"state shapes {state.h.shape}/{state.c.shape} do not match input {v.shape}")
    if p.peephole_extent() != v.shape[:2]:
        raise ValueError(
            f"peephole extent {p.peephole_extent()} does not match patch {v.shape[:2]}")

    kv, kh, bias = _fuse_gate_kernels(p) if _fused is None else _fused
    z = add(ops.conv2d(v, kv, padding="same"), ops.conv2d(state.h, kh, padding="same"))
    z = ops.add_channels(z, bias)
    zi = slice_channels(z, 0, d)
    zf = slice_channels(z, d, 2 * d)
    zc = slice_channels(z, 2 * d, 3 * d)
    zo = slice_channels(z, 3 * d, 4 * d)

    i = sigmoid(add(zi, mul(p.w_ci, state.c)))
    f = sigmoid(add(zf, mul(p.w_cf, state.c)))
    c_new = add(mul(f, state.c), mul(i, tanh(zc)))
    o = sigmoid(add(zo, mul(p.w_co, c_new)))
    h_new = mul(o, tanh(c_new))
    return StepDetail(i=i, f=f, o=o, c=c_new, h=h_new)


def convlstm_step(v: Tensor, state: ConvLSTMState, p: ConvLSTMParams,
                  _fused: Optional[tuple[Tensor, Tensor, Tensor]] = None) -> ConvLSTMState:
    """Advance the recurrence by one patch."""
    detail = convlstm_step_detail(v, state, p, _fused=_fused)
    return ConvLSTMState(h=detail.h, c=detail.c)


def _adapt_peepholes(p: ConvLSTMParams, hp: int, wp: int) -> ConvLSTMParams:
    # Peepholes are stored at the extent the model was configured for; a
    # forward pass at another valid size interpolates them to fit.
    if p.peephole_extent() == (hp, wp):
        return p
    return replace(
        p,
        w_ci=ops.bilinear_resize(p.w_ci, hp, wp),
        w_cf=ops.bilinear_resize(p.w_cf, hp, wp),
        w_co=ops.bilinear_resize(p.w_co, hp, wp),
    )


def local_convlstm(u: Tensor, n: int, p: ConvLSTMParams) -> Tensor:
    """Run the ConvLSTM over the raster patch sequence of ``u``.

    The state is zero-initialised, every patch advances it once, and the
    emitted hidden maps are reassembled in place of their patches.
    """
    if u.ndim != 3 or u.shape[2] != p.depth():
        raise ValueError(f"local_convlstm: input {u.shape} does not match depth {p.depth()}")
    seq = image2patches(u, n)
    hp, wp = seq.patch_h, seq.patch_w
    params = _adapt_peepholes(p, hp, wp)
    fused = _fuse_gate_kernels(params)
    state = ConvLSTMState(
        h=Tensor(np.zeros((hp, wp, p.depth()), dtype=u.data.dtype)),
        c=Tensor(np.zeros((hp, wp, p.depth()), dtype=u.data.dtype)),
    )
    outputs = []
    for t in range(n * n):
        state = convlstm_step(take0(seq.patches, t), state, params, _fused=fused)
        outputs.append(state.h)
    stacked = stack0(outputs)
    return patches2image(PatchSequence(stacked, n, seq.original_h, seq.original_w))


def local_conv3d(u: Tensor, n: int, kernel: Tensor) -> Tensor:
    """Convolve the raster patch sequence of ``u`` with a 3-d kernel."""
    if u.ndim != 3:
        raise ValueError(f"local_conv3d input must be (H, W, D), got shape {u.shape}")
    if kernel.ndim != 5 or kernel.shape[3] != kernel.shape[4] or kernel.shape[3] != u.shape[2]:
        raise ValueError(
            f"local_conv3d kernel {kernel.shape} must be (kt, kh, kw, D, D) with D={u.shape[2]}")
    seq = image2patches(u, n)
    mixed = ops.conv3d(seq.patches, kernel, padding="same")
    return patches2image(PatchSequence(mixed, n, seq.original_h, seq.original_w))


CoreParams = Union[Tensor, ConvLSTMParams]


def rethinker_block(u: Tensor, variant: str, n: int, core: CoreParams,
                    se: SEParams) -> Tensor:
    """Residual block: input plus the SE-gated core response."""
    if variant not in BLOCK_VARIANTS:
        raise ValueError(f"unknown block variant {variant!r}, expected one of {BLOCK_VARIANTS}")
    if variant == "baseline_c":
        if not isinstance(core, Tensor) or core.ndim != 4:
            raise ValueError("baseline_c core must be a (k, k, D, D) kernel tensor")
        core_out = ops.conv2d(u, core, padding="same")
    elif variant == "rethinker_d":
        if not isinstance(core, Tensor) or core.ndim != 5:
            raise ValueError("rethinker_d core must be a (kt, kh, kw, D, D) kernel tensor")
        core_out = local_conv3d(u, n, core)
    else:
        if not isinstance(core, ConvLSTMParams):
            raise ValueError("rethinker_e core must be ConvLSTMParams")
        core_out = local_convlstm(u, n, core)
    gate = se_gate(u, se)
    return add(u, se_apply(core_out, gate))
