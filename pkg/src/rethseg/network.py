"""Encoder-decoder segmentation network built from separable convolutions.

The encoder is three downsampling stages of depthwise-separable convolutions
(norm + ReLU after the depthwise and the pointwise halves), each optionally
followed by a rethinker block on its output.  The decoder reduces the deepest
features with a 1x1 convolution, upsamples them to a low-level stage,
concatenates with reduced low-level features, refines with two separable
convolutions, and projects to class logits at the input resolution.

Slicing counts follow the quarter rule: at the configured input extent each
gridded stage cuts its map into tiles four pixels across, falling back to the
largest divisor that keeps tiles at least two pixels wide.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import ops
from .blocks import (
    BLOCK_VARIANTS,
    ConvLSTMParams,
    SEParams,
    rethinker_block,
)
from .errors import UsageError
from .tensor import Tensor, add, concat, get_dtype, mul_const, relu

__all__ = [
    "StageConfig",
    "RethNetConfig",
    "Model",
    "NormState",
    "build_model",
    "forward",
    "normalization_layer",
    "default_config",
    "quarter_rule",
]

NORM_MOMENTUM = 0.99
NORM_EPS = 1e-5


def quarter_rule(extent: int) -> int:
    """Slicing count for a stage extent: 4-pixel tiles when possible."""
    if extent % 4 == 0:
        return extent // 4
    best = 1
    for n in range(1, extent // 2 + 1):
        if extent % n == 0 and extent // n >= 2:
            best = n
    return best


@dataclass
class StageConfig:
    out_channels: int
    stride: int
    variant: str = "none"  # "none" or one of BLOCK_VARIANTS
    n: int = 1


@dataclass
class RethNetConfig:
    input_size: tuple[int, int, int] = (64, 64, 3)
    num_classes: int = 6
    stages: list[StageConfig] = field(default_factory=list)
    decoder_low_level_stage: int = 1
    decoder_channels: int = 32
    se_ratio: int = 4
    seed: int = 0

    def validate(self) -> None:
        h, w, c = self.input_size
        if h < 1 or w < 1 or c < 1:
            raise UsageError(f"bad input size {self.input_size}")
        if self.num_classes < 2:
            raise UsageError(f"need at least 2 classes, got {self.num_classes}")
        if not self.stages:
            raise UsageError("at least one stage is required")
        if self.se_ratio < 1:
            raise UsageError(f"se_ratio must be >= 1, got {self.se_ratio}")
        if not (0 <= self.decoder_low_level_stage < len(self.stages)):
            raise UsageError(
                f"decoder_low_level_stage {self.decoder_low_level_stage} outside "
                f"0..{len(self.stages) - 1}")
        if self.decoder_channels < 2:
            raise UsageError(f"decoder_channels must be >= 2, got {self.decoder_channels}")
        total = 1
        eh, ew = h, w
        for i, st in enumerate(self.stages):
            if st.out_channels < 1:
                raise UsageError(f"stage {i}: out_channels must be positive")
            if st.stride < 1:
                raise UsageError(f"stage {i}: stride must be >= 1")
            if st.variant != "none" and st.variant not in BLOCK_VARIANTS:
                raise UsageError(
                    f"stage {i}: unknown variant {st.variant!r}; "
                    f"expected 'none' or one of {BLOCK_VARIANTS}")
            if eh % st.stride or ew % st.stride:
                raise UsageError(
                    f"stage {i}: stride {st.stride} does not divide extent {eh}x{ew}")
            eh //= st.stride
            ew //= st.stride
            total *= st.stride
            if st.variant != "none":
                if st.n < 1:
                    raise UsageError(f"stage {i}: slicing count must be >= 1")
                if eh % st.n or ew % st.n:
                    raise UsageError(
                        f"stage {i}: slicing count {st.n} does not divide "
                        f"extent {eh}x{ew}")
                if st.out_channels % self.se_ratio:
                    raise UsageError(
                        f"stage {i}: out_channels {st.out_channels} not divisible "
                        f"by se_ratio {self.se_ratio}")
        if total not in (4, 8, 16):
            raise UsageError(f"output stride must be 4, 8 or 16, got {total}")

    def stage_extents(self, h: Optional[int] = None,
                      w: Optional[int] = None) -> list[tuple[int, int]]:
        eh = self.input_size[0] if h is None else h
        ew = self.input_size[1] if w is None else w
        out = []
        for st in self.stages:
            eh //= st.stride
            ew //= st.stride
            out.append((eh, ew))
        return out


def default_config(num_classes: int = 6, seed: int = 0,
                   variant: str = "rethinker_e") -> RethNetConfig:
    """Desk-scale default: 64x64x3 input, three stages, output stride 8."""
    return RethNetConfig(
        input_size=(64, 64, 3),
        num_classes=num_classes,
        stages=[
            StageConfig(16, 2, variant, quarter_rule(32)),
            StageConfig(32, 2, variant, quarter_rule(16)),
            StageConfig(64, 2, variant, quarter_rule(8)),
        ],
        decoder_low_level_stage=1,
        decoder_channels=32,
        se_ratio=4,
        seed=seed,
    )


@dataclass
class NormState:
    """Running statistics for one normalization layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "NormState":
        # buffers share the parameter precision so checkpoints keep every bit
        dt = get_dtype()
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))

    def update(self, mu: np.ndarray, var: np.ndarray) -> None:
        self.mean = NORM_MOMENTUM * self.mean + (1.0 - NORM_MOMENTUM) * mu
        self.var = NORM_MOMENTUM * self.var + (1.0 - NORM_MOMENTUM) * var


@dataclass
class Model:
    config: RethNetConfig
    params: dict[str, Tensor]
    norms: dict[str, NormState]

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None


def normalization_layer(x: Tensor, gamma: Tensor, beta: Tensor, train: bool,
                        state: NormState) -> Tensor:
    """Per-channel spatial normalization with running statistics.

    Training mode normalises with the statistics of the map itself and folds
    them into the running estimates; evaluation mode applies the stored ones.
    """
    if train:
        out, mu, var = ops.normalize_channels(x, gamma, beta, eps=NORM_EPS)
        state.update(mu, var)
        return out
    inv = 1.0 / np.sqrt(state.var + NORM_EPS)
    scaled_gamma = mul_const(gamma, inv.astype(gamma.data.dtype))
    shift = add(mul_const(scaled_gamma, (-state.mean).astype(gamma.data.dtype)), beta)
    return ops.add_channels(ops.scale_channels(x, scaled_gamma), shift)


# ---------------------------------------------------------------------------
# parameter initialisation


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    limit = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _init_sep_unit(params, norms, rng, prefix, cin, cout):
    params[f"{prefix}.dw"] = _uniform(rng, (3, 3, cin), 9)
    params[f"{prefix}.norm_dw.gamma"] = _ones((cin,))
    params[f"{prefix}.norm_dw.beta"] = _zeros((cin,))
    norms[f"{prefix}.norm_dw"] = NormState.fresh(cin)
    params[f"{prefix}.pw"] = _uniform(rng, (1, 1, cin, cout), cin)
    params[f"{prefix}.norm_pw.gamma"] = _ones((cout,))
    params[f"{prefix}.norm_pw.beta"] = _zeros((cout,))
    norms[f"{prefix}.norm_pw"] = NormState.fresh(cout)


def _init_block(params, rng, prefix, variant, depth, patch_hw, se_ratio):
    if variant == "baseline_c":
        params[f"{prefix}.core.k"] = _uniform(rng, (3, 3, depth, depth), 9 * depth)
    elif variant == "rethinker_d":
        params[f"{prefix}.core.k"] = _uniform(rng, (3, 3, 3, depth, depth), 27 * depth)
    elif variant == "rethinker_e":
        for gate in ("i", "f", "c", "o"):
            params[f"{prefix}.core.w_v{gate}"] = _uniform(rng, (3, 3, depth, depth), 9 * depth)
            params[f"{prefix}.core.w_h{gate}"] = _uniform(rng, (3, 3, depth, depth), 9 * depth)
        hp, wp = patch_hw
        for peep in ("ci", "cf", "co"):
            params[f"{prefix}.core.w_{peep}"] = _zeros((hp, wp, depth))
        params[f"{prefix}.core.b_i"] = _zeros((depth,))
        # a unit forget bias keeps early cell state from washing out
        params[f"{prefix}.core.b_f"] = _ones((depth,))
        params[f"{prefix}.core.b_c"] = _zeros((depth,))
        params[f"{prefix}.core.b_o"] = _zeros((depth,))
    hidden = depth // se_ratio
    params[f"{prefix}.se.w1"] = _uniform(rng, (depth, hidden), depth)
    params[f"{prefix}.se.b1"] = _zeros((hidden,))
    params[f"{prefix}.se.w2"] = _uniform(rng, (hidden, depth), hidden)
    params[f"{prefix}.se.b2"] = _zeros((depth,))


def build_model(cfg: RethNetConfig) -> Model:
    """Construct all parameters deterministically from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params: dict[str, Tensor] = {}
    norms: dict[str, NormState] = {}

    cin = cfg.input_size[2]
    extents = cfg.stage_extents()
    for i, st in enumerate(cfg.stages):
        cout = st.out_channels
        _init_sep_unit(params, norms, rng, f"stage{i}.sep1", cin, cout)
        _init_sep_unit(params, norms, rng, f"stage{i}.sep2", cout, cout)
        _init_sep_unit(params, norms, rng, f"stage{i}.sep3", cout, cout)
        if st.variant != "none":
            eh, ew = extents[i]
            _init_block(params, rng, f"stage{i}.block", st.variant, cout,
                        (eh // st.n, ew // st.n), cfg.se_ratio)
        cin = cout

    deep_c = cfg.stages[-1].out_channels
    low_c = cfg.stages[cfg.decoder_low_level_stage].out_channels
    dc = cfg.decoder_channels
    params["decoder.reduce_deep.pw"] = _uniform(rng, (1, 1, deep_c, dc), deep_c)
    params["decoder.reduce_deep.norm.gamma"] = _ones((dc,))
    params["decoder.reduce_deep.norm.beta"] = _zeros((dc,))
    norms["decoder.reduce_deep.norm"] = NormState.fresh(dc)
    low_dc = dc // 2
    params["decoder.reduce_low.pw"] = _uniform(rng, (1, 1, low_c, low_dc), low_c)
    params["decoder.reduce_low.norm.gamma"] = _ones((low_dc,))
    params["decoder.reduce_low.norm.beta"] = _zeros((low_dc,))
    norms["decoder.reduce_low.norm"] = NormState.fresh(low_dc)
    _init_sep_unit(params, norms, rng, "decoder.refine1", dc + low_dc, dc)
    _init_sep_unit(params, norms, rng, "decoder.refine2", dc, dc)
    params["decoder.cls.w"] = _uniform(rng, (1, 1, dc, cfg.num_classes), dc)
    params["decoder.cls.b"] = _zeros((cfg.num_classes,))
    return Model(config=cfg, params=params, norms=norms)


# ---------------------------------------------------------------------------
# forward pass


def _sep_unit(model: Model, x: Tensor, prefix: str, stride: int, train: bool) -> Tensor:
    p = model.params
    x = ops.depthwise_conv2d(x, p[f"{prefix}.dw"], stride=stride, padding="same")
    x = normalization_layer(x, p[f"{prefix}.norm_dw.gamma"], p[f"{prefix}.norm_dw.beta"],
                            train, model.norms[f"{prefix}.norm_dw"])
    x = relu(x)
    x = ops.conv2d(x, p[f"{prefix}.pw"])
    x = normalization_layer(x, p[f"{prefix}.norm_pw.gamma"], p[f"{prefix}.norm_pw.beta"],
                            train, model.norms[f"{prefix}.norm_pw"])
    return relu(x)


def _block_core(model: Model, i: int, variant: str):
    p = model.params
    if variant in ("baseline_c", "rethinker_d"):
        return p[f"stage{i}.block.core.k"]
    g = lambda name: p[f"stage{i}.block.core.{name}"]
    return ConvLSTMParams(
        w_vi=g("w_vi"), w_hi=g("w_hi"), w_vf=g("w_vf"), w_hf=g("w_hf"),
        w_vc=g("w_vc"), w_hc=g("w_hc"), w_vo=g("w_vo"), w_ho=g("w_ho"),
        w_ci=g("w_ci"), w_cf=g("w_cf"), w_co=g("w_co"),
        b_i=g("b_i"), b_f=g("b_f"), b_c=g("b_c"), b_o=g("b_o"),
    )


def _check_runtime_extent(cfg: RethNetConfig, h: int, w: int) -> None:
    total = 1
    for st in cfg.stages:
        total *= st.stride
    if h % total or w % total:
        raise UsageError(f"input extent {h}x{w} not divisible by output stride {total}")
    eh, ew = h, w
    for i, st in enumerate(cfg.stages):
        eh //= st.stride
        ew //= st.stride
        if st.variant != "none" and (eh % st.n or ew % st.n):
            raise UsageError(
                f"stage {i}: slicing count {st.n} does not divide runtime extent {eh}x{ew}")


def forward(model: Model, image: Tensor, train: bool = False) -> Tensor:
    """Logits ``(H, W, K)`` for an ``(H, W, C)`` image.

    The image must match the configured channel count and be spatially
    divisible by the output stride and by every stage's slicing count; any
    such extent is accepted, so crops train the same parameters the
    full-resolution evaluation uses.
    """
    cfg = model.config
    if image.ndim != 3 or image.shape[2] != cfg.input_size[2]:
        raise UsageError(
            f"input shape {image.shape} does not match configured channels "
            f"{cfg.input_size[2]}")
    h, w, _ = image.shape
    _check_runtime_extent(cfg, h, w)

    x = image
    stage_outputs = []
    for i, st in enumerate(cfg.stages):
        x = _sep_unit(model, x, f"stage{i}.sep1", 1, train)
        x = _sep_unit(model, x, f"stage{i}.sep2", 1, train)
        x = _sep_unit(model, x, f"stage{i}.sep3", st.stride, train)
        if st.variant != "none":
            se = SEParams(
                w1=model.params[f"stage{i}.block.se.w1"],
                b1=model.params[f"stage{i}.block.se.b1"],
                w2=model.params[f"stage{i}.block.se.w2"],
                b2=model.params[f"stage{i}.block.se.b2"],
            )
            x = rethinker_block(x, st.variant, st.n, _block_core(model, i, st.variant), se)
        stage_outputs.append(x)

    p = model.params
    low = stage_outputs[cfg.decoder_low_level_stage]
    deep = ops.conv2d(stage_outputs[-1], p["decoder.reduce_deep.pw"])
    deep = normalization_layer(deep, p["decoder.reduce_deep.norm.gamma"],
                               p["decoder.reduce_deep.norm.beta"], train,
                               model.norms["decoder.reduce_deep.norm"])
    deep = relu(deep)
    deep = ops.bilinear_resize(deep, low.shape[0], low.shape[1])
    lowr = ops.conv2d(low, p["decoder.reduce_low.pw"])
    lowr = normalization_layer(lowr, p["decoder.reduce_low.norm.gamma"],
                               p["decoder.reduce_low.norm.beta"], train,
                               model.norms["decoder.reduce_low.norm"])
    lowr = relu(lowr)
    y = concat((deep, lowr), axis=2)
    y = _sep_unit(model, y, "decoder.refine1", 1, train)
    y = _sep_unit(model, y, "decoder.refine2", 1, train)
    logits = ops.conv2d(y, p["decoder.cls.w"])
    logits = ops.add_channels(logits, p["decoder.cls.b"])
    return ops.bilinear_resize(logits, h, w)
