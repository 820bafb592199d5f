"""Training loop, evaluation, and the block-variant ablation study.

Gradients are accumulated over ``batch_accum`` single-sample passes (the
per-sample loss is scaled by the group size, so the update sees the mean
gradient), then applied with classical momentum: ``v <- mu*v + g`` and
``p <- p - lr*v``, walking parameters in sorted name order.  The learning
rate starts at ``base_lr`` and divides by ``lr_drop_factor`` every
``lr_decay_epochs``.

Each epoch shuffles the training set, augments every sample, and runs a
full-resolution evaluation pass on the validation split.  ``last.ckpt`` is
rewritten after every epoch with the optimizer state and the exact RNG
state, so an interrupted run resumed from it continues bit-for-bit like an
uninterrupted one; ``best.ckpt`` tracks the highest validation mean IoU.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .configio import kv_bool, kv_float, kv_int, reject_unknown
from .data import (
    IGNORE_INDEX,
    CoOccurrenceSpec,
    SegSample,
    augment,
    paired_classes,
    window_oracle,
)
from .errors import NumericError, UsageError
from .metrics import ConfusionMatrix, miou, miou_of, per_class_iou, pixel_acc
from .network import Model, RethNetConfig, build_model, forward
from .ops import softmax_cross_entropy
from .tensor import Tape, Tensor, scale

__all__ = [
    "TrainConfig",
    "train_config_to_kv",
    "train_config_from_kv",
    "EpochStats",
    "TrainResult",
    "lr_at",
    "momentum_step",
    "fit",
    "predict",
    "EvalResult",
    "evaluate",
    "AblationRun",
    "AblationResult",
    "ablate",
]


@dataclass
class TrainConfig:
    epochs: int = 200
    base_lr: float = 1e-3
    momentum: float = 0.9
    batch_accum: int = 4
    crop: int = 48
    lr_decay_epochs: int = 50
    lr_drop_factor: float = 10.0
    seed: int = 0
    augment: bool = True  # False: samples pass through uncropped, no draws

    def validate(self) -> None:
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise UsageError(f"base_lr must be > 0, got {self.base_lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise UsageError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_accum < 1:
            raise UsageError(f"batch_accum must be >= 1, got {self.batch_accum}")
        if self.crop < 1:
            raise UsageError(f"crop must be >= 1, got {self.crop}")
        if self.lr_decay_epochs < 1:
            raise UsageError(f"lr_decay_epochs must be >= 1, got {self.lr_decay_epochs}")
        if self.lr_drop_factor <= 1.0:
            raise UsageError(f"lr_drop_factor must be > 1, got {self.lr_drop_factor}")


def train_config_to_kv(cfg: TrainConfig) -> dict[str, str]:
    return {
        "epochs": str(cfg.epochs),
        "base_lr": repr(cfg.base_lr),
        "momentum": repr(cfg.momentum),
        "batch_accum": str(cfg.batch_accum),
        "crop": str(cfg.crop),
        "lr_decay_epochs": str(cfg.lr_decay_epochs),
        "lr_drop_factor": repr(cfg.lr_drop_factor),
        "seed": str(cfg.seed),
        "augment": "true" if cfg.augment else "false",
    }


def train_config_from_kv(values: dict[str, str],
                         base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    kv = dict(values)
    values.clear()
    out = TrainConfig(
        epochs=kv_int(kv, "epochs", cfg.epochs),
        base_lr=kv_float(kv, "base_lr", cfg.base_lr),
        momentum=kv_float(kv, "momentum", cfg.momentum),
        batch_accum=kv_int(kv, "batch_accum", cfg.batch_accum),
        crop=kv_int(kv, "crop", cfg.crop),
        lr_decay_epochs=kv_int(kv, "lr_decay_epochs", cfg.lr_decay_epochs),
        lr_drop_factor=kv_float(kv, "lr_drop_factor", cfg.lr_drop_factor),
        seed=kv_int(kv, "seed", cfg.seed),
        augment=kv_bool(kv, "augment", cfg.augment),
    )
    reject_unknown(kv, "train config")
    out.validate()
    return out


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr / (cfg.lr_drop_factor ** (epoch // cfg.lr_decay_epochs))


def momentum_step(model: Model, velocities: dict[str, np.ndarray],
                  lr: float, momentum: float) -> None:
    for name in sorted(model.params):
        p = model.params[name]
        g = p.grad
        if g is None:
            raise NumericError(f"parameter {name!r} received no gradient")
        v = velocities[name]
        v *= momentum
        v += g
        p.data = p.data - lr * v


# ---------------------------------------------------------------------------
# evaluation


def predict(model: Model, image: np.ndarray) -> np.ndarray:
    """Class map ``(H, W)`` uint8 for one image, highest logit wins."""
    logits = forward(model, Tensor(image), train=False)
    return np.argmax(logits.data, axis=2).astype(np.uint8)


@dataclass
class EvalResult:
    cm: ConfusionMatrix
    miou: float
    pixel_acc: float
    iou: np.ndarray  # per class, NaN where absent


def evaluate(model: Model, samples: list[SegSample],
             ignore_index: int = IGNORE_INDEX) -> EvalResult:
    if not samples:
        raise UsageError("evaluate needs at least one sample")
    cm = ConfusionMatrix(model.config.num_classes)
    for s in samples:
        cm.accumulate(predict(model, s.image), s.mask, ignore_index=ignore_index)
    return EvalResult(cm=cm, miou=miou(cm), pixel_acc=pixel_acc(cm),
                      iou=per_class_iou(cm))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_miou: float
    val_pixel_acc: float
    seconds: float
    is_best: bool


@dataclass
class TrainResult:
    model: Model
    history: list[EpochStats]
    best_score: float
    best_epoch: int


def _epoch_line(st: EpochStats) -> str:
    return (f"epoch={st.epoch} lr={st.lr:g} train_loss={st.train_loss:.4f} "
            f"val_miou={st.val_miou:.4f} val_pixel_acc={st.val_pixel_acc:.4f} "
            f"best={'yes' if st.is_best else 'no'} seconds={st.seconds:.1f}")


def fit(train_samples: list[SegSample], val_samples: list[SegSample],
        cfg: TrainConfig, *, model: Model | None = None,
        model_cfg: RethNetConfig | None = None, out_dir=None,
        resume: bool = False, log=None) -> TrainResult:
    """Train a model; see the module docstring for the exact procedure.

    Exactly one source provides the model: ``resume`` reloads everything
    from ``out_dir/last.ckpt``, otherwise ``model`` is trained in place,
    otherwise one is built from ``model_cfg``.  Checkpoints are written
    only when ``out_dir`` is set.
    """
    cfg.validate()
    if not train_samples or not val_samples:
        raise UsageError("training needs non-empty train and val sample lists")

    if resume:
        if out_dir is None:
            raise UsageError("resume needs an output directory with last.ckpt")
        ckpt = load_checkpoint(Path(out_dir) / "last.ckpt")
        model = restore_model(ckpt)
        velocities = {}
        for name, p in model.named_parameters():
            v = ckpt.velocities.get(name)
            if v is None:
                raise UsageError(f"checkpoint has no optimizer state for {name!r}")
            velocities[name] = np.asarray(v, dtype=p.data.dtype).copy()
        rng = np.random.Generator(np.random.PCG64())
        if ckpt.rng_state is None:
            raise UsageError("checkpoint has no rng state; cannot resume exactly")
        rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch
        best_score = ckpt.best_score
    else:
        if model is None:
            if model_cfg is None:
                raise UsageError("fit needs a model or a model config")
            model = build_model(model_cfg)
        velocities = {name: np.zeros(p.shape, dtype=p.data.dtype)
                      for name, p in model.named_parameters()}
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        start_epoch = 0
        best_score = -math.inf

    history: list[EpochStats] = []
    best_epoch = -1
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(train_samples))
        loss_total = 0.0
        for g0 in range(0, len(order), cfg.batch_accum):
            group = order[g0:g0 + cfg.batch_accum]
            inv = 1.0 / len(group)
            for idx in group:
                s = train_samples[int(idx)]
                if cfg.augment:
                    s = augment(s, rng, (cfg.crop, cfg.crop))
                with Tape() as tape:
                    logits = forward(model, Tensor(s.image), train=True)
                    loss = softmax_cross_entropy(logits, s.mask,
                                                 ignore_index=IGNORE_INDEX)
                    value = float(loss.item())
                    if not math.isfinite(value):
                        raise NumericError(
                            f"training loss became non-finite ({value}) at "
                            f"epoch {epoch}, sample {int(idx)}")
                    tape.backward(scale(loss, inv))
                loss_total += value
            momentum_step(model, velocities, lr, cfg.momentum)
            model.zero_grads()

        ev = evaluate(model, val_samples)
        is_best = ev.miou > best_score
        if is_best:
            best_score = ev.miou
            best_epoch = epoch
        stats = EpochStats(epoch=epoch, lr=lr, train_loss=loss_total / len(order),
                           val_miou=ev.miou, val_pixel_acc=ev.pixel_acc,
                           seconds=time.perf_counter() - t0, is_best=is_best)
        history.append(stats)
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", model, epoch=epoch + 1,
                            best_score=best_score, velocities=velocities,
                            rng_state=rng.bit_generator.state)
            if is_best:
                save_checkpoint(out_dir / "best.ckpt", model, epoch=epoch + 1,
                                best_score=best_score, velocities=velocities,
                                rng_state=rng.bit_generator.state)
        if log is not None:
            log(_epoch_line(stats))

    return TrainResult(model=model, history=history, best_score=best_score,
                       best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# ablation study


@dataclass
class AblationRun:
    variant: str
    seed: int
    miou: float
    paired_miou: float
    pixel_acc: float
    seconds: float


@dataclass
class AblationResult:
    runs: list[AblationRun]
    oracle_miou: float
    oracle_paired_miou: float

    def variants(self) -> list[str]:
        seen = []
        for r in self.runs:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def scores(self, variant: str, field_name: str = "miou") -> np.ndarray:
        vals = [getattr(r, field_name) for r in self.runs if r.variant == variant]
        if not vals:
            raise UsageError(f"no runs for variant {variant!r}")
        return np.asarray(vals, dtype=np.float64)

    def stats(self, variant: str, field_name: str = "miou") -> tuple[float, float]:
        vals = self.scores(variant, field_name)
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        return float(vals.mean()), sd

    def separation(self, a: str, b: str) -> tuple[float, float]:
        """Mean difference ``a - b`` and the pooled per-seed deviation."""
        mean_a, sd_a = self.stats(a)
        mean_b, sd_b = self.stats(b)
        pooled = math.sqrt(0.5 * (sd_a ** 2 + sd_b ** 2))
        return mean_a - mean_b, pooled


def _with_variant(cfg: RethNetConfig, variant: str, seed: int) -> RethNetConfig:
    stages = [replace(st, variant=variant if st.variant != "none" else "none")
              for st in cfg.stages]
    return replace(cfg, stages=stages, seed=seed)


def ablate(train_samples: list[SegSample], val_samples: list[SegSample],
           test_samples: list[SegSample], data_spec: CoOccurrenceSpec,
           model_cfg: RethNetConfig, cfg: TrainConfig,
           variants: list[str], seeds: list[int], log=None) -> AblationResult:
    """Train every (variant, seed) pair and score the final models on test.

    Block placement comes from ``model_cfg``: each stage that carries a
    block gets its variant swapped per run, stages marked ``none`` stay
    block-free.  The local-window reference classifier is scored on the
    same test split for comparison.
    """
    if not variants:
        raise UsageError("ablate needs at least one variant")
    if not seeds:
        raise UsageError("ablate needs at least one seed")
    if all(st.variant == "none" for st in model_cfg.stages):
        raise UsageError("model config has no block-carrying stage to ablate")
    pairs = paired_classes(data_spec)

    runs: list[AblationRun] = []
    for variant in variants:
        for seed in seeds:
            t0 = time.perf_counter()
            run_cfg = _with_variant(model_cfg, variant, seed)
            run_train = replace(cfg, seed=seed)
            result = fit(train_samples, val_samples, run_train,
                         model_cfg=run_cfg, log=log)
            ev = evaluate(result.model, test_samples)
            run = AblationRun(
                variant=variant, seed=seed, miou=ev.miou,
                paired_miou=miou_of(ev.cm, pairs), pixel_acc=ev.pixel_acc,
                seconds=time.perf_counter() - t0)
            runs.append(run)
            if log is not None:
                log(f"run variant={run.variant} seed={run.seed} "
                    f"miou={run.miou:.4f} paired_miou={run.paired_miou:.4f} "
                    f"seconds={run.seconds:.1f}")

    oracle_cm = ConfusionMatrix(data_spec.k)
    for s in test_samples:
        oracle_cm.accumulate(window_oracle(s.image, data_spec), s.mask,
                             ignore_index=IGNORE_INDEX)
    return AblationResult(runs=runs, oracle_miou=miou(oracle_cm),
                          oracle_paired_miou=miou_of(oracle_cm, pairs))
