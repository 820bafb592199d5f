"""Optimizer math, the fit loop, resume exactness, and ablation bookkeeping."""

import numpy as np
import pytest

from rethseg.data import CoOccurrenceSpec, generate_sample
from rethseg.errors import NumericError, UsageError
from rethseg.network import Model, RethNetConfig, StageConfig, build_model
from rethseg.tensor import Tensor
from rethseg.train import (
    AblationResult,
    AblationRun,
    TrainConfig,
    ablate,
    evaluate,
    fit,
    lr_at,
    momentum_step,
    predict,
    train_config_from_kv,
    train_config_to_kv,
)


def _tiny_model_cfg(variant="baseline_c", seed=0):
    return RethNetConfig(
        input_size=(32, 32, 3),
        num_classes=6,
        stages=[StageConfig(8, 2, variant, 4),
                StageConfig(16, 2, variant, 2)],
        decoder_low_level_stage=0,
        decoder_channels=8,
        se_ratio=4,
        seed=seed,
    )


def _tiny_data(n_train=4, n_val=2, n_test=0):
    spec = CoOccurrenceSpec(size=32)
    scenes = [generate_sample(spec, i) for i in range(n_train + n_val + n_test)]
    train = scenes[:n_train]
    val = scenes[n_train:n_train + n_val]
    test = scenes[n_train + n_val:]
    return spec, train, val, test


def _tiny_train_cfg(**overrides):
    kw = dict(epochs=2, base_lr=1e-3, momentum=0.9, batch_accum=2,
              crop=24, lr_decay_epochs=50, seed=0, augment=True)
    kw.update(overrides)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# schedule and optimizer


def test_lr_schedule_hits_the_published_values_exactly():
    cfg = TrainConfig()
    assert lr_at(cfg, 0) == 0.001
    assert lr_at(cfg, 50) == 0.0001
    assert lr_at(cfg, 100) == 1e-05
    assert lr_at(cfg, 150) == 1e-06
    assert lr_at(cfg, 49) == 0.001
    assert lr_at(cfg, 149) == 1e-05
    with pytest.raises(UsageError, match="epoch"):
        lr_at(cfg, -1)


def test_lr_schedule_respects_the_decay_interval():
    cfg = TrainConfig(base_lr=0.5, lr_decay_epochs=3)
    assert [lr_at(cfg, e) for e in range(7)] == [0.5] * 3 + [0.05] * 3 + [0.005]
    halving = TrainConfig(base_lr=1.0, lr_decay_epochs=2, lr_drop_factor=2.0)
    assert [lr_at(halving, e) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


def test_momentum_step_matches_hand_computation():
    p0 = np.array([1.0, -2.0], dtype=np.float32)
    q0 = np.array([[0.5]], dtype=np.float32)
    model = Model(config=None, norms={}, params={
        "b": Tensor(p0.copy(), requires_grad=True),
        "a": Tensor(q0.copy(), requires_grad=True),
    })
    vel = {"a": np.zeros((1, 1), dtype=np.float32),
           "b": np.zeros(2, dtype=np.float32)}
    g1 = {"a": np.array([[2.0]], dtype=np.float32),
          "b": np.array([0.5, 1.0], dtype=np.float32)}
    g2 = {"a": np.array([[-1.0]], dtype=np.float32),
          "b": np.array([0.25, 0.0], dtype=np.float32)}
    lr, mu = np.float32(0.1), 0.9

    for name in model.params:
        model.params[name].grad = g1[name]
    momentum_step(model, vel, lr, mu)
    for name in model.params:
        model.params[name].grad = g2[name]
    momentum_step(model, vel, lr, mu)

    for name, start in (("a", q0), ("b", p0)):
        v1 = g1[name]
        p1 = start - lr * v1
        v2 = np.float32(mu) * v1 + g2[name]
        p2 = p1 - lr * v2
        assert np.array_equal(vel[name], v2), name
        assert np.array_equal(model.params[name].data, p2), name


def test_momentum_step_requires_every_gradient():
    model = Model(config=None, norms={}, params={
        "a": Tensor(np.zeros(2), requires_grad=True),
    })
    with pytest.raises(NumericError, match="'a' received no gradient"):
        momentum_step(model, {"a": np.zeros(2, dtype=np.float32)}, 0.1, 0.9)


# ---------------------------------------------------------------------------
# config plumbing


def test_train_config_kv_round_trip():
    cfg = TrainConfig(epochs=7, base_lr=0.025, momentum=0.85, batch_accum=3,
                      crop=40, lr_decay_epochs=4, lr_drop_factor=4.0, seed=9,
                      augment=False)
    assert train_config_from_kv(train_config_to_kv(cfg)) == cfg


def test_train_config_rejects_bad_values():
    with pytest.raises(UsageError, match="unknown"):
        train_config_from_kv({"warmup": "5"})
    for kv, msg in [({"epochs": "0"}, "epochs"),
                    ({"momentum": "1.0"}, "momentum"),
                    ({"base_lr": "0"}, "base_lr"),
                    ({"batch_accum": "0"}, "batch_accum"),
                    ({"crop": "0"}, "crop"),
                    ({"lr_decay_epochs": "0"}, "lr_decay_epochs"),
                    ({"lr_drop_factor": "1.0"}, "lr_drop_factor")]:
        with pytest.raises(UsageError, match=msg):
            train_config_from_kv(kv)


# ---------------------------------------------------------------------------
# fit


def test_fit_runs_and_reports_history(tmp_path):
    _, train, val, _ = _tiny_data()
    result = fit(train, val, _tiny_train_cfg(), model_cfg=_tiny_model_cfg(),
                 out_dir=tmp_path)
    assert len(result.history) == 2
    for st in result.history:
        assert np.isfinite(st.train_loss)
        assert 0.0 <= st.val_pixel_acc <= 1.0
        assert st.lr == 0.001
    assert result.best_epoch == max(
        (st.epoch for st in result.history if st.is_best), default=-1)
    assert (tmp_path / "last.ckpt").exists()
    assert (tmp_path / "best.ckpt").exists()


def test_fit_is_reproducible_per_seed():
    _, train, val, _ = _tiny_data()
    a = fit(train, val, _tiny_train_cfg(), model_cfg=_tiny_model_cfg())
    b = fit(train, val, _tiny_train_cfg(), model_cfg=_tiny_model_cfg())
    for name, p in a.model.named_parameters():
        assert np.array_equal(p.data, b.model.params[name].data), name
    assert [st.train_loss for st in a.history] == [st.train_loss for st in b.history]
    c = fit(train, val, _tiny_train_cfg(seed=1), model_cfg=_tiny_model_cfg())
    assert any(not np.array_equal(p.data, c.model.params[name].data)
               for name, p in a.model.named_parameters())


def test_resume_continues_bit_for_bit(tmp_path):
    _, train, val, _ = _tiny_data()
    straight = fit(train, val, _tiny_train_cfg(epochs=4),
                   model_cfg=_tiny_model_cfg())

    split_dir = tmp_path / "split"
    fit(train, val, _tiny_train_cfg(epochs=2), model_cfg=_tiny_model_cfg(),
        out_dir=split_dir)
    resumed = fit(train, val, _tiny_train_cfg(epochs=4), out_dir=split_dir,
                  resume=True)

    assert [st.epoch for st in resumed.history] == [2, 3]
    tail = [st.train_loss for st in straight.history[2:]]
    assert [st.train_loss for st in resumed.history] == tail
    for name, p in straight.model.named_parameters():
        assert np.array_equal(p.data, resumed.model.params[name].data), name
    for name, state in straight.model.norms.items():
        assert np.array_equal(state.mean, resumed.model.norms[name].mean), name
        assert np.array_equal(state.var, resumed.model.norms[name].var), name


def test_fit_without_augmentation_uses_full_frames():
    _, train, val, _ = _tiny_data(2, 1)
    result = fit(train, val, _tiny_train_cfg(epochs=1, augment=False, crop=9999),
                 model_cfg=_tiny_model_cfg())
    assert len(result.history) == 1


def test_fit_flags_non_finite_losses():
    _, train, val, _ = _tiny_data(2, 1)
    model = build_model(_tiny_model_cfg())
    bad = model.params["decoder.cls.w"]
    bad.data = np.full(bad.shape, np.nan, dtype=bad.data.dtype)
    with pytest.raises(NumericError, match="non-finite"):
        fit(train, val, _tiny_train_cfg(epochs=1), model=model)


def test_fit_input_validation(tmp_path):
    _, train, val, _ = _tiny_data(2, 1)
    with pytest.raises(UsageError, match="non-empty"):
        fit([], val, _tiny_train_cfg())
    with pytest.raises(UsageError, match="model"):
        fit(train, val, _tiny_train_cfg())
    with pytest.raises(UsageError, match="resume"):
        fit(train, val, _tiny_train_cfg(), resume=True)


def test_long_overfit_predicts_its_own_sample():
    # one scene, constant high lr, no augmentation: the model must commit
    # the sample to memory well enough that eval-mode inference (with its
    # slow-moving running statistics) reproduces the mask almost everywhere
    from rethseg.cli import config_for_data
    from rethseg.data import IGNORE_INDEX

    spec = CoOccurrenceSpec(size=32)
    sample = generate_sample(spec, 0)
    cfg = TrainConfig(epochs=600, base_lr=0.2, batch_accum=1,
                      lr_decay_epochs=600, augment=False)
    result = fit([sample], [sample], cfg, model_cfg=config_for_data(spec))
    ev = evaluate(result.model, [sample])
    assert ev.miou > 0.8
    pred = predict(result.model, sample.image)
    keep = sample.mask != IGNORE_INDEX
    agree = float((pred[keep] == sample.mask[keep]).mean())
    assert agree > 0.95


# ---------------------------------------------------------------------------
# evaluation


def test_predict_and_evaluate_shapes():
    _, train, val, _ = _tiny_data(1, 1)
    model = build_model(_tiny_model_cfg())
    pred = predict(model, val[0].image)
    assert pred.shape == (32, 32) and pred.dtype == np.uint8
    ev = evaluate(model, val)
    assert ev.cm.total() == 32 * 32
    assert 0.0 <= ev.pixel_acc <= 1.0
    assert 0.0 <= ev.miou <= 1.0
    assert ev.iou.shape == (6,)
    with pytest.raises(UsageError, match="at least one"):
        evaluate(model, [])


# ---------------------------------------------------------------------------
# ablation bookkeeping


def _runs(variant, scores):
    return [AblationRun(variant=variant, seed=i, miou=s, paired_miou=s / 2,
                        pixel_acc=s, seconds=1.0)
            for i, s in enumerate(scores)]


def test_ablation_statistics():
    res = AblationResult(runs=_runs("a", [0.5, 0.6, 0.7]) + _runs("b", [0.3, 0.4, 0.5]),
                         oracle_miou=0.4, oracle_paired_miou=0.2)
    assert res.variants() == ["a", "b"]
    mean_a, sd_a = res.stats("a")
    assert mean_a == pytest.approx(0.6) and sd_a == pytest.approx(0.1)
    gap, pooled = res.separation("a", "b")
    assert gap == pytest.approx(0.2)
    assert pooled == pytest.approx(0.1)
    assert res.scores("a", "paired_miou") == pytest.approx([0.25, 0.3, 0.35])
    with pytest.raises(UsageError, match="no runs"):
        res.stats("c")


def test_single_seed_statistics_use_zero_spread():
    res = AblationResult(runs=_runs("a", [0.5]), oracle_miou=0.1,
                         oracle_paired_miou=0.1)
    assert res.stats("a") == (0.5, 0.0)


def test_ablate_smoke():
    spec, train, val, test = _tiny_data(2, 1, 2)
    res = ablate(train, val, test, spec, _tiny_model_cfg(),
                 _tiny_train_cfg(epochs=1), variants=["baseline_c"], seeds=[0, 1])
    assert len(res.runs) == 2
    assert {r.seed for r in res.runs} == {0, 1}
    for r in res.runs:
        assert r.variant == "baseline_c"
        assert 0.0 <= r.miou <= 1.0
        assert 0.0 <= r.paired_miou <= 1.0
    assert 0.0 <= res.oracle_miou <= 1.0
    assert 0.0 <= res.oracle_paired_miou <= 1.0


def test_ablate_input_validation():
    spec, train, val, test = _tiny_data(1, 1, 1)
    cfg = _tiny_model_cfg()
    with pytest.raises(UsageError, match="variant"):
        ablate(train, val, test, spec, cfg, _tiny_train_cfg(), [], [0])
    with pytest.raises(UsageError, match="seed"):
        ablate(train, val, test, spec, cfg, _tiny_train_cfg(), ["baseline_c"], [])
    from dataclasses import replace
    none_cfg = replace(cfg, stages=[replace(st, variant="none")
                                    for st in cfg.stages])
    with pytest.raises(UsageError, match="no block-carrying stage"):
        ablate(train, val, test, spec, none_cfg, _tiny_train_cfg(),
               ["baseline_c"], [0])
