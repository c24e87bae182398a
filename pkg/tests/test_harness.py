import logging

import numpy as np
import pytest

from fgr.config import TrainConfig, load_config, save_config
from fgr.data import ImageSet, gen_shape_texture
from fgr.losses import LossConfig
from fgr.nn import BACKBONE
from fgr.training import (
    ABLATION_FIELDS,
    FeatureCache,
    RectificationViolation,
    evaluate,
    finetune_fgr,
    model_for,
    predict_logits,
    run_ablation,
    run_variant,
    shift_summary,
    sweep,
    train_scratch,
    train_stage1,
)

FAST = dict(epochs=2, batch_size=32, lr=0.03, finetune_epochs=2, finetune_lr=0.002, corruptions=(), seed=0)


@pytest.fixture(scope="module")
def splits():
    return gen_shape_texture(160, size=16, seed=0, n_val=40, n_test=60, texture_agreement=0.8)


@pytest.fixture(scope="module")
def stage1(splits):
    return train_stage1(TrainConfig(**FAST), splits["train"], 3)


def separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    level = np.where(labels == 1, 190, 60)[:, None, None, None]
    images = np.clip(level + rng.normal(0, 20, size=(n, 8, 8, 3)), 0, 255).astype(np.uint8)
    return ImageSet(images, labels)


# ------------------------------------------------------------------ stage 1


def test_zero_epochs_returns_initialization():
    data = separable(20)
    cfg = TrainConfig(model="mlp", epochs=0, seed=4)
    params = train_stage1(cfg, data)
    init = model_for(cfg, data).init(4)
    assert all(np.array_equal(params[n].data, init[n].data) for n in init)


def test_separable_mlp_reaches_99_percent():
    data = separable()
    cfg = TrainConfig(model="mlp", epochs=50, batch_size=32, lr=0.01, hidden=16, seed=0)
    model = model_for(cfg, data)
    params = train_stage1(cfg, data)
    acc = (predict_logits(model, params, data.images).argmax(1) == data.labels).mean()
    assert acc >= 0.99


def test_stage1_deterministic():
    data = separable(64)
    cfg = TrainConfig(model="mlp", epochs=3, batch_size=16, hidden=8, seed=2)
    a, b = train_stage1(cfg, data), train_stage1(cfg, data)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)


# ------------------------------------------------------------------ stage 2


def test_finetune_freezes_backbone(splits, stage1):
    before = {n: stage1[n].data.copy() for n in stage1.names(BACKBONE)}
    result = finetune_fgr(TrainConfig(**FAST), stage1, splits["train"], num_classes=3)
    for n, arr in before.items():
        assert result.params[n].data.tobytes() == arr.tobytes()
    assert any(not np.array_equal(result.params[n].data, stage1[n].data) for n in stage1.names("head"))


def test_finetune_log_bookkeeping(splits, stage1):
    cfg = TrainConfig(**FAST)
    result = finetune_fgr(cfg, stage1, splits["train"], num_classes=3)
    steps_per_epoch = -(-len(splits["train"]) // cfg.batch_size)
    assert len(result.log_rows) == cfg.finetune_epochs * steps_per_epoch
    assert [r["step"] for r in result.log_rows] == list(range(len(result.log_rows)))
    recount = sum(r["conflicted"] for r in result.log_rows) / len(result.log_rows)
    assert 0.0 <= result.conflict_fraction <= 1.0
    assert result.conflict_fraction == pytest.approx(recount)
    assert result.violations == 0
    for r in result.log_rows:
        assert np.isfinite(r["loss_main"]) and np.isfinite(r["loss_calib"]) and -1 <= r["cosine"] <= 1


def test_finetune_deterministic(splits, stage1):
    cfg = TrainConfig(**FAST)
    a = finetune_fgr(cfg, stage1, splits["train"], num_classes=3)
    b = finetune_fgr(cfg, stage1, splits["train"], num_classes=3)
    assert a.log_rows == b.log_rows
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_rho_bounds_rejected(splits, stage1):
    with pytest.raises(ValueError):
        TrainConfig(**{**FAST, "rho": 1.0})
    with pytest.raises(ValueError):
        finetune_fgr(TrainConfig(**{**FAST, "rho": 0.0}), stage1, splits["train"], num_classes=3)


def test_rectification_off_is_plain_joint_training(splits, stage1):
    cfg = TrainConfig(**FAST, rectification=False)
    result = finetune_fgr(cfg, stage1, splits["train"], num_classes=3)
    # conflicts are still counted, never acted on
    assert result.violations == 0
    assert {r["conflicted"] for r in result.log_rows} <= {0, 1}


def test_violation_aborts(splits, stage1, monkeypatch):
    import fgr.training as training

    monkeypatch.setattr(training, "violates_non_degradation", lambda *a: True)
    with pytest.raises(RectificationViolation):
        finetune_fgr(TrainConfig(**FAST), stage1, splits["train"], num_classes=3)


def test_scratch_mode_switches_on_at_start_epoch(splits):
    cfg = TrainConfig(**{**FAST, "epochs": 3}, mode="scratch", filter_start_epoch=2)
    result = train_scratch(cfg, splits["train"], 3)
    assert {r["epoch"] for r in result.log_rows} == {2}
    assert result.violations == 0


def test_scratch_start_epoch_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, mode="scratch", filter_start_epoch=3)
    assert TrainConfig(epochs=10, mode="scratch").start_epoch == 6


def test_config_json_roundtrip(tmp_path):
    cfg = TrainConfig(**FAST, loss_main=LossConfig("focal", gamma=3.0), lambda_set=(18,))
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


# --------------------------------------------------------------- evaluation


def test_metric_rows_cover_grid(splits, stage1):
    cfg = TrainConfig(**FAST)
    no_shift = {k: v for k, v in splits.items() if k != "test_shift"}
    assert len(evaluate(cfg, stage1, no_shift, corruptions=()).metrics) == 1
    rows = evaluate(cfg, stage1, no_shift, corruptions=("contrast", "gaussian-blur")).metrics
    assert len(rows) == 1 + 2 * 5
    assert {(r["corruption"], r["severity"]) for r in rows[1:]} == {
        (c, s) for c in ("contrast", "gaussian-blur") for s in range(1, 6)
    }
    with_shift = evaluate(cfg, stage1, splits, corruptions=()).metrics
    assert [r["split"] for r in with_shift] == ["test_id", "test_shift"]


def test_temperature_fit_once(splits, stage1, caplog):
    cfg = TrainConfig(**FAST)
    with caplog.at_level(logging.INFO, logger="fgr.training"):
        result = evaluate(cfg, stage1, splits, corruptions=("brightness",))
    assert sum("temperature fitted" in m for m in caplog.messages) == 1
    assert {r["T_star"] for r in result.metrics} == {result.temperature}


def test_evaluate_deterministic(splits, stage1):
    cfg = TrainConfig(**FAST)
    a = evaluate(cfg, stage1, splits, corruptions=("gaussian-noise",)).metrics
    b = evaluate(cfg, stage1, splits, corruptions=("gaussian-noise",)).metrics
    assert a == b


# -------------------------------------------------------------- experiments


def test_ablation_schema_and_both_off(splits, stage1):
    cfg = TrainConfig(**FAST)
    logs = {}
    rows = run_ablation(cfg, splits, stage1, logs=logs)
    assert [r["variant"] for r in rows] == ["filter-only", "rectify-only", "both"]
    assert all(list(r) == ABLATION_FIELDS for r in rows)
    assert set(logs) == {"filter-only", "rectify-only", "both"}
    off = run_ablation(cfg, splits, stage1, variants=("none",))[0]
    base = shift_summary(evaluate(cfg, stage1, splits, corruptions=()).metrics)
    assert {k: off[k] for k in base} == base


def test_sweep_rows_and_singleton(splits, stage1):
    cfg = TrainConfig(**FAST)
    rows = sweep(cfg, "rho", [0.05, 0.1, 0.2], splits, stage1)
    assert [r["value"] for r in rows] == [0.05, 0.1, 0.2]
    single = sweep(cfg, "gamma", [cfg.loss_main.gamma], splits, stage1)[0]
    direct = run_variant(cfg, splits, stage1, FeatureCache(model_for(cfg, splits["train"], 3), stage1), ())
    assert {k: single[k] for k in ("acc_id", "ece_id", "ece_shift")} == {
        k: shift_summary(direct.metrics)[k] for k in ("acc_id", "ece_id", "ece_shift")
    }
    with pytest.raises(ValueError):
        sweep(cfg, "lr", [0.1], splits, stage1)
    with pytest.raises(ValueError):
        sweep(cfg, "rho", [], splits, stage1)


def test_near_identity_filter_matches_rectify_only():
    # lambda 100 makes the quantizer almost the identity, so the hybrid is
    # almost the original data and only rectification changes anything
    data = gen_shape_texture(600, size=16, seed=0, n_val=100, n_test=600, texture_agreement=0.8)
    cfg = TrainConfig(**{**FAST, "epochs": 6, "finetune_epochs": 4}, lambda_set=(100,), rho=0.05)
    s1 = train_stage1(cfg, data["train"], 3)
    near = sweep(cfg, "lambda", [100], data, s1)[0]
    rect = run_ablation(cfg, data, s1, variants=("rectify-only",))[0]
    assert abs(near["ece_shift"] - rect["ece_shift"]) <= 0.01
    assert abs(near["acc_shift"] - rect["acc_shift"]) <= 0.02
