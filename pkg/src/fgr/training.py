"""Training and evaluation pipeline.

Two-stage runs first train the whole network with cross-entropy, then freeze
the backbone and fine-tune the head with rectified gradients on a per-epoch
hybrid of filtered and original images.  Because the backbone is frozen in
that stage, its features are computed once per image variant and reused.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import CorruptionSpec, HybridDataset, ImageSet, build_hybrid, corrupt, derive_seed
from .losses import LossConfig, compute_loss
from .metrics import (
    PredictionLog,
    ReliabilityDiagram,
    accuracy,
    apply_temperature,
    cece,
    ece,
    fit_temperature,
    reliability,
)
from .nn import BACKBONE, HEAD, Model, ModelParams
from .optim import SGD, milestone_lr
from .rectify import conflict_stats, cosine, flatten, rectify, unflatten, violates_non_degradation

log = logging.getLogger(__name__)

PIXEL_MEAN, PIXEL_STD = 0.5, 0.25
LOG_FIELDS = ["epoch", "step", "conflicted", "cosine", "loss_main", "loss_calib", "violation"]
METRIC_FIELDS = ["split", "corruption", "severity", "accuracy", "ece", "cece", "ece_ts", "cece_ts", "T_star"]
EVAL_BATCH = 500


class TrainingDiverged(FloatingPointError):
    pass


class RectificationViolation(AssertionError):
    pass


def make_model(config: TrainConfig, image_shape: tuple[int, int, int], num_classes: int) -> Model:
    h, w, c = image_shape
    if config.model == "mlp":
        return Model("mlp", (h * w * c,), num_classes, hidden=config.hidden)
    return Model("tinyconv", (c, h, w), num_classes)


def model_for(config: TrainConfig, data: ImageSet, num_classes: int | None = None) -> Model:
    return make_model(config, data.images.shape[1:], num_classes or data.num_classes)


def to_input(images: np.ndarray, model: Model) -> np.ndarray:
    """uint8 (N, H, W, 3) -> normalized float input for ``model``."""
    x = (images.astype(np.float64) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    if model.arch == "mlp":
        return x.reshape(len(x), -1)
    return x.transpose(0, 3, 1, 2)


def predict_logits(model: Model, params: ModelParams, images: np.ndarray) -> np.ndarray:
    out = [
        model.forward(params, to_input(images[i : i + EVAL_BATCH], model)).data
        for i in range(0, len(images), EVAL_BATCH)
    ]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


class FeatureCache:
    """Backbone features of a frozen backbone, keyed by caller-chosen ids."""

    def __init__(self, model: Model, params: ModelParams):
        self.model = model
        self.backbone = {n: params[n].data for n in params.names(BACKBONE)}
        self._params = params
        self._store: dict = {}

    def matches(self, params: ModelParams) -> bool:
        return all(np.array_equal(params[n].data, a) for n, a in self.backbone.items())

    def compute(self, images: np.ndarray) -> np.ndarray:
        out = [
            self.model.features(self._params, to_input(images[i : i + EVAL_BATCH], self.model)).data
            for i in range(0, len(images), EVAL_BATCH)
        ]
        return np.concatenate(out) if out else np.zeros((0, self.model.feature_dim))

    def get(self, key, images: Callable[[], np.ndarray] | np.ndarray) -> np.ndarray:
        if key not in self._store:
            self._store[key] = self.compute(images() if callable(images) else images)
        return self._store[key]

    def logits(self, params: ModelParams, key, images) -> np.ndarray:
        return self.model.head(params, self.get(key, images)).data


def _softmax_loss(cfg, logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    return compute_loss(cfg, ad.softmax(logits, axis=1), labels)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _cycle(indices: np.ndarray, rng: np.random.Generator) -> Iterator[int]:
    while True:
        for i in rng.permutation(indices):
            yield int(i)


def _grads(tape: ad.Tape, loss: ad.Tensor, params: ModelParams, names: Sequence[str]) -> dict[str, np.ndarray]:
    return dict(zip(names, tape.backward(loss, [params[n] for n in names])))


# ------------------------------------------------------------------ stage 1


def train_stage1(config: TrainConfig, data: ImageSet, num_classes: int | None = None) -> ModelParams:
    """Full-network cross-entropy training with SGD momentum and step decay."""
    model = model_for(config, data, num_classes)
    params = model.init(config.seed)
    opt = SGD(config.lr, config.momentum, config.weight_decay)
    names = params.names()
    ce_cfg = LossConfig("ce")
    for epoch in range(config.epochs):
        opt.lr = milestone_lr(config.lr, epoch, config.milestones)
        rng = np.random.default_rng(derive_seed(config.seed, 1, epoch))
        total = 0.0
        for idx in _batches(len(data), config.batch_size, rng):
            tracked = params.tracked(names)
            with ad.Tape() as tape:
                loss = _softmax_loss(ce_cfg, model.forward(tracked, to_input(data.images[idx], model)), data.labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"stage-1 loss became {loss.item()} in epoch {epoch}; last good params are from epoch {epoch - 1}")
            params = opt.step(params, _grads(tape, loss, tracked, names))
            total += loss.item() * len(idx)
        log.info("stage1 epoch %d lr %.4g loss %.4f", epoch, opt.lr, total / max(len(data), 1))
    return params


# ------------------------------------------------------------------ stage 2


@dataclass
class RunResult:
    params: ModelParams
    log_rows: list[dict] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    reliability: dict[str, ReliabilityDiagram] = field(default_factory=dict)
    temperature: float | None = None

    @property
    def conflict_fraction(self) -> float:
        return conflict_stats([(r["conflicted"], r["cosine"]) for r in self.log_rows]).fraction

    @property
    def violations(self) -> int:
        return sum(int(r["violation"]) for r in self.log_rows)


def _check_rho(config: TrainConfig) -> None:
    if config.filtering and config.rectification and not 0.0 < config.rho < 1.0:
        raise ValueError("FGR needs 0 < rho < 1: filtering needs D_filt and the calibration gradient needs D_orig")
    if config.filtering and config.rho == 0.0:
        raise ValueError("filtering is enabled but rho is 0")


def _rectified_step(
    config: TrainConfig,
    params: ModelParams,
    names: list[str],
    logits_fn: Callable[[ModelParams, np.ndarray], ad.Tensor],
    mix_batch: np.ndarray,
    mix_labels: np.ndarray,
    orig_batch: np.ndarray,
    orig_labels: np.ndarray,
) -> tuple[dict[str, np.ndarray], dict]:
    """Main and calibration gradients, rectified; returns (g_final by name, log row)."""
    tracked = params.tracked(names)
    with ad.Tape() as tape:
        loss_main = _softmax_loss(config.loss_main, logits_fn(tracked, mix_batch), mix_labels)
    g_main, layout = flatten(_grads(tape, loss_main, tracked, names))
    with ad.Tape() as tape:
        loss_calib = _softmax_loss(config.loss_calib, logits_fn(tracked, orig_batch), orig_labels)
    g_calib, _ = flatten(_grads(tape, loss_calib, tracked, names))
    for value, what in ((loss_main, "main"), (loss_calib, "calibration")):
        if not np.isfinite(value.item()):
            raise TrainingDiverged(f"{what} loss became {value.item()}")
    if config.rectification:
        g_final, conflicted = rectify(g_main, g_calib)
        violation = violates_non_degradation(g_final, g_main, g_calib)
    else:
        g_final, conflicted, violation = g_main, bool(g_main @ g_calib < 0), False
    row = {
        "conflicted": int(conflicted),
        "cosine": cosine(g_main, g_calib),
        "loss_main": loss_main.item(),
        "loss_calib": loss_calib.item(),
        "violation": int(violation),
    }
    return unflatten(g_final, layout), row


def finetune_fgr(
    config: TrainConfig,
    params: ModelParams,
    data: ImageSet,
    features: FeatureCache | None = None,
    num_classes: int | None = None,
) -> RunResult:
    """Stage 2: head-only fine-tuning with low-pass hybrids and gradient rectification.

    ``config.filtering`` / ``config.rectification`` switch the two components
    off for ablations.  With filtering off the hybrid is the untouched data.
    """
    _check_rho(config)
    model = model_for(config, data, num_classes)
    if features is None or not features.matches(params):
        features = FeatureCache(model, params)
    head_names = params.names(HEAD)
    opt = SGD(config.finetune_lr, config.momentum, config.finetune_weight_decay)
    rho = config.rho if config.filtering else 0.0
    filt_cache: dict = {}
    base_feats = features.get(("train", id(data)), data.images)
    rows: list[dict] = []
    step = 0
    for epoch in range(config.finetune_epochs):
        hybrid = build_hybrid(data, rho, config.lambda_set, epoch, config.seed, cache=filt_cache)
        mix_feats = _hybrid_features(features, hybrid, base_feats, id(data))
        orig = hybrid.orig_indices
        rng = np.random.default_rng(derive_seed(config.seed, 2, epoch))
        orig_iter = _cycle(orig, np.random.default_rng(derive_seed(config.seed, 3, epoch)))
        for idx in _batches(len(data), config.batch_size, rng):
            oidx = np.fromiter((next(orig_iter) for _ in range(len(idx))), dtype=np.int64, count=len(idx))
            g_final, row = _rectified_step(
                config,
                params,
                head_names,
                lambda p, f: model.head(p, f),
                mix_feats[idx],
                data.labels[idx],
                base_feats[oidx],
                data.labels[oidx],
            )
            row = {"epoch": epoch, "step": step, **row}
            rows.append(row)
            if row["violation"]:
                raise RectificationViolation(f"rectified gradient lowers calibration alignment at step {step}")
            params = opt.step(params, g_final, trainable=head_names)
            step += 1
        log.info("finetune epoch %d conflicts %.3f", epoch, np.mean([r["conflicted"] for r in rows[-len(idx):]]))
    return RunResult(params=params, log_rows=rows)


def _hybrid_features(cache: FeatureCache, hybrid: HybridDataset, base_feats: np.ndarray, data_key) -> np.ndarray:
    todo = [int(i) for i in hybrid.filt_indices if ("filt", data_key, int(i), hybrid.lambda_per_image[int(i)]) not in cache._store]
    if todo:
        fresh = cache.compute(np.stack([hybrid.image(i) for i in todo]))
        for i, f in zip(todo, fresh):
            cache._store[("filt", data_key, i, hybrid.lambda_per_image[i])] = f
    feats = base_feats.copy()
    for i in hybrid.filt_indices:
        feats[i] = cache._store[("filt", data_key, int(i), hybrid.lambda_per_image[int(i)])]
    return feats


def train_scratch(config: TrainConfig, data: ImageSet, num_classes: int | None = None) -> RunResult:
    """End-to-end training: main loss alone, then FGR from ``config.start_epoch``.

    All parameters stay trainable and the LR follows the stage-1 schedule.
    """
    _check_rho(config)
    model = model_for(config, data, num_classes)
    params = model.init(config.seed)
    names = params.names()
    opt = SGD(config.lr, config.momentum, config.weight_decay)
    cache: dict = {}
    rows: list[dict] = []
    step = 0

    def logits_fn(p, images):
        return model.forward(p, to_input(images, model))

    for epoch in range(config.epochs):
        opt.lr = milestone_lr(config.lr, epoch, config.milestones)
        rng = np.random.default_rng(derive_seed(config.seed, 2, epoch))
        if epoch < config.start_epoch:
            for idx in _batches(len(data), config.batch_size, rng):
                tracked = params.tracked(names)
                with ad.Tape() as tape:
                    loss = _softmax_loss(config.loss_main, logits_fn(tracked, data.images[idx]), data.labels[idx])
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"loss became {loss.item()} in epoch {epoch}")
                params = opt.step(params, _grads(tape, loss, tracked, names))
            continue
        rho = config.rho if config.filtering else 0.0
        hybrid = build_hybrid(data, rho, config.lambda_set, epoch, config.seed, cache=cache)
        mixed = hybrid.mixed()
        orig_iter = _cycle(hybrid.orig_indices, np.random.default_rng(derive_seed(config.seed, 3, epoch)))
        for idx in _batches(len(data), config.batch_size, rng):
            oidx = np.fromiter((next(orig_iter) for _ in range(len(idx))), dtype=np.int64, count=len(idx))
            g_final, row = _rectified_step(
                config, params, names, logits_fn,
                mixed.images[idx], mixed.labels[idx], data.images[oidx], data.labels[oidx],
            )
            row = {"epoch": epoch, "step": step, **row}
            rows.append(row)
            if row["violation"]:
                raise RectificationViolation(f"rectified gradient lowers calibration alignment at step {step}")
            params = opt.step(params, g_final)
            step += 1
    return RunResult(params=params, log_rows=rows)


# --------------------------------------------------------------- evaluation


def _metric_row(split: str, corruption: str, severity: int, logits: np.ndarray, labels: np.ndarray, t_star: float, bins: int) -> dict:
    plain = PredictionLog.from_logits(logits, labels)
    scaled = apply_temperature(logits, t_star, labels)
    return {
        "split": split,
        "corruption": corruption,
        "severity": severity,
        "accuracy": accuracy(plain),
        "ece": ece(plain, bins),
        "cece": cece(plain, bins),
        "ece_ts": ece(scaled, bins),
        "cece_ts": cece(scaled, bins),
        "T_star": t_star,
    }


def evaluate(
    config: TrainConfig,
    params: ModelParams,
    splits: dict[str, ImageSet],
    corruptions: Sequence[str] | None = None,
    severities: Sequence[int] | None = None,
    bins: int | None = None,
    features: FeatureCache | None = None,
) -> RunResult:
    """Metrics for clean ``test_id``, clean ``test_shift`` (if present), and the
    corruption grid applied to ``test_id``.

    One temperature is fitted on ``val`` and reused for every row.
    """
    corruptions = config.corruptions if corruptions is None else tuple(corruptions)
    severities = config.severities if severities is None else tuple(severities)
    bins = config.eval_bins if bins is None else bins
    test = splits["test_id"]
    k = max(ds.num_classes for ds in splits.values())
    model = model_for(config, test, k)
    if features is None or not features.matches(params):
        features = FeatureCache(model, params)

    def logits_for(key, images):
        return features.logits(params, key, images)

    val = splits["val"]
    t_star = fit_temperature(PredictionLog.from_logits(logits_for(("val", id(val)), val.images), val.labels), bins)
    log.info("temperature fitted on clean val (%d images): T* = %.2f", len(val), t_star)
    rows = []
    diagrams = {}
    clean = [("test_id", test)] + ([("test_shift", splits["test_shift"])] if "test_shift" in splits else [])
    for name, ds in clean:
        logits = logits_for((name, id(ds)), ds.images)
        rows.append(_metric_row(name, "none", 0, logits, ds.labels, t_star, bins))
        diagrams[name] = reliability(PredictionLog.from_logits(logits, ds.labels), bins)
    for ci, kind in enumerate(corruptions):
        for sev in severities:
            key = ("corrupt", id(test), kind, sev, config.seed)
            seed = derive_seed(config.seed, 4, ci, sev)
            logits = logits_for(key, lambda: corrupt(test.images, CorruptionSpec(kind, sev), seed))
            rows.append(_metric_row("test_id", kind, sev, logits, test.labels, t_star, bins))
    return RunResult(params=params, metrics=rows, reliability=diagrams, temperature=t_star)


def shift_summary(metrics: list[dict]) -> dict:
    """ID/shift accuracy and ECE pulled from an evaluate() table."""
    by = {(r["split"], r["corruption"]): r for r in metrics}
    out = {"acc_id": by[("test_id", "none")]["accuracy"], "ece_id": by[("test_id", "none")]["ece"]}
    if ("test_shift", "none") in by:
        out["acc_shift"] = by[("test_shift", "none")]["accuracy"]
        out["ece_shift"] = by[("test_shift", "none")]["ece"]
    grid = [r for r in metrics if r["corruption"] != "none"]
    if grid:
        out["acc_corrupt"] = float(np.mean([r["accuracy"] for r in grid]))
        out["ece_corrupt"] = float(np.mean([r["ece"] for r in grid]))
    return out


# ------------------------------------------------------------ experiments

ABLATIONS = {
    "filter-only": dict(filtering=True, rectification=False),
    "rectify-only": dict(filtering=False, rectification=True),
    "both": dict(filtering=True, rectification=True),
}
ABLATION_FIELDS = ["variant", "filtering", "rectification", "acc_id", "ece_id", "acc_shift", "ece_shift"]


def run_variant(
    config: TrainConfig,
    splits: dict[str, ImageSet],
    stage1: ModelParams,
    features: FeatureCache | None = None,
    corruptions: Sequence[str] | None = None,
) -> RunResult:
    """Stage 2 under ``config`` plus evaluation; both components off returns stage 1 as is."""
    k = max(ds.num_classes for ds in splits.values())
    if not config.filtering and not config.rectification:
        result = RunResult(params=stage1)
    elif config.mode == "scratch":
        result = train_scratch(config, splits["train"], k)
    else:
        result = finetune_fgr(config, stage1, splits["train"], features, k)
    ev = evaluate(config, result.params, splits, corruptions=corruptions, features=features)
    result.metrics, result.reliability, result.temperature = ev.metrics, ev.reliability, ev.temperature
    return result


def run_ablation(
    config: TrainConfig,
    splits: dict[str, ImageSet],
    stage1: ModelParams | None = None,
    variants: Sequence[str] = tuple(ABLATIONS),
    corruptions: Sequence[str] | None = (),
    logs: dict | None = None,
) -> list[dict]:
    """One row per variant, sharing the seed and the stage-1 model.

    If ``logs`` is a dict it receives each variant's per-step training log.
    """
    k = max(ds.num_classes for ds in splits.values())
    if stage1 is None:
        stage1 = train_stage1(config, splits["train"], k)
    features = FeatureCache(model_for(config, splits["train"], k), stage1)
    rows = []
    for name in variants:
        flags = ABLATIONS[name] if name in ABLATIONS else dict(filtering=False, rectification=False)
        result = run_variant(config.with_(**flags), splits, stage1, features, corruptions)
        if logs is not None:
            logs[name] = result.log_rows
        rows.append({"variant": name, **flags, **shift_summary(result.metrics)})
    return rows


SWEEPABLE = ("gamma", "rho", "lambda")


def sweep(
    config: TrainConfig,
    param: str,
    values: Sequence,
    splits: dict[str, ImageSet],
    stage1: ModelParams | None = None,
    corruptions: Sequence[str] | None = (),
) -> list[dict]:
    """One full FGR run per value, all sharing the seed and stage-1 model."""
    if param not in SWEEPABLE:
        raise ValueError(f"can sweep {SWEEPABLE}, not {param!r}")
    if len(values) == 0:
        raise ValueError("no values to sweep")
    k = max(ds.num_classes for ds in splits.values())
    if stage1 is None:
        stage1 = train_stage1(config, splits["train"], k)
    features = FeatureCache(model_for(config, splits["train"], k), stage1)
    rows = []
    for v in values:
        if param == "gamma":
            cfg = config.with_(loss_main=config.loss_main.__class__(**{**config.loss_main.to_dict(), "gamma": float(v)}))
        elif param == "rho":
            cfg = config.with_(rho=float(v))
        else:
            cfg = config.with_(lambda_set=(int(v),))
        result = run_variant(cfg, splits, stage1, features, corruptions)
        rows.append({"param": param, "value": v, **shift_summary(result.metrics), "conflict_fraction": result.conflict_fraction if result.log_rows else 0.0})
    return rows


# -------------------------------------------------------------------- output


def write_csv(path, rows: list[dict], fieldnames: Sequence[str] | None = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))


def sort_metrics(rows: list[dict]) -> list[dict]:
    order = {"test_id": 0, "test_shift": 1}
    return sorted(rows, key=lambda r: (r["corruption"] != "none", order.get(r["split"], 2), r["corruption"], int(r["severity"])))
