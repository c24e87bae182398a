"""Differentiable training objectives over softmax probabilities.

All losses take ``probs`` (a (B, K) Tensor of probability rows) and integer
``labels`` and return a scalar Tensor averaged over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-12
LOSS_KINDS = ("ce", "label-smoothing", "focal", "dual-focal", "soft-ece")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "ce"
    alpha: float = 0.05
    gamma: float = 0.0
    bins: int = 15
    temperature: float = 0.01

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.temperature <= 0:
            raise ValueError("soft-binning temperature must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def _labels(probs: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or labels.shape[0] != probs.shape[0]:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} disagree")
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def _nll_terms(probs: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    p_true = ad.clamp_min(ad.pick(probs, labels), PROB_FLOOR)
    return p_true, -ad.log(p_true)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    labels = _labels(probs, labels)
    _, nll = _nll_terms(probs, labels)
    return nll.mean()


def label_smoothing_ce(probs: Tensor, labels, alpha: float) -> Tensor:
    """Cross-entropy against (1 - alpha) * onehot + alpha / K."""
    labels = _labels(probs, labels)
    k = probs.shape[1]
    target = np.full(probs.shape, alpha / k)
    target[np.arange(len(labels)), labels] += 1.0 - alpha
    logp = ad.log(ad.clamp_min(probs, PROB_FLOOR))
    return -(logp * target).sum(axis=1).mean()


def focal(probs: Tensor, labels, gamma: float) -> Tensor:
    labels = _labels(probs, labels)
    p_true, nll = _nll_terms(probs, labels)
    return (ad.power(1.0 - p_true, gamma) * nll).mean()


def top_wrong_class(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Index of the highest-probability non-true class (lowest index on ties)."""
    masked = np.array(probs, dtype=np.float64, copy=True)
    masked[np.arange(len(labels)), labels] = -np.inf
    return masked.argmax(axis=1)


def dual_focal(probs: Tensor, labels, gamma: float) -> Tensor:
    """Mean of -(1 - p_y + p_j)^gamma log p_y, j the top wrong class."""
    labels = _labels(probs, labels)
    if probs.shape[1] < 2:
        raise ValueError("dual focal loss needs K >= 2")
    p_true, nll = _nll_terms(probs, labels)
    p_wrong = ad.pick(probs, top_wrong_class(probs.data, labels))
    return (ad.power(1.0 - p_true + p_wrong, gamma) * nll).mean()


def bin_centers(bins: int) -> np.ndarray:
    return (2.0 * np.arange(1, bins + 1) - 1.0) / (2.0 * bins)


def soft_ece(probs: Tensor, labels, bins: int = 15, temperature: float = 0.01) -> Tensor:
    """Soft-binned calibration error, root-mean-square form.

    Each sample's confidence is spread over the bins with weights
    softmax_m(-(conf - center_m)^2 / temperature).  Correctness is a constant,
    so no gradient flows through the argmax.
    """
    labels = _labels(probs, labels)
    n = probs.shape[0]
    pred = probs.data.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    conf = ad.pick(probs, pred).reshape(n, 1)
    dist = conf - bin_centers(bins)[None, :]
    member = ad.softmax(-(dist * dist) / temperature, axis=1)
    mass = member.sum(axis=0)
    acc_mass = (member * correct[:, None]).sum(axis=0)
    conf_mass = (member * conf).sum(axis=0)
    live = (mass.data >= 1e-12).astype(np.float64)
    # |S_m|/N * (acc - conf)^2 == (acc_mass - conf_mass)^2 / (|S_m| N)
    gap = acc_mass - conf_mass
    per_bin = (gap * gap) / ((mass + (1.0 - live)) * float(n)) * live
    return ad.sqrt(per_bin.sum())


def hard_binned_rms(probs: np.ndarray, labels, bins: int = 15) -> float:
    """Hard-binned limit of :func:`soft_ece`: sqrt(sum_m |B_m|/N (acc - conf)^2)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    edges = np.arange(bins + 1) / bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    total = 0.0
    for m in range(bins):
        sel = idx == m
        cnt = sel.sum()
        if cnt:
            total += cnt / len(conf) * (correct[sel].mean() - conf[sel].mean()) ** 2
    return float(np.sqrt(total))


def compute_loss(cfg: LossConfig, probs: Tensor, labels) -> Tensor:
    if cfg.kind == "ce":
        return cross_entropy(probs, labels)
    if cfg.kind == "label-smoothing":
        return label_smoothing_ce(probs, labels, cfg.alpha)
    if cfg.kind == "focal":
        return focal(probs, labels, cfg.gamma)
    if cfg.kind == "dual-focal":
        return dual_focal(probs, labels, cfg.gamma)
    return soft_ece(probs, labels, cfg.bins, cfg.temperature)
