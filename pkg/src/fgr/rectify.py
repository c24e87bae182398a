"""Gradient rectification between a main objective and a calibration objective.

When the two whole-model gradients conflict (negative dot product) the main
gradient is projected onto the hyperplane orthogonal to the calibration
gradient, so a small step along the result cannot raise the calibration
loss to first order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEGENERATE_NORM_SQ = 1e-24


def _norm(v: np.ndarray) -> float:
    # scaled first so tiny gradients do not underflow to a zero norm
    m = float(np.abs(v).max()) if v.size else 0.0
    return 0.0 if m == 0.0 else m * float(np.linalg.norm(v / m))


@dataclass(frozen=True)
class GradientLayout:
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.shapes))


def flatten(grads: dict[str, np.ndarray], trainable: Iterable[str] | None = None) -> tuple[np.ndarray, GradientLayout]:
    """Concatenate the trainable gradients in name-sorted order."""
    names = tuple(sorted(grads if trainable is None else trainable))
    missing = [n for n in names if n not in grads]
    if missing:
        raise ValueError(f"no gradient for {missing}")
    shapes = tuple(np.shape(grads[n]) for n in names)
    if not names:
        return np.zeros(0), GradientLayout(names, shapes)
    flat = np.concatenate([np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])
    return flat, GradientLayout(names, shapes)


def unflatten(flat: np.ndarray, layout: GradientLayout) -> dict[str, np.ndarray]:
    if flat.shape != (layout.size,):
        raise ValueError(f"vector of length {flat.size} does not match layout of {layout.size}")
    out, pos = {}, 0
    for n, s in zip(layout.names, layout.shapes):
        k = int(np.prod(s))
        out[n] = flat[pos : pos + k].reshape(s)
        pos += k
    return out


def rectify(g_main: np.ndarray, g_calib: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return ``(g_final, conflicted)``.

    Aligned gradients (dot >= 0) and a vanishing calibration gradient pass
    ``g_main`` through untouched.
    """
    g_main = np.asarray(g_main, dtype=np.float64)
    g_calib = np.asarray(g_calib, dtype=np.float64)
    if g_main.shape != g_calib.shape or g_main.ndim != 1:
        raise ValueError(f"gradient vectors must be 1-d and equal length: {g_main.shape} vs {g_calib.shape}")
    dot = float(g_main @ g_calib)
    if dot >= 0.0:
        return g_main, False
    norm_sq = float(g_calib @ g_calib)
    if norm_sq < DEGENERATE_NORM_SQ:
        return g_main, False
    return g_main - (dot / norm_sq) * g_calib, True


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = _norm(a), _norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def violates_non_degradation(g_final: np.ndarray, g_main: np.ndarray, g_calib: np.ndarray, tol: float = 1e-9) -> bool:
    """True when ``g_final`` lowers calibration alignment beyond ``tol``.

    A vanishing ``g_calib`` imposes no constraint, matching the passthrough in
    :func:`rectify`.
    """
    if float(g_calib @ g_calib) < DEGENERATE_NORM_SQ:
        return False
    bound = -tol * _norm(g_main) * _norm(g_calib)
    return float(g_final @ g_calib) < bound


@dataclass(frozen=True)
class ConflictStats:
    fraction: float
    mean_cosine: float
    steps: int


def conflict_stats(history: Sequence[tuple[bool, float]]) -> ConflictStats:
    """Summarize ``(conflicted, cosine)`` records from a training run."""
    if len(history) == 0:
        raise ValueError("conflict history is empty")
    flags = np.array([bool(h[0]) for h in history])
    cos = np.array([float(h[1]) for h in history])
    return ConflictStats(float(flags.mean()), float(cos.mean()), len(history))
