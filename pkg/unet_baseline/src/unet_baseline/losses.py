"""Pixelwise cross-entropy between a probability map and an integer mask."""

from __future__ import annotations

import numpy as np

PROB_EPS = 1e-12  # clamp before the log; keeps an exact-zero prediction finite


def cross_entropy(probabilities: np.ndarray, mask: np.ndarray) -> float:
    """Mean over pixels of -log P[true class].

    ``probabilities`` is (H, W, 3) on the simplex, ``mask`` is (H, W) with
    labels in {0, 1, 2}.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    mask = np.asarray(mask)
    if probs.ndim != 3 or probs.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {mask.shape}")
    picked = np.take_along_axis(probs, mask[..., None].astype(np.intp), axis=-1)[..., 0]
    return float(-np.log(np.maximum(picked, PROB_EPS)).mean())


def dice_per_class(pred_mask: np.ndarray, true_mask: np.ndarray) -> dict[int, float]:
    """Dice of each class in {0, 1, 2}; empty-vs-empty counts as 1."""
    out = {}
    for cls in (0, 1, 2):
        a = pred_mask == cls
        b = true_mask == cls
        denom = int(a.sum()) + int(b.sum())
        out[cls] = 1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom
    return out
