"""Soft per-class counts and the focal Tversky training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.tensor import Tensor, as_tensor, make_result
from .errors import ConfigError, InputError

SMOOTH = 1e-6


@dataclass(frozen=True)
class LossParams:
    """alpha weights false positives, beta = 1 - alpha weights false negatives."""

    alpha: float = 0.5
    gamma: float = 1.0

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 1.0:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")


def _check_mask(mask: np.ndarray, shape) -> None:
    if mask.shape != tuple(shape):
        raise InputError(f"mask shape {mask.shape} does not match probabilities {tuple(shape)}")
    if not np.all((mask == 0) | (mask == 1)) or not np.all(mask.sum(axis=1) == 1):
        raise InputError("mask is not one-hot along the class axis")


def soft_class_counts(probabilities, mask) -> Tensor:
    """Differentiable (3, N) tensor of per-class [TP, FP, FN] summed over all pixels.

    TP_i = sum p_i m_i, FP_i = sum p_i (1 - m_i), FN_i = sum (1 - p_i) m_i.
    """
    probs = as_tensor(probabilities)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    _check_mask(m, probs.shape)
    m = m.astype(probs.dtype, copy=False)
    axes = (0, 2, 3)
    tp = (probs.data * m).sum(axis=axes)
    fp = probs.data.sum(axis=axes) - tp
    fn = m.sum(axis=axes) - tp
    out = np.stack([tp, fp, fn])

    def backward(g: np.ndarray) -> None:
        gtp, gfp, gfn = (g[i][None, :, None, None] for i in range(3))
        probs.accumulate(gfp + m * (gtp - gfp - gfn))

    return make_result(out, (probs,), backward)


def tversky_index(tp, fp, fn, params: LossParams, smooth: float = 0.0):
    """TP / (TP + alpha FP + beta FN); ``smooth`` is added to numerator and denominator."""
    return (tp + smooth) / (tp + params.alpha * fp + params.beta * fn + smooth)


def focal_tversky_from_counts(counts, params: LossParams, smooth: float = SMOOTH) -> Tensor:
    """Mean over classes of (1 - TI_i) ** (1 / gamma), from a (3, N) counts tensor."""
    params.validate()
    counts = as_tensor(counts)
    tp, fp, fn = counts.data
    a, b = params.alpha, params.beta
    num = tp + smooth
    den = tp + a * fp + b * fn + smooth
    ti = num / den
    base = np.clip(1.0 - ti, 0.0, None)
    n = ti.size
    inv_gamma = 1.0 / params.gamma
    loss = np.asarray(np.mean(base**inv_gamma), dtype=counts.dtype)

    def backward(g: np.ndarray) -> None:
        # exponent 1/gamma - 1 <= 0; floor the base so a perfect class stays finite
        dl_dti = -(inv_gamma / n) * np.maximum(base, 1e-12) ** (inv_gamma - 1.0)
        if params.gamma == 1.0:
            dl_dti = np.full_like(ti, -1.0 / n)
        den2 = den * den
        dti = np.stack([(a * fp + b * fn) / den2, -a * num / den2, -b * num / den2])
        counts.accumulate(g * dl_dti[None, :] * dti)

    return make_result(loss, (counts,), backward)


def focal_tversky_loss(probabilities, mask, params: LossParams, smooth: float = SMOOTH) -> Tensor:
    return focal_tversky_from_counts(soft_class_counts(probabilities, mask), params, smooth)
