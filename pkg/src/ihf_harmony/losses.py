"""Anatomical consistency, channel-filtered artefact consistency and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FixedEncoder
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    channel_stats,
    concat,
    extract_patches,
    mean,
    matmul,
    no_tape,
    sqrt,
    reshape,
    tabs,
    take_along,
    transpose,
    tsum,
)

AC_STAGE = 2  # zero-based: third encoder stage
ART_STAGES = (0, 1, 2)
PATCH_COUNT = 32
PATCH_SIZE = 8
_NORM_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_ac: float = 1.0
    lambda_art: float = 2.0
    k: float = 0.9

    def validate(self) -> "LossWeights":
        if self.lambda_ac < 0 or self.lambda_art < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.k <= 1.0:
            raise ValueError(f"selection ratio k must lie in (0, 1], got {self.k}")
        return self


def _batched(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    return x


def sample_patch_locations(rng: np.random.Generator, height: int, width: int,
                           size: int = PATCH_SIZE, count: int = PATCH_COUNT) -> tuple[np.ndarray, np.ndarray]:
    """Top-left corners drawn so every patch lies fully inside the map."""
    if size > height or size > width:
        raise ShapeError(f"patch size {size} exceeds feature map {height}x{width}")
    tops = rng.integers(0, height - size + 1, size=count)
    lefts = rng.integers(0, width - size + 1, size=count)
    return tops, lefts


def self_similarity(features: Tensor, tops, lefts, size: int = PATCH_SIZE) -> Tensor:
    """Per-patch cosine self-similarity maps, shape (N, P, size^2, size^2)."""
    f = extract_patches(features, tops, lefts, size)           # (N, P, C, Np)
    norm = sqrt(tsum(f * f, axis=2, keepdims=True) + _NORM_EPS)
    f = f / norm
    return matmul(transpose(f, (0, 1, 3, 2)), f)


def anatomical_consistency(x, x_hat, encoder: FixedEncoder, locations=None,
                           rng: np.random.Generator | None = None, x_feat: Tensor | None = None,
                           x_hat_feat: Tensor | None = None, feature_hook=None) -> Tensor:
    """Mean absolute difference of patch self-similarity maps of stage-3 features.

    Equals ``mean_p ||G_p(x) - G_p(x_hat)||_1 / N_p^2``, averaged over the batch.
    ``feature_hook`` (testing aid) is applied to both feature maps before
    normalization.
    """
    if x_feat is None:
        with no_tape():
            x_feat = encoder.stages(_batched(x), upto=AC_STAGE + 1)[AC_STAGE]
    if x_hat_feat is None:
        x_hat_feat = encoder.stages(_batched(x_hat), upto=AC_STAGE + 1)[AC_STAGE]
    if x_feat.shape != x_hat_feat.shape:
        raise ShapeError(f"feature shapes differ: {x_feat.shape} vs {x_hat_feat.shape}")
    if feature_hook is not None:
        x_feat, x_hat_feat = feature_hook(x_feat), feature_hook(x_hat_feat)
    if locations is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        locations = sample_patch_locations(rng, *x_feat.shape[-2:])
    tops, lefts = locations
    g_x = self_similarity(x_feat, tops, lefts)
    g_hat = self_similarity(x_hat_feat, tops, lefts)
    return mean(tabs(g_x - g_hat))


def select_channels(d: np.ndarray, k: float) -> np.ndarray:
    """Indices of the floor(k*C) smallest discrepancies per row; ties by lower index."""
    c = d.shape[-1]
    keep = max(1, int(np.floor(k * c + 1e-9)))
    order = np.argsort(d, axis=-1, kind="stable")
    return np.sort(order[..., :keep], axis=-1)


def artefact_consistency(x_hat, y, encoder: FixedEncoder, k: float = 0.9,
                         x_hat_stages=None, y_stages=None, selection=None,
                         normalize: bool = True, return_selection: bool = False):
    """Channel-filtered match of stage means and standard deviations (stages 1-3).

    For each stage the ``floor(k*C)`` channels with the smallest mean
    discrepancy are kept and ``|dmu| + |dsigma|`` summed over them.  The sum
    over stages is divided by the number of selected channels when
    ``normalize`` is set, then averaged over the batch.
    """
    upto = max(ART_STAGES) + 1
    if x_hat_stages is None:
        x_hat_stages = encoder.stages(_batched(x_hat), upto=upto)
    if y_stages is None:
        with no_tape():
            y_stages = encoder.stages(_batched(y), upto=upto)
    terms, chosen, total = [], [], 0
    for pos, i in enumerate(ART_STAGES):
        mu_x, s_x = channel_stats(x_hat_stages[i])
        with no_tape():
            mu_y, s_y = channel_stats(y_stages[i])
        if mu_x.shape != mu_y.shape:
            raise ShapeError(f"stage {i + 1} stats differ in shape: {mu_x.shape} vs {mu_y.shape}")
        if selection is None:
            idx = select_channels(np.abs(mu_x.data - mu_y.data), k)
        else:
            idx = selection[pos]
        chosen.append(idx)
        per_channel = tabs(mu_x - mu_y.data) + tabs(s_x - s_y.data)
        terms.append(take_along(per_channel, idx, axis=1))
        total += idx.shape[-1]
    picked = concat(terms, axis=1)
    per_sample = tsum(picked, axis=1)
    if normalize:
        per_sample = per_sample / float(total)
    loss = mean(per_sample)
    return (loss, chosen) if return_selection else loss


def total_loss(x, x_hat, y, encoder: FixedEncoder, weights: LossWeights | None = None,
               locations=None, rng: np.random.Generator | None = None, selection=None):
    """``lambda_ac * L_ac + lambda_art * L_art``; returns (total, breakdown dict)."""
    weights = (weights or LossWeights()).validate()
    upto = max(AC_STAGE, max(ART_STAGES)) + 1
    x_hat_b = _batched(x_hat)
    hat_stages = encoder.stages(x_hat_b, upto=upto)
    with no_tape():
        y_stages = encoder.stages(_batched(y), upto=upto)
        x_feat = encoder.stages(_batched(x), upto=AC_STAGE + 1)[AC_STAGE]
    l_ac = anatomical_consistency(x, x_hat_b, encoder, locations=locations, rng=rng,
                                  x_feat=x_feat, x_hat_feat=hat_stages[AC_STAGE])
    l_art = artefact_consistency(x_hat_b, y, encoder, k=weights.k, x_hat_stages=hat_stages,
                                 y_stages=y_stages, selection=selection)
    total = l_ac * weights.lambda_ac + l_art * weights.lambda_art
    breakdown = {"ac": l_ac.item(), "art": l_art.item(), "total": total.item()}
    return total, breakdown
