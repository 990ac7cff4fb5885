"""Stochastic view generation for time-series batches shaped ``[B, C, T]``.

Every function takes a seed (int, ``SeedSequence`` or ``Generator``) and is
pure otherwise, so the same call always produces the same output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

FAMILIES = ("jitter_permute_rotate", "jitter_scale")


class AugmentationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    jitter_sigma: float = 0.8
    max_segments: int = 8
    rotation_deg_online: float = 30.0
    rotation_deg_target: float = 45.0
    family: str = "jitter_permute_rotate"
    scale_sigma: float = 0.1

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise AugmentationConfigError("jitter_sigma must be >= 0")
        if self.max_segments < 1:
            raise AugmentationConfigError("max_segments must be >= 1")
        if self.family not in FAMILIES:
            raise AugmentationConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.scale_sigma < 0:
            raise AugmentationConfigError("scale_sigma must be >= 0")


class ViewPair(NamedTuple):
    online: np.ndarray
    target: np.ndarray


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a [batch, channels, length] array, got shape {x.shape}")
    return x


def jitter(x, sigma, seed=None):
    if sigma < 0:
        raise AugmentationConfigError("sigma must be >= 0")
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return (x + rng.normal(0.0, sigma, size=x.shape)).astype(x.dtype, copy=False)


def apply_segment_permutation(sample, cuts, order):
    """Split ``sample`` ([C, T]) at ``cuts`` along time and reassemble the
    pieces in ``order``."""
    segments = np.split(sample, list(cuts), axis=-1)
    return np.concatenate([segments[i] for i in order], axis=-1)


def permute_segments(x, max_segments, seed=None):
    """Cut each sample into ``k ~ U{1..max_segments}`` pieces and shuffle them.

    All channels of one sample share the cut points and the permutation.
    """
    x = _as_batch(x)
    length = x.shape[-1]
    if max_segments < 1:
        raise AugmentationConfigError("max_segments must be >= 1")
    if max_segments > length:
        raise AugmentationConfigError(f"max_segments={max_segments} exceeds series length {length}")
    if max_segments == 1:
        return x.copy()
    rng = np.random.default_rng(seed)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        k = int(rng.integers(1, max_segments + 1))
        if k == 1:
            out[i] = x[i]
            continue
        cuts = np.sort(rng.choice(np.arange(1, length), size=k - 1, replace=False))
        order = rng.permutation(k)
        out[i] = apply_segment_permutation(x[i], cuts, order)
    return out


def rotate(x, angle_deg):
    """Givens-rotate consecutive channel pairs (0,1), (2,3), ... by ``angle_deg``.

    A trailing odd channel (and any single-channel input) is returned as is.
    """
    x = _as_batch(x)
    out = x.copy()
    n_pairs = x.shape[1] // 2
    if n_pairs == 0 or angle_deg == 0:
        return out
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    a = x[:, 0:2 * n_pairs:2, :]
    b = x[:, 1:2 * n_pairs:2, :]
    out[:, 0:2 * n_pairs:2, :] = c * a - s * b
    out[:, 1:2 * n_pairs:2, :] = s * a + c * b
    return out


def scale(x, sigma, seed=None):
    """Multiply each (sample, channel) by a factor drawn from N(1, sigma^2)."""
    x = _as_batch(x)
    rng = np.random.default_rng(seed)
    factors = rng.normal(1.0, sigma, size=x.shape[:2] + (1,))
    return (x * factors).astype(x.dtype, copy=False)


def _strong_view(x, cfg, angle, seed):
    jitter_seed, perm_seed = _spawn_views(seed)
    out = jitter(x, cfg.jitter_sigma, jitter_seed)
    out = permute_segments(out, cfg.max_segments, perm_seed)
    return rotate(out, angle)


def _spawn_views(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(2)


def make_view_pair(x, cfg, seed):
    """Online view: jitter -> permute -> rotate by the online angle.
    Target view: same recipe, independent stream, target angle."""
    x = _as_batch(x)
    s_online, s_target = _spawn_views(seed)
    return ViewPair(
        _strong_view(x, cfg, cfg.rotation_deg_online, s_online),
        _strong_view(x, cfg, cfg.rotation_deg_target, s_target),
    )


def make_view_pair_different_family(x, cfg, seed):
    """Online view as in :func:`make_view_pair`; target view is jitter-scale."""
    x = _as_batch(x)
    s_online, s_target = _spawn_views(seed)
    jitter_seed, scale_seed = s_target.spawn(2)
    target = scale(jitter(x, cfg.jitter_sigma, jitter_seed), cfg.scale_sigma, scale_seed)
    return ViewPair(_strong_view(x, cfg, cfg.rotation_deg_online, s_online), target)


def views_for(x, cfg, seed):
    if cfg.family == "jitter_scale":
        return make_view_pair_different_family(x, cfg, seed)
    return make_view_pair(x, cfg, seed)
