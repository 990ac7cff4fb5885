"""Normalized regression losses for the two bootstrapping branches."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

NORM_FLOOR = 1e-12


class NumericWarning(RuntimeWarning):
    pass


class LossContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.51

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.lam > 1:
            warnings.warn(f"lambda={self.lam} lies outside [0, 1]", stacklevel=2)


@dataclass
class LossBreakdown:
    l_lfb: torch.Tensor | float
    l_hfb: torch.Tensor | float
    l_total: torch.Tensor

    def as_floats(self):
        return tuple(float(v.detach()) if torch.is_tensor(v) else float(v)
                     for v in (self.l_lfb, self.l_hfb, self.l_total))


def _unit_rows(x):
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        warnings.warn("zero-norm row in loss input; normalizing with a 1e-12 floor", NumericWarning, stacklevel=3)
    return x / (norm + NORM_FLOOR)


def normalized_regression_loss(q, g):
    """Batch mean of ``||q/|q| - g/|g|||^2``, equal to ``2 - 2 cos(q, g)``.

    ``g`` is treated as a constant by callers (it comes from the target
    branch); this function does not detach it.
    """
    q, g = torch.as_tensor(q), torch.as_tensor(g)
    if q.shape != g.shape or q.dim() != 2:
        raise LossContractError(f"expected matching [B, d] inputs, got {tuple(q.shape)} and {tuple(g.shape)}")
    diff = _unit_rows(q) - _unit_rows(g)
    return (diff * diff).sum(dim=-1).mean()


def cosine_form_loss(q, g):
    """``2 - 2 cos(q, g)`` averaged over the batch."""
    q, g = torch.as_tensor(q), torch.as_tensor(g)
    cos = (q * g).sum(-1) / (q.norm(dim=-1) * g.norm(dim=-1))
    return (2 - 2 * cos).mean()


def combined_loss(l_lfb, l_hfb, w):
    lam = w.lam if isinstance(w, LossWeights) else float(w)
    return lam * l_lfb + (1 - lam) * l_hfb


def full_loss(online_out, target_out, w):
    """Per-branch losses and their weighted sum.

    With one head disabled the missing branch loss is NaN and the total is
    the remaining branch loss alone.
    """
    has_t = online_out.t is not None
    has_m = online_out.m is not None
    if has_t and (online_out.q_t is None or target_out.t is None):
        raise LossContractError("TCN branch requires online prediction q_t and target projection t")
    if has_m and (online_out.q_m is None or target_out.m is None):
        raise LossContractError("MLP branch requires online prediction q_m and target projection m")
    l_lfb = normalized_regression_loss(online_out.q_t, target_out.t.detach()) if has_t else None
    l_hfb = normalized_regression_loss(online_out.q_m, target_out.m.detach()) if has_m else None
    if has_t and has_m:
        total = combined_loss(l_lfb, l_hfb, w)
    else:
        total = l_lfb if has_t else l_hfb
    nan = float("nan")
    return LossBreakdown(l_lfb if has_t else nan, l_hfb if has_m else nan, total)
