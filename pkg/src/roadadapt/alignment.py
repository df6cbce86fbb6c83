"""Selective adversarial feature alignment between source and target domains.

Instead of aligning whole feature maps, the main head's foreground
probability (detached, area-averaged to the feature resolution) gates the
features first, so the domain discriminator only sees regions the model
currently believes are road. Domain labels follow the convention
0 = source, 1 = target; the discriminator outputs P(target).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ConfigError, ModalityGuardError, NumericError

PROB_EPS = 1e-7
MODALITIES = ("rgb", "sn")


def downsample_attention(attention: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average a (B, H, W) attention map down to `size`.

    Averaging (not striding) keeps thin foreground structures visible at
    coarse resolutions. Upsampling is refused: gating uses attention at or
    below its native resolution.
    """
    if attention.ndim != 3:
        raise ConfigError(f"expected a (B, H, W) attention map, got shape {tuple(attention.shape)}")
    h, w = int(size[0]), int(size[1])
    if h <= 0 or w <= 0:
        raise ConfigError(f"invalid target size {(h, w)}")
    if h > attention.shape[-2] or w > attention.shape[-1]:
        raise ConfigError(
            f"cannot upsample attention from {tuple(attention.shape[-2:])} to {(h, w)}"
        )
    if (h, w) == tuple(attention.shape[-2:]):
        return attention
    return F.adaptive_avg_pool2d(attention.unsqueeze(1), (h, w)).squeeze(1)


def select_foreground(
    features: torch.Tensor,
    attention: torch.Tensor,
    modality: str,
    allow_sn: bool = False,
) -> torch.Tensor:
    """Gate `features` with `attention` before handing them to a discriminator.

    Aligning the surface-normal branch is off by default: SN features are
    nearly domain-invariant already, and adversarial pressure there degrades
    them. Pass `allow_sn=True` only to reproduce that ablation on purpose.
    """
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}, expected one of {MODALITIES}")
    if modality == "sn" and not allow_sn:
        raise ModalityGuardError(
            "selective alignment of the SN branch is disabled; pass allow_sn=True "
            "to override for ablation runs"
        )
    if features.ndim != 4 or attention.ndim != 3:
        raise ConfigError("select_foreground expects (B, C, H, W) features and (B, H, W) attention")
    if features.shape[-2:] != attention.shape[-2:] or features.shape[0] != attention.shape[0]:
        raise ConfigError(
            f"attention shape {tuple(attention.shape)} does not match features "
            f"{tuple(features.shape)}"
        )
    return features * attention.unsqueeze(1)


def _checked_probs(scores: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(scores).all():
        raise NumericError(f"{name} contains non-finite values")
    if scores.numel() == 0:
        raise ConfigError(f"{name} is empty")
    if scores.min() < 0 or scores.max() > 1:
        raise NumericError(f"{name} must lie in [0, 1]")
    return scores.clamp(PROB_EPS, 1.0 - PROB_EPS)


def adversarial_objective(
    d_source: torch.Tensor,
    d_target: torch.Tensor,
    sum_reduction: bool = False,
) -> torch.Tensor:
    """Objective the discriminator maximizes: log d_t + log(1 - d_s).

    The discriminator step minimizes the negation of this value. Scores are
    clamped away from {0, 1} so the logs stay finite. Default reduction is
    the mean over each batch; `sum_reduction` switches both terms to sums.
    """
    d_s = _checked_probs(d_source, "source scores")
    d_t = _checked_probs(d_target, "target scores")
    t_term = torch.log(d_t)
    s_term = torch.log(1.0 - d_s)
    if sum_reduction:
        return t_term.sum() + s_term.sum()
    return t_term.mean() + s_term.mean()


def generator_fool_loss(d_target: torch.Tensor, sum_reduction: bool = False) -> torch.Tensor:
    """Loss the generator minimizes: -log(1 - d_t).

    Driving target scores toward 0 makes target features indistinguishable
    from source features under the 0 = source convention.
    """
    d_t = _checked_probs(d_target, "target scores")
    term = -torch.log(1.0 - d_t)
    return term.sum() if sum_reduction else term.mean()
