"""Collaborative cross-modality guidance between the RGB and SN branches.

Each branch first gets channel-modulated by a global context vector computed
from the *other* branch, then predicts an auxiliary 2-class map whose
foreground softmax serves as a spatial attention. Finally each branch's
features are gated by the attention coming from the other branch, and the
gated features feed the main head.

The attention maps are detached before gating by default, so the auxiliary
heads learn only from their own supervision: with both auxiliary loss
weights at zero the auxiliary parameters receive no gradient at all.
"""

from __future__ import annotations

import dataclasses

import torch
from torch import nn

from .alignment import downsample_attention
from .errors import ConfigError
from .networks import SegHead, SegOutput


def gce(feature: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Global context encoding: sigmoid of a linear map of the GAP vector.

    feature: (B, C, H, W); weight: (C, C). Returns (B, C) in (0, 1).
    """
    if feature.ndim != 4:
        raise ConfigError(f"expected a (B, C, H, W) feature map, got shape {tuple(feature.shape)}")
    channels = feature.shape[1]
    if weight.shape != (channels, channels):
        raise ConfigError(
            f"context weight must be ({channels}, {channels}), got {tuple(weight.shape)}"
        )
    pooled = feature.mean(dim=(2, 3))
    return torch.sigmoid(pooled @ weight.T)


def modulate(feature: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
    """Scale each channel of `feature` by the per-channel `context` vector."""
    if feature.ndim != 4 or context.ndim != 2:
        raise ConfigError("modulate expects a (B, C, H, W) map and a (B, C) vector")
    if feature.shape[:2] != context.shape:
        raise ConfigError(
            f"context shape {tuple(context.shape)} does not match feature "
            f"batch/channels {tuple(feature.shape[:2])}"
        )
    return feature * context[:, :, None, None]


def foreground_attention(seg: SegOutput) -> torch.Tensor:
    """Foreground softmax channel of a 2-class prediction, shape (B, H, W)."""
    if seg.probs.shape[1] != 2:
        raise ConfigError(f"expected 2-class probabilities, got {seg.probs.shape[1]} channels")
    return seg.probs[:, 1]


def cross_gate(feature: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Multiply every channel of `feature` by the spatial `attention` map."""
    if feature.ndim != 4 or attention.ndim != 3:
        raise ConfigError("cross_gate expects a (B, C, H, W) map and a (B, H, W) attention")
    if feature.shape[-2:] != attention.shape[-2:] or feature.shape[0] != attention.shape[0]:
        raise ConfigError(
            f"attention shape {tuple(attention.shape)} does not match feature "
            f"shape {tuple(feature.shape)}"
        )
    return feature * attention.unsqueeze(1)


@dataclasses.dataclass
class CCGOutput:
    """Gated stages for both branches plus the auxiliary predictions."""

    gated_rgb: list[torch.Tensor]
    gated_sn: list[torch.Tensor]
    aux_rgb: SegOutput
    aux_sn: SegOutput
    attn_rgb: torch.Tensor  # (B, H, W) foreground attention of the RGB aux head
    attn_sn: torch.Tensor


class CrossGuidance(nn.Module):
    """Two symmetric guidance paths over same-width RGB and SN features.

    `ctx_sn_to_rgb` maps the SN global-context vector onto the RGB channels
    (and vice versa). Multi-scale inputs gate every stage with the attention
    computed at the finest one, area-averaged down to each stage's size.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.ctx_sn_to_rgb = nn.Linear(channels, channels, bias=False)
        self.ctx_rgb_to_sn = nn.Linear(channels, channels, bias=False)
        self.aux_rgb = SegHead(channels)
        self.aux_sn = SegHead(channels)
        for linear in (self.ctx_sn_to_rgb, self.ctx_rgb_to_sn):
            nn.init.kaiming_normal_(linear.weight, mode="fan_in", nonlinearity="sigmoid")

    def forward(
        self,
        stages_rgb: list[torch.Tensor],
        stages_sn: list[torch.Tensor],
        detach_attention: bool = True,
        gate_modulated: bool = False,
    ) -> CCGOutput:
        if len(stages_rgb) != len(stages_sn):
            raise ConfigError("both modalities must provide the same number of stages")
        f_rgb, f_sn = stages_rgb[0], stages_sn[0]
        if f_rgb.shape != f_sn.shape:
            raise ConfigError(
                f"finest stages disagree: {tuple(f_rgb.shape)} vs {tuple(f_sn.shape)}"
            )

        mod_rgb = modulate(f_rgb, gce(f_sn, self.ctx_sn_to_rgb.weight))
        mod_sn = modulate(f_sn, gce(f_rgb, self.ctx_rgb_to_sn.weight))
        aux_rgb = self.aux_rgb(mod_rgb)
        aux_sn = self.aux_sn(mod_sn)
        attn_rgb = foreground_attention(aux_rgb)
        attn_sn = foreground_attention(aux_sn)
        gate_rgb = attn_rgb.detach() if detach_attention else attn_rgb
        gate_sn = attn_sn.detach() if detach_attention else attn_sn

        # each branch is gated by the attention of the opposite branch
        base_rgb = [mod_rgb if gate_modulated else f_rgb] + stages_rgb[1:]
        base_sn = [mod_sn if gate_modulated else f_sn] + stages_sn[1:]
        gated_rgb = [cross_gate(s, _fit(gate_sn, s)) for s in base_rgb]
        gated_sn = [cross_gate(s, _fit(gate_rgb, s)) for s in base_sn]
        return CCGOutput(
            gated_rgb=gated_rgb,
            gated_sn=gated_sn,
            aux_rgb=aux_rgb,
            aux_sn=aux_sn,
            attn_rgb=attn_rgb,
            attn_sn=attn_sn,
        )


def _fit(attention: torch.Tensor, stage: torch.Tensor) -> torch.Tensor:
    """Match an attention map to a stage's spatial size by area averaging."""
    if attention.shape[-2:] == stage.shape[-2:]:
        return attention
    return downsample_attention(attention, stage.shape[-2:])
