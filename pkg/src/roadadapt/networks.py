"""Network building blocks: modality encoders, segmentation heads, domain
discriminator, and the assembled adaptation model.

The two modality encoders (RGB and surface normals) share one architecture
but never share parameters. Each submodule is initialized under its own
derived seed, so a model built with the same config seed always starts from
identical weights regardless of which optional branches exist.
"""

from __future__ import annotations

import contextlib
import dataclasses

import torch
import torch.nn.functional as F
from torch import nn

from .dataio import TrainConfig
from .errors import ConfigError, NumericError
from .seeding import int_seed_for

LEAKY_SLOPE = 0.2  # discriminator activation slope, fixed by contract
NORM_GROUPS = 8


@contextlib.contextmanager
def seeded_init(seed: int, name: str):
    """Construct modules under a derived seed without disturbing global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int_seed_for(seed, "init", name))
        yield


def conv_block(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(NORM_GROUPS, out_ch), out_ch),
        nn.ReLU(inplace=True),
    )


class SmallEncoder(nn.Module):
    """Four 3x3 conv blocks, widths 16/32/64/128, output stride 8.

    The final block keeps stride 1 so the retained stage sits at 1/8
    resolution. A 1x1 reduction maps the last stage to `reduced_channels`
    before any gating or alignment. The multi-scale variant additionally
    returns the 1/4-resolution stage (reduced to the same width), finest
    first, for backbones that stack several stages before the main head.
    """

    widths = (16, 32, 64, 128)
    strides = (2, 2, 2, 1)
    reduced_channels = 64

    def __init__(self, multi_scale: bool = False):
        super().__init__()
        self.multi_scale = multi_scale
        blocks = []
        in_ch = 3
        for width, stride in zip(self.widths, self.strides):
            blocks.append(conv_block(in_ch, width, stride))
            in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.reduce = nn.Sequential(
            nn.Conv2d(self.widths[-1], self.reduced_channels, kernel_size=1, bias=False),
            nn.GroupNorm(NORM_GROUPS, self.reduced_channels),
            nn.ReLU(inplace=True),
        )
        if multi_scale:
            self.reduce_mid = nn.Sequential(
                nn.Conv2d(self.widths[1], self.reduced_channels, kernel_size=1, bias=False),
                nn.GroupNorm(NORM_GROUPS, self.reduced_channels),
                nn.ReLU(inplace=True),
            )
        self.apply(_init_encoder_weights)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Return encoder stages, finest first."""
        if not torch.isfinite(x).all():
            raise NumericError("encoder input contains non-finite values")
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if self.multi_scale and i == 1:
                taps.append(self.reduce_mid(x))
        taps_last = self.reduce(x)
        if self.multi_scale:
            return [taps[0], taps_last]  # 1/4 then 1/8 resolution
        return [taps_last]

    @property
    def stage_count(self) -> int:
        return 2 if self.multi_scale else 1


@dataclasses.dataclass
class SegOutput:
    """Two-class segmentation logits with their softmax probabilities."""

    logits: torch.Tensor  # (B, 2, H', W')
    probs: torch.Tensor  # (B, 2, H', W'), softmax over channel dim

    @property
    def foreground(self) -> torch.Tensor:
        """Per-pixel foreground probability, channel 1 of the softmax."""
        return self.probs[:, 1]


class SegHead(nn.Module):
    """Two 1x1 convolutions producing 2-class logits."""

    def __init__(self, in_channels: int, mid_channels: int | None = None):
        super().__init__()
        if mid_channels is None:
            mid_channels = max(in_channels // 2, 16)
        self.conv1 = nn.Conv2d(in_channels, mid_channels, kernel_size=1)
        self.conv2 = nn.Conv2d(mid_channels, 2, kernel_size=1)
        self.apply(_init_encoder_weights)

    def forward(self, features: torch.Tensor) -> SegOutput:
        if features.shape[1] != self.conv1.in_channels:
            raise ConfigError(
                f"segmentation head expects {self.conv1.in_channels} channels, "
                f"got {features.shape[1]}"
            )
        logits = self.conv2(F.relu(self.conv1(features)))
        return SegOutput(logits=logits, probs=torch.softmax(logits, dim=1))


class Discriminator(nn.Module):
    """Fully convolutional domain classifier.

    Four stride-2 kernel-4 convolutions with channel ladder 64-128-256-512,
    LeakyReLU slope 0.2 after each, then a 1x1 conv to a single channel and a
    sigmoid. Output value = probability that the feature comes from the
    target domain (label convention: 0 source, 1 target). Spatial size is
    input/16 for inputs of at least 16; smaller inputs are padded to keep
    every intermediate dimension at least 1.
    """

    ladder = (64, 128, 256, 512)

    def __init__(self, in_channels: int):
        super().__init__()
        convs = []
        ch = in_channels
        for width in self.ladder:
            convs.append(nn.Conv2d(ch, width, kernel_size=4, stride=2, padding=1))
            ch = width
        self.convs = nn.ModuleList(convs)
        self.activation = nn.LeakyReLU(LEAKY_SLOPE, inplace=True)
        self.classifier = nn.Conv2d(ch, 1, kernel_size=1)
        self.apply(_init_discriminator_weights)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Return (B, h, w) target-domain probabilities in (0, 1)."""
        if not torch.isfinite(features).all():
            raise NumericError("discriminator input contains non-finite values")
        x = features
        for conv in self.convs:
            # stride-2 kernel-4 needs both spatial dims >= 2
            pad_h = 1 if x.shape[-2] == 1 else 0
            pad_w = 1 if x.shape[-1] == 1 else 0
            if pad_h or pad_w:
                x = F.pad(x, (0, pad_w, 0, pad_h))
            x = self.activation(conv(x))
        return torch.sigmoid(self.classifier(x))[:, 0]


def _init_encoder_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _init_discriminator_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


@dataclasses.dataclass
class ModelOutput:
    """Everything one forward pass produces."""

    main: SegOutput  # at the finest stage resolution
    stages: dict[str, list[torch.Tensor]]  # pre-gating encoder stages per modality
    aux_rgb: SegOutput | None = None
    aux_sn: SegOutput | None = None
    attn_rgb: torch.Tensor | None = None  # cross-guidance attention maps
    attn_sn: torch.Tensor | None = None


class AdaptationModel(nn.Module):
    """Dual-encoder segmentation network with optional guidance and alignment.

    Branch toggles come from the config: `use_sn` adds the surface-normal
    encoder, `use_ccg` adds cross-modality guidance between the two branches,
    and discriminators exist for every present modality so that runs that
    merely disable the adversarial term start from identical weights.
    """

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        multi_scale = cfg.backbone == "small-cnn-ms"
        seed = cfg.seed
        with seeded_init(seed, "rgb-encoder"):
            self.rgb_encoder = SmallEncoder(multi_scale)
        self.sn_encoder = None
        if cfg.use_sn:
            with seeded_init(seed, "sn-encoder"):
                self.sn_encoder = SmallEncoder(multi_scale)
        self.ccg = None
        if cfg.use_ccg:
            if not cfg.use_sn:
                raise ConfigError("cross-modality guidance requires the SN branch")
            from .guidance import CrossGuidance

            with seeded_init(seed, "ccg"):
                self.ccg = CrossGuidance(SmallEncoder.reduced_channels)

        stages = 2 if multi_scale else 1
        modalities = 2 if cfg.use_sn else 1
        with seeded_init(seed, "main-head"):
            self.main_head = SegHead(SmallEncoder.reduced_channels * stages * modalities)

        self.discriminators = nn.ModuleDict()
        with seeded_init(seed, "disc-rgb"):
            self.discriminators["rgb"] = Discriminator(SmallEncoder.reduced_channels)
        if cfg.use_sn:
            with seeded_init(seed, "disc-sn"):
                self.discriminators["sn"] = Discriminator(SmallEncoder.reduced_channels)

    # ---- parameter groups ------------------------------------------------

    def generator_parameters(self):
        """Encoders, guidance, and heads; excludes every discriminator."""
        for name, param in self.named_parameters():
            if not name.startswith("discriminators."):
                yield param

    def discriminator_parameters(self, modality: str):
        return self.discriminators[modality].parameters()

    # ---- forward ---------------------------------------------------------

    def forward(self, rgb: torch.Tensor, sn: torch.Tensor | None = None) -> ModelOutput:
        cfg = self.cfg
        stages_rgb = self.rgb_encoder(rgb)
        stages: dict[str, list[torch.Tensor]] = {"rgb": stages_rgb}
        aux_rgb = aux_sn = attn_rgb = attn_sn = None

        if cfg.use_sn:
            if sn is None:
                raise ConfigError("model has an SN branch but no SN input was given")
            stages_sn = self.sn_encoder(sn)
            stages["sn"] = stages_sn
            if self.ccg is not None:
                ccg_out = self.ccg(
                    stages_rgb,
                    stages_sn,
                    gate_modulated=cfg.gate_modulated,
                )
                head_stages = ccg_out.gated_rgb + ccg_out.gated_sn
                aux_rgb, aux_sn = ccg_out.aux_rgb, ccg_out.aux_sn
                attn_rgb, attn_sn = ccg_out.attn_rgb, ccg_out.attn_sn
            else:
                head_stages = stages_rgb + stages_sn
        else:
            head_stages = stages_rgb

        main_in = stack_to_finest(head_stages)
        main = self.main_head(main_in)
        return ModelOutput(
            main=main,
            stages=stages,
            aux_rgb=aux_rgb,
            aux_sn=aux_sn,
            attn_rgb=attn_rgb,
            attn_sn=attn_sn,
        )

    def upsampled_foreground(self, out: ModelOutput, size: tuple[int, int]) -> torch.Tensor:
        """Bilinearly upsample the main-head foreground probability to `size`."""
        prob = out.main.probs[:, 1:2]
        return F.interpolate(prob, size=size, mode="bilinear", align_corners=False)[:, 0]


def stack_to_finest(stages: list[torch.Tensor]) -> torch.Tensor:
    """Channel-concatenate stage maps, upsampling coarser ones bilinearly."""
    target = max((s.shape[-2], s.shape[-1]) for s in stages)
    aligned = [
        s
        if (s.shape[-2], s.shape[-1]) == target
        else F.interpolate(s, size=target, mode="bilinear", align_corners=False)
        for s in stages
    ]
    return torch.cat(aligned, dim=1)


def build_model(cfg: TrainConfig) -> AdaptationModel:
    return AdaptationModel(cfg)
