"""Segmentation architectures: slow fusion, early fusion, and early
fusion with 2D-to-3D filter inflation.

All three share a VGG-16 style convolutional feature extractor (five
blocks, 2-2-3-3-3 convs, max-pool after each block) and a U-Net style
transpose-convolution decoder with a 3-class softmax head.

Slow fusion (SF) runs one encoder per image input (the four perfusion
maps, plus the MIP when enabled) and merges them gradually: each decoder
level concatenates the previous decoder features with every encoder's
pooled block output at the same resolution before upsampling.

Early fusion (EF) concatenates the inputs over channels, reduces them to
3 channels with a 1x1 convolution, and runs a single encoder.

Early fusion with inflation (EFI) stacks the inputs along a new temporal
axis and runs a single 3D encoder whose cubic filters are obtained from
2D ones by temporal replication scaled by 1/depth; the temporal axis is
collapsed by global average pooling before the 2D decoder.

The clinical severity score, when enabled as an input, is normalized to
[0, 1], projected by a small dense layer, broadcast spatially and
concatenated into the bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ctpseg.data import DatasetError

VGG16_BLOCKS: tuple[tuple[int, int], ...] = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
N_BLOCKS = 5
DOWNSAMPLE_FACTOR = 2**N_BLOCKS
NUM_CLASSES = 3
NIHSS_MAX = 42.0

# Conv indices of the torchvision VGG-16 ``features`` sequence, used to
# map pretrained checkpoints onto our per-block layout.
_TORCHVISION_VGG16_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)

PMS, MIP, NIHSS = "pms", "mip", "nihss"
PM_INPUT_ORDER = ("cbf", "cbv", "ttp", "tmax")

EFI_TEMPORAL_KERNEL = 3


class ModelError(ValueError):
    pass


class MissingInputError(ModelError):
    pass


class PretrainedIncompatibleError(ModelError):
    pass


class FusionMode(Enum):
    SLOW_FUSION = "SF"
    EARLY_FUSION = "EF"
    EARLY_FUSION_INFLATED = "EFI"


class FreezeMode(Enum):
    FROZEN = "Frozen"
    UNFROZEN = "Unfrozen"
    GRADUAL = "Gradual"


class FreezeStage(Enum):
    ALL_FROZEN = "AllFrozen"
    BOTTOM_HALF_UNFROZEN = "BottomHalfUnfrozen"
    ALL_UNFROZEN = "AllUnfrozen"


@dataclass
class EncoderSpec:
    blocks: tuple[tuple[int, int], ...] = VGG16_BLOCKS
    width_multiplier: float = 1.0
    pretrained: bool = False
    dropout_rate: float = 0.0  # applied to the encoder's final features

    def __post_init__(self):
        self.blocks = tuple((int(n), int(w)) for n, w in self.blocks)
        if len(self.blocks) != N_BLOCKS:
            raise ModelError(f"encoder needs exactly {N_BLOCKS} blocks (skip per block)")
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ModelError("width_multiplier must be in (0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must be in [0, 1)")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, round(w * self.width_multiplier)) for _, w in self.blocks)

    @property
    def conv_counts(self) -> tuple[int, ...]:
        return tuple(n for n, _ in self.blocks)

    def to_dict(self) -> dict:
        return {
            "blocks": [list(b) for b in self.blocks],
            "width_multiplier": self.width_multiplier,
            "pretrained": self.pretrained,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EncoderSpec":
        return cls(
            blocks=tuple(tuple(b) for b in raw["blocks"]),
            width_multiplier=raw["width_multiplier"],
            pretrained=raw["pretrained"],
            dropout_rate=raw["dropout_rate"],
        )


@dataclass
class ModelConfig:
    fusion: FusionMode = FusionMode.SLOW_FUSION
    inputs: frozenset[str] = frozenset({PMS})
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    freeze_mode: FreezeMode = FreezeMode.UNFROZEN
    input_size: tuple[int, int] = (64, 64)
    bottleneck_convs: int = 2
    bottleneck_dropout: float = 0.5

    def __post_init__(self):
        self.inputs = frozenset(self.inputs)
        unknown = self.inputs - {PMS, MIP, NIHSS}
        if unknown:
            raise ModelError(f"unknown inputs {sorted(unknown)}")
        if PMS not in self.inputs:
            raise ModelError("the parametric maps are a mandatory input")
        h, w = self.input_size
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ModelError(f"input_size must be divisible by {DOWNSAMPLE_FACTOR}")
        if self.bottleneck_convs < 1:
            raise ModelError("bottleneck needs at least one conv")
        if not 0.0 <= self.bottleneck_dropout < 1.0:
            raise ModelError("bottleneck_dropout must be in [0, 1)")

    @property
    def image_inputs(self) -> tuple[str, ...]:
        names = list(PM_INPUT_ORDER)
        if MIP in self.inputs:
            names.append("mip")
        return tuple(names)

    @property
    def n_image_inputs(self) -> int:
        return len(self.image_inputs)

    @property
    def uses_nihss(self) -> bool:
        return NIHSS in self.inputs

    def to_dict(self) -> dict:
        return {
            "fusion": self.fusion.value,
            "inputs": sorted(self.inputs),
            "encoder": self.encoder.to_dict(),
            "freeze_mode": self.freeze_mode.value,
            "input_size": list(self.input_size),
            "bottleneck_convs": self.bottleneck_convs,
            "bottleneck_dropout": self.bottleneck_dropout,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(
            fusion=FusionMode(raw["fusion"]),
            inputs=frozenset(raw["inputs"]),
            encoder=EncoderSpec.from_dict(raw["encoder"]),
            freeze_mode=FreezeMode(raw["freeze_mode"]),
            input_size=tuple(raw["input_size"]),
            bottleneck_convs=raw["bottleneck_convs"],
            bottleneck_dropout=raw["bottleneck_dropout"],
        )


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class VggEncoder(nn.Module):
    """Five conv blocks with 2x2 max-pooling; returns each block's pooled output."""

    def __init__(self, spec: EncoderSpec, in_channels: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList()
        ch = in_channels
        for n_convs, width in zip(spec.conv_counts, spec.widths):
            layers = []
            for _ in range(n_convs):
                layers += [nn.Conv2d(ch, width, 3, padding=1), nn.ReLU(inplace=True)]
                ch = width
            layers.append(nn.MaxPool2d(2))
            self.blocks.append(nn.Sequential(*layers))
        self.feature_dropout = nn.Dropout2d(spec.dropout_rate)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        skips[-1] = self.feature_dropout(skips[-1])
        return skips

    def conv_layers(self) -> list[nn.Conv2d]:
        return [m for block in self.blocks for m in block if isinstance(m, nn.Conv2d)]


class InflatedConv3d(nn.Module):
    """3x3x3 convolution with replicate padding along the temporal axis,
    so a temporally constant input reproduces the 2D convolution frame
    for frame once the weights follow the replicate-and-rescale rule."""

    def __init__(self, in_channels: int, out_channels: int, temporal_kernel: int):
        super().__init__()
        self.conv = nn.Conv3d(
            in_channels, out_channels, (temporal_kernel, 3, 3), padding=(0, 1, 1)
        )
        self.temporal_kernel = temporal_kernel

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pad = self.temporal_kernel // 2
        x = F.pad(x, (0, 0, 0, 0, pad, pad), mode="replicate")
        return self.conv(x)


class InflatedVggEncoder(nn.Module):
    """VGG blocks with inflated cubic filters; pooling is spatial-only so
    the short temporal axis survives to the bottleneck."""

    def __init__(self, spec: EncoderSpec, in_channels: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList()
        ch = in_channels
        for n_convs, width in zip(spec.conv_counts, spec.widths):
            layers = []
            for _ in range(n_convs):
                layers += [
                    InflatedConv3d(ch, width, EFI_TEMPORAL_KERNEL),
                    nn.ReLU(inplace=True),
                ]
                ch = width
            layers.append(nn.MaxPool3d((1, 2, 2)))
            self.blocks.append(nn.Sequential(*layers))
        self.feature_dropout = nn.Dropout3d(spec.dropout_rate)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        skips[-1] = self.feature_dropout(skips[-1])
        return skips

    def conv_layers(self) -> list[nn.Conv3d]:
        return [
            m.conv
            for block in self.blocks
            for m in block
            if isinstance(m, InflatedConv3d)
        ]


class Bottleneck(nn.Module):
    def __init__(self, in_channels: int, width: int, n_convs: int, dropout: float):
        super().__init__()
        layers = []
        ch = in_channels
        for _ in range(n_convs):
            layers += [nn.Conv2d(ch, width, 3, padding=1), nn.ReLU(inplace=True)]
            ch = width
        layers.append(nn.Dropout2d(dropout))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class DecoderLevel(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        self.conv = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.up(x))
        return F.relu(self.conv(x))


class Decoder(nn.Module):
    """Five transpose-conv levels, deepest first; level i consumes the
    previous decoder features concatenated with every encoder's pooled
    block-i output."""

    def __init__(self, widths: tuple[int, ...], n_encoders: int, in_channels: int):
        super().__init__()
        self.levels = nn.ModuleList()
        ch = in_channels
        for width in reversed(widths):
            self.levels.append(DecoderLevel(ch + n_encoders * width, width))
            ch = width

    def forward(self, x: torch.Tensor, encoder_skips: list[list[torch.Tensor]]) -> torch.Tensor:
        for level_idx, level in enumerate(self.levels):
            block_idx = N_BLOCKS - 1 - level_idx
            skips = [skips_e[block_idx] for skips_e in encoder_skips]
            x = level(torch.cat([x, *skips], dim=1))
        return x


# ---------------------------------------------------------------------------
# The realized network
# ---------------------------------------------------------------------------


@dataclass
class LayerInfo:
    name: str
    kind: str  # encoder | input_fusion | nihss | bottleneck | decoder | head
    encoder_id: int | None
    block_index: int | None  # encoder block (0-based), encoders only
    frozen: bool
    param_shapes: list[tuple[int, ...]]


class ModelGraph(nn.Module):
    """Realized network plus a layer registry describing per-layer role
    and freeze state.  Built via :func:`build_model`."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.encoder.widths
        w_top = widths[-1]

        if config.fusion is FusionMode.SLOW_FUSION:
            self.encoders = nn.ModuleList(
                VggEncoder(config.encoder) for _ in range(config.n_image_inputs)
            )
            self.input_fusion = None
            bottleneck_in = config.n_image_inputs * w_top
        elif config.fusion is FusionMode.EARLY_FUSION:
            self.input_fusion = nn.Conv2d(3 * config.n_image_inputs, 3, 1)
            self.encoders = nn.ModuleList([VggEncoder(config.encoder)])
            bottleneck_in = w_top
        else:
            self.input_fusion = None
            self.encoders = nn.ModuleList([InflatedVggEncoder(config.encoder)])
            bottleneck_in = w_top

        if config.uses_nihss:
            self.nihss_dim = max(4, round(32 * config.encoder.width_multiplier))
            self.nihss_proj = nn.Linear(1, self.nihss_dim)
            bottleneck_in += self.nihss_dim
        else:
            self.nihss_dim = 0
            self.nihss_proj = None

        self.bottleneck = Bottleneck(
            bottleneck_in, w_top, config.bottleneck_convs, config.bottleneck_dropout
        )
        self.decoder = Decoder(widths, len(self.encoders), w_top)
        self.head = nn.Conv2d(widths[0], NUM_CLASSES, 1)

    # -- input handling ----------------------------------------------------

    def _image_tensors(self, batch: dict) -> list[torch.Tensor]:
        device = next(self.parameters()).device
        images = []
        shape = None
        for name in self.config.image_inputs:
            if name not in batch:
                raise MissingInputError(f"batch is missing the {name!r} input")
            arr = batch[name]
            t = torch.as_tensor(np.asarray(arr) if not isinstance(arr, torch.Tensor) else arr)
            t = t.to(device=device, dtype=torch.float32)
            if name == "mip":
                if t.ndim != 3:
                    raise ModelError(f"mip must be (batch, H, W), got {tuple(t.shape)}")
                t = t.unsqueeze(-1).expand(*t.shape, 3)  # grayscale -> 3 channels
            if t.ndim != 4 or t.shape[-1] != 3:
                raise ModelError(f"{name} must be (batch, H, W, 3), got {tuple(t.shape)}")
            if shape is None:
                shape = t.shape
            elif t.shape != shape:
                raise ModelError(
                    f"{name} shape {tuple(t.shape)} differs from {tuple(shape)}"
                )
            images.append(t.permute(0, 3, 1, 2).contiguous())
        h, w = images[0].shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ModelError(
                f"spatial size {(h, w)} must be divisible by {DOWNSAMPLE_FACTOR}"
            )
        return images

    def _nihss_tensor(self, batch: dict, batch_size: int) -> torch.Tensor | None:
        if not self.config.uses_nihss:
            return None
        if "nihss" not in batch or batch["nihss"] is None:
            raise MissingInputError("model is configured with the severity score input")
        raw = batch["nihss"]
        values = raw.tolist() if hasattr(raw, "tolist") else list(raw)
        if any(v is None for v in values):
            raise MissingInputError("severity score absent for a patient in the batch")
        device = next(self.parameters()).device
        t = torch.tensor(values, dtype=torch.float32, device=device).reshape(-1, 1)
        if t.shape[0] != batch_size:
            raise ModelError(f"expected {batch_size} severity scores, got {t.shape[0]}")
        return t / NIHSS_MAX

    # -- forward -----------------------------------------------------------

    def encoder_features(self, batch: dict) -> torch.Tensor:
        """Concatenated encoder output entering the bottleneck (temporal
        axis already collapsed for the inflated variant), without the
        severity-score channels."""
        images = self._image_tensors(batch)
        skips = self._encoder_skips(images)
        return torch.cat([s[-1] for s in skips], dim=1)

    def _encoder_skips(self, images: list[torch.Tensor]) -> list[list[torch.Tensor]]:
        cfg = self.config
        if cfg.fusion is FusionMode.SLOW_FUSION:
            return [enc(img) for enc, img in zip(self.encoders, images)]
        if cfg.fusion is FusionMode.EARLY_FUSION:
            fused = self.input_fusion(torch.cat(images, dim=1))
            return [self.encoders[0](fused)]
        stacked = torch.stack(images, dim=2)  # (B, 3, T, H, W)
        skips3d = self.encoders[0](stacked)
        return [[s.mean(dim=2) for s in skips3d]]

    def forward(self, batch: dict) -> torch.Tensor:
        """Batch of named inputs -> per-pixel class probabilities,
        shaped (batch, H, W, 3) with softmax over the last axis."""
        images = self._image_tensors(batch)
        nihss = self._nihss_tensor(batch, images[0].shape[0])
        skips = self._encoder_skips(images)
        features = torch.cat([s[-1] for s in skips], dim=1)
        if nihss is not None:
            proj = F.relu(self.nihss_proj(nihss))
            h, w = features.shape[-2:]
            proj = proj[:, :, None, None].expand(-1, -1, h, w)
            features = torch.cat([features, proj], dim=1)
        x = self.bottleneck(features)
        x = self.decoder(x, skips)
        logits = self.head(x)
        return torch.softmax(logits, dim=1).permute(0, 2, 3, 1)

    # -- registry ----------------------------------------------------------

    def _classify(self, name: str) -> tuple[str, int | None, int | None]:
        if name.startswith("encoders."):
            parts = name.split(".")
            encoder_id = int(parts[1])
            block_index = int(parts[3]) if parts[2] == "blocks" else None
            return "encoder", encoder_id, block_index
        if name.startswith("input_fusion"):
            return "input_fusion", None, None
        if name.startswith("nihss_proj"):
            return "nihss", None, None
        if name.startswith("bottleneck"):
            return "bottleneck", None, None
        if name.startswith("decoder"):
            return "decoder", None, None
        if name.startswith("head"):
            return "head", None, None
        raise ModelError(f"unclassified module {name!r}")

    def layer_registry(self) -> list[LayerInfo]:
        registry = []
        for name, module in self.named_modules():
            params = list(module.parameters(recurse=False))
            if not params:
                continue
            kind, encoder_id, block_index = self._classify(name)
            registry.append(
                LayerInfo(
                    name=name,
                    kind=kind,
                    encoder_id=encoder_id,
                    block_index=block_index,
                    frozen=all(not p.requires_grad for p in params),
                    param_shapes=[tuple(p.shape) for p in params],
                )
            )
        return registry

    @property
    def encoder_count(self) -> int:
        return len(self.encoders)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig) -> ModelGraph:
    """Construct the network described by ``config``; weight initialization
    draws from torch's global generator, so seed before calling for
    reproducible builds."""
    return ModelGraph(config)


# ---------------------------------------------------------------------------
# Freezing
# ---------------------------------------------------------------------------

# Encoder blocks trainable in the middle fine-tuning stage: the deeper
# half (blocks 3-5).  Flip ``deeper_half_trainable`` for the rival
# reading of "bottom half" (blocks nearest the input).
_DEEP_HALF = (2, 3, 4)
_SHALLOW_HALF = (0, 1)


def set_freeze_stage(
    model: ModelGraph,
    stage: FreezeStage,
    deeper_half_trainable: bool = True,
) -> None:
    """Set requires_grad on encoder layers; the bottleneck, decoder, head,
    input-fusion conv and severity projection always stay trainable."""
    trainable_blocks: tuple[int, ...]
    if stage is FreezeStage.ALL_FROZEN:
        trainable_blocks = ()
    elif stage is FreezeStage.ALL_UNFROZEN:
        trainable_blocks = (0, 1, 2, 3, 4)
    else:
        trainable_blocks = _DEEP_HALF if deeper_half_trainable else _SHALLOW_HALF
    for encoder in model.encoders:
        for block_index, block in enumerate(encoder.blocks):
            requires = block_index in trainable_blocks
            for p in block.parameters():
                p.requires_grad_(requires)


def initial_stage(mode: FreezeMode) -> FreezeStage:
    if mode is FreezeMode.FROZEN or mode is FreezeMode.GRADUAL:
        return FreezeStage.ALL_FROZEN
    return FreezeStage.ALL_UNFROZEN


# ---------------------------------------------------------------------------
# Weight inflation and pretrained loading
# ---------------------------------------------------------------------------


def inflate_weights(w2d, depth: int):
    """2D filter bank (out, in, kh, kw) -> 3D bank (out, in, depth, kh, kw):
    each filter replicated ``depth`` times along the temporal axis and
    divided by ``depth``.  Accepts torch tensors or numpy arrays."""
    if depth < 1:
        raise ModelError(f"depth must be >= 1, got {depth}")
    is_numpy = isinstance(w2d, np.ndarray)
    w = torch.as_tensor(w2d)
    if w.ndim != 4:
        raise ModelError(f"expected a 4D filter bank, got shape {tuple(w.shape)}")
    w3d = w.unsqueeze(2).repeat(1, 1, depth, 1, 1) / depth
    return w3d.numpy() if is_numpy else w3d


def inflate_encoder_from(encoder2d: VggEncoder, encoder3d: InflatedVggEncoder) -> None:
    """Initialize an inflated encoder from a 2D encoder with equal layout."""
    convs2d = encoder2d.conv_layers()
    convs3d = encoder3d.conv_layers()
    if len(convs2d) != len(convs3d):
        raise PretrainedIncompatibleError(
            f"encoder layouts differ: {len(convs2d)} vs {len(convs3d)} convs"
        )
    with torch.no_grad():
        for c2, c3 in zip(convs2d, convs3d):
            depth = c3.weight.shape[2]
            inflated = inflate_weights(c2.weight.data, depth)
            if inflated.shape != c3.weight.shape:
                raise PretrainedIncompatibleError(
                    f"filter shape {tuple(inflated.shape)} vs {tuple(c3.weight.shape)}"
                )
            c3.weight.copy_(inflated)
            c3.bias.copy_(c2.bias.data)


def _extract_feature_convs(state_dict: dict) -> list[tuple[torch.Tensor, torch.Tensor]]:
    pairs = []
    for idx in _TORCHVISION_VGG16_CONV_INDICES:
        wk, bk = f"features.{idx}.weight", f"features.{idx}.bias"
        if wk not in state_dict or bk not in state_dict:
            raise PretrainedIncompatibleError(
                f"weight source lacks VGG-16 feature key {wk!r}"
            )
        pairs.append((torch.as_tensor(state_dict[wk]), torch.as_tensor(state_dict[bk])))
    return pairs


def load_pretrained(model: ModelGraph, weights_source: Path | str) -> None:
    """Initialize every encoder's conv layers from a VGG-16 weight file
    (torchvision ``features`` naming); the decoder and bottleneck keep
    their random initialization.  Inflated encoders pass the filters
    through :func:`inflate_weights`."""
    if model.config.encoder.width_multiplier != 1.0:
        raise PretrainedIncompatibleError(
            "pretrained weights require width_multiplier == 1"
        )
    path = Path(weights_source)
    if not path.exists():
        raise FileNotFoundError(f"pretrained weight file not found: {weights_source}")
    state_dict = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state_dict, dict) and "state_dict" in state_dict:
        state_dict = state_dict["state_dict"]
    pairs = _extract_feature_convs(state_dict)

    for encoder in model.encoders:
        convs = encoder.conv_layers()
        if len(convs) != len(pairs):
            raise PretrainedIncompatibleError(
                f"encoder has {len(convs)} convs, source has {len(pairs)}"
            )
        with torch.no_grad():
            for conv, (w, b) in zip(convs, pairs):
                if conv.weight.ndim == 5:
                    w = inflate_weights(w, conv.weight.shape[2])
                if tuple(conv.weight.shape) != tuple(w.shape):
                    raise PretrainedIncompatibleError(
                        f"shape mismatch: model {tuple(conv.weight.shape)} vs "
                        f"source {tuple(w.shape)}"
                    )
                conv.weight.copy_(w)
                conv.bias.copy_(b)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "ctpseg-checkpoint/1"


def save_checkpoint(model: ModelGraph, path: Path | str, **metadata) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "metadata": metadata,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path | str) -> tuple[ModelGraph, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"not a model checkpoint: {path}")
    model = build_model(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("metadata", {})
