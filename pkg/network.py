"""
The AFIU network: backbone pyramid, interaction encoder and residual-U decoder.

A ResNet-50 backbone produces five feature levels E1..E5 (strides 2-32).
Each level is encoded by an AIM over its neighbors, a SIM and a fusion
stack into EC1..EC5, all ``interaction_width`` channels wide.  The
decoder runs an RSU at every level, deepest first, concatenating each
encoded level with the upsampled decoding from the level below it.  A
1x1 convolution and a sigmoid turn D1 into a probability map, which is
upsampled x2 to the input resolution.

Checkpoints hold every entry of the model's ``state_dict`` and a
metadata block (stage tag, lineage, seed, config digest, and the model
configuration needed to rebuild the network).  Loading replaces the
whole parameter set; name sets must match exactly.
"""
import logging
from datetime import datetime, timezone
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, Field, PositiveInt, field_validator, model_validator
from torchvision.models import ResNet50_Weights, resnet50

from blocks import AIM, RSU, SIM, BlockSpec, Fuse, ShapeError, resample
from store import CheckpointError, format_kv, nest, parse_kv, read_container, write_container

logger = logging.getLogger(__name__)

LEVELS = (1, 2, 3, 4, 5)
PYRAMID_CHANNELS = (64, 256, 512, 1024, 2048)
STAGE_TAGS = ("sod-pretrained", "dbd-finetuned", "scratch")

# Levels whose decoder always runs dilated: for an arbitrary multiple-of-32
# input their features are not divisible by 2**(depth - 1).
ALWAYS_DILATED = (4, 5)

# Probabilities are kept strictly inside (0, 1); float32 sigmoid saturates.
PROB_EPS = 1e-7


class AFIUConfig(BaseModel):
    """Architecture record for :class:`AFIU`."""

    input_size: Tuple[PositiveInt, PositiveInt] = (320, 320)
    interaction_width: PositiveInt = 64
    rsu_depths: Dict[int, int] = Field(default_factory=lambda: {1: 2, 2: 2, 3: 3, 4: 4, 5: 5})
    rsu_mid_channels: Optional[PositiveInt] = None
    dilated_levels: Optional[List[int]] = None
    dilation_threshold: PositiveInt = 16
    backbone_init: Literal["random", "pretrained"] = "random"
    backbone_weights: Optional[str] = None

    @field_validator("input_size")
    @classmethod
    def _divisible(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] % 32 or value[1] % 32:
            raise ValueError(f"input_size must be divisible by 32, got {value[0]}x{value[1]}")
        return value

    @field_validator("rsu_depths")
    @classmethod
    def _depths(cls, value: Dict[int, int]) -> Dict[int, int]:
        if sorted(value) != list(LEVELS):
            raise ValueError(f"rsu_depths must name levels 1..5, got {sorted(value)}")
        low = {level: depth for level, depth in value.items() if depth < 2}
        if low:
            raise ValueError(f"rsu_depths must be >= 2, got {low}")
        return value

    @field_validator("dilated_levels")
    @classmethod
    def _levels(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(level not in LEVELS for level in value):
            raise ValueError(f"dilated_levels must be within 1..5, got {value}")
        return value

    @classmethod
    def tiny(cls) -> "AFIUConfig":
        """Reduced profile for desk-scale runs: width 8, depths capped at 3, 64x64."""
        return cls(input_size=(64, 64), interaction_width=8, rsu_depths={1: 2, 2: 2, 3: 3, 4: 3, 5: 3})

    def resolved_dilated_levels(self) -> List[int]:
        if self.dilated_levels is not None:
            return sorted(set(self.dilated_levels) | set(ALWAYS_DILATED))
        height, width = self.input_size
        small = {
            level for level in LEVELS
            if min(height, width) // 2 ** level <= self.dilation_threshold
        }
        return sorted(small | set(ALWAYS_DILATED))


class BackbonePyramid(NamedTuple):
    E1: torch.Tensor
    E2: torch.Tensor
    E3: torch.Tensor
    E4: torch.Tensor
    E5: torch.Tensor


class LineageEntry(BaseModel):
    stage: Literal["sod-pretrained", "dbd-finetuned", "scratch"]
    epochs: int
    checkpoint: str = ""


class CheckpointMetadata(BaseModel):
    stage: Literal["sod-pretrained", "dbd-finetuned", "scratch"]
    epochs: int = 0
    iterations: int = 0
    seed: int = 0
    config_digest: str = ""
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    init_from: Optional[str] = None
    lineage: List[LineageEntry] = Field(default_factory=list)
    model: AFIUConfig = Field(default_factory=AFIUConfig)

    @model_validator(mode="after")
    def _lineage_ends_here(self) -> "CheckpointMetadata":
        if self.lineage and self.lineage[-1].stage != self.stage:
            raise ValueError(f"lineage ends with {self.lineage[-1].stage!r} but stage is {self.stage!r}")
        return self


class Backbone(nn.Module):
    """ResNet-50 cut into the five pyramid levels."""

    def __init__(self, config: AFIUConfig):
        super().__init__()
        weights = None
        if config.backbone_init == "pretrained" and not config.backbone_weights:
            weights = ResNet50_Weights.IMAGENET1K_V1
        net = resnet50(weights=weights)
        if config.backbone_weights:
            state = torch.load(config.backbone_weights, map_location="cpu")
            net.load_state_dict(state)
            logger.info("loaded backbone weights from %s", config.backbone_weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, image: torch.Tensor) -> BackbonePyramid:
        e1 = self.stem(image)
        e2 = self.layer1(self.pool(e1))
        e3 = self.layer2(e2)
        e4 = self.layer3(e3)
        e5 = self.layer4(e4)
        return BackbonePyramid(e1, e2, e3, e4, e5)


def neighbor_indices(level: int) -> List[int]:
    """0-based pyramid indices feeding the AIM at ``level``, shallow to deep."""
    if level == 1:
        return [0, 1]
    if level == 5:
        return [3, 4]
    return [level - 2, level - 1, level]


class EncoderLevel(nn.Module):
    def __init__(self, level: int, width: int):
        super().__init__()
        self.level = level
        in_channels = [PYRAMID_CHANNELS[i] for i in neighbor_indices(level)]
        self.aim = AIM(BlockSpec(in_channels=in_channels, out_channels=width, level=level))
        self.sim = SIM(BlockSpec(in_channels=[width], out_channels=width, level=level))
        self.fuse = Fuse(BlockSpec(in_channels=[width], out_channels=width, level=level))

    def forward(self, neighbors: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.fuse(self.sim(self.aim(neighbors)))


class AFIU(nn.Module):
    """Full network.

    Which decoder levels run dilated is fixed at construction from
    ``config.input_size`` (see :meth:`AFIUConfig.resolved_dilated_levels`),
    not from the tensor passed to :meth:`forward`.  An input of another
    size keeps that plan: running the 320 default on a 64x64 image leaves
    the 8x8 level-3 feature undilated, and a size that an undilated RSU
    cannot pool raises :class:`ShapeError`.  Build the model with the
    input size it will see.
    """

    def __init__(self, config: AFIUConfig):
        super().__init__()
        self.config = config
        width = config.interaction_width
        dilated = set(config.resolved_dilated_levels())
        self.backbone = Backbone(config)
        self.encoder = nn.ModuleList(EncoderLevel(level, width) for level in LEVELS)
        self.decoder = nn.ModuleList(
            RSU(
                BlockSpec(
                    in_channels=[width if level == 5 else 2 * width],
                    out_channels=width,
                    level=level,
                    rsu_depth=config.rsu_depths[level],
                    dilated=level in dilated,
                    mid_channels=config.rsu_mid_channels,
                )
            )
            for level in LEVELS
        )
        self.head = nn.Conv2d(width, 1, 1)

    def backbone_extract(self, image: torch.Tensor) -> BackbonePyramid:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected an (N, 3, H, W) image batch, got shape {tuple(image.shape)}")
        height, width = image.shape[-2:]
        if height % 32 or width % 32:
            raise ShapeError(f"input size must be divisible by 32, got {height}x{width}")
        return self.backbone(image)

    def encode(self, pyramid: BackbonePyramid) -> List[torch.Tensor]:
        return [
            level_encoder([pyramid[i] for i in neighbor_indices(level_encoder.level)])
            for level_encoder in self.encoder
        ]

    def decode(self, encoded: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(encoded) != len(LEVELS):
            raise ShapeError(f"decode expects {len(LEVELS)} encoded levels, got {len(encoded)}")
        width = self.config.interaction_width
        for level, ec in zip(LEVELS, encoded):
            if ec.shape[1] != width:
                raise ShapeError(f"EC{level} has {ec.shape[1]} channels, decoder expects {width}")
        decoded = self.decoder[4](encoded[4])
        for index in (3, 2, 1, 0):
            decoded = self.decoder[index](torch.cat([encoded[index], resample(decoded, 2, "image")], dim=1))
        return decoded

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        d1 = self.decode(self.encode(self.backbone_extract(image)))
        prob = resample(torch.sigmoid(self.head(d1)), 2, "image")
        return prob.clamp(PROB_EPS, 1.0 - PROB_EPS)


def build_model(config: AFIUConfig, seed: Optional[int] = None) -> AFIU:
    """Construct an :class:`AFIU`, seeding torch first when ``seed`` is given."""
    if seed is not None:
        torch.manual_seed(seed)
    return AFIU(config)


@torch.no_grad()
def predict(model: AFIU, images: torch.Tensor) -> torch.Tensor:
    """Inference in eval mode; returns (N, 1, H, W) probabilities."""
    was_training = model.training
    model.eval()
    try:
        return model(images)
    finally:
        model.train(was_training)


def metadata_text(metadata: CheckpointMetadata) -> str:
    return format_kv(metadata.model_dump(mode="json"))


def parse_metadata(text: str) -> CheckpointMetadata:
    try:
        return CheckpointMetadata.model_validate(nest(parse_kv(text)))
    except ValueError as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from exc


def save_checkpoint(model: nn.Module, path: str, metadata: CheckpointMetadata) -> str:
    write_container(path, model.state_dict(), metadata_text(metadata))
    logger.info("saved %s checkpoint (%d epochs) to %s", metadata.stage, metadata.epochs, path)
    return path


def read_checkpoint(path: str) -> Tuple[Dict[str, torch.Tensor], CheckpointMetadata]:
    tensors, text = read_container(path)
    return tensors, parse_metadata(text)


def load_checkpoint(path: str, model: nn.Module) -> CheckpointMetadata:
    """Replace every parameter and buffer of ``model`` with the checkpoint's."""
    tensors, metadata = read_checkpoint(path)
    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected: " + ", ".join(unexpected))
        raise CheckpointError(f"{path} does not match the model ({'; '.join(parts)})")
    wrong = [
        f"{name} {tuple(tensors[name].shape)} vs {tuple(value.shape)}"
        for name, value in expected.items()
        if tensors[name].shape != value.shape
    ]
    if wrong:
        raise CheckpointError(f"{path} has mismatched shapes: {', '.join(wrong)}")
    model.load_state_dict(tensors, strict=True)
    logger.info(
        "loaded %s checkpoint from %s (lineage: %s)",
        metadata.stage,
        path,
        " -> ".join(f"{entry.stage}@{entry.epochs}" for entry in metadata.lineage) or "none",
    )
    return metadata
