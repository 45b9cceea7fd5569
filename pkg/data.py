"""
Corpus ingestion, preprocessing and the synthetic bokeh generator.

SOD and DBD corpora share one layout: an image directory and a mask
directory whose files pair up by filename stem.  Masks are 8-bit
single-channel images where labels ``>= 128`` are the positive class;
after loading they are held as boolean arrays.

:func:`preprocess` turns a :class:`Sample` into network-ready tensors:
bilinear resize of the image, nearest-neighbour resize of the mask, a
joint random flip, colour jitter on the image only and ImageNet
normalisation.  All randomness comes from the generator passed in;
:func:`sample_rng` derives one generator per (seed, epoch, index) so
worker parallelism never changes the result.

:func:`synth_bokeh` produces a small deterministic corpus of sharp
shapes composited over a blurred background, for desk-scale runs
without the original datasets.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image, ImageDraw, ImageFilter, UnidentifiedImageError
from pydantic import BaseModel, Field, PositiveInt, field_validator
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode

logger = logging.getLogger(__name__)

# Channel statistics of the ImageNet classification corpus, matching the
# torchvision ResNet-50 weights.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MASK_THRESHOLD = 128
IMAGE_EXTS = (".png", ".jpg", ".jpeg")
MASK_EXTS = (".png",)
FOREGROUND_RANGE = (0.05, 0.7)


class CorpusError(RuntimeError):
    """Raised for missing directories, unpaired files and unreadable images."""


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    identifier: str

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise CorpusError(f"{self.identifier}: image must be (H, W, 3) uint8, got {self.image.shape} {self.image.dtype}")
        if self.mask.shape != self.image.shape[:2]:
            raise CorpusError(
                f"{self.identifier}: mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        self.mask = binarize(self.mask)


class CorpusSpec(BaseModel):
    root: str
    image_dir: str = "images"
    mask_dir: str = "masks"
    image_exts: Tuple[str, ...] = IMAGE_EXTS
    mask_exts: Tuple[str, ...] = MASK_EXTS

    @property
    def image_path(self) -> str:
        return os.path.join(self.root, self.image_dir)

    @property
    def mask_path(self) -> str:
        return os.path.join(self.root, self.mask_dir)


class AugmentConfig(BaseModel):
    flip_axis: Literal["vertical", "horizontal", "none"] = "vertical"
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    brightness: float = Field(0.2, ge=0.0, lt=1.0)
    contrast: float = Field(0.2, ge=0.0, lt=1.0)
    saturation: float = Field(0.2, ge=0.0, lt=1.0)
    target_size: Tuple[PositiveInt, PositiveInt] = (320, 320)

    @field_validator("target_size")
    @classmethod
    def _divisible(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] % 32 or value[1] % 32:
            raise ValueError(f"target_size must be divisible by 32, got {value[0]}x{value[1]}")
        return value

    @classmethod
    def identity(cls, target_size: Tuple[int, int]) -> "AugmentConfig":
        """Resize and normalise only; used for evaluation."""
        return cls(flip_axis="none", flip_prob=0.0, brightness=0.0, contrast=0.0, saturation=0.0, target_size=target_size)


def binarize(mask: np.ndarray) -> np.ndarray:
    """Boolean foreground mask; 8-bit labels are positive at ``>= 128``."""
    if mask.dtype == np.bool_:
        return mask
    return np.asarray(mask) >= MASK_THRESHOLD


def _list_by_stem(directory: str, exts: Sequence[str]) -> Dict[str, str]:
    found: Dict[str, str] = {}
    duplicates = []
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in exts:
            continue
        if stem in found:
            duplicates.append(stem)
        found[stem] = os.path.join(directory, name)
    if duplicates:
        raise CorpusError(f"{directory}: several files share the stem(s) {', '.join(duplicates)}")
    return found


def _read_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise CorpusError(f"cannot read image {path}: {exc}") from exc


def _read_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode == "1":
                img = img.convert("L")
            if img.mode != "L":
                raise CorpusError(f"mask {path} is not single-channel 8-bit (mode {img.mode})")
            return np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise CorpusError(f"cannot read mask {path}: {exc}") from exc


def load_corpus(spec: CorpusSpec) -> List[Sample]:
    """Load every image/mask pair of a corpus, ordered by identifier."""
    for directory in (spec.image_path, spec.mask_path):
        if not os.path.isdir(directory):
            raise CorpusError(f"corpus directory not found: {directory}")
    images = _list_by_stem(spec.image_path, spec.image_exts)
    masks = _list_by_stem(spec.mask_path, spec.mask_exts)

    lonely_images = sorted(set(images) - set(masks))
    lonely_masks = sorted(set(masks) - set(images))
    for stem in lonely_images:
        logger.warning("image without mask: %s", images[stem])
    for stem in lonely_masks:
        logger.warning("mask without image: %s", masks[stem])
    if lonely_images or lonely_masks:
        parts = []
        if lonely_images:
            parts.append("images without masks: " + ", ".join(lonely_images))
        if lonely_masks:
            parts.append("masks without images: " + ", ".join(lonely_masks))
        raise CorpusError(f"{spec.root}: unpaired files ({'; '.join(parts)})")

    samples = []
    for stem in sorted(images):
        image = _read_image(images[stem])
        mask = _read_mask(masks[stem])
        if mask.shape != image.shape[:2]:
            raise CorpusError(f"{stem}: mask {mask.shape} and image {image.shape[:2]} differ in size")
        samples.append(Sample(image=image, mask=binarize(mask), identifier=stem))
    logger.info("loaded %d image/mask pairs from %s", len(samples), spec.root)
    return samples


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _jitter(image: torch.Tensor, aug: AugmentConfig, draws: np.ndarray) -> torch.Tensor:
    """Brightness, contrast and saturation, each scaled by ``1 +- strength`` from its draw."""
    if aug.brightness:
        image = TF.adjust_brightness(image, float(1.0 + aug.brightness * (2.0 * draws[0] - 1.0)))
    if aug.contrast:
        image = TF.adjust_contrast(image, float(1.0 + aug.contrast * (2.0 * draws[1] - 1.0)))
    if aug.saturation:
        image = TF.adjust_saturation(image, float(1.0 + aug.saturation * (2.0 * draws[2] - 1.0)))
    return image


def preprocess(sample: Sample, aug: AugmentConfig, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(image (3, H, W), mask (1, H, W))`` float32 tensors at ``aug.target_size``."""
    size = list(aug.target_size)
    image = TF.to_tensor(sample.image)
    mask = torch.from_numpy(sample.mask.astype(np.float32))[None]
    if list(image.shape[-2:]) != size:
        image = TF.resize(image, size, interpolation=InterpolationMode.BILINEAR, antialias=True)
        mask = TF.resize(mask, size, interpolation=InterpolationMode.NEAREST)

    # fixed number of draws per sample keeps the stream layout stable
    flip_draw, *jitter_draws = rng.random(4)
    if aug.flip_axis != "none" and flip_draw < aug.flip_prob:
        flip = TF.vflip if aug.flip_axis == "vertical" else TF.hflip
        image = flip(image)
        mask = flip(mask)
    image = _jitter(image, aug, np.asarray(jitter_draws))
    return TF.normalize(image, IMAGENET_MEAN, IMAGENET_STD), mask


class SegmentationDataset(Dataset):
    """Preprocessed samples for one epoch; call :meth:`set_epoch` between epochs."""

    def __init__(self, samples: Sequence[Sample], aug: AugmentConfig, seed: int = 0):
        self.samples = list(samples)
        self.aug = aug
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return preprocess(self.samples[index], self.aug, sample_rng(self.seed, self.epoch, index))


# ---------------------------------------------------------------------------
# synthetic bokeh corpus
# ---------------------------------------------------------------------------

def _draw_shapes(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    canvas = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(canvas)
    short = min(height, width)
    for _ in range(int(rng.integers(1, 4))):
        cx = float(rng.uniform(0, width))
        cy = float(rng.uniform(0, height))
        if rng.random() < 0.5:
            rx = float(rng.uniform(short / 8, short / 3))
            ry = float(rng.uniform(short / 8, short / 3))
            draw.ellipse((cx - rx, cy - ry, cx + rx, cy + ry), fill=255)
        else:
            count = int(rng.integers(3, 7))
            angles = np.sort(rng.uniform(0, 2 * np.pi, count))
            radii = rng.uniform(short / 8, short / 2.5, count)
            points = [(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(angles, radii)]
            draw.polygon([(float(x), float(y)) for x, y in points], fill=255)
    return np.asarray(canvas) >= MASK_THRESHOLD


def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    base = rng.uniform(40, 215, size=3)
    noise = rng.normal(0.0, 60.0, size=(height, width, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def synth_bokeh(n: int, seed: int, size: Tuple[int, int] = (64, 64)) -> List[Sample]:
    """Generate ``n`` samples of sharp shapes over a Gaussian-blurred background.

    The mask marks the sharp (in-focus) shapes.  Foreground fractions
    outside ``FOREGROUND_RANGE`` are rejected and redrawn.
    """
    if n < 1:
        raise ValueError(f"synth_bokeh needs n >= 1, got {n}")
    height, width = size
    radius = max(1.5, min(height, width) / 32.0)
    samples = []
    for index in range(n):
        rng = np.random.default_rng([seed, index])
        while True:
            mask = _draw_shapes(rng, height, width)
            if FOREGROUND_RANGE[0] <= mask.mean() <= FOREGROUND_RANGE[1]:
                break
        background = Image.fromarray(_texture(rng, height, width)).filter(ImageFilter.GaussianBlur(radius))
        image = np.where(mask[..., None], _texture(rng, height, width), np.asarray(background))
        samples.append(Sample(image=image.astype(np.uint8), mask=mask, identifier=f"synth_{seed}_{index:05d}"))
    return samples


def write_corpus(samples: Sequence[Sample], root: str, image_dir: str = "images", mask_dir: str = "masks") -> CorpusSpec:
    """Write samples as PNG pairs in the layout :func:`load_corpus` reads."""
    spec = CorpusSpec(root=root, image_dir=image_dir, mask_dir=mask_dir)
    try:
        os.makedirs(spec.image_path, exist_ok=True)
        os.makedirs(spec.mask_path, exist_ok=True)
        for sample in samples:
            Image.fromarray(sample.image).save(os.path.join(spec.image_path, sample.identifier + ".png"))
            labels = np.where(sample.mask, 255, 0).astype(np.uint8)
            Image.fromarray(labels).save(os.path.join(spec.mask_path, sample.identifier + ".png"))
    except OSError as exc:
        raise CorpusError(f"cannot write corpus to {root}: {exc}") from exc
    logger.info("wrote %d samples to %s", len(samples), root)
    return spec
