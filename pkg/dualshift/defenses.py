"""Defenses against unlearnable data: grayscale and JPEG squeezing, adversarial
training, and the two adaptive noise defenses (random channel/spatial noise,
channel shifts combined with adversarial training)."""

import io
import logging
from typing import Literal

import numpy as np
import torch
from PIL import Image, __version__ as PIL_VERSION, features
from pydantic import BaseModel, ConfigDict, Field

from . import config
from .data_io import LabeledDataset, clamp_image, from_uint8_hwc, to_uint8_hwc
from .errors import ErrorCode, ToolkitError, require
from .model_zoo import Classifier, TrainSpec, train_surrogate
from .spatial_branch import project_linf

LOG = logging.getLogger(__name__)

DefenseKind = Literal["none", "grayscale", "jpeg", "at", "adaptive_random", "adaptive_channel_at"]

DATASET_DEFENSES = ("grayscale", "jpeg", "adaptive_random")
TRAINING_DEFENSES = ("at", "adaptive_channel_at")

# short keys accepted by parse_defense ("jpeg:quality=10", "at:eps=0.03,steps=5")
_PARAM_ALIASES = {
    "quality": "jpeg_quality",
    "eps": "at_epsilon",
    "epsilon": "at_epsilon",
    "steps": "at_steps",
    "noise": "spatial_noise",
    "refresh": "refresh_per_epoch",
}


class DefenseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: DefenseKind = "none"
    jpeg_quality: int = Field(config.JPEG_QUALITY, ge=1, le=100)
    at_epsilon: float = Field(config.AT_EPSILON, ge=0)
    at_steps: int = Field(config.AT_STEPS, ge=1)
    r_c: float = Field(0.0, ge=0)
    r_s: float = Field(0.0, ge=0)
    q_c: float = Field(0.0, ge=0)
    q_s: float = Field(0.0, ge=0)
    spatial_noise: Literal["gaussian", "uniform"] = "gaussian"
    refresh_per_epoch: bool = False
    seed: int = 0

    @property
    def level(self) -> str:
        if self.kind in DATASET_DEFENSES:
            return "dataset"
        if self.kind in TRAINING_DEFENSES:
            return "training"
        return "none"

    @property
    def label(self) -> str:
        """Short name used as the defense column of reports."""
        if self.kind == "jpeg":
            return f"jpeg(q={self.jpeg_quality})"
        if self.kind == "at":
            return f"at(eps={self.at_epsilon:.4g})"
        if self.kind == "adaptive_random":
            return f"adaptive_random(r_c={self.r_c:g},r_s={self.r_s:g})"
        if self.kind == "adaptive_channel_at":
            return f"adaptive_channel_at(q_c={self.q_c:g},q_s={self.q_s:g})"
        return self.kind


def parse_defense(text: str) -> DefenseConfig:
    """Parse ``kind[:key=value,...]``."""
    kind, _, params = text.partition(":")
    values = {"kind": kind.strip()}
    for item in filter(None, (p.strip() for p in params.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ToolkitError(f"Malformed defense parameter '{item}' in '{text}'", ErrorCode.CONFIG_INVALID)
        values[_PARAM_ALIASES.get(key.strip(), key.strip())] = value.strip()
    return DefenseConfig.model_validate(values)


def codec_info() -> dict:
    """The JPEG codec in use; encoders are not bit-identical across versions."""
    return {"codec": "Pillow/libjpeg", "pillow": PIL_VERSION, "libjpeg": features.version("jpg")}


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                              DATASET DEFENSES                                #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def _require_rgb(x: torch.Tensor) -> None:
    require(x.dim() in (3, 4) and x.shape[-3] == 3, f"expected 3-channel image(s), got {tuple(x.shape)}")


def defense_grayscale(x: torch.Tensor) -> torch.Tensor:
    """BT.601 luminance replicated over the three channels."""
    _require_rgb(x)
    w = torch.tensor(config.GRAY_WEIGHTS, dtype=x.dtype).reshape(3, 1, 1)
    y = (x * w).sum(dim=-3, keepdim=True)
    return clamp_image(y.expand_as(x).clone())


def _jpeg_one(image: torch.Tensor, quality: int) -> torch.Tensor:
    with io.BytesIO() as buf:
        Image.fromarray(to_uint8_hwc(image)).save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        with Image.open(buf) as im:
            return from_uint8_hwc(np.asarray(im.convert("RGB"))).to(image.dtype)


def defense_jpeg(x: torch.Tensor, quality: int = config.JPEG_QUALITY) -> torch.Tensor:
    """Baseline JPEG encode/decode round trip at ``quality``."""
    require(isinstance(quality, int) and 1 <= quality <= 100, f"JPEG quality must be in [1, 100], got {quality}")
    _require_rgb(x)
    if x.dim() == 3:
        return _jpeg_one(x, quality)
    return torch.stack([_jpeg_one(im, quality) for im in x])


def channel_shift(x: torch.Tensor, radius: float, generator: torch.Generator) -> torch.Tensor:
    """Per-image, per-channel constant shifts drawn from U(-radius, radius)."""
    batch = x.unsqueeze(0) if x.dim() == 3 else x
    u = torch.rand((len(batch), batch.shape[1], 1, 1), generator=generator, dtype=x.dtype)
    shifted = batch + (2 * u - 1) * radius
    return shifted[0] if x.dim() == 3 else shifted


def _spatial_noise(x: torch.Tensor, scale: float, kind: str, generator: torch.Generator) -> torch.Tensor:
    if kind == "uniform":
        return (2 * torch.rand(x.shape, generator=generator, dtype=x.dtype) - 1) * scale
    return torch.randn(x.shape, generator=generator, dtype=x.dtype) * scale


def _adaptive_random(x: torch.Tensor, r_c: float, r_s: float, generator: torch.Generator,
                     spatial_noise: str = "gaussian") -> torch.Tensor:
    noisy = channel_shift(x, r_c, generator)
    noisy = noisy + _spatial_noise(x, r_s, spatial_noise, generator)
    return clamp_image(noisy)


def adaptive_random(x_u: torch.Tensor, r_c: float, r_s: float, seed: int = 0,
                    spatial_noise: str = "gaussian") -> torch.Tensor:
    """x + eta_c + eta_s, clamped: eta_c ~ U(-r_c, r_c) per channel, eta_s zero-mean
    Gaussian with std r_s per pixel (or U(-r_s, r_s) with ``spatial_noise='uniform'``)."""
    require(r_c >= 0 and r_s >= 0, f"noise radii must be non-negative, got r_c={r_c}, r_s={r_s}")
    _require_rgb(x_u)
    return _adaptive_random(x_u, r_c, r_s, torch.Generator().manual_seed(seed), spatial_noise)


def apply_dataset_defense(dataset: LabeledDataset, cfg: DefenseConfig) -> LabeledDataset:
    """Transform every training image once; labels and shapes are preserved."""
    if cfg.kind == "grayscale":
        images = defense_grayscale(dataset.images)
    elif cfg.kind == "jpeg":
        images = defense_jpeg(dataset.images, cfg.jpeg_quality)
    elif cfg.kind == "adaptive_random":
        images = adaptive_random(dataset.images, cfg.r_c, cfg.r_s, cfg.seed, cfg.spatial_noise)
    else:
        raise ToolkitError(f"'{cfg.kind}' is not a dataset-level defense", ErrorCode.CONFIG_INVALID)
    LOG.info(f"Applied {cfg.label} to {len(dataset)} samples of '{dataset.name}'")
    return dataset.with_images(images, name=f"{dataset.name}+{cfg.kind}")


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                              TRAINING DEFENSES                               #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def pgd_maximize(clf: Classifier, x: torch.Tensor, y: torch.Tensor, epsilon: float, steps: int,
                 generator: torch.Generator, step_size: float = None) -> torch.Tensor:
    """Error-maximising l-inf PGD from a uniform random start inside the ball.

    A zero radius returns the batch untouched without consuming randomness.
    """
    if epsilon <= 0:
        return x.clone()
    step_size = epsilon / 4 if step_size is None else step_size
    start = (2 * torch.rand(x.shape, generator=generator, dtype=x.dtype) - 1) * epsilon
    xt = clamp_image(x + start)
    for _ in range(steps):
        _, g = clf.loss_and_input_grad(xt, y)
        xt = clamp_image(project_linf(xt + step_size * torch.sign(g), x, epsilon))
    return xt.detach()


def adversarial_training(dataset: LabeledDataset, spec: TrainSpec, epsilon: float = config.AT_EPSILON,
                         steps: int = config.AT_STEPS) -> Classifier:
    """Train on inner-max PGD examples (radius ``epsilon``, step epsilon/4) of every batch."""
    require(epsilon > 0, f"adversarial radius must be positive, got {epsilon}")
    require(steps >= 1, f"adversarial steps must be >= 1, got {steps}")

    def transform(clf, x, y, generator):
        return pgd_maximize(clf, x, y, epsilon, steps, generator)

    return train_surrogate(dataset, spec, batch_transform=transform, desc="adversarial training")


def adaptive_channel_at(dataset: LabeledDataset, spec: TrainSpec, q_c: float, q_s: float,
                        steps: int = config.AT_STEPS) -> Classifier:
    """Fresh per-channel shifts U(-q_c, q_c) on every batch, then inner-max PGD of radius q_s.

    Channel shifts come from their own stream so that q_c = 0 reproduces
    plain adversarial training exactly, and q_s = 0 as well reproduces
    vanilla training.
    """
    require(q_c >= 0 and q_s >= 0, f"noise strengths must be non-negative, got q_c={q_c}, q_s={q_s}")
    require(steps >= 1, f"adversarial steps must be >= 1, got {steps}")
    shift_gen = torch.Generator().manual_seed(spec.seed + 0xC0105)

    def transform(clf, x, y, generator):
        if q_c > 0:
            x = clamp_image(channel_shift(x, q_c, shift_gen))
        return pgd_maximize(clf, x, y, q_s, steps, generator)

    return train_surrogate(dataset, spec, batch_transform=transform, desc="channel-shift adversarial training")


def refreshed_adaptive_random(cfg: DefenseConfig):
    """Batch transform redrawing the adaptive random noise for every batch."""
    def transform(clf, x, y, generator):
        return _adaptive_random(x, cfg.r_c, cfg.r_s, generator, cfg.spatial_noise)
    return transform
