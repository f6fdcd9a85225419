"""PSNR, SSIM and a pluggable perceptual distance.

All metrics take a single image (C, H, W) and return a float, or a batch
(B, C, H, W) and return a float64 tensor of per-sample values.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .config import PSNR_CAP_DB, SSIM_C1, SSIM_C2, SSIM_WINDOW
from .errors import ErrorCode, ToolkitError, require

LOG = logging.getLogger(__name__)

Score = Union[float, torch.Tensor]


@dataclass(frozen=True)
class QualityScores:
    psnr: float
    ssim: float
    perceptual: float


def _pair(a: torch.Tensor, b: torch.Tensor):
    require(a.shape == b.shape, f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    return a.double(), b.double(), single


def _out(values: torch.Tensor, single: bool) -> Score:
    return float(values[0]) if single else values


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP_DB) -> Score:
    """10 log10(1 / MSE) for peak 1.0; identical images score ``cap``."""
    a, b, single = _pair(a, b)
    mse = ((a - b) ** 2).flatten(1).mean(dim=1)
    db = torch.where(mse > 0, 10.0 * torch.log10(1.0 / mse.clamp_min(1e-300)), torch.full_like(mse, cap))
    return _out(db.clamp_max(cap), single)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW) -> Score:
    """Mean SSIM over every valid ``window`` x ``window`` uniform window and channel."""
    a, b, single = _pair(a, b)
    return _out(SSIMReference(a, window).score(b), single)


class SSIMReference:
    """Window moments of a fixed reference batch, kept for repeated SSIM queries.

    ``score`` accepts a batch holding one or more stacked copies of the
    reference's shape, compared against the reference tiled to match.
    """

    def __init__(self, a: torch.Tensor, window: int = SSIM_WINDOW):
        a = a.double()
        require(a.dim() == 4, f"expected a (B, C, H, W) batch, got {tuple(a.shape)}")
        require(a.shape[-1] >= window and a.shape[-2] >= window,
                f"image {tuple(a.shape[-2:])} smaller than the {window}x{window} SSIM window")
        self.image = a
        self.window = window
        self.mu = self._mean(a)
        self.var = self._mean(a * a) - self.mu ** 2

    def _mean(self, t: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(t, self.window, stride=1)

    def score(self, b: torch.Tensor) -> torch.Tensor:
        copies = _copies(self.image, b)
        a = self.image.repeat(copies, 1, 1, 1)
        mu_a, var_a = self.mu.repeat(copies, 1, 1, 1), self.var.repeat(copies, 1, 1, 1)
        b = b.double()
        mu_b = self._mean(b)
        var_b = self._mean(b * b) - mu_b ** 2
        cov = self._mean(a * b) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        return (num / den).flatten(1).mean(dim=1)


def _copies(reference: torch.Tensor, b: torch.Tensor) -> int:
    n = len(reference)
    require(b.dim() == 4 and tuple(b.shape[1:]) == tuple(reference.shape[1:]) and len(b) % n == 0,
            f"batch {tuple(b.shape)} is not a stack of copies of {tuple(reference.shape)}")
    return len(b) // n


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                             PERCEPTUAL BACKENDS                              #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

PerceptualBackend = Callable[[torch.Tensor, torch.Tensor, Optional[object]], torch.Tensor]


def _unit_features(x: torch.Tensor, model) -> List[torch.Tensor]:
    if model is None:
        raise ToolkitError("gallery-feature backend needs a model (first gallery member)", ErrorCode.CONFIG_INVALID)
    dtype = next(model.net.parameters()).dtype
    out = []
    for f in model.features(x.to(dtype)):
        f = f.double()
        if f.dim() == 2:
            f = f[:, :, None, None]
        out.append(f / (f.norm(dim=1, keepdim=True) + 1e-10))
    return out


def _feature_gap(fa: Sequence[torch.Tensor], fb: Sequence[torch.Tensor]) -> torch.Tensor:
    total = torch.zeros(len(fb[0]), dtype=torch.float64)
    for a, b in zip(fa, fb):
        total += ((a - b) ** 2).sum(dim=1).flatten(1).mean(dim=1)
    return total


def gallery_feature_distance(a: torch.Tensor, b: torch.Tensor, model=None) -> torch.Tensor:
    """LPIPS-shaped distance on a classifier's intermediate feature maps.

    Every block output is unit-normalised along channels; the squared
    difference is averaged over space and summed over blocks.
    """
    return _feature_gap(_unit_features(a, model), _unit_features(b, model))


PERCEPTUAL_BACKENDS: Dict[str, PerceptualBackend] = {
    "gallery-feature": gallery_feature_distance,
}


def register_perceptual_backend(name: str, backend: PerceptualBackend) -> None:
    """Hook for an external implementation (e.g. a real LPIPS network).

    The backend receives two (B, C, H, W) batches and the optional model and
    returns a (B,) tensor of non-negative distances.
    """
    PERCEPTUAL_BACKENDS[name] = backend
    LOG.info(f"Registered perceptual backend '{name}'")


def _zero_identical(a: torch.Tensor, b: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    # exactly zero for identical inputs, whatever the backend's rounding
    same = (a == b).flatten(1).all(dim=1)
    return torch.where(same, torch.zeros_like(d), d.clamp_min(0.0))


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, backend: str = "gallery-feature", model=None) -> Score:
    if backend not in PERCEPTUAL_BACKENDS:
        raise ToolkitError(f"Unknown perceptual backend: {backend}", ErrorCode.UNKNOWN_BACKEND)
    a, b, single = _pair(a, b)
    d = PERCEPTUAL_BACKENDS[backend](a, b, model).double()
    return _out(_zero_identical(a, b, d), single)


class PerceptualReference:
    """``perceptual_distance`` from a fixed reference batch to many candidates.

    With the built-in gallery-feature backend the reference's feature maps
    are extracted once; other backends are called on the tiled pair. ``distance``
    accepts one or more stacked copies of the reference's shape.
    """

    def __init__(self, a: torch.Tensor, backend: str = "gallery-feature", model=None):
        if backend not in PERCEPTUAL_BACKENDS:
            raise ToolkitError(f"Unknown perceptual backend: {backend}", ErrorCode.UNKNOWN_BACKEND)
        self.image = a.double()
        self.backend = backend
        self.model = model
        self.features = None
        if PERCEPTUAL_BACKENDS[backend] is gallery_feature_distance:
            self.features = _unit_features(self.image, model)

    def distance(self, b: torch.Tensor) -> torch.Tensor:
        copies = _copies(self.image, b)
        a, b = self.image.repeat(copies, 1, 1, 1), b.double()
        if self.features is None:
            d = PERCEPTUAL_BACKENDS[self.backend](a, b, self.model).double()
        else:
            fa = [f.repeat(copies, 1, 1, 1) for f in self.features]
            d = _feature_gap(fa, _unit_features(b, self.model))
        return _zero_identical(a, b, d)


def quality_scores(a: torch.Tensor, b: torch.Tensor, backend: str = "gallery-feature", model=None,
                   chunk: int = 1024) -> QualityScores:
    """All three metrics for one pair, or their means over a batch (scored ``chunk`` images at a time)."""
    if a.dim() == 3:
        return QualityScores(psnr=psnr(a, b), ssim=ssim(a, b), perceptual=perceptual_distance(a, b, backend, model))
    require(a.shape == b.shape and len(a) > 0,
            f"need two equal non-empty batches, got {tuple(a.shape)} vs {tuple(b.shape)}")
    sums = [0.0, 0.0, 0.0]
    for start in range(0, len(a), chunk):
        pa, pb = a[start:start + chunk], b[start:start + chunk]
        for i, values in enumerate((psnr(pa, pb), ssim(pa, pb), perceptual_distance(pa, pb, backend, model))):
            sums[i] += float(values.sum())
    return QualityScores(*(s / len(a) for s in sums))
