"""Class-wise RGB offsets found by particle swarm search against the ensemble
loss toward the shifted label plus image-quality hinge penalties."""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import config
from .data_io import clamp_image
from .errors import ErrorCode, ToolkitError, require
from .model_zoo import ModelGallery, ensemble_sample_losses
from .quality_metrics import PerceptualReference, SSIMReference, perceptual_distance, psnr, ssim
from .spatial_branch import ShiftRule, shift_label

LOG = logging.getLogger(__name__)


class ColorOffset(NamedTuple):
    dr: float = 0.0
    dg: float = 0.0
    db: float = 0.0

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self, dtype=dtype).reshape(3, 1, 1)


class NoiseConstraintConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau_psnr: float = config.TAU_PSNR
    tau_ssim: float = config.TAU_SSIM
    tau_perceptual: float = config.TAU_PERCEPTUAL
    lam: float = Field(config.DEFAULT_LAMBDA, ge=0)
    perceptual_backend: str = "gallery-feature"


class PSOConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    swarm_size: int = Field(config.PSO_SWARM_SIZE, ge=2)
    iterations: int = Field(config.PSO_ITERATIONS, ge=1)
    inertia: float = config.PSO_INERTIA
    cognitive: float = config.PSO_COGNITIVE
    social: float = config.PSO_SOCIAL
    bound: float = Field(config.PSO_BOUND, gt=0)
    velocity_clamp: Optional[float] = None
    seed: int = 0
    seed_origin: bool = True

    @model_validator(mode="after")
    def _default_velocity(self):
        if self.velocity_clamp is None:
            self.velocity_clamp = config.PSO_VELOCITY_FRACTION * self.bound
        if self.velocity_clamp <= 0:
            raise ValueError("velocity_clamp must be positive")
        return self


@dataclass
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    pbest_positions: np.ndarray
    pbest_values: np.ndarray
    gbest_position: np.ndarray
    gbest_value: float
    iteration: int = 0
    trace: List[float] = field(default_factory=list)

    def update_bests(self, values: np.ndarray) -> None:
        improved = values < self.pbest_values
        self.pbest_positions[improved] = self.positions[improved]
        self.pbest_values[improved] = values[improved]
        i = int(np.argmin(self.pbest_values))
        if self.pbest_values[i] < self.gbest_value:
            self.gbest_value = float(self.pbest_values[i])
            self.gbest_position = self.pbest_positions[i].copy()
        self.trace.append(self.gbest_value)


def apply_color_offset(x: torch.Tensor, offset: ColorOffset, clamp: bool = False) -> torch.Tensor:
    """Shift each RGB channel of an image or batch by its offset."""
    require(x.dim() in (3, 4) and x.shape[-3] == 3, f"expected 3-channel image(s), got {tuple(x.shape)}")
    out = x + offset.as_tensor(x.dtype)
    return clamp_image(out) if clamp else out


def _hinges(p, s, d, cfg: NoiseConstraintConfig):
    return (torch.clamp(cfg.tau_psnr - p, min=0) + torch.clamp(cfg.tau_ssim - s, min=0)
            + torch.clamp(d - cfg.tau_perceptual, min=0))


def noise_constraint_loss(x: torch.Tensor, x_adv: torch.Tensor, cfg: NoiseConstraintConfig, model=None):
    """Sum of the PSNR, SSIM and perceptual hinges; per-sample tensor for batches."""
    require(x.shape == x_adv.shape, f"shape mismatch: {tuple(x.shape)} vs {tuple(x_adv.shape)}")
    single = x.dim() == 3
    xb, ab = (x.unsqueeze(0), x_adv.unsqueeze(0)) if single else (x, x_adv)
    p = psnr(xb, ab)
    s = ssim(xb, ab)
    if cfg.tau_perceptual == math.inf:
        d = torch.zeros_like(p)
    else:
        d = perceptual_distance(xb, ab, cfg.perceptual_backend, model)
    loss = _hinges(p, s, d, cfg)
    return float(loss[0]) if single else loss


def color_objective(offset: ColorOffset, samples: torch.Tensor, y_star: int, gallery: ModelGallery,
                    cfg: NoiseConstraintConfig) -> float:
    """Sum over samples of [ensemble CE toward y_star + lambda * noise constraint],
    the same offset applied to every sample (clamped to valid pixels)."""
    require(len(samples) > 0, "colour objective needs at least one sample")
    shifted = apply_color_offset(samples, offset, clamp=True)
    labels = torch.full((len(samples),), int(y_star), dtype=torch.long)
    ce = ensemble_sample_losses(gallery, shifted, labels)
    per_sample = ce
    if cfg.lam > 0:
        per_sample = ce + cfg.lam * noise_constraint_loss(samples, shifted, cfg, gallery.members[0])
    return math.fsum(per_sample.tolist())


class ClassColorObjective:
    """``color_objective`` over one fixed subsample, for a whole swarm at once.

    The clean side of the noise constraint (SSIM window moments, perceptual
    features) is computed once. Calling with a (P, 3) array stacks the
    shifted copies of every particle and scores them in forward passes of
    at most ``max_batch`` images.
    """

    def __init__(self, samples: torch.Tensor, y_star: int, gallery: ModelGallery, cfg: NoiseConstraintConfig,
                 max_batch: int = config.COLOR_EVAL_BATCH):
        require(len(samples) > 0, "colour objective needs at least one sample")
        require(samples.dim() == 4 and samples.shape[1] == 3, f"expected 3-channel images, got {tuple(samples.shape)}")
        self.samples = samples
        self.y_star = int(y_star)
        self.gallery = gallery
        self.cfg = cfg
        self.per_pass = max(1, max_batch // len(samples))
        self.ssim_ref = self.perceptual_ref = None
        if cfg.lam > 0:
            self.ssim_ref = SSIMReference(samples)
            if cfg.tau_perceptual != math.inf:
                self.perceptual_ref = PerceptualReference(samples, cfg.perceptual_backend, gallery.members[0])

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        values = []
        for start in range(0, len(points), self.per_pass):
            values.extend(self._score(points[start:start + self.per_pass]))
        return np.asarray(values, dtype=np.float64)

    def _score(self, chunk: np.ndarray) -> List[float]:
        n = len(self.samples)
        offsets = torch.as_tensor(chunk, dtype=self.samples.dtype).reshape(len(chunk), 1, 3, 1, 1)
        shifted = clamp_image(self.samples.unsqueeze(0) + offsets).reshape(-1, *self.samples.shape[1:])
        labels = torch.full((len(shifted),), self.y_star, dtype=torch.long)
        per_sample = ensemble_sample_losses(self.gallery, shifted, labels)
        if self.cfg.lam > 0:
            clean = self.samples.repeat(len(chunk), 1, 1, 1)
            p = psnr(clean, shifted)
            s = self.ssim_ref.score(shifted)
            d = torch.zeros_like(p) if self.perceptual_ref is None else self.perceptual_ref.distance(shifted)
            per_sample = per_sample + self.cfg.lam * _hinges(p, s, d, self.cfg)
        return [math.fsum(row) for row in per_sample.reshape(len(chunk), n).tolist()]


def pso_minimize(objective: Callable[[np.ndarray], float], cfg: PSOConfig,
                 vectorized: bool = False) -> Tuple[ColorOffset, float, List[float]]:
    """Global-best particle swarm over the box [-bound, bound]^3.

    ``objective`` maps a point (3,) to a value, or with ``vectorized`` a
    (P, 3) array to (P,). Returns the best offset, its value and the
    best-so-far value after initialisation and after every iteration.
    """
    rng = np.random.default_rng(cfg.seed)
    dim, b, vmax = 3, cfg.bound, cfg.velocity_clamp
    state_iter = [0]

    def evaluate(points: np.ndarray) -> np.ndarray:
        values = np.asarray(objective(points) if vectorized else [objective(p) for p in points], dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ToolkitError(f"Non-finite PSO objective value at iteration {state_iter[0]}",
                               ErrorCode.OPTIMIZATION_FAILED, {"iteration": state_iter[0]})
        return values

    positions = rng.uniform(-b, b, size=(cfg.swarm_size, dim))
    if cfg.seed_origin:
        positions[0] = 0.0
    velocities = rng.uniform(-vmax, vmax, size=(cfg.swarm_size, dim))
    values = evaluate(positions)
    best = int(np.argmin(values))
    state = SwarmState(positions, velocities, positions.copy(), values.copy(),
                       positions[best].copy(), float(values[best]), trace=[float(values[best])])

    for it in range(1, cfg.iterations + 1):
        state_iter[0] = state.iteration = it
        u1 = rng.uniform(0.0, 1.0, size=state.positions.shape)
        u2 = rng.uniform(0.0, 1.0, size=state.positions.shape)
        state.velocities = (cfg.inertia * state.velocities
                            + cfg.cognitive * u1 * (state.pbest_positions - state.positions)
                            + cfg.social * u2 * (state.gbest_position - state.positions))
        state.velocities = np.clip(state.velocities, -vmax, vmax)
        state.positions = np.clip(state.positions + state.velocities, -b, b)
        state.update_bests(evaluate(state.positions))
        LOG.debug(f"PSO iteration {it}: best={state.gbest_value:.6f}")

    return ColorOffset(*map(float, state.gbest_position)), state.gbest_value, state.trace


def optimize_class_color(class_samples: torch.Tensor, y: int, rule: ShiftRule, gallery: ModelGallery,
                         N: int, pso: PSOConfig, constraint: NoiseConstraintConfig,
                         seed: Optional[int] = None) -> Tuple[ColorOffset, float]:
    """Pick min(N, n_p) samples once (seeded), then PSO the class offset
    toward the shifted label. Returns the offset and its objective value."""
    require(len(class_samples) > 0, f"class {y} has no samples")
    require(N >= 1, f"N must be >= 1, got {N}")
    rng = np.random.default_rng(pso.seed if seed is None else seed)
    n = min(N, len(class_samples))
    idx = np.sort(rng.choice(len(class_samples), size=n, replace=False))
    subset = class_samples[torch.as_tensor(idx, dtype=torch.long)]
    y_star = shift_label(y, rule)

    objective = ClassColorObjective(subset, y_star, gallery, constraint)
    offset, value, trace = pso_minimize(objective, pso, vectorized=True)
    LOG.info(f"Class {y} -> {y_star}: offset=({offset.dr:+.4f}, {offset.dg:+.4f}, {offset.db:+.4f}) "
             f"objective {trace[0]:.4f} -> {value:.4f} over {n} samples")
    return offset, value
