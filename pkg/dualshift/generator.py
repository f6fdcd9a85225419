"""Per-class colour offset search, per-sample spatial descent, combination and clamp."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from .color_branch import ColorOffset, NoiseConstraintConfig, PSOConfig, apply_color_offset, optimize_class_color
from .config import DEFAULT_COLOR_SAMPLES, SSIM_WINDOW
from .data_io import DatasetManifest, LabeledDataset, PerturbationInfo, clamp_image, partition_by_class
from .errors import ErrorCode, ToolkitError, require
from .model_zoo import ModelGallery, load_gallery
from .quality_metrics import psnr, quality_scores
from .spatial_branch import PGDConfig, ShiftRule, pgd_toward_shift_label

LOG = logging.getLogger(__name__)

# Seed fan-out: every (phase, class) pair gets its own stream derived from the
# master seed with numpy's counter-based SeedSequence spawn keys.
PHASE_SUBSAMPLE = 1
PHASE_PSO = 2


def derive_seed(master_seed: int, phase: int, class_id: int) -> int:
    return int(np.random.SeedSequence(master_seed, spawn_key=(phase, class_id)).generate_state(1)[0])


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rule: ShiftRule = ShiftRule()
    pgd: PGDConfig = PGDConfig()
    pso: PSOConfig = PSOConfig()
    constraint: NoiseConstraintConfig = NoiseConstraintConfig()
    N: int = Field(DEFAULT_COLOR_SAMPLES, ge=1)
    gallery_dir: Optional[str] = None
    master_seed: int = 0
    enable_spatial: bool = True
    enable_color: bool = True
    enable_ensemble: bool = True
    # ablation: run spatial descent from the colour-shifted image instead of the clean one
    spatial_on_colored: bool = False
    pgd_batch_size: int = Field(256, ge=1)
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _one_branch(self):
        if not (self.enable_spatial or self.enable_color):
            raise ValueError("at least one of enable_spatial / enable_color must be set")
        return self


class GenerationRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    color_offsets: Dict[int, Tuple[float, float, float]]
    color_objectives: Dict[int, float] = {}
    spatial_linf: List[float]
    spatial_within_bound: bool
    phase_seconds: Dict[str, float]
    quality: Dict[str, float] = {}
    config: Dict


@dataclass
class _ClassResult:
    indices: List[int]
    images: torch.Tensor
    offset: ColorOffset
    objective: float
    linf: torch.Tensor
    color_s: float
    spatial_s: float


def combine_perturbations(x: torch.Tensor, delta_s: torch.Tensor, delta_c: ColorOffset) -> torch.Tensor:
    """clamp(x + delta_s + delta_c, 0, 1) for one image or a batch."""
    require(x.shape == delta_s.shape, f"shape mismatch: {tuple(x.shape)} vs {tuple(delta_s.shape)}")
    return clamp_image(apply_color_offset(x + delta_s, delta_c))


def _process_class(p: int, indices: List[int], clean: LabeledDataset, gallery: ModelGallery,
                   cfg: GeneratorConfig) -> _ClassResult:
    idx = torch.as_tensor(indices, dtype=torch.long)
    x = clean.images[idx]

    t0 = time.monotonic()
    offset, objective = ColorOffset(), float("nan")
    if cfg.enable_color and indices:
        pso = cfg.pso.model_copy(update={"seed": derive_seed(cfg.master_seed, PHASE_PSO, p)})
        try:
            offset, objective = optimize_class_color(
                x, p, cfg.rule, gallery, cfg.N, pso, cfg.constraint,
                seed=derive_seed(cfg.master_seed, PHASE_SUBSAMPLE, p))
        except ToolkitError as e:
            raise e.annotate(class_id=p) from e
    t1 = time.monotonic()

    delta = torch.zeros_like(x)
    if cfg.enable_spatial and indices:
        start_images = apply_color_offset(x, offset) if cfg.spatial_on_colored else x
        labels = clean.labels[idx]
        for s in range(0, len(indices), cfg.pgd_batch_size):
            sl = slice(s, s + cfg.pgd_batch_size)
            try:
                delta[sl] = pgd_toward_shift_label(start_images[sl], labels[sl], gallery, cfg.rule, cfg.pgd)
            except ToolkitError as e:
                raise e.annotate(class_id=p, samples=f"{indices[s]}..{indices[min(s + cfg.pgd_batch_size, len(indices)) - 1]}") from e
    t2 = time.monotonic()

    out = combine_perturbations(x, delta, offset)
    linf = delta.abs().flatten(1).amax(dim=1) if len(indices) else torch.zeros(0)
    return _ClassResult(indices, out, offset, objective, linf, t1 - t0, t2 - t1)


def _quality_summary(clean: torch.Tensor, perturbed: torch.Tensor, backend: str, model) -> Dict[str, float]:
    if min(clean.shape[-2:]) < SSIM_WINDOW:
        return {"mean_psnr": float(psnr(clean, perturbed).mean())}
    scores = quality_scores(clean, perturbed, backend, model)
    return {"mean_psnr": scores.psnr, "mean_ssim": scores.ssim, "mean_perceptual": scores.perceptual}


def generate_unlearnable_dataset(clean: LabeledDataset, cfg: GeneratorConfig,
                                 gallery: Optional[ModelGallery] = None) -> Tuple[LabeledDataset, GenerationRecord]:
    """Build the unlearnable copy of ``clean``; labels are unchanged."""
    if gallery is None:
        if not cfg.gallery_dir:
            raise ToolkitError("No gallery given and no gallery_dir configured", ErrorCode.GALLERY_MISSING)
        gallery = load_gallery(cfg.gallery_dir)
    require(gallery.k == clean.k, f"gallery k={gallery.k} but dataset k={clean.k}")
    require(gallery.input_shape == clean.image_shape,
            f"gallery input {gallery.input_shape} but dataset images {clean.image_shape}")
    require(cfg.rule.k == clean.k, f"shift rule k={cfg.rule.k} but dataset k={clean.k}")
    if not cfg.enable_ensemble:
        gallery = gallery.head(1)

    partition = partition_by_class(clean)
    LOG.info(f"Generating '{clean.name}': {len(clean)} samples, k={clean.k}, M={len(gallery)}, "
             f"spatial={cfg.enable_spatial}, color={cfg.enable_color}, jobs={cfg.jobs}")

    classes = sorted(partition.indices)
    quiet = not LOG.isEnabledFor(logging.INFO)
    if cfg.jobs == 1:
        results = [_process_class(p, partition[p], clean, gallery, cfg)
                   for p in tqdm(classes, desc="classes", disable=quiet, leave=False)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_process_class, p, partition[p], clean, gallery, cfg) for p in classes]
            results = [f.result() for f in futures]

    images = torch.empty_like(clean.images)
    linf = torch.zeros(len(clean))
    offsets, objectives = {}, {}
    for p, res in zip(classes, results):
        if res.indices:
            idx = torch.as_tensor(res.indices, dtype=torch.long)
            images[idx] = res.images
            linf[idx] = res.linf
        offsets[p] = tuple(res.offset)
        if cfg.enable_color and res.indices:
            objectives[p] = res.objective

    unlearnable = clean.with_images(images, name=f"{clean.name}-unlearnable")
    bound = cfg.pgd.epsilon + 1e-6
    record = GenerationRecord(
        color_offsets=offsets,
        color_objectives=objectives,
        spatial_linf=linf.tolist(),
        spatial_within_bound=bool((linf <= bound).all()),
        phase_seconds={"color": sum(r.color_s for r in results), "spatial": sum(r.spatial_s for r in results)},
        quality=_quality_summary(clean.images, images, cfg.constraint.perceptual_backend, gallery.members[0]),
        config=cfg.model_dump(mode="json"),
    )
    LOG.info(f"Generated {len(clean)} samples: max spatial l-inf={float(linf.max()):.5f}, "
             f"mean PSNR={record.quality['mean_psnr']:.2f} dB")
    return unlearnable, record


def build_manifest(dataset: LabeledDataset, record: GenerationRecord, cfg: GeneratorConfig) -> DatasetManifest:
    perturbation = PerturbationInfo(epsilon=cfg.pgd.epsilon, delta_y=cfg.rule.delta_y,
                                    color_offsets=record.color_offsets)
    return DatasetManifest.for_dataset(dataset, perturbation=perturbation, generator_config=record.config)
