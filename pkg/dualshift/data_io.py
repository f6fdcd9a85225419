"""Dataset loading, class partitioning and on-disk export with manifests."""

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ConfigDict

from .config import FORMAT_VERSION, MANIFEST_NAME, RAW_MAGIC, RAW_SIDECAR_NAME
from .errors import ErrorCode, ToolkitError, require

LOG = logging.getLogger(__name__)

# dtype codes used by the raw tensor sidecar header
_RAW_DTYPES = {1: np.dtype("<f4")}
_RAW_HEADER = struct.Struct("<4sBB")


@dataclass
class LabeledDataset:
    """Images (N, 3, H, W) in [0, 1] with integer labels in [0, k)."""
    images: torch.Tensor
    labels: torch.Tensor
    k: int
    name: str = "dataset"

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        require(self.images.dim() == 4, f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        require(len(self.labels) == len(self.images),
                f"{len(self.labels)} labels for {len(self.images)} images")
        require(self.k >= 1, f"class count must be positive, got {self.k}")
        if len(self.labels):
            lo, hi = int(self.labels.min()), int(self.labels.max())
            require(lo >= 0 and hi < self.k, f"labels must lie in [0, {self.k}), found [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "LabeledDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return LabeledDataset(self.images[idx], self.labels[idx], self.k, name or self.name)

    def with_images(self, images: torch.Tensor, name: Optional[str] = None) -> "LabeledDataset":
        """Same labels, new pixels."""
        require(images.shape == self.images.shape,
                f"replacement images {tuple(images.shape)} do not match {tuple(self.images.shape)}")
        return LabeledDataset(images, self.labels.clone(), self.k, name or self.name)


@dataclass
class ClassPartition:
    indices: Dict[int, List[int]] = field(default_factory=dict)

    @property
    def counts(self) -> Dict[int, int]:
        return {p: len(ix) for p, ix in self.indices.items()}

    def __getitem__(self, p: int) -> List[int]:
        return self.indices[p]


class SampleEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    file: str
    label: int
    sha256: str = ""


class PerturbationInfo(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epsilon: float
    delta_y: int
    color_offsets: Dict[int, Tuple[float, float, float]] = {}


class DatasetManifest(BaseModel):
    """On-disk description of a dataset directory (``manifest.json``)."""
    model_config = ConfigDict(extra="forbid")

    format_version: int = FORMAT_VERSION
    name: str
    k: int
    sample_count: int
    image_shape: Tuple[int, int, int]
    samples: List[SampleEntry] = []
    perturbation: Optional[PerturbationInfo] = None
    generator_config: Optional[Dict[str, Any]] = None
    raw_sidecar: Optional[str] = None

    @classmethod
    def for_dataset(cls, dataset: LabeledDataset, **extra: Any) -> "DatasetManifest":
        return cls(name=dataset.name, k=dataset.k, sample_count=len(dataset),
                   image_shape=dataset.image_shape, **extra)


def clamp_image(x: torch.Tensor, lo: float = 0.0, hi: float = 1.0) -> torch.Tensor:
    require(lo < hi, f"clamp bounds must satisfy lo < hi, got ({lo}, {hi})")
    return torch.clamp(x, lo, hi)


def partition_by_class(dataset: LabeledDataset) -> ClassPartition:
    """Group sample indices by label, keeping dataset order inside each class."""
    require(len(dataset) > 0, "cannot partition an empty dataset")
    indices: Dict[int, List[int]] = {p: [] for p in range(dataset.k)}
    for i, y in enumerate(dataset.labels.tolist()):
        indices[y].append(i)
    return ClassPartition(indices)


def take_per_class(dataset: LabeledDataset, limit: int) -> LabeledDataset:
    """Keep the first ``limit`` samples (by original index) of every class."""
    require(limit >= 1, f"limit_per_class must be >= 1, got {limit}")
    keep = []
    for ix in partition_by_class(dataset).indices.values():
        keep.extend(ix[:limit])
    return dataset.subset(sorted(keep))


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                 RAW SIDECAR                                  #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def write_raw_tensor(path: str, tensor: torch.Tensor) -> None:
    """Write ``magic | dtype code | rank | dims (uint32) | little-endian float32 data``."""
    arr = tensor.detach().cpu().numpy().astype("<f4")
    with open(path, "wb") as f:
        f.write(_RAW_HEADER.pack(RAW_MAGIC, 1, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_raw_tensor(path: str) -> torch.Tensor:
    with open(path, "rb") as f:
        magic, code, rank = _RAW_HEADER.unpack(f.read(_RAW_HEADER.size))
        if magic != RAW_MAGIC:
            raise ToolkitError(f"{path}: bad sidecar magic {magic!r}", ErrorCode.LOAD_FAILED)
        if code not in _RAW_DTYPES:
            raise ToolkitError(f"{path}: unknown dtype code {code}", ErrorCode.LOAD_FAILED)
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        arr = np.frombuffer(f.read(), dtype=_RAW_DTYPES[code])
    if arr.size != math.prod(dims):
        raise ToolkitError(f"{path}: expected {math.prod(dims)} values, found {arr.size}", ErrorCode.LOAD_FAILED)
    return torch.from_numpy(arr.reshape(dims).astype(np.float32))


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                 IMAGE FILES                                  #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def to_uint8_hwc(image: torch.Tensor) -> np.ndarray:
    arr = (clamp_image(image).detach().cpu() * 255.0).round().to(torch.uint8)
    return np.ascontiguousarray(arr.permute(1, 2, 0).numpy())


def from_uint8_hwc(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float() / 255.0


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def export_unlearnable_dataset(dataset: LabeledDataset, manifest: DatasetManifest, dest: str,
                               raw_sidecar: bool = True) -> DatasetManifest:
    """Write one PNG per sample, ``manifest.json`` and optionally the raw float32 sidecar.

    Returns the manifest as written (with per-file checksums filled in).
    """
    require(manifest.k == dataset.k, f"manifest k={manifest.k} but dataset k={dataset.k}")
    require(manifest.sample_count == len(dataset),
            f"manifest sample_count={manifest.sample_count} but dataset has {len(dataset)}")
    require(tuple(manifest.image_shape) == dataset.image_shape,
            f"manifest image_shape={tuple(manifest.image_shape)} but dataset has {dataset.image_shape}")
    require(dataset.image_shape[0] == 3, "only 3-channel datasets can be exported as RGB PNG")

    try:
        os.makedirs(os.path.join(dest, "images"), exist_ok=True)
        samples = []
        for i, (image, label) in enumerate(zip(dataset.images, dataset.labels.tolist())):
            rel = os.path.join("images", f"{i:06d}.png")
            path = os.path.join(dest, rel)
            Image.fromarray(to_uint8_hwc(image)).save(path, format="PNG")
            samples.append(SampleEntry(file=rel, label=label, sha256=_sha256(path)))

        sidecar = None
        if raw_sidecar:
            sidecar = RAW_SIDECAR_NAME
            write_raw_tensor(os.path.join(dest, sidecar), dataset.images)

        written = manifest.model_copy(update={"samples": samples, "raw_sidecar": sidecar})
        with open(os.path.join(dest, MANIFEST_NAME), "w") as f:
            f.write(written.model_dump_json(indent=2))
    except OSError as e:
        raise ToolkitError(f"Cannot write dataset to {dest}: {e}", ErrorCode.IO_FAILED) from e

    LOG.info(f"Exported {len(dataset)} samples of '{dataset.name}' to {dest} (raw sidecar: {raw_sidecar})")
    return written


def read_manifest(source_path: str) -> DatasetManifest:
    path = os.path.join(source_path, MANIFEST_NAME)
    try:
        with open(path) as f:
            return DatasetManifest.model_validate(json.load(f))
    except OSError as e:
        raise ToolkitError(f"Cannot read manifest {path}: {e}", ErrorCode.LOAD_FAILED) from e


def _load_manifest_dir(source_path: str, prefer_raw: bool, verify: bool) -> LabeledDataset:
    manifest = read_manifest(source_path)
    labels = [s.label for s in manifest.samples]
    require(len(labels) == manifest.sample_count,
            f"{source_path}: manifest sample_count={manifest.sample_count} but {len(labels)} samples listed")
    bad = [y for y in labels if not 0 <= y < manifest.k]
    if bad:
        raise ToolkitError(f"label {bad[0]} outside [0, {manifest.k}) in {source_path}", ErrorCode.VALIDATION)

    if prefer_raw and manifest.raw_sidecar:
        images = read_raw_tensor(os.path.join(source_path, manifest.raw_sidecar))
    else:
        tensors = []
        for s in manifest.samples:
            path = os.path.join(source_path, s.file)
            if verify and s.sha256 and _sha256(path) != s.sha256:
                raise ToolkitError(f"checksum mismatch for {path}", ErrorCode.LOAD_FAILED)
            with Image.open(path) as im:
                image = from_uint8_hwc(np.asarray(im.convert("RGB")))
            require(tuple(image.shape) == tuple(manifest.image_shape),
                    f"{path}: image shape {tuple(image.shape)} but manifest says {tuple(manifest.image_shape)}")
            tensors.append(image)
        images = torch.stack(tensors) if tensors else torch.zeros((0, *manifest.image_shape))
    require(len(images) == len(labels), f"{source_path}: {len(images)} images for {len(labels)} labels")
    require(tuple(images.shape[1:]) == tuple(manifest.image_shape),
            f"{source_path}: images of shape {tuple(images.shape[1:])} but manifest says {tuple(manifest.image_shape)}")
    return LabeledDataset(images, torch.tensor(labels, dtype=torch.long), manifest.k, manifest.name)


def _cifar_root(source_path: str) -> Optional[str]:
    if os.path.isfile(os.path.join(source_path, "data_batch_1")):
        return os.path.dirname(os.path.abspath(source_path))
    if os.path.isdir(os.path.join(source_path, "cifar-10-batches-py")):
        return source_path
    return None


def _load_cifar(root: str, split: str) -> LabeledDataset:
    from torchvision.datasets import CIFAR10

    ds = CIFAR10(root=root, train=(split == "train"), download=False)
    images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float() / 255.0
    return LabeledDataset(images, torch.tensor(ds.targets, dtype=torch.long), len(ds.classes), f"cifar10-{split}")


def load_dataset(source_path: str, limit_per_class: Optional[int] = None, split: str = "train",
                 prefer_raw: bool = True, verify: bool = True) -> LabeledDataset:
    """Load a manifest directory (as written by export) or a CIFAR-10 python archive."""
    if not os.path.exists(source_path):
        raise ToolkitError(f"Dataset path not found: {source_path}", ErrorCode.LOAD_FAILED)

    if os.path.isfile(os.path.join(source_path, MANIFEST_NAME)):
        dataset = _load_manifest_dir(source_path, prefer_raw, verify)
    elif (root := _cifar_root(source_path)) is not None:
        dataset = _load_cifar(root, split)
    else:
        raise ToolkitError(f"No {MANIFEST_NAME} or CIFAR-10 archive under {source_path}", ErrorCode.LOAD_FAILED)

    if limit_per_class is not None:
        dataset = take_per_class(dataset, limit_per_class)
    LOG.info(f"Loaded '{dataset.name}': {len(dataset)} samples, k={dataset.k}, shape={dataset.image_shape}")
    return dataset


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                              SYNTHETIC TEXTURES                              #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def make_synthetic_dataset(k: int = 10, per_class: int = 500, size: int = 32, seed: int = 0,
                           name: str = "textures") -> LabeledDataset:
    """Procedural class-conditional textures: an oriented grating per class,
    tinted with a class palette, with per-sample phase, contrast, brightness
    and pixel noise. Deterministic given ``seed``.
    """
    require(k >= 1 and per_class >= 1 and size >= 8, "k, per_class must be >= 1 and size >= 8")
    g = torch.Generator().manual_seed(seed)
    n = k * per_class
    labels = torch.arange(k).repeat_interleave(per_class)

    coords = torch.linspace(-1.0, 1.0, size)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")

    angle = math.pi * labels.float() / k + 0.15 * (torch.rand(n, generator=g) - 0.5)
    freq = 2.0 + (labels % 3).float() * 1.5
    phase = 2 * math.pi * torch.rand(n, generator=g)
    proj = torch.cos(angle)[:, None, None] * xx + torch.sin(angle)[:, None, None] * yy
    wave = torch.sin(math.pi * freq[:, None, None] * proj + phase[:, None, None])

    hue = labels.float() / k
    palette = torch.stack([
        0.5 + 0.35 * torch.cos(2 * math.pi * (hue + shift)) for shift in (0.0, 1 / 3, 2 / 3)
    ], dim=1)
    contrast = 0.18 + 0.1 * torch.rand(n, generator=g)
    brightness = 0.1 * (torch.rand(n, 1, generator=g) - 0.5)

    images = palette[:, :, None, None] + brightness[:, :, None, None] \
        + contrast[:, None, None, None] * wave[:, None, :, :]
    images = images + 0.04 * torch.randn(images.shape, generator=g)
    return LabeledDataset(clamp_image(images), labels, k, name)
