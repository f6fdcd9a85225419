"""Small image classifiers, surrogate training and the ensemble gallery."""

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from tqdm import tqdm

from .config import PROVENANCE_NAME
from .data_io import LabeledDataset
from .errors import ErrorCode, ToolkitError, require

LOG = logging.getLogger(__name__)


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                ARCHITECTURES                                 #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

class BlockNet(nn.Module):
    """A stack of feature blocks followed by a linear head.

    Subclasses fill ``self.blocks`` and ``self.head``; ``features`` exposes the
    output of every block for perceptual distances.
    """

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        return out


class ToyNet(BlockNet):
    """Two-layer perceptron on flattened pixels, smooth everywhere (tanh)."""

    def __init__(self, k: int, input_shape: Tuple[int, int, int], hidden: int = 16):
        super().__init__()
        self.blocks = nn.ModuleList([
            nn.Sequential(nn.Flatten(), nn.Linear(math.prod(input_shape), hidden), nn.Tanh()),
        ])
        self.head = nn.Linear(hidden, k)


def _conv_bn(cin: int, cout: int) -> List[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


def _pooled_head(width: int, k: int) -> nn.Module:
    return nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(width, k))


class CompactCNN(BlockNet):
    """Three conv blocks (conv-bn-relu-pool) and a global-pool linear head."""

    def __init__(self, k: int, input_shape: Tuple[int, int, int], width: int = 32):
        super().__init__()
        c = input_shape[0]
        widths = [width, width * 2, width * 4]
        blocks, cin = [], c
        for w in widths:
            blocks.append(nn.Sequential(*_conv_bn(cin, w), nn.MaxPool2d(2)))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.head = _pooled_head(cin, k)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(BlockNet):
    """ResNet18 layout (four stages of two basic blocks) at reduced width."""

    def __init__(self, k: int, input_shape: Tuple[int, int, int], width: int = 16):
        super().__init__()
        stem = nn.Sequential(*_conv_bn(input_shape[0], width))
        stages, cin = [stem], width
        for i, mult in enumerate((1, 2, 4, 8)):
            cout = width * mult
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(BasicBlock(cin, cout, stride), BasicBlock(cout, cout)))
            cin = cout
        self.blocks = nn.ModuleList(stages)
        self.head = _pooled_head(cin, k)


class SmallVGG(BlockNet):
    """VGG-style stacks of two 3x3 convs per stage."""

    def __init__(self, k: int, input_shape: Tuple[int, int, int], width: int = 32):
        super().__init__()
        blocks, cin = [], input_shape[0]
        for mult in (1, 2, 4):
            w = width * mult
            blocks.append(nn.Sequential(*_conv_bn(cin, w), *_conv_bn(w, w), nn.MaxPool2d(2)))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.head = _pooled_head(cin, k)


ARCH_MAP: Dict[str, Callable[..., BlockNet]] = {
    "toy": ToyNet,
    "cnn": CompactCNN,
    "resnet": SmallResNet,
    "vgg": SmallVGG,
}


def build_network(arch: str, k: int, input_shape: Sequence[int]) -> BlockNet:
    if arch not in ARCH_MAP:
        raise ToolkitError(f"Unknown architecture: {arch} (known: {sorted(ARCH_MAP)})", ErrorCode.CONFIG_INVALID)
    return ARCH_MAP[arch](k, tuple(input_shape))


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                  CLASSIFIER                                  #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

class TrainSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, ge=1)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    seed: int = 0
    schedule: Literal["constant", "cosine"] = "constant"
    arch: str = "cnn"

    @field_validator("arch")
    @classmethod
    def _known_arch(cls, v: str) -> str:
        if v not in ARCH_MAP:
            raise ValueError(f"unknown architecture '{v}', expected one of {sorted(ARCH_MAP)}")
        return v


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


class Classifier:
    """A trained network plus the metadata needed to rebuild it.

    All queries run the network in eval mode; callers treat a Classifier as
    read-only once training has finished.
    """

    def __init__(self, net: BlockNet, arch: str, k: int, input_shape: Sequence[int],
                 seed: Optional[int] = None, epoch: Optional[int] = None):
        self.net = net
        self.arch = arch
        self.k = k
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.epoch = epoch
        self.history = TrainHistory()

    def __repr__(self):
        return f"Classifier(arch={self.arch}, k={self.k}, seed={self.seed}, epoch={self.epoch})"

    def logits(self, batch: torch.Tensor) -> torch.Tensor:
        self.net.eval()
        with torch.no_grad():
            return self.net(_as_batch(batch))

    def predict(self, batch: torch.Tensor) -> torch.Tensor:
        return self.logits(batch).argmax(dim=1)

    def features(self, batch: torch.Tensor) -> List[torch.Tensor]:
        self.net.eval()
        with torch.no_grad():
            return self.net.features(_as_batch(batch))

    def sample_losses(self, batch: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Per-sample cross-entropy, shape (B,)."""
        return F.cross_entropy(self.logits(batch), torch.as_tensor(labels).long(), reduction="none")

    def loss(self, batch: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> float:
        return float(F.cross_entropy(self.logits(batch), torch.as_tensor(labels).long(), reduction=reduction))

    def loss_and_input_grad(self, batch: torch.Tensor, labels: torch.Tensor,
                            reduction: str = "mean") -> Tuple[float, torch.Tensor]:
        """Cross-entropy and its gradient with respect to the input pixels."""
        self.net.eval()
        x = batch.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            loss = F.cross_entropy(self.net(_as_batch(x)), torch.as_tensor(labels).long(), reduction=reduction)
            (grad,) = torch.autograd.grad(loss, x)
        return float(loss.detach()), grad

    def snapshot(self, epoch: int) -> "Classifier":
        clone = Classifier(copy.deepcopy(self.net), self.arch, self.k, self.input_shape, self.seed, epoch)
        clone.history = copy.deepcopy(self.history)
        return clone

    def save(self, path: str) -> None:
        torch.save({
            "arch": self.arch,
            "k": self.k,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "epoch": self.epoch,
            "losses": list(self.history.losses),
            "state_dict": self.net.state_dict(),
        }, path)

    @classmethod
    def load(cls, path: str) -> "Classifier":
        try:
            archive = torch.load(path, map_location="cpu", weights_only=True)
        except OSError as e:
            raise ToolkitError(f"Cannot read checkpoint {path}: {e}", ErrorCode.LOAD_FAILED) from e
        net = build_network(archive["arch"], archive["k"], archive["input_shape"])
        net.load_state_dict(archive["state_dict"])
        clf = cls(net, archive["arch"], archive["k"], archive["input_shape"], archive["seed"], archive["epoch"])
        clf.history.losses = list(archive.get("losses", []))
        return clf


BatchTransform = Callable[[Classifier, torch.Tensor, torch.Tensor, torch.Generator], torch.Tensor]
EpochHook = Callable[[int, Classifier], None]


def train_surrogate(dataset: LabeledDataset, spec: TrainSpec,
                    batch_transform: Optional[BatchTransform] = None,
                    on_epoch_end: Optional[EpochHook] = None,
                    desc: str = "train") -> Classifier:
    """SGD training with a seeded init, seeded batch order and an optional per-batch input transform.

    Three independent random streams derive from ``spec.seed``: weight init
    (global torch seed), batch order and the batch transform's noise. A
    transform that draws no noise therefore leaves the trajectory unchanged.
    """
    require(len(dataset) > 0, "cannot train on an empty dataset")
    torch.manual_seed(spec.seed)
    net = build_network(spec.arch, dataset.k, dataset.image_shape)
    clf = Classifier(net, spec.arch, dataset.k, dataset.image_shape, seed=spec.seed, epoch=0)

    optimizer = torch.optim.SGD(net.parameters(), lr=spec.lr, momentum=spec.momentum,
                                weight_decay=spec.weight_decay)
    scheduler = None
    if spec.schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=spec.epochs)

    order_gen = torch.Generator().manual_seed(spec.seed)
    noise_gen = torch.Generator().manual_seed(spec.seed + 0x5EED)
    images, labels = dataset.images, dataset.labels
    n = len(dataset)

    quiet = not LOG.isEnabledFor(logging.INFO)
    for epoch in tqdm(range(1, spec.epochs + 1), desc=desc, disable=quiet, leave=False):
        perm = torch.randperm(n, generator=order_gen)
        total, correct = 0.0, 0
        for start in range(0, n, spec.batch_size):
            idx = perm[start:start + spec.batch_size]
            x, y = images[idx], labels[idx]
            if batch_transform is not None:
                x = batch_transform(clf, x, y, noise_gen)

            net.train()
            optimizer.zero_grad(set_to_none=True)
            out = net(x)
            loss = F.cross_entropy(out, y)
            if not torch.isfinite(loss):
                raise ToolkitError(f"Training diverged at epoch {epoch}: loss={loss.item()}",
                                   ErrorCode.TRAINING_DIVERGED, {"epoch": epoch})
            loss.backward()
            optimizer.step()
            total += loss.item() * len(y)
            correct += int((out.argmax(1) == y).sum())

        if scheduler is not None:
            scheduler.step()
        clf.epoch = epoch
        clf.history.losses.append(total / n)
        clf.history.accuracies.append(100.0 * correct / n)
        LOG.debug(f"{desc} epoch {epoch}/{spec.epochs}: loss={total / n:.4f} acc={100.0 * correct / n:.1f}%")
        if on_epoch_end is not None:
            on_epoch_end(epoch, clf)

    net.eval()
    return clf


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                                   GALLERY                                    #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

@dataclass
class ModelGallery:
    members: List[Classifier]
    provenance: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        require(len(self.members) >= 1, "a gallery needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            require(m.k == first.k and m.input_shape == first.input_shape,
                    f"gallery members disagree: {m} vs {first}")
        if not self.provenance:
            self.provenance = [{"seed": m.seed, "epoch": m.epoch} for m in self.members]

    def __len__(self) -> int:
        return len(self.members)

    @property
    def k(self) -> int:
        return self.members[0].k

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.members[0].input_shape

    def head(self, m: int = 1) -> "ModelGallery":
        """Gallery of the first ``m`` members."""
        return ModelGallery(self.members[:m], self.provenance[:m])


def _gallery_epochs(epochs: int, m: int) -> List[int]:
    return [math.ceil(epochs * j / m) for j in range(1, m + 1)]


def build_gallery(dataset: LabeledDataset, spec: TrainSpec, M: int, diversity: str = "seeds") -> ModelGallery:
    """Train M surrogates, diversified by seed or by snapshot epoch."""
    require(M >= 1, f"gallery size must be >= 1, got {M}")

    if diversity == "seeds":
        members, provenance = [], []
        for j in range(M):
            member_spec = spec.model_copy(update={"seed": spec.seed + j})
            member = train_surrogate(dataset, member_spec, desc=f"surrogate {j + 1}/{M}")
            members.append(member)
            provenance.append({"strategy": "seeds", "seed": member_spec.seed, "epoch": spec.epochs, "arch": spec.arch})
            LOG.info(f"Gallery member {j + 1}/{M} trained (seed={member_spec.seed}, "
                     f"final loss={member.history.losses[-1]:.4f})")
        return ModelGallery(members, provenance)

    if diversity == "epochs":
        targets = _gallery_epochs(spec.epochs, M)
        require(len(set(targets)) == M, f"cannot take {M} distinct snapshots from {spec.epochs} epochs")
        snapshots: List[Classifier] = []

        def keep(epoch: int, clf: Classifier) -> None:
            if epoch in targets:
                snapshots.append(clf.snapshot(epoch))
                LOG.info(f"Gallery snapshot at epoch {epoch}")

        train_surrogate(dataset, spec, on_epoch_end=keep, desc="surrogate snapshots")
        provenance = [{"strategy": "epochs", "seed": spec.seed, "epoch": s.epoch, "arch": spec.arch} for s in snapshots]
        return ModelGallery(snapshots, provenance)

    raise ToolkitError(f"Unknown gallery diversity strategy: {diversity}", ErrorCode.CONFIG_INVALID)


def save_gallery(gallery: ModelGallery, directory: str) -> List[str]:
    try:
        os.makedirs(directory, exist_ok=True)
        paths = []
        for j, member in enumerate(gallery.members):
            path = os.path.join(directory, f"member_{j:02d}.pt")
            member.save(path)
            paths.append(path)
        with open(os.path.join(directory, PROVENANCE_NAME), "w") as f:
            json.dump({"members": gallery.provenance}, f, indent=2, sort_keys=True)
    except OSError as e:
        raise ToolkitError(f"Cannot write gallery to {directory}: {e}", ErrorCode.IO_FAILED) from e
    return paths


def load_gallery(directory: str) -> ModelGallery:
    prov_path = os.path.join(directory, PROVENANCE_NAME)
    if not os.path.isfile(prov_path):
        raise ToolkitError(f"No gallery found at {directory}", ErrorCode.GALLERY_MISSING)
    with open(prov_path) as f:
        provenance = json.load(f)["members"]
    members = [Classifier.load(os.path.join(directory, f"member_{j:02d}.pt")) for j in range(len(provenance))]
    return ModelGallery(members, provenance)


# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #
#                              ENSEMBLE AGGREGATION                            #
# # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # # #

def _check_batch(gallery: ModelGallery, batch: torch.Tensor, labels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    batch = _as_batch(batch)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    require(tuple(batch.shape[1:]) == gallery.input_shape,
            f"batch shape {tuple(batch.shape[1:])} does not match gallery input {gallery.input_shape}")
    require(len(labels) == len(batch), f"{len(labels)} labels for a batch of {len(batch)}")
    if len(labels):
        require(int(labels.min()) >= 0 and int(labels.max()) < gallery.k,
                f"labels must lie in [0, {gallery.k})")
    return batch, labels


def ensemble_loss(gallery: ModelGallery, batch: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> float:
    """Mean over members of the batch cross-entropy, summed exactly (fsum) in member order."""
    batch, labels = _check_batch(gallery, batch, labels)
    values = [m.loss(batch, labels, reduction) for m in gallery.members]
    return math.fsum(values) / len(values)


def ensemble_sample_losses(gallery: ModelGallery, batch: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample member-averaged cross-entropy in float64, shape (B,)."""
    batch, labels = _check_batch(gallery, batch, labels)
    acc = torch.zeros(len(batch), dtype=torch.float64)
    for m in gallery.members:
        acc += m.sample_losses(batch, labels).double()
    return acc / len(gallery)


def ensemble_input_gradient(gallery: ModelGallery, batch: torch.Tensor, labels: torch.Tensor,
                            reduction: str = "mean") -> torch.Tensor:
    """Mean of the members' input gradients, accumulated in float64 in member order."""
    x, labels = _check_batch(gallery, batch, labels)
    acc = torch.zeros(x.shape, dtype=torch.float64)
    for m in gallery.members:
        _, grad = m.loss_and_input_grad(x, labels, reduction)
        acc += grad.double()
    return (acc / len(gallery)).to(batch.dtype).reshape(batch.shape)
