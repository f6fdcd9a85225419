import copy

import pytest
import torch

from dualshift.data_io import LabeledDataset, make_synthetic_dataset
from dualshift.model_zoo import Classifier, ModelGallery, ToyNet


def toy_classifier(k=3, shape=(3, 4, 4), seed=0, dtype=torch.float64, hidden=16):
    torch.manual_seed(seed)
    net = ToyNet(k, shape, hidden=hidden).to(dtype)
    net.eval()
    return Classifier(net, "toy", k, shape, seed=seed)


def toy_gallery(M, k=3, shape=(3, 4, 4), dtype=torch.float64, seed=0):
    return ModelGallery([toy_classifier(k, shape, seed + j, dtype) for j in range(M)])


class ConstantGradient(Classifier):
    """Reports the same input gradient for every sample."""

    def __init__(self, grad, k=10):
        super().__init__(ToyNet(k, tuple(grad.shape)).to(grad.dtype), "toy", k, tuple(grad.shape))
        self.grad = grad

    def loss_and_input_grad(self, batch, labels, reduction="mean"):
        batch = batch.unsqueeze(0) if batch.dim() == 3 else batch
        return 0.0, self.grad.expand_as(batch).clone()


@pytest.fixture
def tiny_textures():
    """10 classes x 4 samples of 8x8 textures."""
    return make_synthetic_dataset(k=10, per_class=4, size=8, seed=0, name="tiny")


@pytest.fixture
def small_textures():
    """3 classes x 8 samples of 8x8 textures for quick training runs."""
    return make_synthetic_dataset(k=3, per_class=8, size=8, seed=1, name="small")


@pytest.fixture
def two_class_dataset():
    g = torch.Generator().manual_seed(3)
    images = torch.rand((20, 3, 8, 8), generator=g)
    labels = torch.tensor([0, 1] * 10)
    return LabeledDataset(images, labels, 2, "two-class")


@pytest.fixture
def float_gallery():
    """Two float32 toy surrogates for 3-class 8x8 images."""
    return toy_gallery(2, k=3, shape=(3, 8, 8), dtype=torch.float32)


def clone_classifier(clf):
    return Classifier(copy.deepcopy(clf.net), clf.arch, clf.k, clf.input_shape, clf.seed, clf.epoch)
