"""Desk-scale end-to-end runs. Slow; select with ``pytest -m slow``."""

import pytest
import torch

from dualshift.data_io import make_synthetic_dataset
from dualshift.defenses import DefenseConfig
from dualshift.eval_harness import test_accuracy as accuracy_of, train_victim
from dualshift.generator import GeneratorConfig, generate_unlearnable_dataset
from dualshift.model_zoo import TrainSpec, build_gallery

pytestmark = pytest.mark.slow

VICTIM = TrainSpec(epochs=20, batch_size=128, lr=0.01, arch="cnn")
JPEG = DefenseConfig(kind="jpeg", jpeg_quality=10)
GRAY = DefenseConfig(kind="grayscale")


@pytest.fixture(scope="module")
def desk():
    torch.set_num_threads(8)
    train = make_synthetic_dataset(k=10, per_class=500, size=32, seed=0, name="textures-train")
    test = make_synthetic_dataset(k=10, per_class=100, size=32, seed=1, name="textures-test")
    gallery = build_gallery(train, VICTIM, 3, "seeds")

    # classes run on 8 worker threads, one intra-op thread each
    torch.set_num_threads(1)
    variants = {}
    for name, toggles in (("full", {}),
                          ("spatial_only", {"enable_color": False}),
                          ("color_only", {"enable_spatial": False})):
        cfg = GeneratorConfig(master_seed=0, jobs=8, **toggles)
        variants[name], _ = generate_unlearnable_dataset(train, cfg, gallery)
    torch.set_num_threads(8)
    return train, test, variants


def test_clean_training_learns_the_task(desk):
    train, test, _ = desk
    assert accuracy_of(train_victim(train, DefenseConfig(), VICTIM), test) >= 60.0


def test_full_perturbation_makes_the_data_unlearnable(desk):
    _, test, variants = desk
    assert accuracy_of(train_victim(variants["full"], DefenseConfig(), VICTIM), test) <= 25.0


def test_each_branch_covers_the_other_branch_defense(desk):
    _, test, variants = desk
    full_jpeg = accuracy_of(train_victim(variants["full"], JPEG, VICTIM), test)
    spatial_jpeg = accuracy_of(train_victim(variants["spatial_only"], JPEG, VICTIM), test)
    assert spatial_jpeg >= full_jpeg + 10.0

    full_gray = accuracy_of(train_victim(variants["full"], GRAY, VICTIM), test)
    color_gray = accuracy_of(train_victim(variants["color_only"], GRAY, VICTIM), test)
    assert color_gray >= full_gray + 10.0
