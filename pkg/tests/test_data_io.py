import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from dualshift.config import MANIFEST_NAME, RAW_SIDECAR_NAME
from dualshift.data_io import (DatasetManifest, LabeledDataset, PerturbationInfo, clamp_image,
                               export_unlearnable_dataset, load_dataset, make_synthetic_dataset,
                               partition_by_class, read_manifest, read_raw_tensor, take_per_class,
                               write_raw_tensor)
from dualshift.errors import ErrorCode, ToolkitError


def _export(dataset, dest, **kwargs):
    return export_unlearnable_dataset(dataset, DatasetManifest.for_dataset(dataset), str(dest), **kwargs)


def test_clamp_image_bounds():
    x = torch.tensor([-0.5, 0.0, 0.3, 1.0, 1.7])
    assert torch.equal(clamp_image(x), torch.tensor([0.0, 0.0, 0.3, 1.0, 1.0]))


def test_clamp_image_rejects_inverted_bounds():
    with pytest.raises(ToolkitError) as e:
        clamp_image(torch.zeros(3), 1.0, 0.0)
    assert e.value.error_code == ErrorCode.VALIDATION


def test_labeled_dataset_rejects_out_of_range_labels():
    with pytest.raises(ToolkitError):
        LabeledDataset(torch.zeros((2, 3, 4, 4)), torch.tensor([0, 3]), k=3)


def test_partition_is_disjoint_and_covers(two_class_dataset):
    part = partition_by_class(two_class_dataset)
    everything = sorted(i for ix in part.indices.values() for i in ix)
    assert everything == list(range(len(two_class_dataset)))
    assert part.counts == {0: 10, 1: 10}
    assert part[1] == list(range(1, 20, 2))


def test_partition_lists_empty_classes():
    ds = LabeledDataset(torch.zeros((2, 3, 4, 4)), torch.tensor([0, 0]), k=3)
    assert partition_by_class(ds).counts == {0: 2, 1: 0, 2: 0}


def test_take_per_class_keeps_lowest_indices(two_class_dataset):
    limited = take_per_class(two_class_dataset, 5)
    assert len(limited) == 10
    assert torch.equal(limited.images, two_class_dataset.images[:10])


def test_export_then_load_raw_sidecar_is_bit_exact(two_class_dataset, tmp_path):
    written = _export(two_class_dataset, tmp_path)
    assert written.raw_sidecar == RAW_SIDECAR_NAME
    assert len(written.samples) == 20
    assert all(len(s.sha256) == 64 for s in written.samples)

    loaded = load_dataset(str(tmp_path))
    assert torch.equal(loaded.images, two_class_dataset.images)
    assert torch.equal(loaded.labels, two_class_dataset.labels)
    assert loaded.k == 2


def test_png_round_trip_within_quantisation(two_class_dataset, tmp_path):
    _export(two_class_dataset, tmp_path, raw_sidecar=False)
    loaded = load_dataset(str(tmp_path), prefer_raw=False)
    assert (loaded.images - two_class_dataset.images).abs().max() <= 1 / 255


def test_load_with_limit_per_class(two_class_dataset, tmp_path):
    _export(two_class_dataset, tmp_path)
    loaded = load_dataset(str(tmp_path), limit_per_class=5)
    assert len(loaded) == 10
    assert partition_by_class(loaded).counts == {0: 5, 1: 5}


def test_load_missing_path():
    with pytest.raises(ToolkitError) as e:
        load_dataset("/nonexistent/dualshift/data")
    assert e.value.error_code == ErrorCode.LOAD_FAILED


def test_load_rejects_label_outside_range(two_class_dataset, tmp_path):
    _export(two_class_dataset, tmp_path)
    path = tmp_path / MANIFEST_NAME
    doc = json.loads(path.read_text())
    doc["samples"][3]["label"] = 7
    path.write_text(json.dumps(doc))
    with pytest.raises(ToolkitError) as e:
        load_dataset(str(tmp_path))
    assert e.value.error_code == ErrorCode.VALIDATION


def test_load_rejects_sample_count_mismatch(two_class_dataset, tmp_path):
    _export(two_class_dataset, tmp_path)
    path = tmp_path / MANIFEST_NAME
    doc = json.loads(path.read_text())
    doc["sample_count"] = len(doc["samples"]) + 1
    path.write_text(json.dumps(doc))
    with pytest.raises(ToolkitError) as e:
        load_dataset(str(tmp_path))
    assert e.value.error_code == ErrorCode.VALIDATION


def test_load_rejects_image_of_the_wrong_size(two_class_dataset, tmp_path):
    written = _export(two_class_dataset, tmp_path, raw_sidecar=False)
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / written.samples[2].file, format="PNG")
    with pytest.raises(ToolkitError) as e:
        load_dataset(str(tmp_path), prefer_raw=False, verify=False)
    assert e.value.error_code == ErrorCode.VALIDATION


def test_export_to_unwritable_destination(two_class_dataset, tmp_path):
    blocker = tmp_path / "not-a-dir"
    blocker.write_text("x")
    with pytest.raises(ToolkitError) as e:
        _export(two_class_dataset, blocker / "out")
    assert e.value.error_code == ErrorCode.IO_FAILED


def test_checksum_mismatch_is_detected(two_class_dataset, tmp_path):
    written = _export(two_class_dataset, tmp_path, raw_sidecar=False)
    victim = tmp_path / written.samples[0].file
    victim.write_bytes((tmp_path / written.samples[1].file).read_bytes())
    with pytest.raises(ToolkitError) as e:
        load_dataset(str(tmp_path), prefer_raw=False)
    assert e.value.error_code == ErrorCode.LOAD_FAILED


def test_export_rejects_mismatched_manifest(two_class_dataset, tmp_path):
    manifest = DatasetManifest(name="x", k=2, sample_count=3, image_shape=(3, 8, 8))
    with pytest.raises(ToolkitError):
        export_unlearnable_dataset(two_class_dataset, manifest, str(tmp_path))


def test_manifest_keeps_perturbation_metadata(two_class_dataset, tmp_path):
    info = PerturbationInfo(epsilon=8 / 255, delta_y=1, color_offsets={0: (0.1, 0.0, -0.1), 1: (0.0, 0.0, 0.0)})
    export_unlearnable_dataset(two_class_dataset, DatasetManifest.for_dataset(two_class_dataset, perturbation=info),
                               str(tmp_path))
    manifest = read_manifest(str(tmp_path))
    assert manifest.perturbation.epsilon == 8 / 255
    assert manifest.perturbation.color_offsets[0] == (0.1, 0.0, -0.1)


def test_raw_tensor_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.f32"
    write_raw_tensor(str(path), torch.zeros((2, 3)))
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(ToolkitError) as e:
        read_raw_tensor(str(path))
    assert e.value.error_code == ErrorCode.LOAD_FAILED


def test_synthetic_dataset_is_deterministic():
    a = make_synthetic_dataset(k=4, per_class=3, size=8, seed=5)
    b = make_synthetic_dataset(k=4, per_class=3, size=8, seed=5)
    assert torch.equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert partition_by_class(a).counts == {p: 3 for p in range(4)}
    assert not torch.equal(a.images, make_synthetic_dataset(k=4, per_class=3, size=8, seed=6).images)


def test_sidecar_file_is_written(two_class_dataset, tmp_path):
    _export(two_class_dataset, tmp_path)
    assert os.path.isfile(tmp_path / RAW_SIDECAR_NAME)
    assert len(os.listdir(tmp_path / "images")) == 20
