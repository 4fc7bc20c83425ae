import json
from pathlib import Path

import numpy as np
import pytest

from lad.evaluation import ConfusionMatrix, miou
from lad.lnm import IGNORE
from lad.synthdata import (
    DatasetError,
    DatasetSpec,
    generate_dataset,
    load_dataset,
    nearest_color_predict,
    render_sample,
)

SMALL = DatasetSpec(num_train=6, num_val=3, image_size=32, seed=7)


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_identical(tmp_path):
    generate_dataset(SMALL, tmp_path / "a")
    generate_dataset(SMALL, tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) == 2 * 9 + 1
    assert a == b


def test_manifest_contents(tmp_path):
    manifest = generate_dataset(SMALL, tmp_path)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    assert manifest["format_version"] == 1
    assert manifest["num_classes"] == 5
    assert manifest["splits"] == {"train": [0, 6], "val": [6, 9]}
    assert DatasetSpec.from_dict(manifest["spec"]) == SMALL


def test_round_trip(tmp_path):
    generate_dataset(SMALL, tmp_path)
    ds = load_dataset(tmp_path)
    assert len(ds) == 9 and ds.indices == list(range(9))
    raw = ds.raw_images()
    for k, i in enumerate(ds.indices):
        img, lab = render_sample(SMALL, i)
        assert np.array_equal(ds.labels[k].numpy(), lab.astype(np.int64))
        assert np.array_equal(raw[k], img)


def test_splits(tmp_path):
    generate_dataset(SMALL, tmp_path)
    assert load_dataset(tmp_path, "train").indices == list(range(6))
    assert load_dataset(tmp_path, "val").indices == [6, 7, 8]
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "test")


def test_seeded_shuffle(tmp_path):
    generate_dataset(SMALL, tmp_path)
    a = load_dataset(tmp_path, shuffle_seed=3)
    b = load_dataset(tmp_path, shuffle_seed=3)
    assert a.indices == b.indices
    assert sorted(a.indices) == list(range(9)) and a.indices != list(range(9))


def test_empty_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    (tmp_path / "images").mkdir()
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 1, "num_classes": 5, "splits": {}}))
    with pytest.raises(DatasetError, match="no images"):
        load_dataset(tmp_path)


def test_missing_label_named(tmp_path):
    generate_dataset(SMALL, tmp_path)
    (tmp_path / "labels" / "00004.png").unlink()
    with pytest.raises(DatasetError, match="00004.png"):
        load_dataset(tmp_path)


def test_corrupt_image_named(tmp_path):
    generate_dataset(SMALL, tmp_path)
    (tmp_path / "images" / "00002.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="00002.png"):
        load_dataset(tmp_path)


@pytest.mark.parametrize(
    "kwargs",
    [dict(num_classes=1), dict(image_size=8), dict(color_noise_sigma=-1), dict(class_color_overlap=1.5)],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        DatasetSpec(**kwargs)


def test_default_class_histogram_and_ignore_fraction():
    spec = DatasetSpec()
    hist = np.zeros(spec.num_classes)
    ignored = total = 0
    for i in range(spec.num_train):
        _, lab = render_sample(spec, i)
        hist += np.bincount(lab[lab != IGNORE], minlength=spec.num_classes)
        ignored += int((lab == IGNORE).sum())
        total += lab.size
    frac = hist / hist.sum()
    assert (frac >= 0.01).all(), frac
    assert ignored / total < 0.2


def test_noise_free_colors_are_separable():
    spec = DatasetSpec(color_noise_sigma=0.0, class_color_overlap=0.0, num_train=50)
    correct = n = 0
    for i in range(spec.num_train):
        img, lab = render_sample(spec, i)
        pred = nearest_color_predict(img, spec.num_classes, spec.class_color_overlap)
        keep = lab != IGNORE
        correct += int((pred[keep] == lab[keep]).sum())
        n += int(keep.sum())
    assert correct / n > 0.99


def test_rgb_task_headroom():
    # The per-pixel nearest-color classifier is neither hopeless nor perfect.
    spec = DatasetSpec()
    conf = ConfusionMatrix(spec.num_classes)
    for i in range(spec.num_train, spec.num_train + spec.num_val):
        img, lab = render_sample(spec, i)
        conf.update(nearest_color_predict(img, spec.num_classes, spec.class_color_overlap), lab)
    m, _ = miou(conf)
    assert 0.45 <= m <= 0.85
