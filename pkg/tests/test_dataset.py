import numpy as np
import pytest
from PIL import Image

from smarc.config import SplitSpec
from smarc.dataset import (
    Dataset,
    apply_mask,
    central_mask,
    class_weights,
    load_image_folder,
    read_split_manifest,
    split,
    split_assignment,
    subset_from_manifest,
    write_split_manifest,
)


def _dataset(labels, size=4, k=None):
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    k = k or int(labels.max()) + 1
    return Dataset(
        np.zeros((n, size, size, 3), dtype=np.float32),
        np.ones((n, size, size, 1), dtype=np.float32),
        labels,
        [f"img/{i:04d}.png" for i in range(n)],
        [f"c{c}" for c in range(k)],
    )


# ---------- masks ----------

def test_central_mask_default_patch():
    m = central_mask(224, 0.10)
    assert m.shape == (224, 224, 1)
    assert m.sum() == 5041
    rows, cols = np.nonzero(m[:, :, 0])
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (76, 146, 76, 146)
    assert m.mean() == pytest.approx(0.1005, abs=1e-4)


def test_central_mask_exact_square():
    m = central_mask(10, 0.25)
    assert m.sum() == 25
    assert m[2:7, 2:7].min() == 1


def test_central_mask_full_and_bad_fraction():
    assert central_mask(16, 1.0).min() == 1
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError, match="visible_fraction"):
            central_mask(16, bad)


def test_apply_mask_cases():
    img = np.random.default_rng(0).random((4, 4, 3)).astype(np.float32)
    np.testing.assert_array_equal(apply_mask(img, np.ones((4, 4, 1))), img)
    np.testing.assert_array_equal(apply_mask(img, np.zeros((4, 4, 1))), 0.0)
    checker = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.float32)[..., None]
    out = apply_mask(img, checker)
    np.testing.assert_array_equal(out[checker[..., 0] == 0], 0.0)
    np.testing.assert_array_equal(out[checker[..., 0] == 1], img[checker[..., 0] == 1])


# ---------- splitting ----------

def test_split_sizes_for_full_collection():
    labels = np.repeat(np.arange(4), [731, 730, 730, 730])
    assign = split_assignment(labels, SplitSpec())
    assert [(assign == s).sum() for s in ("train", "val", "test")] == [1753, 584, 584]


def test_split_single_class_ten_items():
    assign = split_assignment(np.zeros(10, dtype=int), SplitSpec())
    assert [(assign == s).sum() for s in ("train", "val", "test")] == [6, 2, 2]


def test_split_is_stratified():
    labels = np.repeat(np.arange(3), [50, 30, 20])
    assign = split_assignment(labels, SplitSpec())
    for c, n in enumerate([50, 30, 20]):
        in_val = ((assign == "val") & (labels == c)).sum()
        assert abs(in_val - 0.2 * n) <= 1


def test_split_is_deterministic_and_seed_sensitive():
    labels = np.repeat(np.arange(4), 25)
    a = split_assignment(labels, SplitSpec(seed=7))
    b = split_assignment(labels, SplitSpec(seed=7))
    c = split_assignment(labels, SplitSpec(seed=8))
    assert (a == b).all()
    assert not (a == c).all()


def test_split_rejects_empty_class():
    with pytest.raises(ValueError, match="no samples"):
        split_assignment([0, 0, 2, 2], SplitSpec(), num_classes=3)


def test_split_partitions_dataset():
    ds = _dataset(np.repeat(np.arange(2), 10))
    train, val, test = split(ds, SplitSpec())
    assert len(train) + len(val) + len(test) == 20
    assert set(train.paths).isdisjoint(val.paths) and set(val.paths).isdisjoint(test.paths)


def test_split_manifest_round_trip(tmp_path):
    ds = _dataset(np.repeat(np.arange(2), 5))
    assign = split_assignment(ds.labels, SplitSpec())
    path = write_split_manifest(tmp_path / "split_manifest.tsv", ds, assign)
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert first.count("\t") == 2

    df = read_split_manifest(path)
    assert df["split"].tolist() == list(assign)
    val = subset_from_manifest(ds, df, "val")
    assert val.paths == [p for p, s in zip(ds.paths, assign) if s == "val"]


def test_split_manifest_rejects_unknown_split(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("a.png\tholdout\t0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="holdout"):
        read_split_manifest(p)


# ---------- class weights ----------

def test_class_weights_balanced_and_skewed():
    np.testing.assert_allclose(class_weights(np.repeat(np.arange(4), 10), 4), 1.0)
    np.testing.assert_allclose(class_weights([0] * 30 + [1] * 10, 2), [40 / 60, 2.0])


def test_class_weights_missing_class():
    with pytest.raises(ValueError, match="absent"):
        class_weights([0, 0, 1], 3)


# ---------- folder loading ----------

def test_load_image_folder_skips_unreadable(tmp_path):
    for name, color in (("grass", (20, 200, 20)), ("rock", (120, 120, 120))):
        d = tmp_path / name
        d.mkdir()
        for i in range(2):
            Image.new("RGB", (40, 30), color).save(d / f"{i}.png")
    (tmp_path / "rock" / "broken.png").write_bytes(b"not a png")

    ds, failed = load_image_folder(tmp_path, size=16, visible_fraction=0.25, verbose=False)
    assert ds.class_names == ["grass", "rock"]
    assert len(ds) == 4 and ds.labels.tolist() == [0, 0, 1, 1]
    assert ds.images.shape == (4, 16, 16, 3)
    assert ds.images[0, 0, 0, 1] == pytest.approx(200 / 255, abs=1e-6)
    assert ds.masks[0].sum() == 64
    assert len(failed) == 1 and failed[0][0].endswith("broken.png")


def test_load_image_folder_empty(tmp_path):
    (tmp_path / "grass").mkdir()
    with pytest.raises(ValueError, match="no images"):
        load_image_folder(tmp_path, size=16, verbose=False)
