import numpy as np
import pytest

from tame.data import (
    SHAPES,
    SyntheticDatasetSpec,
    generate_in_memory,
    generate_split,
    load_dataset,
    mask_fill,
    pgm16_bytes,
    read_index,
    read_pgm16,
    write_dataset,
    write_pgm16,
)
from tame.errors import FormatError

SMALL = SyntheticDatasetSpec(train=12, val=6, test=6, image_size=40, radius_range=(6.0, 10.0))


def test_split_counts_and_balance():
    for split, n in (("train", 12), ("val", 6), ("test", 6)):
        images, labels = generate_split(SMALL, split)
        assert images.shape == (n, 40, 40, 3) and images.dtype == np.uint8
        assert np.bincount(labels, minlength=3).tolist() == [n // 3] * 3


def test_generation_is_deterministic():
    a, la = generate_split(SMALL, "train")
    b, lb = generate_split(SMALL, "train")
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)
    c, _ = generate_split(SyntheticDatasetSpec(**{**SMALL.to_dict(), "seed": 1}), "train")
    assert not np.array_equal(a, c)


def test_splits_differ():
    a, _ = generate_split(SMALL, "train")
    b, _ = generate_split(SMALL, "val")
    assert not np.array_equal(a[:6], b)


def test_foreground_brighter_than_background():
    images, labels = generate_split(SMALL, "train")
    for img in images.astype(float) / 255:
        lum = img.mean(axis=2)
        hist = np.histogram(lum, bins=20, range=(0, 1))[0]
        # bimodal: empty gap between the background and foreground colour ranges
        assert hist[9:11].sum() < 0.02 * lum.size
        assert (lum > 0.5).mean() > 0.02


def test_shape_area_orders_by_class():
    spec = SyntheticDatasetSpec(train=300, val=3, test=3, noise_std=0.0)
    images, labels = generate_split(spec, "train")
    area = (images.mean(axis=3) > 127).mean(axis=(1, 2))
    means = [area[labels == k].mean() for k in range(3)]
    # disk (pi r^2) > square inscribed in the circle (2 r^2) > triangle (1.3 r^2)
    assert means[0] > means[1] > means[2]
    assert SHAPES == ("disk", "square", "triangle")


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(num_classes=4)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(image_size=16)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(background_range=(0.0, 0.6))


def test_disk_round_trip_matches_memory(tmp_path):
    write_dataset(SMALL, tmp_path)
    sets, header = load_dataset(tmp_path)
    mem = generate_in_memory(SMALL)
    for split in ("train", "val", "test"):
        np.testing.assert_array_equal(sets[split].images, mem[split].images)
        np.testing.assert_array_equal(sets[split].labels, mem[split].labels)
    np.testing.assert_allclose(sets["train"].mean, mem["train"].mean, rtol=1e-6)
    assert len(header["digest"]) == 64


def test_index_digest_is_stable(tmp_path):
    write_dataset(SMALL, tmp_path / "a")
    write_dataset(SMALL, tmp_path / "b")
    assert read_index(tmp_path / "a")[0]["digest"] == read_index(tmp_path / "b")[0]["digest"]


def test_index_rejects_foreign_file(tmp_path):
    (tmp_path / "index.csv").write_text("split,path,label\n")
    with pytest.raises(FormatError):
        read_index(tmp_path)


def test_normalised_train_split_is_standardised():
    train = generate_in_memory(SMALL)["train"]
    x = train.normalized(np.float64)
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-5)


def test_mask_fill_black_is_normalised_zero():
    train = generate_in_memory(SMALL)["train"]
    black = mask_fill("black", train.mean, train.std)
    np.testing.assert_allclose(black * train.std + train.mean, 0, atol=1e-6)
    assert train.fill_value("mean") is None
    with pytest.raises(ValueError):
        mask_fill("white", train.mean, train.std)


# ------------------------------------------------------------------ PGM
def test_pgm_round_trip(tmp_path):
    values = np.random.default_rng(0).uniform(size=(5, 7))
    values[0, 0], values[-1, -1] = 0.0, 1.0
    write_pgm16(tmp_path / "m.pgm", values, ["class=2", "digest=abc"])
    back, comments = read_pgm16(tmp_path / "m.pgm")
    assert back.shape == (5, 7)
    np.testing.assert_allclose(back, values, atol=0.5 / 65535 + 1e-12)
    assert back.min() == 0.0 and back.max() == 1.0
    assert comments == ["class=2", "digest=abc"]


def test_pgm_header_layout():
    data = pgm16_bytes(np.zeros((2, 3)))
    assert data.startswith(b"P5\n3 2\n65535\n")
    assert len(data) == len(b"P5\n3 2\n65535\n") + 12


def test_pgm_rejects_out_of_range():
    with pytest.raises(ValueError):
        pgm16_bytes(np.array([[1.5]]))
