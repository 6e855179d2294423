import math

import numpy as np
import pytest
from PIL import Image

from rwkv_unet.data import (
    DataError,
    DatasetManifest,
    DecodeError,
    ExtentMismatchError,
    LabelRangeError,
    SyntheticSpec,
    disk_mask,
    generate_synthetic,
    load_dataset,
    load_sample,
    read_image,
    read_mask,
    render_sample,
    split,
    synthetic_batch,
    write_mask,
)


def save_png(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


def test_resize_from_odd_extent_keeps_labels(tmp_path, rng):
    img = save_png(tmp_path / "i.png", rng.integers(0, 256, (500, 574, 3), dtype=np.uint8))
    mask = save_png(tmp_path / "m.png", rng.integers(0, 2, (500, 574), dtype=np.uint8) * 1)
    image, labels = load_sample(img, mask, 256, class_count=2)
    assert image.shape == (3, 256, 256) and labels.shape == (256, 256)
    assert set(np.unique(labels)) <= {0, 1}
    assert 0.0 <= image.min() and image.max() <= 1.0


def test_identity_resize_is_exact(tmp_path, rng):
    raw = rng.integers(0, 256, (32, 32), dtype=np.uint8)
    img = save_png(tmp_path / "i.png", raw)
    mask = save_png(tmp_path / "m.png", np.zeros((32, 32), np.uint8))
    image, _ = load_sample(img, mask, 32)
    np.testing.assert_array_equal(image[0], raw.astype(np.float32) / 255.0)


def test_pgm_ppm_supported(tmp_path, rng):
    gray = rng.integers(0, 256, (8, 8), dtype=np.uint8)
    save_png(tmp_path / "g.pgm", gray)
    save_png(tmp_path / "c.ppm", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
    assert read_image(tmp_path / "g.pgm").shape == (1, 8, 8)
    assert read_image(tmp_path / "c.ppm").shape == (3, 8, 8)


def test_mask_roundtrip_lossless(tmp_path, rng):
    m = rng.integers(0, 9, (17, 23))
    write_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), m)
    with pytest.raises(ValueError):
        write_mask(tmp_path / "bad.png", np.full((2, 2), 300))


def test_distinct_load_errors(tmp_path, rng):
    (tmp_path / "junk.png").write_bytes(b"not an image")
    good = save_png(tmp_path / "i.png", np.zeros((8, 8), np.uint8))
    with pytest.raises(DecodeError):
        load_sample(tmp_path / "junk.png", good, 8)
    with pytest.raises(DecodeError):
        load_sample(tmp_path / "missing.png", good, 8)
    small = save_png(tmp_path / "s.png", np.zeros((4, 8), np.uint8))
    with pytest.raises(ExtentMismatchError):
        load_sample(good, small, 8)
    high = save_png(tmp_path / "h.png", np.full((8, 8), 5, np.uint8))
    with pytest.raises(LabelRangeError):
        load_sample(good, high, 8, class_count=3)
    rgb_mask = save_png(tmp_path / "rgb.png", np.zeros((8, 8, 3), np.uint8))
    with pytest.raises(DecodeError):
        read_mask(rgb_mask)
    assert all(issubclass(e, DataError) for e in (DecodeError, ExtentMismatchError, LabelRangeError))


@pytest.mark.parametrize("r", [16, 20, 31.5])
def test_disk_area_close_to_analytic(r):
    area = disk_mask(128, 64, 64, r).sum()
    assert abs(area - math.pi * r * r) / (math.pi * r * r) < 0.02


def test_generation_deterministic_and_complete(tmp_path):
    spec = SyntheticSpec(count=6, resolution=64, class_count=4, seed=0)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    for sub in ("images", "masks"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    batch = load_dataset(DatasetManifest.read(tmp_path / "a"), 64, 4)
    assert set(np.unique(batch.masks)) == {0, 1, 2, 3}
    np.testing.assert_array_equal(batch.masks, synthetic_batch(spec).masks)


def test_rendered_mask_matches_image_intensity():
    spec = SyntheticSpec(count=1, resolution=64, class_count=3, noise=0.0)
    image, mask = render_sample(spec, 0)
    levels = np.linspace(0.15, 0.85, 3)
    np.testing.assert_allclose(image[0], levels[mask], atol=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(resolution=48)
    with pytest.raises(ValueError):
        SyntheticSpec(shapes=("triangle",))
    with pytest.raises(ValueError):
        SyntheticSpec(count=0)


def manifest_of(n):
    return DatasetManifest([(f"i{k}.png", f"m{k}.png") for k in range(n)])


def test_split_sizes_and_partition():
    parts = split(manifest_of(100), (0.8, 0.1, 0.1), random_state=3)
    assert [len(p) for p in parts] == [80, 10, 10]
    sets = [set(p.records) for p in parts]
    assert set().union(*sets) == set(manifest_of(100).records)
    assert all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1:])
    again = split(manifest_of(100), (0.8, 0.1, 0.1), random_state=3)
    assert [p.records for p in parts] == [p.records for p in again]
    other = split(manifest_of(100), (0.8, 0.1, 0.1), random_state=4)
    assert parts[1].records != other[1].records


def test_split_errors_and_remainder():
    assert [len(p) for p in split(manifest_of(7), (0.8, 0.1, 0.1))] == [7, 0, 0]
    with pytest.raises(DataError):
        split(manifest_of(0))
    with pytest.raises(ValueError):
        split(manifest_of(5), (0.5, 0.2, 0.2))


def test_manifest_roundtrip(tmp_path):
    spec = SyntheticSpec(count=2, resolution=32)
    m = generate_synthetic(spec, tmp_path)
    back = DatasetManifest.read(tmp_path / "manifest.tsv")
    assert [tuple(p.resolve() for p in r) for r in back.records] == [tuple(p.resolve() for p in r) for r in m.records]
    assert "\t" in (tmp_path / "manifest.tsv").read_text().splitlines()[0]
    (tmp_path / "bad.tsv").write_text("only-one-column\n")
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / "bad.tsv")
