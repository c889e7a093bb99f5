import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from famseg.data import (
    FB,
    FL,
    DataError,
    PhantomSpec,
    class_pixel_stats,
    generate,
    load_mask,
    load_png_pair,
    palette_image,
    rasterize,
    read_manifest,
    render,
    save_image,
    save_mask,
    save_palette,
    split,
    write_dataset,
)


@pytest.fixture(scope="module")
def big_set():
    return generate(PhantomSpec(), 1000, 7)


def test_generation_is_deterministic():
    a = generate(PhantomSpec(), 5, 3)
    b = generate(PhantomSpec(), 5, 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
        assert x.meta == y.meta


def test_sample_does_not_depend_on_n():
    a = generate(PhantomSpec(), 3, 11)
    b = generate(PhantomSpec(), 6, 11)
    for x, y in zip(a, b[:3]):
        assert np.array_equal(x.image, y.image)


def test_noise_free_foreground_is_brighter_by_margin():
    for s in generate(PhantomSpec(noise=(0.0, 0.0)), 30, 0):
        img = s.image[0]
        fg, bg = img[s.mask > 0], img[s.mask == 0]
        assert fg.min() - bg.max() >= 0.3


def test_foreground_fraction_bounds(big_set):
    fractions = np.array([(s.mask > 0).mean() for s in big_set])
    assert fractions.min() >= 0.005 and fractions.max() <= 0.25


def test_class_balance_emphasizes_small_femur(big_set):
    stats = class_pixel_stats(big_set)
    assert min(stats["BG"], stats["FL"], stats["FB"]) > 0
    assert stats["FB"] >= 3 * stats["FL"]


def test_value_ranges(big_set):
    for s in big_set[:200]:
        assert s.image.shape == (3, 64, 64)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1, 2}
        assert (s.mask > 0).any()


def test_masks_are_reachable_from_meta(big_set):
    for s in big_set[:200]:
        assert np.array_equal(rasterize(s.meta), s.mask)
    s = big_set[0]
    assert np.array_equal(render(s.meta), s.image)


def test_femur_overwrites_cranium():
    meta = {"image_size": 64,
            "cranium": {"cx": 32, "cy": 32, "a": 20, "b": 20, "thickness": 3, "angle": 0.0},
            "femur": {"cx": 32, "cy": 13, "length": 10, "thickness": 3, "angle": 0.0}}
    mask = rasterize(meta)
    assert mask[13, 32] == FL
    assert mask[32, 13] == FB


def test_unfittable_specs_are_rejected():
    with pytest.raises(DataError):
        PhantomSpec(femur_length=(8, 80))
    with pytest.raises(DataError):
        PhantomSpec(image_size=48)
    with pytest.raises(DataError):
        PhantomSpec(foreground_intensity=(0.4, 0.5))
    with pytest.raises(DataError):
        generate(PhantomSpec(), 0, 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mask_png_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 3, size=(rng.integers(1, 40), rng.integers(1, 40))).astype(np.uint8)
    path = tmp_path_factory.mktemp("m") / "mask.png"
    save_mask(mask, path)
    assert np.array_equal(load_mask(path), mask)


def test_out_of_range_mask_value(tmp_path):
    bad = np.zeros((4, 4), np.uint8)
    bad[1, 1] = 7
    with pytest.raises(DataError, match="7"):
        save_mask(bad, tmp_path / "bad.png")
    Image.fromarray(bad, mode="L").save(tmp_path / "raw.png")
    with pytest.raises(DataError, match="out of range"):
        load_mask(tmp_path / "raw.png")


def test_rgb_mask_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(DataError, match="single-channel"):
        load_mask(tmp_path / "rgb.png")


def test_palette_colors(tmp_path):
    mask = np.array([[0, 1, 2]], np.uint8)
    rgb = palette_image(mask)
    assert rgb[0].tolist() == [[0, 0, 0], [255, 0, 0], [0, 255, 0]]
    save_palette(mask, tmp_path / "p.png")
    with Image.open(tmp_path / "p.png") as im:
        assert np.array_equal(np.asarray(im), rgb)


def test_image_png_pair(tmp_path):
    s = generate(PhantomSpec(), 1, 0)[0]
    save_image(s.image, tmp_path / "i.png")
    save_mask(s.mask, tmp_path / "m.png")
    pair = load_png_pair(tmp_path / "i.png", tmp_path / "m.png")
    assert np.array_equal(pair.mask, s.mask)
    assert np.max(np.abs(pair.image - s.image)) <= 0.5 / 255 + 1e-12
    save_mask(np.zeros((8, 8), np.uint8), tmp_path / "small.png")
    with pytest.raises(DataError, match="differ"):
        load_png_pair(tmp_path / "i.png", tmp_path / "small.png")


def test_split_sizes_and_partition():
    data = list(range(100))
    tr, va, te = split(data, (0.8, 0.1, 0.1), 0)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert sorted(tr + va + te) == data
    assert split(data, (0.8, 0.1, 0.1), 0) == (tr, va, te)
    assert split(data, (0.8, 0.1, 0.1), 1) != (tr, va, te)
    with pytest.raises(DataError):
        split(data, (0.5, 0.1, 0.1))


def test_dataset_directory_round_trip(tmp_path):
    samples = generate(PhantomSpec(), 10, 2)
    manifest = write_dataset(samples, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 10
    assert {ln.split("\t")[2] for ln in lines} == {"train", "val", "test"}
    back = read_manifest(tmp_path)
    for s, b in zip(samples, back):
        assert np.array_equal(s.mask, b.mask)
    assert len(read_manifest(tmp_path, "train")) == 8
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "nope")
