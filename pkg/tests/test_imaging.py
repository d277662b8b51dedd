import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from mdcnn import imaging
from mdcnn.imaging import (
    DescriptionPair,
    ImageFormatError,
    SsimConfig,
    load_image,
    polyphase_embed,
    polyphase_split,
    prepare_patches,
    psnr,
    ssim,
    upsample_linear,
)


def _even_images(max_side=12):
    return st.tuples(st.integers(1, max_side // 2), st.integers(1, max_side // 2)).flatmap(
        lambda hw: arrays(np.float64, (2 * hw[0], 2 * hw[1]), elements=st.floats(0, 1))
    )


# -- loading ---------------------------------------------------------------


@pytest.mark.parametrize("value,expected", [(255, 1.0), (0, 0.0), (128, 128 / 255)])
def test_load_image_scaling(tmp_path, value, expected):
    Image.fromarray(np.full((4, 6), value, np.uint8)).save(tmp_path / "x.png")
    img = load_image(tmp_path / "x.png")
    assert img.shape == (4, 6)
    assert img.dtype == np.float64
    assert img[0, 0] == pytest.approx(expected, abs=1e-15)


def test_load_image_converts_color_to_luma(tmp_path):
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[..., 1] = 200
    Image.fromarray(rgb).save(tmp_path / "c.png")
    img = load_image(tmp_path / "c.png")
    assert img.shape == (4, 4)
    assert 0 < img[0, 0] < 200 / 255


def test_load_image_unreadable(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError):
        load_image(bad)
    with pytest.raises(OSError):
        load_image(tmp_path / "missing.png")


def test_save_image_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (8, 10)) / 255.0
    imaging.save_image(img, tmp_path / "r.png")
    assert np.array_equal(load_image(tmp_path / "r.png"), img)


# -- patches ---------------------------------------------------------------


def test_prepare_patches_counts():
    imgs = [np.random.default_rng(i).random((180, 180)) for i in range(4)]
    ps = prepare_patches(imgs, patch_size=160, total=40, seed=1)
    assert ps.patches.shape == (40, 160, 160)
    assert len(ps.records) == 40
    assert ps.sources[:5] == ["image0000", "image0001", "image0002", "image0003", "image0000"]


def test_prepare_patches_full_scale_count():
    # 400 sources of 180x180 give 3200 patches of 160x160
    imgs = [np.full((180, 180), i / 400) for i in range(400)]
    ps = prepare_patches(imgs, patch_size=160, total=3200, seed=0)
    assert ps.patches.shape == (3200, 160, 160)


def test_prepare_patches_empty_and_deterministic(rng):
    imgs = [rng.random((40, 50))]
    assert len(prepare_patches(imgs, 16, 0)) == 0
    p1 = prepare_patches(imgs, 16, 12, seed=7)
    p2 = prepare_patches(imgs, 16, 12, seed=7)
    assert np.array_equal(p1.patches, p2.patches)
    assert p1.records == p2.records


def test_prepare_patches_records_describe_patch(rng):
    img = rng.random((30, 30))
    ps = prepare_patches([img], 10, 20, seed=3)
    for patch, rec in zip(ps.patches, ps.records):
        crop = img[rec["y"] : rec["y"] + 10, rec["x"] : rec["x"] + 10]
        if rec["flip"] == "h":
            crop = crop[:, ::-1]
        elif rec["flip"] == "v":
            crop = crop[::-1, :]
        crop = np.rot90(crop, rec["rot"] // 90)
        assert np.allclose(patch, crop, atol=1e-7)


def test_prepare_patches_rejects_small_source():
    with pytest.raises(ImageFormatError, match="tiny"):
        prepare_patches([np.zeros((8, 8))], 16, 1, names=["tiny"])


def test_patch_directory_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (40, 40)) / 255.0
    ps = prepare_patches([img], 16, 6, seed=2, names=["src"])
    manifest = imaging.save_patches(ps, tmp_path)
    assert len(manifest.read_text().splitlines()) == 6
    back = imaging.load_patches(tmp_path)
    assert np.array_equal(back.patches, ps.patches)
    assert back.records == ps.records


# -- poly-phase ------------------------------------------------------------


def test_split_single_block():
    pair = polyphase_split(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert pair.a.tolist() == [[1.0]]
    assert pair.b.tolist() == [[4.0]]


def test_split_ramp():
    ramp = np.arange(16, dtype=np.float64).reshape(4, 4) / 15
    pair = polyphase_split(ramp)
    assert np.array_equal(pair.a, np.array([[0, 2], [8, 10]]) / 15)
    assert np.array_equal(pair.b, np.array([[5, 7], [13, 15]]) / 15)


def test_split_constant():
    pair = polyphase_split(np.full((6, 8), 0.3))
    assert np.all(pair.a == 0.3) and np.all(pair.b == 0.3)


def test_split_rejects_odd():
    with pytest.raises(ImageFormatError):
        polyphase_split(np.zeros((5, 4)))


def test_embed_single_block():
    img, mask = polyphase_embed(DescriptionPair(np.array([[0.2]]), np.array([[0.7]])))
    assert img.tolist() == [[0.2, 0.0], [0.0, 0.7]]
    assert mask.mean() == 0.5


def test_embed_torch():
    a, b = torch.rand(2, 1, 3, 3), torch.rand(2, 1, 3, 3)
    img, mask = polyphase_embed(DescriptionPair(a, b))
    assert img.shape == (2, 1, 6, 6) and mask.dtype == torch.bool
    assert torch.equal(img[..., 0::2, 0::2], a) and torch.equal(img[..., 1::2, 1::2], b)


def test_description_pair_shape_check():
    with pytest.raises(ImageFormatError):
        DescriptionPair(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=60, deadline=None)
@given(_even_images())
def test_polyphase_invertible(img):
    full, mask = polyphase_embed(polyphase_split(img))
    assert np.array_equal(full[mask], img[mask])
    assert mask.mean() == 0.5


@settings(max_examples=40, deadline=None)
@given(_even_images(), st.data())
def test_split_locality(img, data):
    i = data.draw(st.integers(0, img.shape[0] - 1))
    j = data.draw(st.integers(0, img.shape[1] - 1))
    other = img.copy()
    other[i, j] = 1.0 - other[i, j] + 0.5
    p, q = polyphase_split(img), polyphase_split(other)
    changed = np.sum(p.a != q.a) + np.sum(p.b != q.b)
    assert changed <= 1


# -- up-sampling -----------------------------------------------------------


def test_upsample_constant_exact():
    out = upsample_linear(np.full((3, 5), 0.37))
    assert out.shape == (6, 10)
    assert np.all(out == 0.37)


def test_upsample_row_ramp_monotone():
    out = upsample_linear(np.array([[0.0, 1.0]]))
    assert out.shape == (2, 4)
    for row in out:
        assert np.all(np.diff(row) >= 0)
        assert row[0] == 0.0 and row[-1] == 1.0


def test_upsample_matches_reference_resizer(rng):
    from skimage.transform import resize

    for _ in range(10):
        img = rng.random((8, 8))
        ref = resize(img, (16, 16), order=1, mode="edge", anti_aliasing=False)
        assert np.max(np.abs(upsample_linear(img) - ref)) <= 1e-6


def test_upsample_torch_preserves_type_and_grad():
    x = torch.rand(2, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    y = upsample_linear(x, clamp=False)
    assert isinstance(y, torch.Tensor) and y.shape == (2, 1, 8, 8)
    y.sum().backward()
    # each input sample spreads a total weight of 4 over the output grid
    assert torch.allclose(x.grad, torch.full_like(x, 4.0))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(1, 6), st.integers(1, 6))
def test_upsample_constant_property(v, h, w):
    assert np.all(upsample_linear(np.full((h, w), v)) == v)


# -- metrics ---------------------------------------------------------------


def test_psnr_identical_is_infinite(rng):
    x = rng.random((8, 8))
    assert psnr(x, x) == imaging.PSNR_INF == math.inf


def test_psnr_closed_forms(rng):
    x = rng.random((16, 16)) * 0.5
    assert psnr(x, x + 16 / 255) == pytest.approx(10 * math.log10(255**2 / 256), abs=1e-9)
    assert psnr(x, x + 16 / 255) == pytest.approx(24.05, abs=5e-3)
    assert psnr(x, x + 1 / 255) == pytest.approx(48.13, abs=5e-3)


def test_ssim_identical_is_one(rng):
    x = rng.random((16, 16))
    assert ssim(x, x) == 1.0


def test_ssim_constant_images():
    cfg = SsimConfig()
    assert ssim(np.zeros((8, 8)), np.ones((8, 8)), cfg) == pytest.approx(cfg.c1 / (1 + cfg.c1), rel=1e-12)
    assert cfg.c1 / (1 + cfg.c1) == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_rejects_small_images():
    with pytest.raises(ImageFormatError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_ssim_config_validation():
    with pytest.raises(ValueError):
        SsimConfig(c1=0)
    with pytest.raises(ValueError):
        SsimConfig(window=1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1)), arrays(np.float64, (10, 10), elements=st.floats(0, 1)))
def test_metric_symmetry_and_bounds(x, y):
    assert psnr(x, y) == psnr(y, x)
    s = ssim(x, y)
    assert s == pytest.approx(ssim(y, x), abs=1e-15)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12
    if not np.array_equal(x, y):
        assert s < 1.0 or np.allclose(x, y, atol=1e-6)
