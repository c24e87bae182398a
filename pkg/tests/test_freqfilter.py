import numpy as np
import pytest

from fgr.freqfilter import (
    CHROMA_BASE,
    LUMA_BASE,
    checkerboard,
    dct8,
    filter_image,
    high_band_energy,
    idct8,
    quant_matrix,
    rgb_to_ycbcr,
    spectral_energy,
    ycbcr_to_rgb,
)

from oracles import naive_dct


def test_color_constants():
    y, cb, cr = rgb_to_ycbcr(np.array([[[255, 0, 0]]], dtype=np.uint8))
    assert y[0, 0] == pytest.approx(76.245, abs=1e-9)
    assert cb[0, 0] == pytest.approx(84.972, abs=1e-3)
    assert cr[0, 0] == 255.0


@pytest.mark.parametrize("v", [0, 17, 128, 255])
def test_gray_axis(v):
    y, cb, cr = rgb_to_ycbcr(np.full((2, 2, 3), v, dtype=np.uint8))
    np.testing.assert_allclose(y, v, atol=1e-9)
    np.testing.assert_allclose(cb, 128, atol=1e-9)
    np.testing.assert_allclose(cr, 128, atol=1e-9)


def test_color_roundtrip_within_two():
    img = np.random.default_rng(0).integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    back = ycbcr_to_rgb(*rgb_to_ycbcr(img))
    assert np.abs(back.astype(int) - img).max() <= 2


def test_dct_constant_and_zero_blocks():
    c = dct8(np.full((8, 8), 3.5))
    assert c[0, 0] == pytest.approx(28.0, abs=1e-12)
    c[0, 0] = 0
    assert np.abs(c).max() < 1e-12
    assert np.array_equal(dct8(np.zeros((8, 8))), np.zeros((8, 8)))
    dc = np.zeros((8, 8))
    dc[0, 0] = 8 * 2.25
    np.testing.assert_allclose(idct8(dc), 2.25, atol=1e-12)


def test_dct_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        b = rng.uniform(-128, 128, size=(8, 8))
        np.testing.assert_allclose(dct8(b), naive_dct(b), atol=1e-10)


def test_dct_roundtrip_batched():
    blocks = np.random.default_rng(2).uniform(-128, 128, size=(1000, 8, 8))
    assert np.abs(idct8(dct8(blocks)) - blocks).max() <= 1e-10


def test_quant_matrix_scaling():
    assert np.array_equal(quant_matrix(50, "luma"), LUMA_BASE)
    assert np.array_equal(quant_matrix(50, "chroma"), CHROMA_BASE)
    assert np.array_equal(quant_matrix(100), np.ones((8, 8)))
    prev = quant_matrix(1)
    for lam in range(2, 101):
        q = quant_matrix(lam)
        assert np.all(q <= prev) and q.min() >= 1 and q.max() <= 255
        prev = q


def test_quant_matrix_low_quality_entries():
    # lambda=10: s = 500, entry = (16 * 500 + 50) // 100 = 80
    assert quant_matrix(10)[0, 0] == 80
    assert quant_matrix(1)[0, 0] == 255


@pytest.mark.parametrize("lam", [0, 101, 2.5])
def test_quant_matrix_rejects_bad_lambda(lam):
    with pytest.raises(ValueError):
        quant_matrix(lam)


def test_filter_preserves_dims_and_is_deterministic():
    img = np.random.default_rng(3).integers(0, 256, size=(13, 21, 3), dtype=np.uint8)
    a = filter_image(img, 25)
    assert a.shape == img.shape and a.dtype == np.uint8
    assert np.array_equal(a, filter_image(img, 25))


def test_constant_image_dc_bound():
    # Only DC survives; its rounding error is at most Q[0,0]/2 in the coefficient,
    # i.e. Q[0,0]/16 per pixel in each plane, plus color rounding.
    rng = np.random.default_rng(4)
    for lam in (1, 15, 25, 50, 75, 100):
        bound = max(quant_matrix(lam, "luma")[0, 0], quant_matrix(lam, "chroma")[0, 0]) / 16 * 2.5 + 2
        for _ in range(10):
            color = rng.integers(0, 256, size=3)
            img = np.broadcast_to(color, (16, 16, 3)).astype(np.uint8)
            out = filter_image(img, lam)
            assert np.ptp(out.reshape(-1, 3), axis=0).max() == 0
            assert np.abs(out.astype(int) - img).max() <= bound
            if lam >= 50:
                assert np.abs(out.astype(int) - img).max() <= 2


def test_lambda_100_within_analytic_bound():
    rng = np.random.default_rng(5)
    worst = 0
    for _ in range(100):
        img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        worst = max(worst, int(np.abs(filter_image(img, 100).astype(int) - img).max()))
    assert worst <= 8 + 2


def test_spectral_energy_constant_image():
    e = spectral_energy(np.full((16, 16, 3), 200, dtype=np.uint8))
    assert e[0, 0] > 0
    e[0, 0] = 0
    assert np.abs(e).max() < 1e-18


def test_parseval():
    rng = np.random.default_rng(6)
    for _ in range(100):
        img = rng.integers(0, 256, size=(16, 24, 3), dtype=np.uint8)
        y, _, _ = rgb_to_ycbcr(img)
        spatial = 64 * np.mean((y - 128.0) ** 2)
        assert spectral_energy(img).sum() == pytest.approx(spatial, rel=1e-9)


def test_checkerboard_low_pass():
    board = checkerboard()
    before = high_band_energy(spectral_energy(board))
    bands = [high_band_energy(spectral_energy(filter_image(board, lam))) for lam in (25, 18, 15)]
    assert bands[0] >= bands[1] >= bands[2]
    assert bands[2] <= 0.1 * before


def test_texture_has_high_band_peak():
    from fgr.data import gen_shape_texture

    textured = gen_shape_texture(30, texture_strength=8.0, seed=0, n_val=3, n_test=3)["train"].images
    plain = gen_shape_texture(30, texture_strength=0.0, seed=0, n_val=3, n_test=3)["train"].images
    # stripe textures sit at (0, 7) / (7, 0), so look at the whole Nyquist ring
    high = np.indices((8, 8)).max(axis=0) == 7
    peak_t = np.mean([spectral_energy(im)[high].max() for im in textured])
    peak_p = np.mean([spectral_energy(im)[high].max() for im in plain])
    assert peak_t > 10 * peak_p
