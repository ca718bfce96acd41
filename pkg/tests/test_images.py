import numpy as np
import pytest

from sginsert.images import (
    encode_png,
    mae,
    psnr,
    read_pfm,
    to_uint8,
    tonemap,
    write_pfm,
)


def test_pfm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 10, (13, 7, 3))
    p = tmp_path / "t.pfm"
    write_pfm(p, img)
    back = read_pfm(p)
    assert back.shape == img.shape
    assert np.allclose(back, img, rtol=1e-6)


def test_pfm_grayscale_expansion(tmp_path):
    img = np.arange(12, dtype=np.float64).reshape(3, 4)
    p = tmp_path / "g.pfm"
    write_pfm(p, img)
    back = read_pfm(p)
    assert back.shape == (3, 4, 3)
    assert np.allclose(back[..., 0], img, rtol=1e-6)


def test_pfm_rejects_garbage(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"JUNKJUNK")
    with pytest.raises(ValueError):
        read_pfm(p)


def test_tonemap_monotone_bounded():
    x = np.linspace(0, 50, 100)
    y = tonemap(x)
    assert np.all(np.diff(y) >= 0)
    assert y.min() >= 0 and y.max() <= 1


def test_png_structure():
    img8 = to_uint8(np.random.default_rng(1).uniform(0, 1, (5, 9, 3)))
    png = encode_png(img8)
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert b"IHDR" in png and b"IDAT" in png and png.endswith(b"IEND\xaeB`\x82")
    import struct as st
    import zlib

    w, h = st.unpack(">II", png[16:24])
    assert (w, h) == (9, 5)
    idat = png.index(b"IDAT")
    length = int.from_bytes(png[idat - 4 : idat], "big")
    raw = zlib.decompress(png[idat + 4 : idat + 4 + length])
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(5, 1 + 27)
    assert np.all(rows[:, 0] == 0)
    assert np.array_equal(rows[:, 1:].reshape(5, 9, 3), img8)


def test_psnr_and_mae():
    ref = np.full((4, 4, 3), 2.0)
    img = ref + 0.2
    assert np.isclose(psnr(img, ref), 20 * np.log10(2.0 / 0.2))
    assert np.isclose(mae(img, ref), 0.2)
    assert psnr(ref, ref) == float("inf")
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))
