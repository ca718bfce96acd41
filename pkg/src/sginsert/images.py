"""Linear HDR image IO (PFM) and tone-mapped PNG output (stdlib only)."""

from __future__ import annotations

import struct
import zlib

import numpy as np


def pfm_bytes(image):
    """Color PFM bytes (little-endian 'PF', bottom-up rows, scale -1)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PFM writer expects (H,W) or (H,W,3)")
    h, w = img.shape[:2]
    return b"PF\n" + f"{w} {h}\n".encode() + b"-1.0\n" + img[::-1].astype("<f4").tobytes()


def write_pfm(path, image):
    with open(path, "wb") as f:
        f.write(pfm_bytes(image))


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path!r} is not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        channels = 3 if header == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h * channels), dtype=dtype)
        img = data.reshape(h, w, channels)[::-1]
        return img.astype(np.float64) if channels == 3 else img[..., 0].astype(np.float64)


def tonemap(hdr, gamma=2.2):
    """Reinhard + gamma; returns float in [0,1]."""
    x = np.maximum(np.asarray(hdr, dtype=np.float64), 0.0)
    return np.clip((x / (1.0 + x)) ** (1.0 / gamma), 0.0, 1.0)


def to_uint8(img01):
    return np.clip(np.asarray(img01) * 255.0 + 0.5, 0, 255).astype(np.uint8)


def encode_png(rgb8):
    """Minimal 8-bit RGB PNG encoder (deterministic bytes)."""
    img = np.asarray(rgb8, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w = img.shape[:2]
    raw = b"".join(b"\x00" + img[i].tobytes() for i in range(h))

    def chunk(tag, data):
        out = struct.pack(">I", len(data)) + tag + data
        return out + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    comp = zlib.compress(raw, 9)
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", comp)
        + chunk(b"IEND", b"")
    )


def write_png(path, rgb8):
    with open(path, "wb") as f:
        f.write(encode_png(rgb8))


def write_preview(path, hdr, gamma=2.2):
    """Tone-mapped PNG preview of a linear HDR image."""
    write_png(path, to_uint8(tonemap(hdr, gamma)))


def psnr(image, reference, peak=None):
    """PSNR in dB in linear HDR; peak defaults to the reference max."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr shapes differ")
    mse = float(np.mean((a - b) ** 2))
    pk = float(peak) if peak is not None else float(max(b.max(), 1e-12))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(pk * pk / mse)


def mae(image, reference):
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    return float(np.mean(np.abs(a - b)))
