"""PNG (8-bit) and PFM (float32) image reading/writing."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def read_png(path) -> np.ndarray:
    img = np.asarray(Image.open(path))
    return img.astype(np.float64) / 255.0


def write_png(path, img) -> None:
    a = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    shape = (h, w, 3) if color else (h, w)
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=m.end()).reshape(shape)
    return np.flipud(data).astype(np.float64)


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(np.flipud(img)).tobytes())


def read_image(path) -> np.ndarray:
    """Float image in [0, 1] (PNG) or as stored (PFM); RGB alpha channels dropped."""
    path = Path(path)
    img = read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path)
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    return img


def write_image(path, img) -> None:
    if Path(path).suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img)


def read_mask(path) -> np.ndarray:
    m = read_image(path)
    if m.ndim == 3:
        m = m.mean(axis=2)
    return m > 0.5
