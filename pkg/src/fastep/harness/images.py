"""Test images, blur kernels and binary PGM (P5) input/output."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def phantom(height: int, width: int, seed: int = 0, n_ellipses: int = 8) -> np.ndarray:
    """Piecewise-constant image in [0, 1] made of random ellipses on a dark background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    yy = (yy + 0.5) / height - 0.5
    xx = (xx + 0.5) / width - 0.5
    img = np.zeros((height, width))
    outer = (yy / 0.46) ** 2 + (xx / 0.38) ** 2 <= 1
    img[outer] = 0.3
    for _ in range(n_ellipses):
        cy, cx = rng.uniform(-0.25, 0.25, size=2)
        ay, ax = rng.uniform(0.04, 0.2, size=2)
        ang = rng.uniform(0, np.pi)
        c, s = np.cos(ang), np.sin(ang)
        dy, dx = yy - cy, xx - cx
        r = ((c * dy + s * dx) / ay) ** 2 + ((-s * dy + c * dx) / ax) ** 2
        img[(r <= 1) & outer] = rng.uniform(0.1, 1.0)
    return img


def gaussian_kernel(height: int, width: int, spread: float) -> np.ndarray:
    """Normalized separable Gaussian blur kernel."""
    if height < 1 or width < 1 or not spread > 0:
        raise ValueError("kernel dimensions and spread must be positive")
    ky = np.exp(-0.5 * ((np.arange(height) - (height - 1) / 2) / spread) ** 2)
    kx = np.exp(-0.5 * ((np.arange(width) - (width - 1) / 2) / spread) ** 2)
    k = np.outer(ky, kx)
    return k / k.sum()


def read_pgm(path) -> np.ndarray:
    """Binary PGM as floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = width * height
    pix = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return pix.reshape(height, width).astype(float) / maxval


def write_pgm(path, image, maxval: int = 255) -> None:
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    height, width = img.shape
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    pix = np.round(img * maxval).astype(dtype)
    header = f"P5\n{width} {height}\n{maxval}\n".encode()
    Path(path).write_bytes(header + pix.tobytes())
