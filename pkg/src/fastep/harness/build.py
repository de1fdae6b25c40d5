"""Desk-scale versions of the deconvolution and Cartesian MRI experiments."""

from __future__ import annotations

import numpy as np

from ..model import LAPLACE, ModelSpec, Sites
from ..operators import ComposedOp, DFTOp, DenseOp, dft_blur_op, filter_bank, kernel_spectrum, max_wavelet_levels, subsampled_dft_op
from .config import ConfigError, ExperimentConfig
from .images import gaussian_kernel, phantom, read_pgm


def load_image(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.image:
        try:
            return read_pgm(cfg.image)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read image {cfg.image}: {exc}") from exc
    return phantom(cfg.height, cfg.width, seed=cfg.seed)


def load_kernel(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.kernel:
        try:
            k = read_pgm(cfg.kernel)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read kernel {cfg.kernel}: {exc}") from exc
        if not k.sum() > 0:
            raise ConfigError("kernel image is all zero")
        return k / k.sum()
    return gaussian_kernel(cfg.kernel_height, cfg.kernel_width, cfg.kernel_spread)


def sparsity_sites(cfg: ExperimentConfig, n: int, n_wavelet: int) -> Sites:
    """tau_a on the wavelet rows, tau_r on the difference rows."""
    tau = np.concatenate([np.full(n_wavelet, cfg.tau("tau_a")), np.full(2 * n, cfg.tau("tau_r"))])
    return Sites(np.full(tau.size, LAPLACE), tau=tau)


def _filter_bank(cfg, h, w):
    levels = cfg.wavelet_levels
    if levels is None:
        levels = max_wavelet_levels(h, w)
    try:
        return filter_bank(h, w, levels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _observe(X, u, cfg, stream):
    rng = np.random.default_rng([cfg.seed, stream])
    clean = X.apply(u)
    return clean + np.sqrt(cfg.noise_var) * rng.standard_normal(clean.size)


def build_deconvolution(cfg: ExperimentConfig):
    """X = (diag f~) F: blur followed by the real-coded orthonormal DFT."""
    img = load_image(cfg)
    h, w = img.shape
    kernel = load_kernel(cfg)
    try:
        spec = kernel_spectrum(kernel, h, w)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    X = ComposedOp(DFTOp(h, w), dft_blur_op(spec, h, w))
    B = _filter_bank(cfg, h, w)
    u = img.ravel()
    y = _observe(X, u, cfg, 1)
    meta = {"experiment": "deconvolution", "height": h, "width": w, "truth": u, "kernel_shape": kernel.shape}
    return ModelSpec(X, B, y, cfg.noise_var, sparsity_sites(cfg, h * w, h * w), cfg.eta, meta)


def phase_encode_columns(width: int, count: int, pattern: str = "lowpass", seed: int = 0) -> np.ndarray:
    """Conjugate-closed set of DFT columns: DC, then symmetric pairs, then Nyquist."""
    if not 1 <= count <= width:
        raise ConfigError(f"cannot sample {count} of {width} columns")
    cols = [0]
    pairs = list(range(1, (width + 1) // 2))
    if pattern == "random":
        rng = np.random.default_rng([seed, 2])
        pairs = list(rng.permutation(pairs))
    nyq = width // 2 if width % 2 == 0 else None
    for k in pairs:
        if len(cols) + 2 > count:
            break
        cols += [int(k), width - int(k)]
    if len(cols) < count and nyq is not None:
        cols.append(nyq)
    if len(cols) != count:
        raise ConfigError(f"{count} columns cannot form a conjugate-closed set for width {width}")
    return np.sort(np.array(cols))


def build_mri(cfg: ExperimentConfig):
    """X = rows of the real-coded DFT on the sampled phase-encode columns."""
    img = load_image(cfg)
    h, w = img.shape
    cols = phase_encode_columns(w, cfg.columns, cfg.column_pattern, cfg.seed)
    X = subsampled_dft_op(h, w, cols)
    B = _filter_bank(cfg, h, w)
    u = img.ravel()
    y = _observe(X, u, cfg, 1)
    meta = {"experiment": "cartesian_mri", "height": h, "width": w, "truth": u, "columns": cols}
    return ModelSpec(X, B, y, cfg.noise_var, sparsity_sites(cfg, h * w, h * w), cfg.eta, meta)


def build_custom(cfg: ExperimentConfig):
    """Denoising: X = I on the image."""
    img = load_image(cfg)
    h, w = img.shape
    X = DenseOp(np.eye(h * w))
    B = _filter_bank(cfg, h, w)
    u = img.ravel()
    y = _observe(X, u, cfg, 1)
    meta = {"experiment": "custom", "height": h, "width": w, "truth": u}
    return ModelSpec(X, B, y, cfg.noise_var, sparsity_sites(cfg, h * w, h * w), cfg.eta, meta)


def build_model(cfg: ExperimentConfig) -> ModelSpec:
    builders = {"deconvolution": build_deconvolution, "cartesian_mri": build_mri, "custom": build_custom}
    return builders[cfg.experiment](cfg)
