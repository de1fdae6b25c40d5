"""Linear operators for the design matrix X and the filter bank B.

Vectors are images flattened in C order.  Every operator accepts either a
single vector of length ``cols`` or a 2-d array whose columns are vectors,
which is what makes materialization to dense or sparse matrices cheap.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

SQRT2 = np.sqrt(2.0)


class LinOp:
    """Abstract real linear map R^cols -> R^rows."""

    def __init__(self, rows: int, cols: int):
        self.rows = int(rows)
        self.cols = int(cols)
        self._sparse = None

    @property
    def shape(self):
        return (self.rows, self.cols)

    def _check(self, v, n):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != n:
            raise ValueError(f"operator expects leading dimension {n}, got {v.shape[0]}")
        return v

    def apply(self, v):
        v = self._check(v, self.cols)
        return self._apply(v)

    def apply_adjoint(self, w):
        w = self._check(w, self.rows)
        return self._apply_adjoint(w)

    def _apply(self, v):
        raise NotImplementedError

    def _apply_adjoint(self, w):
        raise NotImplementedError

    def materialize_dense(self, batch: int = 1024) -> np.ndarray:
        out = np.empty((self.rows, self.cols))
        for start in range(0, self.cols, batch):
            stop = min(start + batch, self.cols)
            eye = np.zeros((self.cols, stop - start))
            eye[np.arange(start, stop), np.arange(stop - start)] = 1.0
            out[:, start:stop] = self.apply(eye)
        return out

    def to_sparse(self, batch: int = 512, drop: float = 0.0) -> sp.csr_matrix:
        """CSR copy of the operator, built column block by column block (cached)."""
        if self._sparse is None:
            blocks = []
            for start in range(0, self.cols, batch):
                stop = min(start + batch, self.cols)
                eye = np.zeros((self.cols, stop - start))
                eye[np.arange(start, stop), np.arange(stop - start)] = 1.0
                block = self.apply(eye)
                if drop > 0.0:
                    block[np.abs(block) <= drop] = 0.0
                blocks.append(sp.csc_matrix(block))
            self._sparse = sp.hstack(blocks).tocsr()
            self._sparse.eliminate_zeros()
        return self._sparse

    def gram_dense(self) -> np.ndarray:
        """Dense Op^T Op."""
        batch = 512
        out = np.empty((self.cols, self.cols))
        for start in range(0, self.cols, batch):
            stop = min(start + batch, self.cols)
            eye = np.zeros((self.cols, stop - start))
            eye[np.arange(start, stop), np.arange(stop - start)] = 1.0
            out[:, start:stop] = self.apply_adjoint(self.apply(eye))
        return 0.5 * (out + out.T)


class DenseOp(LinOp):
    def __init__(self, matrix):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if not np.all(np.isfinite(matrix)):
            raise ValueError("matrix has non-finite entries")
        super().__init__(*matrix.shape)
        self.matrix = matrix

    def _apply(self, v):
        return self.matrix @ v

    def _apply_adjoint(self, w):
        return self.matrix.T @ w

    def materialize_dense(self, batch: int = 1024):
        return self.matrix.copy()


def dense_op(matrix) -> DenseOp:
    return DenseOp(matrix)


class SparseOp(LinOp):
    def __init__(self, matrix):
        matrix = sp.csr_matrix(matrix, dtype=float)
        super().__init__(*matrix.shape)
        self.matrix = matrix
        self._sparse = matrix

    def _apply(self, v):
        return self.matrix @ v

    def _apply_adjoint(self, w):
        return self.matrix.T @ w


class StackedOp(LinOp):
    """Vertical concatenation of operators sharing the column space."""

    def __init__(self, blocks):
        blocks = list(blocks)
        if not blocks:
            raise ValueError("StackedOp needs at least one block")
        cols = blocks[0].cols
        if any(b.cols != cols for b in blocks):
            raise ValueError("all blocks must share the column dimension")
        super().__init__(sum(b.rows for b in blocks), cols)
        self.blocks = blocks
        self.offsets = np.cumsum([0] + [b.rows for b in blocks])

    def _apply(self, v):
        return np.concatenate([b.apply(v) for b in self.blocks], axis=0)

    def _apply_adjoint(self, w):
        out = None
        for b, lo, hi in zip(self.blocks, self.offsets[:-1], self.offsets[1:]):
            part = b.apply_adjoint(w[lo:hi])
            out = part if out is None else out + part
        return out

    def to_sparse(self, batch: int = 512, drop: float = 0.0):
        if self._sparse is None:
            self._sparse = sp.vstack([b.to_sparse(batch, drop) for b in self.blocks]).tocsr()
        return self._sparse


class ComposedOp(LinOp):
    """outer @ inner."""

    def __init__(self, outer: LinOp, inner: LinOp):
        if outer.cols != inner.rows:
            raise ValueError("dimension mismatch in composition")
        super().__init__(outer.rows, inner.cols)
        self.outer = outer
        self.inner = inner

    def _apply(self, v):
        return self.outer.apply(self.inner.apply(v))

    def _apply_adjoint(self, w):
        return self.inner.apply_adjoint(self.outer.apply_adjoint(w))


# ---------------------------------------------------------------------------
# Real coding of the Hermitian half spectrum


class RealDFT:
    """Orthonormal real-to-complex 2-d DFT with spectra coded in R^n.

    Entries of the ``rfft2`` half spectrum are stored as real numbers: the
    purely real bins (DC, Nyquist) as themselves, every other independent
    complex bin as ``(sqrt2 * Re, sqrt2 * Im)``.  The code vector is laid out
    as [real bins, Re parts, Im parts]; ``column`` gives the rfft column of
    every code row.
    """

    def __init__(self, height: int, width: int):
        self.h, self.w = int(height), int(width)
        self.n = self.h * self.w
        h, w = self.h, self.w
        wr = w // 2 + 1
        self_cols = [0] + ([w // 2] if w % 2 == 0 and w > 1 else [])
        real_mask = np.zeros((h, wr), dtype=bool)
        pair_mask = np.zeros((h, wr), dtype=bool)
        for c in self_cols:
            real_mask[0, c] = True
            if h % 2 == 0:
                real_mask[h // 2, c] = True
            pair_mask[1:(h + 1) // 2, c] = True
        interior = [c for c in range(wr) if c not in self_cols]
        pair_mask[:, interior] = True
        self.real_mask = real_mask
        self.pair_mask = pair_mask
        self.self_cols = self_cols
        self.n_real = int(real_mask.sum())
        self.n_pair = int(pair_mask.sum())
        if self.n_real + 2 * self.n_pair != self.n:
            raise AssertionError("real coding does not have n degrees of freedom")
        cols = np.broadcast_to(np.arange(wr), (h, wr))
        self.column = np.concatenate([cols[real_mask], cols[pair_mask], cols[pair_mask]])

    def encode(self, spec):
        """Half spectrum (h, w//2+1, ...) -> code vectors (n, ...)."""
        tail = spec.shape[2:]
        out = np.empty((self.n,) + tail)
        out[: self.n_real] = spec[self.real_mask].real
        pair = spec[self.pair_mask]
        out[self.n_real: self.n_real + self.n_pair] = SQRT2 * pair.real
        out[self.n_real + self.n_pair:] = SQRT2 * pair.imag
        return out

    def decode(self, code):
        tail = code.shape[1:]
        h, wr = self.h, self.w // 2 + 1
        spec = np.zeros((h, wr) + tail, dtype=complex)
        spec[self.real_mask] = code[: self.n_real]
        re = code[self.n_real: self.n_real + self.n_pair]
        im = code[self.n_real + self.n_pair:]
        spec[self.pair_mask] = (re + 1j * im) / SQRT2
        k = np.arange(1, (h + 1) // 2)
        for c in self.self_cols:
            spec[h - k, c] = np.conj(spec[k, c])
        return spec

    def forward(self, v):
        img = v.reshape((self.h, self.w) + v.shape[1:])
        return self.encode(np.fft.rfft2(img, axes=(0, 1), norm="ortho"))

    def inverse(self, code):
        spec = self.decode(code)
        img = np.fft.irfft2(spec, s=(self.h, self.w), axes=(0, 1), norm="ortho")
        return img.reshape((self.n,) + code.shape[1:])


class DFTOp(LinOp):
    """Orthonormal real-coded DFT F_n of an h x w image."""

    def __init__(self, height: int, width: int):
        self.dft = RealDFT(height, width)
        super().__init__(self.dft.n, self.dft.n)

    def _apply(self, v):
        return self.dft.forward(v)

    def _apply_adjoint(self, w):
        return self.dft.inverse(w)


def kernel_spectrum(kernel, height: int, width: int) -> np.ndarray:
    """Half spectrum (h, w//2+1) of a blur kernel placed with its centre at pixel (0, 0)."""
    kernel = np.asarray(kernel, dtype=float)
    kh, kw = kernel.shape
    if kh > height or kw > width:
        raise ValueError("kernel larger than image")
    pad = np.zeros((height, width))
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.rfft2(pad)


class BlurOp(LinOp):
    """Circular convolution with a kernel given by its Hermitian half spectrum."""

    def __init__(self, spectrum, height: int, width: int):
        spectrum = np.asarray(spectrum, dtype=complex)
        if spectrum.shape != (height, width // 2 + 1):
            raise ValueError(
                f"kernel spectrum must have shape {(height, width // 2 + 1)}, got {spectrum.shape}"
            )
        super().__init__(height * width, height * width)
        self.h, self.w = height, width
        self.spectrum = spectrum

    def _filter(self, v, spec):
        img = v.reshape((self.h, self.w) + v.shape[1:])
        f = np.fft.rfft2(img, axes=(0, 1))
        f *= spec.reshape(spec.shape + (1,) * (f.ndim - 2))
        return np.fft.irfft2(f, s=(self.h, self.w), axes=(0, 1)).reshape(v.shape)

    def _apply(self, v):
        return self._filter(v, self.spectrum)

    def _apply_adjoint(self, w):
        return self._filter(w, np.conj(self.spectrum))


def dft_blur_op(spectrum, height: int, width: int) -> BlurOp:
    return BlurOp(spectrum, height, width)


class SubsampledDFTOp(LinOp):
    """Rows of the real-coded DFT belonging to selected phase-encode columns."""

    def __init__(self, height: int, width: int, columns):
        columns = np.unique(np.asarray(list(columns), dtype=int))
        if columns.size == 0:
            raise ValueError("at least one phase-encode column must be selected")
        if columns.min() < 0 or columns.max() >= width:
            raise ValueError(f"phase-encode column out of range [0, {width})")
        closed = set(columns.tolist())
        for c in columns:
            if (-c) % width not in closed:
                raise ValueError(f"column set must be closed under conjugation: {c} lacks {(-c) % width}")
        self.dft = RealDFT(height, width)
        half = np.unique(np.minimum(columns, (width - columns) % width))
        self.columns = columns
        self.rows_idx = np.flatnonzero(np.isin(self.dft.column, half))
        super().__init__(self.rows_idx.size, self.dft.n)

    def _apply(self, v):
        return self.dft.forward(v)[self.rows_idx]

    def _apply_adjoint(self, w):
        full = np.zeros((self.dft.n,) + w.shape[1:])
        full[self.rows_idx] = w
        return self.dft.inverse(full)


def subsampled_dft_op(height: int, width: int, columns) -> SubsampledDFTOp:
    return SubsampledDFTOp(height, width, columns)


class DiffOp(LinOp):
    """Periodic horizontal then vertical first differences; 2n rows."""

    def __init__(self, height: int, width: int):
        super().__init__(2 * height * width, height * width)
        self.h, self.w = height, width

    def _apply(self, v):
        img = v.reshape((self.h, self.w) + v.shape[1:])
        dh = np.roll(img, -1, axis=1) - img
        dv = np.roll(img, -1, axis=0) - img
        return np.concatenate([dh.reshape(v.shape), dv.reshape(v.shape)], axis=0)

    def _apply_adjoint(self, w):
        n = self.h * self.w
        shp = (self.h, self.w) + w.shape[1:]
        gh = w[:n].reshape(shp)
        gv = w[n:].reshape(shp)
        out = (np.roll(gh, 1, axis=1) - gh) + (np.roll(gv, 1, axis=0) - gv)
        return out.reshape((n,) + w.shape[1:])


def diff_op(height: int, width: int) -> DiffOp:
    return DiffOp(height, width)


# ---------------------------------------------------------------------------
# Orthonormal Daubechies-4 wavelet, periodic boundaries

_S3 = np.sqrt(3.0)
D4_LOW = np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * SQRT2)
D4_HIGH = np.array([(-1) ** j * D4_LOW[3 - j] for j in range(4)])


def _analysis(x, axis):
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    k = np.arange(n // 2)
    lo = np.zeros((n // 2,) + x.shape[1:])
    hi = np.zeros_like(lo)
    for j in range(4):
        tap = x[(2 * k + j) % n]
        lo += D4_LOW[j] * tap
        hi += D4_HIGH[j] * tap
    return np.moveaxis(np.concatenate([lo, hi], axis=0), 0, axis)


def _synthesis(c, axis):
    c = np.moveaxis(c, axis, 0)
    n = c.shape[0]
    k = np.arange(n // 2)
    lo, hi = c[: n // 2], c[n // 2:]
    x = np.zeros_like(c)
    for j in range(4):
        x[(2 * k + j) % n] += D4_LOW[j] * lo + D4_HIGH[j] * hi
    return np.moveaxis(x, 0, axis)


def max_wavelet_levels(height: int, width: int) -> int:
    levels = 0
    h, w = height, width
    while h % 2 == 0 and w % 2 == 0 and h >= 4 and w >= 4:
        h //= 2
        w //= 2
        levels += 1
    return levels


class WaveletOp(LinOp):
    """Multi-level 2-d orthonormal D4 transform (Mallat pyramid layout)."""

    def __init__(self, height: int, width: int, levels: int | None = None):
        if levels is None:
            levels = max_wavelet_levels(height, width)
        if levels < 0:
            raise ValueError("levels must be nonnegative")
        if height % (2 ** levels) or width % (2 ** levels):
            raise ValueError(f"{height}x{width} image is not dyadic to {levels} levels")
        super().__init__(height * width, height * width)
        self.h, self.w, self.levels = height, width, levels

    def _apply(self, v):
        c = v.reshape((self.h, self.w) + v.shape[1:]).copy()
        h, w = self.h, self.w
        for _ in range(self.levels):
            block = _analysis(_analysis(c[:h, :w], 0), 1)
            c[:h, :w] = block
            h //= 2
            w //= 2
        return c.reshape(v.shape)

    def _apply_adjoint(self, w_):
        c = w_.reshape((self.h, self.w) + w_.shape[1:]).copy()
        sizes = [(self.h >> lev, self.w >> lev) for lev in range(self.levels)]
        for h, w in reversed(sizes):
            c[:h, :w] = _synthesis(_synthesis(c[:h, :w], 1), 0)
        return c.reshape(w_.shape)


def wavelet_op(height: int, width: int, levels: int | None = None) -> WaveletOp:
    return WaveletOp(height, width, levels)


def filter_bank(height: int, width: int, levels: int | None = None) -> StackedOp:
    """B = [wavelet; horizontal and vertical differences], q = 3n rows."""
    return StackedOp([wavelet_op(height, width, levels), diff_op(height, width)])
