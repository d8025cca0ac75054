"""Centered orthonormal 2-D Fourier transforms and the masked encoding operator.

Images and k-space are ``complex128`` arrays of shape ``(H, W)``; masks are
``bool`` arrays of the same shape.  K-space is stored DC-centred, with DC at
``(H // 2, W // 2)`` for both even and odd sizes.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InvalidInputError

__all__ = [
    "as_image",
    "as_mask",
    "fft2c",
    "ifft2c",
    "encode",
    "encode_adjoint",
    "data_consistency",
    "inner",
]


def as_image(arr, name="input") -> np.ndarray:
    """Validate ``arr`` as a finite 2-D grid and return it as complex128."""
    a = np.asarray(arr)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    a = a.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


def as_mask(mask, shape=None) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {m.shape}")
    if m.dtype != np.bool_:
        if not np.all((m == 0) | (m == 1)):
            raise InvalidInputError("mask entries must be 0/1 or boolean")
        m = m.astype(bool)
    if not m.any():
        raise InvalidInputError("mask must keep at least one point")
    if shape is not None and m.shape != tuple(shape):
        raise DimensionError(f"mask shape {m.shape} does not match data shape {tuple(shape)}")
    return m


def _same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise DimensionError(f"shape mismatch: {shape} vs {a.shape}")


def _fft2c(x):
    # unchecked; callers validate once outside hot loops
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x), norm="ortho"))


def _ifft2c(k):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k), norm="ortho"))


def fft2c(img) -> np.ndarray:
    """Unitary 2-D DFT with DC moved to the array centre."""
    return _fft2c(as_image(img, "image"))


def ifft2c(ksp) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    return _ifft2c(as_image(ksp, "k-space"))


def encode(img, mask) -> np.ndarray:
    x = as_image(img, "image")
    m = as_mask(mask, x.shape)
    return np.where(m, fft2c(x), 0)


def encode_adjoint(ksp, mask) -> np.ndarray:
    k = as_image(ksp, "k-space")
    m = as_mask(mask, k.shape)
    return ifft2c(np.where(m, k, 0))


def data_consistency(recon_k, acquired_k, mask) -> np.ndarray:
    """Overwrite ``recon_k`` with ``acquired_k`` wherever ``mask`` is kept."""
    r = as_image(recon_k, "reconstructed k-space")
    a = as_image(acquired_k, "acquired k-space")
    _same_shape(r, a)
    m = as_mask(mask, r.shape)
    return np.where(m, a, r)


def inner(a, b) -> complex:
    """Complex inner product <a, b> = sum(conj(a) * b)."""
    return complex(np.vdot(a, b))
