"""Shared trilinear-interpolation helpers.

One coordinate convention is used everywhere a volume is resampled:
output sample ``i`` maps to the source coordinate ``(i + 0.5) * (in / out)
- 0.5`` (the align-corners=false convention), clamped to ``[0, in - 1]``.

Linear interpolation along one axis is evaluated as
``g0 + t * (g1 - g0)`` rather than ``(1 - t) * g0 + t * g1`` so that a
constant field is reproduced bit-exactly (the difference term is exactly
zero regardless of the rounding of ``t``).
"""

from __future__ import annotations

import numpy as np


def axis_indices(in_dim: int, out_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-output-sample source indices and fractional weights for one axis.

    Returns ``(i0, i1, t)`` with ``i0 <= i1`` and ``t`` in ``[0, 1)`` such
    that the interpolated value is ``x[i0] + t * (x[i1] - x[i0])``.
    """
    src = (np.arange(out_dim, dtype=np.float64) + 0.5) * (in_dim / out_dim) - 0.5
    src = np.clip(src, 0.0, in_dim - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_dim - 1)
    t = src - i0
    return i0, i1, t


def lerp_axis(arr: np.ndarray, axis: int, i0: np.ndarray, i1: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Linearly resample ``arr`` along ``axis`` at the given index pairs."""
    g0 = np.take(arr, i0, axis=axis)
    g1 = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = t.size
    tb = t.astype(arr.dtype).reshape(shape)
    return g0 + tb * (g1 - g0)


def resample_axis(arr: np.ndarray, axis: int, out_dim: int) -> np.ndarray:
    """Resample one axis of ``arr`` to ``out_dim`` samples."""
    i0, i1, t = axis_indices(arr.shape[axis], out_dim)
    return lerp_axis(arr, axis, i0, i1, t)


def resample_volume(arr: np.ndarray, out_dims: tuple[int, int, int]) -> np.ndarray:
    """Trilinearly resample a 3-D array to ``out_dims``, one axis at a time."""
    out = arr
    for axis, dim in enumerate(out_dims):
        out = resample_axis(out, axis, dim)
    return out


def axis_matrix(in_dim: int, out_dim: int, dtype=np.float64) -> np.ndarray:
    """Dense ``[out_dim, in_dim]`` interpolation matrix for one axis.

    Row ``o`` holds the weights ``(1 - t)`` at ``i0`` and ``t`` at ``i1``;
    used as the exact adjoint in backward passes.
    """
    i0, i1, t = axis_indices(in_dim, out_dim)
    mat = np.zeros((out_dim, in_dim), dtype=np.float64)
    rows = np.arange(out_dim)
    np.add.at(mat, (rows, i0), 1.0 - t)
    np.add.at(mat, (rows, i1), t)
    return mat.astype(dtype)


def sample_trilinear(arr: np.ndarray, coords: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample a 3-D array at fractional voxel coordinates.

    ``coords`` has shape ``(3, ...)`` in voxel units. Neighbours outside
    the array contribute ``fill`` (zero-padding semantics), so points far
    out of bounds evaluate to ``fill`` exactly.
    """
    d, h, w = arr.shape
    dims = (d, h, w)
    base = np.floor(coords).astype(np.intp)
    frac = coords - base

    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for corner in range(8):
        offs = [(corner >> k) & 1 for k in (2, 1, 0)]
        weight = np.ones(coords.shape[1:], dtype=np.float64)
        idx = []
        valid = np.ones(coords.shape[1:], dtype=bool)
        for ax in range(3):
            i = base[ax] + offs[ax]
            weight = weight * (frac[ax] if offs[ax] else 1.0 - frac[ax])
            valid &= (i >= 0) & (i < dims[ax])
            idx.append(np.clip(i, 0, dims[ax] - 1))
        vals = arr[idx[0], idx[1], idx[2]].astype(np.float64)
        vals = np.where(valid, vals, fill)
        out += weight * vals
    return out
