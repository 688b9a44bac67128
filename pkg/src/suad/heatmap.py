"""Residual heat maps: voxel-wise error, median filtering, slice rendering.

For a volume flagged anomalous, the voxel-wise absolute difference
between input and reconstruction is median-filtered (cubic window,
default 5 per axis) to suppress sporadic reconstruction errors, then
rendered slice by slice: a grayscale anatomy underlay with a red overlay
whose opacity is the filtered residual normalized to the volume's
residual maximum. Images are written as binary PPM (P6) files.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import median_filter

from . import models
from .autodiff import Tensor, no_grad
from .errors import DimensionError, GeometryError, ParameterError
from .preprocess import Volume

PLANES = ("sagittal", "coronal", "axial")
_PLANE_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}


def residual(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Voxel-wise |x - x_hat|; symmetric and zero iff the inputs match."""
    x = np.asarray(x, dtype=np.float32)
    x_hat = np.asarray(x_hat, dtype=np.float32)
    if x.shape != x_hat.shape:
        raise DimensionError(f"residual: shapes {x.shape} and {x_hat.shape} differ")
    return np.abs(x - x_hat)


def median_filter3d(d: np.ndarray, kernel: int = 5) -> np.ndarray:
    """Replace each voxel by the median of its kernel³ neighbourhood.

    The kernel must be odd so the median is an element of the window.
    Boundaries replicate the edge voxels, which avoids artificial
    zero-residual borders.
    """
    if not isinstance(kernel, int) or kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"median kernel must be an odd integer >= 1, got {kernel!r}")
    d = np.asarray(d)
    if d.ndim != 3:
        raise DimensionError(f"median_filter3d expects a 3-D volume, got shape {d.shape}")
    return median_filter(d, size=kernel, mode="nearest")


def slice_extract(v: np.ndarray, plane: str, index: int) -> np.ndarray:
    """One 2-D slice along an anatomical plane.

    Axis convention: sagittal = axis 0 (D), coronal = axis 1 (H),
    axial = axis 2 (W); the returned array keeps the remaining axes in
    volume order.
    """
    if plane not in _PLANE_AXIS:
        raise ParameterError(f"unknown plane {plane!r}; expected one of {PLANES}")
    v = np.asarray(v)
    if v.ndim != 3:
        raise DimensionError(f"slice_extract expects a 3-D volume, got shape {v.shape}")
    axis = _PLANE_AXIS[plane]
    if not 0 <= index < v.shape[axis]:
        raise GeometryError(
            f"slice index {index} out of range [0, {v.shape[axis]}) for plane {plane}"
        )
    return np.take(v, index, axis=axis).copy()


def heatmap_rgb(
    base_slice: np.ndarray, residual_slice: np.ndarray, residual_max: float | None = None
) -> np.ndarray:
    """Blend a grayscale underlay with a red overlay, returning uint8 RGB.

    With ``g`` the underlay intensity and ``a`` the residual normalized
    by ``residual_max`` (both clipped to [0, 1]), the pixel is
    ``(g*(1-a) + a, g*(1-a), g*(1-a)) * 255``: zero residual reproduces
    the grayscale underlay, the maximum residual is pure red.
    """
    base_slice = np.asarray(base_slice, dtype=np.float64)
    residual_slice = np.asarray(residual_slice, dtype=np.float64)
    if base_slice.shape != residual_slice.shape or base_slice.ndim != 2:
        raise DimensionError(
            f"heatmap: base {base_slice.shape} and residual {residual_slice.shape} "
            f"must be equal 2-D shapes"
        )
    g = np.clip(base_slice, 0.0, 1.0)
    norm = float(residual_max) if residual_max is not None else float(residual_slice.max())
    a = np.clip(residual_slice / norm, 0.0, 1.0) if norm > 0 else np.zeros_like(residual_slice)
    faded = g * (1.0 - a)
    rgb = np.stack([faded + a, faded, faded], axis=-1)
    return np.rint(rgb * 255.0).astype(np.uint8)


def render_heatmap(
    base_slice: np.ndarray,
    residual_slice: np.ndarray,
    out_path,
    residual_max: float | None = None,
):
    """Render one slice overlay and write it as a P6 PPM file."""
    from . import io as suad_io

    rgb = heatmap_rgb(base_slice, residual_slice, residual_max)
    suad_io.write_ppm(out_path, rgb)
    return out_path


def filtered_residual(params, volume: Volume, kernel: int = 5) -> np.ndarray:
    """Reconstruct a volume and median-filter its residual map."""
    xt = Tensor(volume.data[None, None])
    with no_grad():
        if params.kind == "vae":
            eps = Tensor(np.zeros((1, params.arch.latent_dim), dtype=np.float32))
            x_hat, _, _ = models.vae_forward(params, xt, eps)
        else:
            x_hat, _ = models.cae_forward(params, xt)
    return median_filter3d(residual(volume.data, x_hat.data[0, 0]), kernel)
