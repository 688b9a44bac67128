"""Volume preprocessing: rigid resampling, cropping, flipping, resizing.

The pipeline runs in one fixed order — apply the rigid transform,
resample to the common 128³ frame, extract the per-side sinus crop, flip
right-side volumes so they look like left ones, resize to the network
input size, normalize to [0, 1] — and :func:`preprocess_volume` asserts
that order. Each step is also usable standalone as a pure function.

Axis convention: ``(D, H, W)`` index the sagittal, coronal and axial
directions. The left-right flip reverses the last (W) axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._interp import resample_volume, sample_trilinear
from .errors import ContractViolation, GeometryError, NumericError, TransformError

PIPELINE_ORDER = ("apply_rigid", "resample", "crop", "flip", "resize", "normalize")

_AXES = ("D", "H", "W")


@dataclass
class Volume:
    """A 3-D scalar field plus voxel spacing and subject metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject: str = ""
    side: str = "left"
    label: str = "normal"
    anomaly_type: str = "none"
    provenance: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise GeometryError(f"volumes are 3-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("volume contains non-finite voxels")
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, step: str, **meta) -> "Volume":
        out = replace(self, data=data, **meta)
        out.provenance = self.provenance + (step,)
        return out


@dataclass(frozen=True)
class CropSpec:
    """A named crop window in the 128³ frame, one center per side."""

    name: str
    extent: tuple[int, int, int]
    center_left: tuple[int, int, int]
    center_right: tuple[int, int, int]

    def center(self, side: str) -> tuple[int, int, int]:
        return self.center_right if side.startswith("right") else self.center_left


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, proper orthonormal) plus translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3) or tra.shape != (3,):
            raise TransformError(
                f"rigid transform needs a 3x3 rotation and 3-vector translation, "
                f"got {rot.shape} and {tra.shape}"
            )
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise TransformError("rotation matrix is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise TransformError("rotation matrix has determinant -1 (reflection)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def is_identity(self) -> bool:
        return np.array_equal(self.rotation, np.eye(3)) and not self.translation.any()


def apply_rigid(v: Volume, t: RigidTransform) -> Volume:
    """Resample ``v`` through a rigid transform.

    The transform maps source mm coordinates to output mm coordinates
    (voxel index times spacing); each output voxel is inverse-mapped and
    trilinearly interpolated, with out-of-bounds reads returning 0. The
    identity transform returns the input voxels bit-exactly.
    """
    if t.is_identity():
        return v.with_data(v.data, "apply_rigid")
    spacing = np.asarray(v.spacing, dtype=np.float64)
    grid = np.stack(
        np.meshgrid(*(np.arange(d, dtype=np.float64) for d in v.dims), indexing="ij")
    )
    out_mm = grid * spacing.reshape(3, 1, 1, 1)
    src_mm = np.tensordot(t.rotation.T, out_mm - t.translation.reshape(3, 1, 1, 1), axes=([1], [0]))
    src_vox = src_mm / spacing.reshape(3, 1, 1, 1)
    data = sample_trilinear(v.data, src_vox, fill=0.0)
    return v.with_data(data, "apply_rigid")


def resample_trilinear(v: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Trilinearly resample to ``target_dims``; spacing rescales so the
    physical extent is preserved. Identity when the dims already match."""
    target_dims = tuple(int(d) for d in target_dims)
    if any(d < 1 for d in target_dims):
        raise GeometryError(f"target dims must be positive, got {target_dims}")
    if target_dims == v.dims:
        return v.with_data(v.data, "resample")
    data = resample_volume(v.data, target_dims)
    spacing = tuple(s * old / new for s, old, new in zip(v.spacing, v.dims, target_dims))
    return v.with_data(data, "resample", spacing=spacing)


def extract_subvolume(v: Volume, spec: CropSpec, side: str | None = None) -> Volume:
    """Cut the crop window for one side out of the resampled frame."""
    side = v.side if side is None else side
    center = spec.center(side)
    starts, stops = [], []
    for ax in range(3):
        start = center[ax] - spec.extent[ax] // 2
        stop = start + spec.extent[ax]
        if start < 0 or stop > v.dims[ax]:
            raise GeometryError(
                f"crop '{spec.name}' leaves the volume along axis {_AXES[ax]}: "
                f"[{start}, {stop}) outside [0, {v.dims[ax]})"
            )
        starts.append(start)
        stops.append(stop)
    data = v.data[starts[0] : stops[0], starts[1] : stops[1], starts[2] : stops[2]]
    return v.with_data(data, "crop", side=side)


def flip_coronal(v: Volume) -> Volume:
    """Reverse the left-right (W) axis; applying it twice is the identity.

    The side annotation toggles a ``_flipped`` suffix so flipped volumes
    are recognizable downstream.
    """
    side = v.side[: -len("_flipped")] if v.side.endswith("_flipped") else v.side + "_flipped"
    return v.with_data(v.data[:, :, ::-1], "flip", side=side)


def resize_to_input(v: Volume, input_dims: tuple[int, int, int] = (64, 64, 64)) -> Volume:
    """Trilinearly resample the crop to the network input size."""
    input_dims = tuple(int(d) for d in input_dims)
    if any(d < 1 for d in input_dims):
        raise GeometryError(f"input dims must be positive, got {input_dims}")
    if input_dims == v.dims:
        return v.with_data(v.data, "resize")
    data = resample_volume(v.data, input_dims)
    spacing = tuple(s * old / new for s, old, new in zip(v.spacing, v.dims, input_dims))
    return v.with_data(data, "resize", spacing=spacing)


def normalize01(v: Volume) -> Volume:
    """Min-max normalize to [0, 1]; a constant volume maps to all zeros."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi > lo:
        data = (v.data - np.float32(lo)) / np.float32(hi - lo)
    else:
        data = np.zeros_like(v.data)
    return v.with_data(data, "normalize")


def assert_pipeline_order(provenance: tuple[str, ...]) -> None:
    """Reject any preprocessing history that is not the canonical order.

    Right-side volumes include the flip step; left-side ones skip it.
    """
    without_flip = tuple(s for s in PIPELINE_ORDER if s != "flip")
    if tuple(provenance) not in (PIPELINE_ORDER, without_flip):
        raise ContractViolation(
            f"preprocessing ran out of order: {provenance}; expected {PIPELINE_ORDER} "
            f"(flip only for right-side volumes)"
        )


def preprocess_volume(
    v: Volume,
    transform: RigidTransform,
    spec: CropSpec,
    input_dims: tuple[int, int, int] = (64, 64, 64),
    resample_dims: tuple[int, int, int] = (128, 128, 128),
) -> Volume:
    """Run the full preprocessing pipeline on one volume.

    Steps, in the only accepted order: rigid transform, resample to the
    common frame, crop the configured sinus window, flip right-side
    volumes, resize to the network input, min-max normalize.
    """
    out = apply_rigid(v, transform)
    out = resample_trilinear(out, resample_dims)
    out = extract_subvolume(out, spec)
    if v.side.startswith("right"):
        out = flip_coronal(out)
    out = resize_to_input(out, input_dims)
    out = normalize01(out)
    assert_pipeline_order(out.provenance[len(v.provenance):])
    return out
