"""Procedural sinus phantoms: healthy cavities and three lesion types.

A healthy phantom is a dark ellipsoidal cavity (air) wrapped in a thin
bright wall (mucosa) inside a mid-intensity background, with jittered
pose and size plus additive Gaussian noise. Anomalous phantoms modify
the same base geometry:

* ``thickening`` — the wall grows inward (the subtlest change),
* ``polyp``     — a bright blob attached to the wall, bulging into the cavity,
* ``cyst``      — a bright dome resting on the cavity floor.

Geometry is parameterized in normalized coordinates (fractions of the
volume extent), so the same seed produces the same anatomy at 16³ and at
64³. Each instance derives its own RNG streams from (seed, index), which
keeps generation order-independent and byte-reproducible. These phantoms
are deliberately simple geometric proxies: they exercise the pipeline's
mechanics and reconstruction-error separability, not clinical realism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError
from .preprocess import Volume

ANOMALY_TYPES = ("thickening", "polyp", "cyst")

_GEOMETRY_STREAM = 0
_NOISE_STREAM = 1
_TYPE_STREAM = 31

_BACKGROUND = 0.5
_CAVITY = 0.15
_WALL = 0.85
_LESION = 0.85

# paper-scale split sizes; desk configs scale them down
_BASE_COUNTS = {
    "train_normal": 172,
    "val_normal": 43,
    "val_anomaly": 52,
    "test_normal": 54,
    "test_anomaly": 78,
}


def _round_half_down(x: float) -> int:
    """Round to nearest with .5 going down (172/8 -> 21, 54/8 -> 7)."""
    return int(math.ceil(x - 0.5))


@dataclass(frozen=True)
class PhantomConfig:
    """Dataset shape and phantom geometry parameters.

    The train split holds healthy volumes only — by construction there is
    no train-anomaly count. Extents (wall thickness, lesion radius,
    thickening increment) are fractions of the volume size.
    """

    dims: tuple[int, int, int] = (16, 16, 16)
    train_normal: int = 21
    val_normal: int = 5
    val_anomaly: int = 6
    test_normal: int = 7
    test_anomaly: int = 10
    mix: tuple[float, float, float] = (0.37, 0.44, 0.19)
    noise_sigma: float = 0.01
    wall_thickness: tuple[float, float] = (0.08, 0.12)
    lesion_radius: tuple[float, float] = (0.12, 0.18)
    thicken_delta: tuple[float, float] = (0.05, 0.09)
    center_jitter: float = 0.03
    semi_axis_range: tuple[float, float] = (0.27, 0.31)
    edge_width: float = 1.0

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ConfigError(f"phantom dims must be three integers >= 4, got {self.dims}")
        if abs(sum(self.mix) - 1.0) > 1e-9:
            raise ConfigError(f"anomaly mix must sum to 1, got {self.mix}")
        if any(p < 0 for p in self.mix):
            raise ConfigError(f"anomaly mix proportions must be >= 0, got {self.mix}")
        for name in ("train_normal", "val_normal", "val_anomaly", "test_normal", "test_anomaly"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.center_jitter < 0 or self.edge_width <= 0:
            raise ConfigError("center_jitter must be >= 0 and edge_width > 0")

    @classmethod
    def scaled(cls, factor: float, **overrides) -> "PhantomConfig":
        """Counts from the full-scale split sizes times ``factor``."""
        counts = {k: _round_half_down(v * factor) for k, v in _BASE_COUNTS.items()}
        counts.update(overrides)
        return cls(**counts)

    @property
    def total(self) -> int:
        return (
            self.train_normal
            + self.val_normal
            + self.val_anomaly
            + self.test_normal
            + self.test_anomaly
        )


def _rng(instance_seed, stream: int) -> np.random.Generator:
    if isinstance(instance_seed, (int, np.integer)):
        key = [int(instance_seed)]
    else:
        key = [int(s) for s in instance_seed]
    return np.random.default_rng(key + [stream])


def _grid(dims: tuple[int, int, int]) -> np.ndarray:
    axes = [(np.arange(d, dtype=np.float64) + 0.5) / d for d in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _soft_inside(rho: np.ndarray, edge: float) -> np.ndarray:
    """Soft indicator of rho < 1, ramping linearly over ``edge``."""
    return np.clip((1.0 - rho) / edge + 0.5, 0.0, 1.0)


def _ellipsoid_rho(grid: np.ndarray, center: np.ndarray, semi: np.ndarray) -> np.ndarray:
    scaled = (grid - center.reshape(3, 1, 1, 1)) / semi.reshape(3, 1, 1, 1)
    return np.sqrt((scaled**2).sum(axis=0))


class _BaseGeometry:
    """Per-instance cavity geometry drawn from the instance RNG."""

    def __init__(self, config: PhantomConfig, rng: np.random.Generator):
        j = config.center_jitter
        self.center = 0.5 + rng.uniform(-j, j, size=3)
        self.semi = rng.uniform(*config.semi_axis_range, size=3)
        self.tau = rng.uniform(*config.wall_thickness)
        self.cavity_level = _CAVITY + rng.uniform(-0.03, 0.03)
        self.wall_level = _WALL + rng.uniform(-0.03, 0.03)
        self.edge = config.edge_width / min(config.dims) / float(np.mean(self.semi))

    def render(self, grid: np.ndarray, inner_semi: np.ndarray | None = None) -> np.ndarray:
        inner = self.semi if inner_semi is None else inner_semi
        rho_in = _ellipsoid_rho(grid, self.center, inner)
        rho_out = _ellipsoid_rho(grid, self.center, self.semi + self.tau)
        img = np.full(grid.shape[1:], _BACKGROUND)
        img += (self.wall_level - _BACKGROUND) * _soft_inside(rho_out, self.edge)
        img += (self.cavity_level - self.wall_level) * _soft_inside(rho_in, self.edge)
        return img

    def wall_voxels(self, grid: np.ndarray, inner_semi: np.ndarray | None = None) -> int:
        inner = self.semi if inner_semi is None else inner_semi
        rho_in = _ellipsoid_rho(grid, self.center, inner)
        rho_out = _ellipsoid_rho(grid, self.center, self.semi + self.tau)
        return int(((rho_out < 1.0) & (rho_in >= 1.0)).sum())


def _finish(config: PhantomConfig, img: np.ndarray, instance_seed) -> np.ndarray:
    noise_rng = _rng(instance_seed, _NOISE_STREAM)
    if config.noise_sigma > 0:
        img = img + noise_rng.normal(0.0, config.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_healthy(config: PhantomConfig, instance_seed) -> tuple[Volume, np.ndarray]:
    """One healthy phantom plus its (empty) lesion mask."""
    rng = _rng(instance_seed, _GEOMETRY_STREAM)
    geo = _BaseGeometry(config, rng)
    grid = _grid(config.dims)
    data = _finish(config, geo.render(grid), instance_seed)
    vol = Volume(data, label="normal", anomaly_type="none")
    return vol, np.zeros(config.dims, dtype=bool)


def gen_anomalous(config: PhantomConfig, instance_seed, anomaly_type: str) -> tuple[Volume, np.ndarray]:
    """One anomalous phantom of the given type plus its lesion mask.

    The base geometry is identical to ``gen_healthy`` for the same seed
    (noise included), so the lesion is the only difference.
    """
    if anomaly_type not in ANOMALY_TYPES:
        raise ParameterError(
            f"unknown anomaly type {anomaly_type!r}; expected one of {ANOMALY_TYPES}"
        )
    rng = _rng(instance_seed, _GEOMETRY_STREAM)
    geo = _BaseGeometry(config, rng)
    grid = _grid(config.dims)
    rho_in = _ellipsoid_rho(grid, geo.center, geo.semi)

    if anomaly_type == "thickening":
        delta = rng.uniform(*config.thicken_delta)
        inner = np.maximum(geo.semi - delta, 0.05)
        img = geo.render(grid, inner_semi=inner)
        rho_new = _ellipsoid_rho(grid, geo.center, inner)
        mask = (rho_in < 1.0) & (rho_new >= 1.0)
    else:
        img = geo.render(grid)
        radius = rng.uniform(*config.lesion_radius)
        if anomaly_type == "polyp":
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            attach = geo.center + geo.semi * direction
            blob_center = attach - direction * radius * 0.7
        else:  # cyst: dome on the cavity floor (+H side)
            direction = np.array([0.0, 1.0, 0.0])
            blob_center = geo.center + geo.semi * direction
        dist = np.sqrt(((grid - blob_center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
        blob = np.clip((radius - dist) / (config.edge_width / min(config.dims)) + 0.5, 0.0, 1.0)
        img = img + (_LESION - img) * blob
        mask = (blob > 0.5) & (rho_in < 1.0)

    if not mask.any():
        raise ParameterError(
            f"lesion mask came out empty for type {anomaly_type!r}; "
            f"lesion_radius/thicken_delta are too small for dims {config.dims}"
        )
    data = _finish(config, img, instance_seed)
    vol = Volume(data, label="anomaly", anomaly_type=anomaly_type)
    return vol, mask


def _type_allocation(count: int, mix: tuple[float, float, float], rng: np.random.Generator) -> list[str]:
    """Deterministic largest-remainder quota, then a seeded shuffle."""
    quotas = [p * count for p in mix]
    counts = [int(q) for q in quotas]
    remainders = sorted(range(3), key=lambda i: (quotas[i] - counts[i], -i), reverse=True)
    for i in range(count - sum(counts)):
        counts[remainders[i % 3]] += 1
    types = [t for t, c in zip(ANOMALY_TYPES, counts) for _ in range(c)]
    rng.shuffle(types)
    return types


def gen_dataset(config: PhantomConfig, seed: int):
    """Generate the full split as (volume, mask, split) triples.

    Instances derive their RNG streams from (seed, global index); sides
    alternate left/right, and right-side phantoms are mirrored along the
    W axis so the preprocessing flip meaningfully restores them.
    Returns a list of ``(volume_id, split, Volume, mask)`` tuples in
    generation order; the train split never contains anomalies.
    """
    plan: list[tuple[str, str | None]] = []
    plan += [("train", None)] * config.train_normal
    plan += [("val", None)] * config.val_normal
    type_rng = _rng(seed, _TYPE_STREAM)
    plan += [("val", t) for t in _type_allocation(config.val_anomaly, config.mix, type_rng)]
    plan += [("test", None)] * config.test_normal
    plan += [("test", t) for t in _type_allocation(config.test_anomaly, config.mix, type_rng)]

    out = []
    split_counters: dict[str, int] = {}
    for index, (split, anomaly_type) in enumerate(plan):
        instance_seed = (seed, index)
        if anomaly_type is None:
            vol, mask = gen_healthy(config, instance_seed)
        else:
            vol, mask = gen_anomalous(config, instance_seed, anomaly_type)
        side = "left" if index % 2 == 0 else "right"
        if side == "right":
            vol = Volume(
                vol.data[:, :, ::-1],
                spacing=vol.spacing,
                label=vol.label,
                anomaly_type=vol.anomaly_type,
            )
            mask = mask[:, :, ::-1].copy()
        vol.subject = f"s{index:04d}"
        vol.side = side
        n = split_counters.get(split, 0)
        split_counters[split] = n + 1
        volume_id = f"{split}{n:03d}"
        out.append((volume_id, split, vol, mask))
    return out
