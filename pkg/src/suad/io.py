"""All persistent formats: volumes, checkpoints, configs, CSVs, reports.

Binary formats are little-endian and fully specified so round-trips are
bit-exact on every platform.

Volume file (``.svol``)::

    magic   4 bytes  b"SVOL"
    version u32      currently 1
    dims    3 x u32  (D, H, W)
    spacing 3 x f32  voxel size in mm
    meta    u32 pair count, then per pair u32 key length + UTF-8 key,
            u32 value length + UTF-8 value (keys written in fixed order:
            subject, side, label, anomaly_type)
    voxels  D*H*W f32, row-major (W fastest)

Checkpoint file (``.suad``)::

    magic      4 bytes  b"SUAD"
    version    u32      currently 1
    descriptor u32 length + UTF-8 JSON {kind, arch, seed}
    blobs      per parameter (in declared order): u64 element count + f32 data
    checksum   u64, the first 8 bytes (little-endian) of the SHA-256 of
               every preceding byte; validated on load

The run configuration is a flat text file of ``section.key = value``
lines; unknown keys are rejected so typos fail fast. Every key has a
documented default.
"""

from __future__ import annotations

import csv
import hashlib
import io as _stdio
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, ConfigError, DataError, FormatError
from .evaluation import MetricsReport, ScoreRecord, Thresholds
from .models import ArchConfig, CAEParams, VAEParams
from .phantom import PhantomConfig
from .preprocess import CropSpec, Volume
from .training import EpochStats, TrainConfig

VOLUME_MAGIC = b"SVOL"
CHECKPOINT_MAGIC = b"SUAD"
VOLUME_VERSION = 1
CHECKPOINT_VERSION = 1

_META_KEYS = ("subject", "side", "label", "anomaly_type")


# ---------------------------------------------------------------------------
# volume format


def write_volume(path, v: Volume) -> None:
    buf = _stdio.BytesIO()
    buf.write(VOLUME_MAGIC)
    buf.write(struct.pack("<I", VOLUME_VERSION))
    buf.write(struct.pack("<3I", *v.dims))
    buf.write(struct.pack("<3f", *v.spacing))
    meta = {
        "subject": v.subject,
        "side": v.side,
        "label": v.label,
        "anomaly_type": v.anomaly_type,
    }
    buf.write(struct.pack("<I", len(_META_KEYS)))
    for key in _META_KEYS:
        kb = key.encode("utf-8")
        vb = meta[key].encode("utf-8")
        buf.write(struct.pack("<I", len(kb)) + kb)
        buf.write(struct.pack("<I", len(vb)) + vb)
    buf.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated volume file: expected {n} bytes for {what}, got {len(data)}")
    return data


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    f = _stdio.BytesIO(raw)
    magic = _read_exact(f, 4, "magic")
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported volume format version {version}")
    dims = struct.unpack("<3I", _read_exact(f, 12, "dims"))
    spacing = struct.unpack("<3f", _read_exact(f, 12, "spacing"))
    (pairs,) = struct.unpack("<I", _read_exact(f, 4, "meta count"))
    meta = {}
    for _ in range(pairs):
        (klen,) = struct.unpack("<I", _read_exact(f, 4, "meta key length"))
        key = _read_exact(f, klen, "meta key").decode("utf-8")
        (vlen,) = struct.unpack("<I", _read_exact(f, 4, "meta value length"))
        meta[key] = _read_exact(f, vlen, "meta value").decode("utf-8")
    count = dims[0] * dims[1] * dims[2]
    payload = _read_exact(f, count * 4, f"{count} voxels")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    trailing = f.read()
    if trailing:
        raise FormatError(f"{path}: {len(trailing)} unexpected trailing bytes")
    return Volume(
        data.copy(),
        spacing=spacing,
        subject=meta.get("subject", ""),
        side=meta.get("side", "left"),
        label=meta.get("label", "normal"),
        anomaly_type=meta.get("anomaly_type", "none"),
    )


# ---------------------------------------------------------------------------
# checkpoint format


def _checksum(blob: bytes) -> int:
    return struct.unpack("<Q", hashlib.sha256(blob).digest()[:8])[0]


def write_checkpoint(path, params) -> None:
    buf = _stdio.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    descriptor = json.dumps(
        {"kind": params.kind, "arch": params.arch.to_dict(), "seed": params.seed},
        sort_keys=True,
    ).encode("utf-8")
    buf.write(struct.pack("<I", len(descriptor)) + descriptor)
    for _, tensor in params.named_params():
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        buf.write(struct.pack("<Q", data.size))
        buf.write(data.tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<Q", _checksum(body)))


def read_checkpoint(path):
    """Load a checkpoint, validating version and checksum, and rebuild
    the parameter set it describes."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: file too short to be a checkpoint")
    body, stored = raw[:-8], struct.unpack("<Q", raw[-8:])[0]
    if _checksum(body) != stored:
        raise ChecksumError(f"{path}: content checksum mismatch")
    f = _stdio.BytesIO(body)
    magic = f.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", f.read(4))
    descriptor = json.loads(f.read(dlen).decode("utf-8"))
    arch = ArchConfig.from_dict(descriptor["arch"])
    kind = descriptor["kind"]
    if kind == "cae":
        params = CAEParams(arch, seed=int(descriptor["seed"]))
    elif kind == "vae":
        params = VAEParams(arch, seed=int(descriptor["seed"]))
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    for name, tensor in params.named_params():
        header = f.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated before parameter {name}")
        (count,) = struct.unpack("<Q", header)
        if count != tensor.size:
            raise FormatError(
                f"{path}: parameter {name} holds {count} values, architecture expects {tensor.size}"
            )
        payload = f.read(count * 4)
        if len(payload) != count * 4:
            raise FormatError(f"{path}: truncated payload for parameter {name}")
        tensor.data = np.frombuffer(payload, dtype="<f4").reshape(tensor.shape).copy()
    if f.read():
        raise FormatError(f"{path}: unexpected trailing bytes")
    return params


def checkpoint_info(path) -> dict:
    params = read_checkpoint(path)
    return {
        "kind": params.kind,
        "arch": params.arch.to_dict(),
        "seed": params.seed,
        "param_count": params.param_count(),
        "checksum": "ok",
    }


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs, with documented defaults.

    Defaults mirror the full-scale training recipe (64³ input, 512-dim
    latent, batch 16, lr 1e-4, 100 epochs, crop extents for the three
    fields of view); desk-scale runs override them from a config file.
    """

    seed: int = 7
    out_dir: str = "out"
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    crops: tuple[CropSpec, ...] = (
        CropSpec("small", (33, 47, 45), (64, 64, 64), (64, 64, 64)),
        CropSpec("medium", (46, 57, 55), (64, 64, 64), (64, 64, 64)),
        CropSpec("large", (53, 67, 65), (64, 64, 64), (64, 64, 64)),
    )
    crop_name: str = "medium"
    resample_dims: tuple[int, int, int] = (128, 128, 128)
    eval_mode: str = "conjunction"
    heatmap_kernel: int = 5
    heatmap_all: bool = False

    def crop(self) -> CropSpec:
        for spec in self.crops:
            if spec.name == self.crop_name:
                return spec
        raise ConfigError(f"preprocess.crop names unknown crop {self.crop_name!r}")


def _parse_int(s):
    return int(s)


def _parse_float(s):
    return float(s)


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_ints(s):
    return tuple(int(p.strip()) for p in s.split(","))


def _parse_floats(s):
    return tuple(float(p.strip()) for p in s.split(","))


def _parse_str(s):
    return s


_CONFIG_KEYS = {
    "seed": _parse_int,
    "paths.out_dir": _parse_str,
    "arch.input_dims": _parse_ints,
    "arch.latent_dim": _parse_int,
    "arch.channels": _parse_ints,
    "train.learning_rate": _parse_float,
    "train.batch_size": _parse_int,
    "train.epochs": _parse_int,
    "train.lambda_kl": _parse_float,
    "train.adam_beta1": _parse_float,
    "train.adam_beta2": _parse_float,
    "train.adam_epsilon": _parse_float,
    "preprocess.resample_dims": _parse_ints,
    "preprocess.crop": _parse_str,
    "crop.small.extent": _parse_ints,
    "crop.small.center_left": _parse_ints,
    "crop.small.center_right": _parse_ints,
    "crop.medium.extent": _parse_ints,
    "crop.medium.center_left": _parse_ints,
    "crop.medium.center_right": _parse_ints,
    "crop.large.extent": _parse_ints,
    "crop.large.center_left": _parse_ints,
    "crop.large.center_right": _parse_ints,
    "eval.mode": _parse_str,
    "heatmap.kernel": _parse_int,
    "heatmap.all": _parse_bool,
    "phantom.dims": _parse_ints,
    "phantom.scale": _parse_float,
    "phantom.mix": _parse_floats,
    "phantom.noise_sigma": _parse_float,
    "phantom.wall_thickness": _parse_floats,
    "phantom.lesion_radius": _parse_floats,
    "phantom.thicken_delta": _parse_floats,
    "phantom.center_jitter": _parse_float,
    "phantom.semi_axis_range": _parse_floats,
    "phantom.edge_width": _parse_float,
}


def parse_config_text(text: str) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config line {lineno}: bad value for {key!r}: {exc}") from exc
    return _assemble_config(values)


def _assemble_config(values: dict) -> RunConfig:
    defaults = RunConfig()

    def get(key, fallback):
        return values.get(key, fallback)

    arch = ArchConfig(
        input_dims=tuple(get("arch.input_dims", defaults.arch.input_dims)),
        latent_dim=get("arch.latent_dim", defaults.arch.latent_dim),
        channels=tuple(get("arch.channels", defaults.arch.channels)),
    )
    seed = get("seed", defaults.seed)
    train = TrainConfig(
        learning_rate=get("train.learning_rate", defaults.train.learning_rate),
        batch_size=get("train.batch_size", defaults.train.batch_size),
        epochs=get("train.epochs", defaults.train.epochs),
        lambda_kl=get("train.lambda_kl", defaults.train.lambda_kl),
        seed=seed,
        beta1=get("train.adam_beta1", defaults.train.beta1),
        beta2=get("train.adam_beta2", defaults.train.beta2),
        epsilon=get("train.adam_epsilon", defaults.train.epsilon),
    )
    if "phantom.scale" in values:
        phantom_cfg = PhantomConfig.scaled(values["phantom.scale"])
        counts = {
            "train_normal": phantom_cfg.train_normal,
            "val_normal": phantom_cfg.val_normal,
            "val_anomaly": phantom_cfg.val_anomaly,
            "test_normal": phantom_cfg.test_normal,
            "test_anomaly": phantom_cfg.test_anomaly,
        }
    else:
        d = defaults.phantom
        counts = {
            "train_normal": d.train_normal,
            "val_normal": d.val_normal,
            "val_anomaly": d.val_anomaly,
            "test_normal": d.test_normal,
            "test_anomaly": d.test_anomaly,
        }
    phantom_cfg = PhantomConfig(
        dims=tuple(get("phantom.dims", defaults.phantom.dims)),
        mix=tuple(get("phantom.mix", defaults.phantom.mix)),
        noise_sigma=get("phantom.noise_sigma", defaults.phantom.noise_sigma),
        wall_thickness=tuple(get("phantom.wall_thickness", defaults.phantom.wall_thickness)),
        lesion_radius=tuple(get("phantom.lesion_radius", defaults.phantom.lesion_radius)),
        thicken_delta=tuple(get("phantom.thicken_delta", defaults.phantom.thicken_delta)),
        center_jitter=get("phantom.center_jitter", defaults.phantom.center_jitter),
        semi_axis_range=tuple(get("phantom.semi_axis_range", defaults.phantom.semi_axis_range)),
        edge_width=get("phantom.edge_width", defaults.phantom.edge_width),
        **counts,
    )
    crops = []
    for spec in defaults.crops:
        crops.append(
            CropSpec(
                spec.name,
                tuple(get(f"crop.{spec.name}.extent", spec.extent)),
                tuple(get(f"crop.{spec.name}.center_left", spec.center_left)),
                tuple(get(f"crop.{spec.name}.center_right", spec.center_right)),
            )
        )
    config = RunConfig(
        seed=seed,
        out_dir=get("paths.out_dir", defaults.out_dir),
        arch=arch,
        train=train,
        phantom=phantom_cfg,
        crops=tuple(crops),
        crop_name=get("preprocess.crop", defaults.crop_name),
        resample_dims=tuple(get("preprocess.resample_dims", defaults.resample_dims)),
        eval_mode=get("eval.mode", defaults.eval_mode),
        heatmap_kernel=get("heatmap.kernel", defaults.heatmap_kernel),
        heatmap_all=get("heatmap.all", defaults.heatmap_all),
    )
    if config.eval_mode not in ("l1-only", "l2-only", "conjunction"):
        raise ConfigError(f"eval.mode must be l1-only, l2-only or conjunction, got {config.eval_mode!r}")
    config.crop()  # validates crop name
    return config


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# manifests and score CSVs


@dataclass(frozen=True)
class ManifestRow:
    volume_id: str
    split: str
    label: str
    anomaly_type: str
    path: str


_MANIFEST_HEADER = ["volume_id", "split", "label", "anomaly_type", "path"]
_SCORES_HEADER = ["volume_id", "score_l1", "score_l2", "label", "anomaly_type"]
_LOSS_HEADER = ["epoch", "recon_loss", "kl_loss", "total_loss"]


def write_manifest(path, rows: list[ManifestRow], seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.volume_id, r.split, r.label, r.anomaly_type, r.path])


def _read_csv_rows(path, expected_header: list[str]) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0] != expected_header:
        raise FormatError(f"{path}: expected header {expected_header}, got {rows[0] if rows else 'nothing'}")
    return rows[1:]


def read_manifest(path) -> list[ManifestRow]:
    return [ManifestRow(*row) for row in _read_csv_rows(path, _MANIFEST_HEADER)]


def write_scores(path, records: list[ScoreRecord], seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_SCORES_HEADER)
        for r in records:
            writer.writerow([r.volume_id, repr(r.score_l1), repr(r.score_l2), r.label, r.anomaly_type])


def read_scores(path) -> list[ScoreRecord]:
    records = []
    for row in _read_csv_rows(path, _SCORES_HEADER):
        records.append(ScoreRecord(row[0], float(row[1]), float(row[2]), row[3], row[4]))
    return records


def write_loss_history(path, history: list[EpochStats], seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_LOSS_HEADER)
        for h in history:
            writer.writerow([h.epoch, repr(h.recon), repr(h.kl), repr(h.total)])


# ---------------------------------------------------------------------------
# thresholds and reports


def write_thresholds(path, thresholds: Thresholds, seed: int) -> None:
    text = (
        f"# seed={seed}\n"
        f"threshold.l1 = {thresholds.t_l1!r}\n"
        f"threshold.l2 = {thresholds.t_l2!r}\n"
        f"threshold.mode = {thresholds.mode}\n"
    )
    Path(path).write_text(text, encoding="utf-8")


def read_thresholds(path) -> Thresholds:
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    try:
        return Thresholds(
            t_l1=float(values["threshold.l1"]),
            t_l2=float(values["threshold.l2"]),
            mode=values["threshold.mode"],
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing {exc} entry") from exc


_CATEGORY_DISPLAY = {
    "none": "normal",
    "thickening": "mucosal thickening",
    "polyp": "polyps",
    "cyst": "cysts",
}

_MODE_DISPLAY = {
    "l1-only": "t_l1 only",
    "l2-only": "t_l2 only",
    "conjunction": "t_l1 and t_l2",
}


def render_report(report: MetricsReport, model_kind: str, seed: int) -> str:
    """The evaluation report as deterministic text.

    Lays out precision/recall/F1 per decision rule, the area under the
    precision-recall curve per score field, and per-category accuracy in
    ``fraction (correct/total)`` form ("n/a (0/0)" for empty categories).
    """
    lines = []
    lines.append(f"model: {model_kind}")
    lines.append(f"seed: {seed}")
    lines.append(
        f"records: {report.n_normal + report.n_anomaly} "
        f"(normal {report.n_normal}, anomaly {report.n_anomaly})"
    )
    lines.append("")
    lines.append("thresholds")
    lines.append(f"  t_l1 = {report.thresholds.t_l1!r}")
    lines.append(f"  t_l2 = {report.thresholds.t_l2!r}")
    lines.append(f"  mode = {report.thresholds.mode}")
    lines.append("")
    lines.append("performance by decision rule")
    lines.append(f"  {'rule':<15}{'precision':>10}{'recall':>10}{'f1':>10}")
    for m in report.by_mode:
        lines.append(
            f"  {_MODE_DISPLAY[m.mode]:<15}{m.precision:>10.2f}{m.recall:>10.2f}{m.f1:>10.2f}"
        )
    lines.append("")
    lines.append("area under the precision-recall curve")
    lines.append(f"  l1 score: {report.auprc_l1:.4f}")
    lines.append(f"  l2 score: {report.auprc_l2:.4f}")
    lines.append("")
    lines.append(f"accuracy per category (rule: {_MODE_DISPLAY[report.thresholds.mode]})")
    for acc in report.per_anomaly:
        name = _CATEGORY_DISPLAY[acc.category]
        if acc.total:
            cell = f"{acc.fraction:.2f} ({acc.correct}/{acc.total})"
        else:
            cell = f"n/a ({acc.correct}/{acc.total})"
        lines.append(f"  {name:<20}{cell}")
    return "\n".join(lines) + "\n"


def write_report(path, report: MetricsReport, model_kind: str, seed: int) -> None:
    Path(path).write_text(render_report(report, model_kind, seed), encoding="utf-8")


# ---------------------------------------------------------------------------
# images


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an 8-bit RGB image as a binary portable pixel map (P6)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"write_ppm expects a uint8 [H, W, 3] array, got {rgb.dtype} {rgb.shape}")
    height, width = rgb.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary P6 pixel map")
    width, height = (int(x) for x in parts[1].split())
    if parts[2] != b"255":
        raise FormatError(f"{path}: unsupported max value {parts[2]!r}")
    pixels = parts[3]
    expected = width * height * 3
    if len(pixels) != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()
