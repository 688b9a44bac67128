"""Command-line pipeline: gen-data, preprocess, train, calibrate,
evaluate, heatmap, info.

Each stage reads and writes only its declared files under the configured
output directory, so deleting downstream outputs and re-running only the
downstream stages reproduces them exactly:

    out/raw/        phantom volumes + manifest.csv      (gen-data)
    out/prep/       preprocessed volumes + manifest.csv (preprocess)
    out/models/     checkpoints, loss CSVs, loss figures (train)
    out/eval/       score CSVs, thresholds, reports, PR figures
                    (calibrate, evaluate)
    out/heatmaps/   <volume_id>_<plane>_<index>.ppm     (heatmap)

Every command takes ``--config`` (required) and ``--seed`` (overrides the
config seed). Errors exit with a diagnostic and a distinct code:
2 missing file, 3 bad config, 4 checksum failure, 5 contract violation,
6 format error, 7 other expected errors, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, figures, heatmap, io, models, phantom, preprocess, training
from .errors import (
    ChecksumError,
    ConfigError,
    ContractViolation,
    FormatError,
    SuadError,
)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_MISSING_FILE = 2
EXIT_BAD_CONFIG = 3
EXIT_CHECKSUM = 4
EXIT_CONTRACT = 5
EXIT_FORMAT = 6
EXIT_ERROR = 7


def _load(args) -> io.RunConfig:
    config = io.load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed, train=replace(config.train, seed=args.seed))
    return config


def _dirs(config: io.RunConfig) -> dict[str, Path]:
    root = Path(config.out_dir)
    return {
        "raw": root / "raw",
        "prep": root / "prep",
        "models": root / "models",
        "eval": root / "eval",
        "heatmaps": root / "heatmaps",
    }


def cmd_gen_data(args) -> int:
    config = _load(args)
    raw = _dirs(config)["raw"]
    raw.mkdir(parents=True, exist_ok=True)
    rows = []
    for volume_id, split, vol, _mask in phantom.gen_dataset(config.phantom, config.seed):
        filename = f"{volume_id}.svol"
        io.write_volume(raw / filename, vol)
        rows.append(io.ManifestRow(volume_id, split, vol.label, vol.anomaly_type, filename))
    io.write_manifest(raw / "manifest.csv", rows, config.seed)
    print(f"wrote {len(rows)} volumes to {raw}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    config = _load(args)
    dirs = _dirs(config)
    manifest = io.read_manifest(dirs["raw"] / "manifest.csv")
    dirs["prep"].mkdir(parents=True, exist_ok=True)
    spec = config.crop()
    transform = preprocess.RigidTransform.identity()
    rows = []
    for row in manifest:
        vol = io.read_volume(dirs["raw"] / row.path)
        out = preprocess.preprocess_volume(
            vol,
            transform,
            spec,
            input_dims=config.arch.input_dims,
            resample_dims=config.resample_dims,
        )
        filename = f"{row.volume_id}.svol"
        io.write_volume(dirs["prep"] / filename, out)
        rows.append(replace(row, path=filename))
    io.write_manifest(dirs["prep"] / "manifest.csv", rows, config.seed)
    print(f"preprocessed {len(rows)} volumes into {dirs['prep']}")
    return EXIT_OK


def _load_split(config: io.RunConfig, split: str) -> list[tuple[io.ManifestRow, preprocess.Volume]]:
    prep = _dirs(config)["prep"]
    manifest = io.read_manifest(prep / "manifest.csv")
    out = []
    for row in manifest:
        if row.split == split:
            out.append((row, io.read_volume(prep / row.path)))
    return out


def cmd_train(args) -> int:
    config = _load(args)
    dirs = _dirs(config)
    entries = _load_split(config, "train")
    if not entries:
        raise ContractViolation("the train split is empty; run gen-data and preprocess first")
    for row, _ in entries:
        if row.label != "normal":
            raise ContractViolation(
                f"train split contains anomalous volume {row.volume_id!r}; "
                f"the method trains on healthy volumes only"
            )
    volumes = [v for _, v in entries]
    if args.model == "cae":
        params = models.CAEParams(config.arch, seed=config.seed)
    else:
        params = models.VAEParams(config.arch, seed=config.seed)
    history = training.fit(params, volumes, config.train)
    dirs["models"].mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(dirs["models"] / f"{args.model}.suad", params)
    io.write_loss_history(dirs["models"] / f"{args.model}_loss.csv", history, config.seed)
    figures.save_loss_curves(
        history, dirs["models"] / f"{args.model}_loss.png", title=f"{args.model} training loss"
    )
    final = history[-1].total if history else float("nan")
    print(f"trained {args.model} for {len(history)} epochs (final loss {final:.4f})")
    return EXIT_OK


def _score_split(params, config: io.RunConfig, split: str) -> list[evaluation.ScoreRecord]:
    records = []
    for row, vol in _load_split(config, split):
        l1, l2 = evaluation.score_volume(params, vol)
        records.append(evaluation.ScoreRecord(row.volume_id, l1, l2, row.label, row.anomaly_type))
    return records


def cmd_calibrate(args) -> int:
    config = _load(args)
    dirs = _dirs(config)
    params = io.read_checkpoint(dirs["models"] / f"{args.model}.suad")
    records = _score_split(params, config, "val")
    if not records:
        raise ContractViolation("the val split is empty; run gen-data and preprocess first")
    dirs["eval"].mkdir(parents=True, exist_ok=True)
    io.write_scores(dirs["eval"] / f"{args.model}_val_scores.csv", records, config.seed)
    selected = {}
    for field in ("l1", "l2"):
        curve = evaluation.pr_curve(records, field)
        threshold = evaluation.select_threshold_max_f1(curve)
        selected[field] = threshold
        figures.save_pr_figure(
            curve,
            evaluation.auprc(records, field),
            threshold,
            dirs["eval"] / f"{args.model}_val_pr_{field}.png",
        )
    thresholds = evaluation.Thresholds(selected["l1"], selected["l2"], config.eval_mode)
    io.write_thresholds(dirs["eval"] / f"{args.model}_thresholds.txt", thresholds, config.seed)
    print(
        f"calibrated {args.model}: t_l1={thresholds.t_l1:.4f}, "
        f"t_l2={thresholds.t_l2:.4f}, mode={thresholds.mode}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load(args)
    dirs = _dirs(config)
    params = io.read_checkpoint(dirs["models"] / f"{args.model}.suad")
    thresholds = io.read_thresholds(dirs["eval"] / f"{args.model}_thresholds.txt")
    records = _score_split(params, config, "test")
    if not records:
        raise ContractViolation("the test split is empty; run gen-data and preprocess first")
    io.write_scores(dirs["eval"] / f"{args.model}_test_scores.csv", records, config.seed)
    report = evaluation.metrics_report(records, thresholds)
    io.write_report(dirs["eval"] / f"{args.model}_report.txt", report, args.model, config.seed)
    for field in ("l1", "l2"):
        curve = evaluation.pr_curve(records, field)
        figures.save_pr_figure(
            curve,
            evaluation.auprc(records, field),
            thresholds.t_l1 if field == "l1" else thresholds.t_l2,
            dirs["eval"] / f"{args.model}_test_pr_{field}.png",
        )
    sys.stdout.write(io.render_report(report, args.model, config.seed))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    config = _load(args)
    dirs = _dirs(config)
    params = io.read_checkpoint(dirs["models"] / f"{args.model}.suad")
    thresholds = io.read_thresholds(dirs["eval"] / f"{args.model}_thresholds.txt")
    dirs["heatmaps"].mkdir(parents=True, exist_ok=True)
    rendered = 0
    render_all = args.all or config.heatmap_all
    for row, vol in _load_split(config, "test"):
        l1, l2 = evaluation.score_volume(params, vol)
        record = evaluation.ScoreRecord(row.volume_id, l1, l2, row.label, row.anomaly_type)
        if not render_all and evaluation.classify(record, thresholds) != "anomaly":
            continue
        filtered = heatmap.filtered_residual(params, vol, config.heatmap_kernel)
        residual_max = float(filtered.max())
        for plane in heatmap.PLANES:
            axis = heatmap.PLANES.index(plane)
            index = vol.dims[axis] // 2
            base = heatmap.slice_extract(vol.data, plane, index)
            overlay = heatmap.slice_extract(filtered, plane, index)
            out_path = dirs["heatmaps"] / f"{row.volume_id}_{plane}_{index}.ppm"
            heatmap.render_heatmap(base, overlay, out_path, residual_max=residual_max)
            rendered += 1
    print(f"rendered {rendered} heat-map slices into {dirs['heatmaps']}")
    return EXIT_OK


def cmd_info(args) -> int:
    info = io.checkpoint_info(args.checkpoint)
    print(f"kind: {info['kind']}")
    arch = info["arch"]
    print(f"input dims: {tuple(arch['input_dims'])}")
    print(f"latent dim: {arch['latent_dim']}")
    print(f"channels: {tuple(arch['channels'])}")
    print(f"seed: {info['seed']}")
    print(f"parameters: {info['param_count']}")
    print(f"checksum: {info['checksum']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="suad",
        description="Unsupervised anomaly detection for maxillary-sinus volumes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, model=True, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", required=True, help="run configuration file")
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if model:
            p.add_argument("--model", choices=("cae", "vae"), default="cae")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate the phantom dataset", model=False)
    add("preprocess", cmd_preprocess, "run the preprocessing pipeline", model=False)
    add("train", cmd_train, "fit a model on the train split")
    add("calibrate", cmd_calibrate, "select thresholds on the val split")
    add("evaluate", cmd_evaluate, "score the test split and write the report")
    p_heat = add("heatmap", cmd_heatmap, "render residual heat maps for test volumes")
    p_heat.add_argument("--all", action="store_true", help="render every test volume, not only flagged ones")
    p_info = sub.add_parser("info", help="describe a checkpoint")
    p_info.add_argument("checkpoint")
    p_info.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except ChecksumError as exc:
        print(f"error: checksum: {exc}", file=sys.stderr)
        return EXIT_CHECKSUM
    except ContractViolation as exc:
        print(f"error: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except FormatError as exc:
        print(f"error: file format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except SuadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # pragma: no cover - safety net
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
