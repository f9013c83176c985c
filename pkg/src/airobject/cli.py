"""Command-line surface: synth, triangulate, train, encode, eval, gradcheck.

Every command writes its artifacts into a run directory
``<out-dir>/<UTC timestamp>-seed<seed>/`` (or ``<out-dir>/<run-name>`` when
``--run-name`` is given) together with a ``manifest.json`` recording the
command, the resolved config snapshot, the seed, input/output paths, wall
clock duration, and sha256 checksums of every artifact.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Config files are JSON; command-line flags win over file values. Relative
config paths that do not exist locally are also resolved against
``$AIROBJECT_CONFIG_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import diff_core as dc
from .evaluation import (
    EvalConfig,
    EvalReport,
    encode_halves,
    evaluate_descriptors,
    precision_recall_f1,
    run_benchmark,
)
from .feature_store import (
    FeatureFormatError,
    SynthConfig,
    generate_synthetic,
    load_tracks,
    save_tracks,
)
from .graph_encoder import EncoderParams, ModelConfig, init_encoder_params
from .temporal_encoder import (
    TemporalParams,
    init_temporal_params,
    read_descriptors,
    write_descriptors,
)
from .topo_graph import build_frame_graph
from .training import (
    DEFAULT_GRADCHECK_SEED,
    TrainConfig,
    composite_gradcheck,
    train_stage1,
    train_stage2,
)

CONFIG_DIR_ENV = "AIROBJECT_CONFIG_DIR"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# -- shared helpers ---------------------------------------------------------------


def _resolve_config_path(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir and not p.is_absolute():
        candidate = Path(env_dir) / p
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"config file not found: {path}")


def _load_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FeatureFormatError(f"{path}: invalid JSON ({exc})") from exc


def _make_run_dir(out_dir: str, run_name: str | None, seed: int) -> Path:
    base = Path(out_dir)
    if run_name:
        run = base / run_name
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        run = base / f"{stamp}-seed{seed}"
    run.mkdir(parents=True, exist_ok=True)
    return run


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    run_dir: Path,
    command: str,
    config_snapshot: dict,
    seed: int | None,
    inputs: dict,
    started: float,
) -> None:
    artifacts = sorted(
        p.name for p in run_dir.iterdir() if p.is_file() and p.name != "manifest.json"
    )
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {name: str(run_dir / name) for name in artifacts},
        "duration_seconds": time.monotonic() - started,
        "checksums": {name: _sha256(run_dir / name) for name in artifacts},
    }
    with open(run_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _atomic_save_checkpoint(path: Path, sections: dict, meta: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    dc.save_checkpoint(tmp, sections, meta)
    os.replace(tmp, path)


def _load_model(checkpoint_path: str) -> tuple[ModelConfig, EncoderParams, TemporalParams | None]:
    sections, meta = dc.load_checkpoint(checkpoint_path)
    if "model_config" not in meta:
        raise ValueError(f"checkpoint {checkpoint_path} has no model_config metadata")
    cfg = ModelConfig.from_dict(meta["model_config"])
    encoder = EncoderParams.from_sections(cfg, sections)
    temporal = TemporalParams.from_sections(cfg, sections) if "temporal" in sections else None
    return cfg, encoder, temporal


def _override(value, flag):
    return flag if flag is not None else value


# -- subcommand implementations ------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.monotonic()
    fields = {}
    if args.config:
        fields = _load_json(_resolve_config_path(args.config))
    if args.seed is not None:
        fields["seed"] = args.seed
    if "keypoints_per_object" in fields:
        fields["keypoints_per_object"] = tuple(fields["keypoints_per_object"])
    for key in ("rotation_range", "scale_range", "translation_range"):
        if key in fields:
            fields[key] = tuple(fields[key])
    config = SynthConfig(**fields)

    run_dir = _make_run_dir(args.out_dir, args.run_name, config.seed)
    tracks = generate_synthetic(config)
    save_tracks(tracks, run_dir / "features.jsonl")
    _write_manifest(
        run_dir,
        "synth",
        {"synth": asdict(config)},
        config.seed,
        {"config": args.config or "<defaults>"},
        started,
    )
    print(f"wrote {len(tracks)} tracks to {run_dir / 'features.jsonl'}")
    return EXIT_OK


def cmd_triangulate(args) -> int:
    started = time.monotonic()
    tracks = load_tracks(args.features)
    cfg = ModelConfig(
        descriptor_dim=tracks.descriptor_dim, fully_connected=args.fully_connected
    )
    run_dir = _make_run_dir(args.out_dir, args.run_name, 0)
    out_path = run_dir / "edges.jsonl"
    with open(out_path, "w", encoding="utf-8") as fh:
        for track in tracks.tracks:
            for obs in track.observations:
                graph = build_frame_graph(obs, cfg, track.video_id, track.object_id)
                adj = graph.adjacency
                edges = [
                    [i, j]
                    for i in range(graph.n_nodes)
                    for j in range(i + 1, graph.n_nodes)
                    if adj[i, j] == 1.0
                ]
                fh.write(
                    json.dumps(
                        {
                            "video_id": track.video_id,
                            "object_id": track.object_id,
                            "frame_index": int(obs.frame_index),
                            "n_nodes": graph.n_nodes,
                            "edges": edges,
                        }
                    )
                )
                fh.write("\n")
    _write_manifest(
        run_dir,
        "triangulate",
        {"model": cfg.to_dict()},
        None,
        {"features": args.features},
        started,
    )
    print(f"wrote edge lists to {out_path}")
    return EXIT_OK


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_fields: dict = {}
    train_fields: dict = {}
    if args.config:
        raw = _load_json(_resolve_config_path(args.config))
        model_fields = dict(raw.get("model", {}))
        train_fields = dict(raw.get("train", {}))
    train_fields["lr"] = _override(train_fields.get("lr", 1e-4), args.lr)
    train_fields["epochs"] = _override(train_fields.get("epochs", 10), args.epochs)
    train_fields["batch_size"] = _override(train_fields.get("batch_size", 16), args.batch_size)
    train_fields["seed"] = _override(train_fields.get("seed", 0), args.seed)
    train_fields["s_l_max"] = _override(train_fields.get("s_l_max", 4), args.s_l_max)
    return ModelConfig(**model_fields), TrainConfig(**train_fields)


def cmd_train(args) -> int:
    started = time.monotonic()
    tracks = load_tracks(args.features)
    model_cfg, train_cfg = _train_configs(args)
    if tracks.descriptor_dim != model_cfg.descriptor_dim:
        raise ValueError(
            f"feature file has descriptor dim {tracks.descriptor_dim}, "
            f"model expects {model_cfg.descriptor_dim}"
        )

    run_dir = _make_run_dir(args.out_dir, args.run_name, train_cfg.seed)
    checkpoint_path = run_dir / "checkpoint.npz"
    history_path = run_dir / "loss_history.csv"
    meta = {"model_config": model_cfg.to_dict(), "train_config": train_cfg.to_dict()}

    encoder: EncoderParams | None = None
    temporal: TemporalParams | None = None
    if args.init_checkpoint:
        _, encoder, temporal = _load_model(args.init_checkpoint)
    if args.stage == "2" and encoder is None:
        raise ValueError("--stage 2 needs --init-checkpoint with encoder sections")
    # pre-initialize so the per-epoch callbacks see the live parameter objects
    if encoder is None:
        encoder = init_encoder_params(model_cfg, np.random.default_rng(train_cfg.seed))
    if temporal is None and args.stage in ("2", "both"):
        temporal = init_temporal_params(model_cfg, np.random.default_rng(train_cfg.seed))

    all_rows: list[dict] = []

    def flush(sections: dict) -> None:
        _atomic_save_checkpoint(checkpoint_path, sections, meta)
        _write_history(history_path, all_rows)

    try:
        if args.stage in ("1", "both"):

            def after_epoch1(epoch: int, row: dict) -> None:
                all_rows.append(row)
                flush(encoder.to_sections())

            train_stage1(
                tracks, train_cfg, model_cfg, encoder=encoder, epoch_callback=after_epoch1
            )
        if args.stage in ("2", "both"):
            epoch_base = len(all_rows)

            def after_epoch2(epoch: int, row: dict) -> None:
                all_rows.append({**row, "epoch": epoch_base + epoch})
                flush({**encoder.to_sections(), **temporal.to_sections()})

            train_stage2(
                tracks, encoder, train_cfg, temporal=temporal, epoch_callback=after_epoch2
            )
    except dc.NumericalError:
        sys.stderr.write("training aborted on a numerical failure; ")
        if checkpoint_path.exists():
            sys.stderr.write(f"last good checkpoint kept at {checkpoint_path}\n")
        else:
            sys.stderr.write("no checkpoint was written\n")
        raise

    _write_manifest(
        run_dir,
        "train",
        meta,
        train_cfg.seed,
        {"features": args.features, "config": args.config or "<defaults>"},
        started,
    )
    print(f"wrote {checkpoint_path}")
    return EXIT_OK


def _write_history(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_s", "L_d", "L_m", "total"])
        for row in rows:
            writer.writerow(
                [row["epoch"], repr(row["L_s"]), repr(row["L_d"]), repr(row["L_m"]), repr(row["total"])]
            )


def _eval_config(args, baseline: str = "airobject") -> EvalConfig:
    return EvalConfig(
        threshold=args.rho,
        grid_size=args.grid_size,
        seq_len_cap=args.seq_len,
        baseline=baseline,
        unique_features=args.unique_features,
        unique_selector=args.unique_selector,
        unique_threshold=args.unique_threshold,
        best_match_only=getattr(args, "best_match", False),
    )


def cmd_encode(args) -> int:
    started = time.monotonic()
    tracks = load_tracks(args.features)
    model_cfg, encoder, temporal = _load_model(args.checkpoint)
    if temporal is None:
        raise ValueError("checkpoint has no temporal section; train stage 2 first")
    cfg = _eval_config(args)
    queries, references = encode_halves(tracks, encoder, temporal, cfg, threads=args.threads)
    run_dir = _make_run_dir(args.out_dir, args.run_name, 0)
    out_path = run_dir / "descriptors.jsonl"
    write_descriptors(queries + references, out_path)
    _write_manifest(
        run_dir,
        "encode",
        {"model": model_cfg.to_dict(), "eval": asdict(cfg)},
        None,
        {"features": args.features, "checkpoint": args.checkpoint},
        started,
    )
    print(f"wrote {len(queries) + len(references)} descriptors to {out_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.monotonic()
    cfg = _eval_config(args, baseline=args.baseline)

    if args.descriptors:
        records = read_descriptors(args.descriptors)
        queries = [r for r in records if r.half == "query"]
        references = [r for r in records if r.half == "reference"]
        report = evaluate_descriptors(queries, references, cfg)
        inputs = {"descriptors": args.descriptors}
    else:
        if not (args.features and args.checkpoint):
            raise ValueError("eval needs either --descriptors or --features with --checkpoint")
        tracks = load_tracks(args.features)
        _, encoder, temporal = _load_model(args.checkpoint)
        if temporal is None and cfg.baseline == "airobject":
            raise ValueError("checkpoint has no temporal section; use --baseline 2d|3d")
        if temporal is None:
            temporal = init_temporal_params(encoder.config, np.random.default_rng(0))
        report = run_benchmark(tracks, encoder, temporal, cfg, threads=args.threads)
        inputs = {"features": args.features, "checkpoint": args.checkpoint}

    run_dir = _make_run_dir(args.out_dir, args.run_name, 0)
    _write_report(run_dir, report)
    _write_manifest(run_dir, "eval", {"eval": asdict(cfg)}, None, inputs, started)
    print(report.summary())
    return EXIT_OK


def _write_report(run_dir: Path, report: EvalReport) -> None:
    payload = {
        "config": asdict(report.config),
        "summary": {
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "auc": report.auc_value,
            "rho": report.config.threshold,
        },
        "point_counts": report.point_counts.as_dict(),
        "per_video": report.per_video,
    }
    with open(run_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(run_dir / "pr_curve.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f1"])
        for rho, counts in zip(report.thresholds, report.counts):
            p, r, f1 = precision_recall_f1(counts)
            writer.writerow([repr(float(rho)), repr(p), repr(r), repr(f1)])


def cmd_gradcheck(args) -> int:
    started = time.monotonic()
    if args.corrupt_adjoint:
        with dc.corrupt_adjoints():
            err = composite_gradcheck(seed=args.seed, eps=args.eps)
    else:
        err = composite_gradcheck(seed=args.seed, eps=args.eps)
    passed = err < GRADCHECK_TOLERANCE
    verdict = "PASS" if passed else "FAIL"
    print(
        f"gradcheck {verdict}: max relative error {err:.3e} "
        f"(tolerance {GRADCHECK_TOLERANCE:.0e}, {time.monotonic() - started:.1f}s)"
    )
    return EXIT_OK if passed else EXIT_NUMERIC


# -- argument wiring ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="airobject", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out-dir", default="runs", help="parent directory for run outputs")
        p.add_argument("--run-name", default=None, help="fixed run directory name")

    p = sub.add_parser("synth", help="generate a synthetic feature file")
    p.add_argument("--config", default=None, help="JSON file with generator fields")
    p.add_argument("--seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("triangulate", help="dump per-frame edge lists for a feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--fully-connected", action="store_true")
    common(p)
    p.set_defaults(func=cmd_triangulate)

    p = sub.add_parser("train", help="run the two-stage training procedure")
    p.add_argument("--features", required=True)
    p.add_argument("--config", default=None, help="JSON with 'model' and 'train' sections")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--s-l-max", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train)

    def eval_flags(p, with_baseline: bool):
        p.add_argument("--rho", type=float, default=0.5)
        p.add_argument("--grid-size", type=int, default=1001)
        p.add_argument("--seq-len", type=int, default=None)
        p.add_argument("--unique-features", action="store_true")
        p.add_argument("--unique-selector", choices=("location", "content"), default="location")
        p.add_argument("--unique-threshold", type=float, default=0.9)
        p.add_argument("--threads", type=int, default=1)
        if with_baseline:
            p.add_argument("--baseline", choices=("airobject", "2d", "3d"), default="airobject")
            p.add_argument("--best-match", action="store_true")

    p = sub.add_parser("encode", help="dump query/reference descriptors per track")
    p.add_argument("--features", required=True)
    p.add_argument("--checkpoint", required=True)
    eval_flags(p, with_baseline=False)
    common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="run the matching benchmark and write a report")
    p.add_argument("--descriptors", default=None, help="descriptor dump to evaluate")
    p.add_argument("--features", default=None)
    p.add_argument("--checkpoint", default=None)
    eval_flags(p, with_baseline=True)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference the full composite loss")
    p.add_argument("--seed", type=int, default=DEFAULT_GRADCHECK_SEED)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--corrupt-adjoint", action="store_true", help="negative control")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except dc.NumericalError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (FeatureFormatError, FileNotFoundError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
