"""Command line interface.

Subcommands: synth, train, predict, evaluate, exp1, exp2, exp3,
overlays.  Experiment commands exit nonzero when any grid point failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from ctpseg.data import (
    SplitAssignment,
    load_manifest,
    load_patient,
    split_dataset,
)
from ctpseg.experiments import (
    SPLIT_RATIOS,
    ExperimentConfig,
    emit_overlays,
    model_label,
    parse_input_tokens,
    run_experiment,
)
from ctpseg.inference import load_prediction, predict_patient, save_prediction
from ctpseg.metrics import aggregate, evaluate_patient
from ctpseg.model import (
    EncoderSpec,
    FreezeMode,
    FusionMode,
    ModelConfig,
    build_model,
    load_checkpoint,
    load_pretrained,
)
from ctpseg.phantom import CohortSpec, generate_cohort
from ctpseg.train import TrainConfig, train


def _cmd_synth(args) -> int:
    spec = CohortSpec.from_file(args.cohort)
    if args.seed is not None:
        spec.seed = args.seed
    manifest = generate_cohort(spec, args.out)
    print(f"wrote {len(manifest.patients)} phantom patients to {args.out}")
    return 0


def _model_config_from_dict(raw: dict) -> ModelConfig:
    fusion = FusionMode(raw.get("fusion", "SF"))
    inputs = parse_input_tokens(raw.get("inputs", ["PMs"]))
    return ModelConfig(
        fusion=fusion,
        inputs=inputs,
        encoder=EncoderSpec(
            width_multiplier=raw.get("width_multiplier", 1.0),
            pretrained=raw.get("pretrained", False),
        ),
        freeze_mode=FreezeMode(raw.get("freeze_mode", "Unfrozen")),
        input_size=tuple(raw.get("input_size", (512, 512))),
        bottleneck_dropout=raw.get("bottleneck_dropout", 0.5),
    )


def _cmd_train(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    train_cfg = TrainConfig.from_dict(raw.get("train", {}))
    model_cfg = _model_config_from_dict(raw.get("model", {}))
    if args.out is not None:
        train_cfg.checkpoint_dir = Path(args.out)

    manifest = load_manifest(args.manifest)
    if args.split is not None:
        split = SplitAssignment.load(args.split)
    else:
        split = split_dataset(manifest, SPLIT_RATIOS, args.split_seed)
        split_path = Path(train_cfg.checkpoint_dir) / "split.json"
        split_path.parent.mkdir(parents=True, exist_ok=True)
        split.save(split_path)
        print(f"no --split given; wrote stratified split to {split_path}")

    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    if raw.get("pretrained_weights"):
        load_pretrained(model, raw["pretrained_weights"])

    train_studies = [load_patient(manifest, pid) for pid in split.train]
    val_studies = [load_patient(manifest, pid) for pid in split.validation]
    result = train(model, train_studies, val_studies, train_cfg)
    history_path = Path(train_cfg.checkpoint_dir) / "history.jsonl"
    result.history.save_jsonl(history_path)
    label = model_label(model_cfg.fusion, model_cfg.freeze_mode, model_cfg.inputs)
    print(
        f"{label}: best val loss {result.best_val_loss:.4f} at epoch "
        f"{result.best_epoch} ({result.history.stopping_reason.value}); "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def _cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    study = load_patient(manifest, args.patient)
    pred = predict_patient(model, study, args.threshold)
    sidecar = save_prediction(pred, study, Path(args.out) / args.patient)
    print(f"wrote prediction for {args.patient} ({sidecar})")
    return 0


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    pred_root = Path(args.pred)
    patients = args.patients or [
        p.name for p in sorted(pred_root.iterdir()) if (p / "prediction.json").exists()
    ]
    if not patients:
        print("no predictions found", file=sys.stderr)
        return 1
    per_patient = []
    for pid in patients:
        study = load_patient(manifest, pid)
        if study.ground_truth is None:
            print(f"skipping {pid}: no ground truth", file=sys.stderr)
            continue
        pred, _ = load_prediction(pred_root / pid)
        per_patient.append(
            evaluate_patient(
                pred, study.ground_truth, study.spacing, pid, study.group
            )
        )
    report = aggregate(per_patient)
    if args.out:
        report.to_csv(args.out)
        print(f"wrote {args.out}")
    print(report.format_text())
    return 0


def _cmd_experiment(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if config.experiment != args.experiment:
        print(
            f"config declares {config.experiment!r}, invoked as {args.experiment!r}",
            file=sys.stderr,
        )
        return 2
    report = run_experiment(config)
    print(report.format_text())
    if report.selected:
        print(f"selected model: {report.selected}")
    return 1 if report.any_errors else 0


def _cmd_overlays(args) -> int:
    manifest = load_manifest(args.manifest)
    study = load_patient(manifest, args.patient)
    pred, _ = load_prediction(Path(args.pred) / args.patient)
    written = emit_overlays(study, pred, args.out)
    print(f"wrote {len(written)} overlay images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctpseg",
        description="Core/penumbra segmentation workbench for CT-perfusion maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom cohort")
    p.add_argument("--cohort", required=True, help="cohort spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True, help="JSON with train/model sections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, help="split JSON (default: derive)")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", default=None, help="checkpoint directory override")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="predict one patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate stored predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="directory of per-patient predictions")
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--patients", nargs="*", default=None)
    p.set_defaults(fn=_cmd_evaluate)

    for name in ("exp1", "exp2", "exp3"):
        p = sub.add_parser(name, help=f"run the {name} sweep")
        p.add_argument("--config", required=True)
        p.set_defaults(fn=_cmd_experiment, experiment=name)

    p = sub.add_parser("overlays", help="render prediction overlays")
    p.add_argument("--manifest", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_overlays)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
