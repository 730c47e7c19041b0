"""Command-line entry point.

One JSON configuration file drives every command; command-line flags
override individual fields. Primary artifacts (datasets, checkpoints,
history, exports) are byte-deterministic given (config, seed); wall-clock
metadata is quarantined into a separate run_meta.json that no result
depends on.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 selftest
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import analysis, data_io, selftest, trainer
from .model import ModelShapeSpec, init_model, predict_sample

DEFAULT_SHAPE = ModelShapeSpec(
    raw_dim=1024,
    feat_dim=256,
    num_frames=8,
    widths=(2, 3, 4, 5, 6),
    num_filters=256,
    num_classes=27,
)

_SHAPE_KEYS = ("raw_dim", "feat_dim", "num_frames", "widths", "num_filters", "num_classes")
_TRAIN_KEYS = tuple(trainer.TrainConfig().to_dict())
_SYNTH_KEYS = tuple(data_io.SyntheticTaskConfig().to_dict())


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract reserves 2 for
    # validation errors, so remap.
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    shape: ModelShapeSpec
    train: trainer.TrainConfig
    synth: data_io.SyntheticTaskConfig

    def to_dict(self) -> dict:
        return {
            "shape": self.shape.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
        }


def _merge_section(defaults: dict, file_section: dict, args, keys, prefix="") -> dict:
    merged = dict(defaults)
    for key, value in (file_section or {}).items():
        if key not in merged:
            raise ValueError(f"unknown config key {prefix}{key!r}")
        merged[key] = value
    for key in keys:
        override = getattr(args, f"{prefix.replace('.', '_')}{key}", None)
        if override is not None:
            merged[key] = override
    return merged


def build_run_config(args) -> RunConfig:
    file_doc = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ValueError(f"config file not found: {path}")
        file_doc = json.loads(path.read_text())
        unknown = set(file_doc) - {"shape", "train", "synth"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
    shape_d = _merge_section(DEFAULT_SHAPE.to_dict(), file_doc.get("shape"), args, _SHAPE_KEYS)
    train_d = _merge_section(
        trainer.TrainConfig().to_dict(), file_doc.get("train"), args, _TRAIN_KEYS
    )
    synth_d = _merge_section(
        data_io.SyntheticTaskConfig().to_dict(), file_doc.get("synth"), args, _SYNTH_KEYS,
        prefix="synth.",
    )
    return RunConfig(
        ModelShapeSpec.from_dict(shape_d),
        trainer.TrainConfig.from_dict(train_d),
        data_io.SyntheticTaskConfig(**synth_d),
    )


def _parse_widths(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise UsageError(f"bad widths {text!r}: {exc}") from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON configuration file")
    g = p.add_argument_group("shape overrides")
    g.add_argument("--raw-dim", dest="raw_dim", type=int)
    g.add_argument("--feat-dim", dest="feat_dim", type=int)
    g.add_argument("--num-frames", dest="num_frames", type=int)
    g.add_argument("--widths", dest="widths", type=_parse_widths, metavar="H1,H2,...")
    g.add_argument("--num-filters", dest="num_filters", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)
    t = p.add_argument_group("training overrides")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--momentum", dest="momentum", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--initial-lr", dest="initial_lr", type=float)
    t.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    t.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--dropout-keep", dest="dropout_keep", type=float)
    t.add_argument("--seed", dest="seed", type=int)
    s = p.add_argument_group("synthetic-task overrides")
    s.add_argument("--synth-prototypes", dest="synth_num_prototypes", type=int)
    s.add_argument("--synth-dim", dest="synth_feature_dim", type=int)
    s.add_argument("--synth-sigma", dest="synth_noise_sigma", type=float)
    s.add_argument("--synth-length", dest="synth_sequence_length", type=int)
    s.add_argument("--synth-samples-per-class", dest="synth_samples_per_class", type=int)
    s.add_argument("--synth-val-samples-per-class", dest="synth_val_samples_per_class", type=int)
    s.add_argument("--synth-seed", dest="synth_seed", type=int)


def _load_model_for_inference(args):
    if not args.checkpoint:
        raise ValueError("--checkpoint is required")
    ckpt = data_io.load_checkpoint(args.checkpoint)
    params = ckpt.model
    if getattr(args, "use_best", False):
        if ckpt.state.best_params is None:
            raise ValueError("checkpoint has no best-model snapshot")
        params = ckpt.state.best_params
    return params, ckpt


def _load_samples(args, split=None):
    if not args.manifest:
        raise ValueError("--manifest is required")
    manifest = data_io.load_manifest(args.manifest)
    split = split or args.split
    samples = data_io.load_split(manifest, split)
    if not samples:
        raise ValueError(f"split {split!r} is empty in {args.manifest}")
    return manifest, samples


def cmd_synth(args) -> int:
    cfg = build_run_config(args)
    if not args.out_dir:
        raise ValueError("--out-dir is required")
    manifest_path = data_io.write_synth_dataset(cfg.synth, args.out_dir)
    counts = {}
    for split, samples in data_io.synth_order_task(cfg.synth).items():
        counts[split] = len(samples)
    print(f"wrote {manifest_path} ({counts['train']} train / {counts['val']} val samples)")
    return 0


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    if not args.out_dir:
        raise ValueError("--out-dir is required")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, train_split = _load_samples(args, "train")
    val_split = data_io.load_split(manifest, "val")
    if not val_split:
        raise ValueError("validation split is empty")
    if train_split[0].features.shape[1] != cfg.shape.raw_dim:
        raise ValueError(
            f"feature dim {train_split[0].features.shape[1]} does not match "
            f"configured raw_dim {cfg.shape.raw_dim}"
        )
    if len(manifest.classes) != cfg.shape.num_classes:
        raise ValueError(
            f"manifest has {len(manifest.classes)} classes, config says {cfg.shape.num_classes}"
        )
    started = time.time()
    state = None
    if args.resume:
        ckpt = data_io.load_checkpoint(args.resume, expect_shape=cfg.shape)
        params, state = ckpt.model, ckpt.state
    else:
        params = init_model(cfg.shape, trainer.init_rng(cfg.train.seed))
    state = trainer.fit(params, train_split, val_split, cfg.train, state)
    for report in state.history:
        print(
            f"epoch {report.epoch}: train_loss={report.train_loss:.6f} "
            f"val_loss={report.val_loss:.6f} val_acc={report.val_accuracy:.4f} "
            f"lr={report.current_lr:g}"
        )
    ckpt_path = out_dir / "checkpoint.ckpt"
    data_io.save_checkpoint(ckpt_path, params, state, cfg.train)
    history_doc = {
        "reports": [r.to_dict() for r in state.history],
        "best_epoch": state.best_epoch,
        "best_val_accuracy": state.best_val_accuracy,
    }
    data_io.atomic_write_bytes(
        out_dir / "history.json", json.dumps(history_doc, indent=2, sort_keys=True).encode()
    )
    data_io.atomic_write_bytes(
        out_dir / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True).encode()
    )
    # Wall-clock data stays out of the deterministic artifacts.
    meta = {"elapsed_seconds": time.time() - started, "finished_unix": time.time()}
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2))
    print(f"saved {ckpt_path} (best epoch {state.best_epoch}, "
          f"best val acc {state.best_val_accuracy:.4f})")
    return 0


def cmd_eval(args) -> int:
    params, _ = _load_model_for_inference(args)
    _, samples = _load_samples(args)
    loss, accuracy = trainer.evaluate(params, samples)
    print(f"split={args.split} samples={len(samples)} loss={loss!r} accuracy={accuracy!r}")
    return 0


def cmd_predict(args) -> int:
    params, _ = _load_model_for_inference(args)
    _, samples = _load_samples(args)
    lines = ["id,label,predicted," + ",".join(f"p_{c}" for c in range(params.shape.num_classes))]
    for sample in sorted(samples, key=lambda s: s.id):
        predicted, probs = predict_sample(params, sample.features)
        lines.append(
            f"{sample.id},{sample.label},{predicted}," + ",".join(repr(float(p)) for p in probs)
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        data_io.atomic_write_bytes(Path(args.out), text.encode())
        print(f"wrote {args.out} ({len(samples)} predictions)")
    else:
        sys.stdout.write(text)
    return 0


def cmd_inspect_params(args) -> int:
    cfg = build_run_config(args)
    reference = None
    if args.reference:
        reference = json.loads(Path(args.reference).read_text())
    report = analysis.cost_report(cfg.shape, reference)
    print("parameters:")
    for name, value in report.parameters.lines.items():
        print(f"  {name:<12} {value:>12,}")
    print(f"total parameters: {report.parameters.total:,}")
    print("flops per video:")
    for name, value in report.flops.lines.items():
        print(f"  {name:<12} {value:>12,}")
    print(f"total flops per video: {report.flops.total:,}")
    for name, costs in report.reference.items():
        print(f"reference {name}: parameters={costs.get('parameters'):,} "
              f"flops={costs.get('flops'):,}")
    return 0


def cmd_export_responses(args) -> int:
    params, _ = _load_model_for_inference(args)
    _, samples = _load_samples(args)
    if not args.out:
        raise ValueError("--out is required")
    path = analysis.export_responses(params, samples, args.width, args.out)
    print(f"wrote {path} ({len(samples)} rows)")
    return 0


def cmd_export_features(args) -> int:
    params, _ = _load_model_for_inference(args)
    _, samples = _load_samples(args)
    if not args.out:
        raise ValueError("--out is required")
    path = analysis.export_pooled_features(params, samples, args.out)
    print(f"wrote {path} ({len(samples)} rows)")
    return 0


def cmd_selftest(args) -> int:
    failures = selftest.run_selftest()
    return 3 if failures else 0


def build_parser() -> _Parser:
    parser = _Parser(prog="din", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        _add_config_flags(p)
        return p

    p = command("synth", cmd_synth, "generate the synthetic temporal-order dataset")
    p.add_argument("--out-dir", dest="out_dir")

    p = command("train", cmd_train, "train a model on a manifest dataset")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--resume", help="checkpoint to resume from")

    for name, fn in (("eval", cmd_eval), ("predict", cmd_predict)):
        p = command(name, fn, f"{name} a checkpoint on one split")
        p.add_argument("--checkpoint")
        p.add_argument("--manifest")
        p.add_argument("--split", default="val", choices=data_io.SPLITS)
        p.add_argument("--use-best", dest="use_best", action="store_true",
                       help="use the best-validation snapshot instead of the final model")
        if name == "predict":
            p.add_argument("--out", help="write CSV here instead of stdout")

    p = command("inspect-params", cmd_inspect_params, "print parameter/FLOP accounting")
    p.add_argument("--reference",
                   help="JSON file of external model costs to echo alongside")

    p = command("export-responses", cmd_export_responses,
                "export per-window filter responses for one width")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="val", choices=data_io.SPLITS)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--use-best", dest="use_best", action="store_true")
    p.add_argument("--out")

    p = command("export-features", cmd_export_features,
                "export pooled feature vectors plus the mean-frame baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="val", choices=data_io.SPLITS)
    p.add_argument("--use-best", dest="use_best", action="store_true")
    p.add_argument("--out")

    command("selftest", cmd_selftest, "run the built-in oracle and gradient checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
