"""Command-line entry point: ``densebird <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import dsp
from .augment import AugmentConfig
from .ensemble import PseudoLabelConfig, combine, pseudo_label_select
from .manifest import (
    Manifest,
    ManifestRow,
    SplitSpec,
    concat_manifests,
    merge_pseudo_into_training,
    read_manifest,
    split_manifest,
    write_manifest,
)
from .metrics import (
    PredictionSet,
    metric_report,
    probability_histogram,
    read_predictions,
    write_predictions,
    write_roc_points,
)
from .model import ArchConfig, build_model, read_checkpoint, save_checkpoint
from .saliency import expand_to_bins, resynthesize, saliency_map, write_pgm
from .train import (
    CSV_HEADER,
    FeatureSet,
    TrainConfig,
    averaged_model,
    fine_tune,
    predict_proba,
    select_hard_samples,
    train,
)

log = logging.getLogger("densebird")

DEFAULT_SEED = 1234
FEATURE_SUFFIX = ".fbk"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config files: key=value lines; CLI flag > file > built-in default.


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {value!r}")


def _apply(obj, values: dict[str, str], prefix: str = ""):
    updates = {}
    for f in fields(obj):
        key = prefix + f.name
        if key not in values or f.name == "augment":
            continue
        current = getattr(obj, f.name)
        raw = values[key]
        try:
            if isinstance(current, bool):
                updates[f.name] = _parse_bool(raw)
            elif isinstance(current, int) or f.name == "block_filters":
                updates[f.name] = int(raw) if raw else None
            elif isinstance(current, float):
                updates[f.name] = float(raw)
            else:
                updates[f.name] = raw
        except ValueError:
            raise UsageError(f"bad value for {key}: {raw!r}") from None
    return replace(obj, **updates)


def resolve_configs(args) -> tuple[TrainConfig, ArchConfig]:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, attr in (("epochs", "epochs"), ("base_lr", "lr"), ("batch_size", "batch_size"),
                      ("seed", "seed"), ("momentum", "momentum"),
                      ("avg_auc_threshold", "threshold"), ("finetune_epochs", "finetune_epochs"),
                      ("finetune_lr_scale", "finetune_lr_scale")):
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    for key in ("crop", "reverse"):
        v = getattr(args, key, None)
        if v is not None:
            values[f"augment.{key}"] = str(v)
    for f in fields(ArchConfig):
        v = getattr(args, f"arch_{f.name}", None)
        if v is not None:
            values[f"arch.{f.name}"] = str(v)
    values.setdefault("seed", str(DEFAULT_SEED))

    augment = _apply(AugmentConfig(), values, "augment.")
    cfg = _apply(TrainConfig(augment=augment), values)
    arch = _apply(ArchConfig(), values, "arch.")
    return cfg, arch


# ---------------------------------------------------------------------------
# Feature access


def feature_path(feature_dir, item_id: str) -> Path:
    return Path(feature_dir) / f"{item_id}{FEATURE_SUFFIX}"


def load_feature_set(manifest: Manifest, feature_dir, require_labels: bool = True) -> FeatureSet:
    feats, labels = [], []
    for row in manifest:
        path = feature_path(feature_dir, row.item_id)
        if not path.exists():
            raise UsageError(f"missing features for {row.item_id} ({path}); run 'densebird features'")
        feats.append(dsp.read_feature_file(path))
        if row.label is None and require_labels:
            raise UsageError(f"item {row.item_id} has no label")
        labels.append(-1 if row.label is None else row.label)
    if not feats:
        raise UsageError("manifest is empty")
    return FeatureSet(manifest.item_ids, np.stack(feats), np.array(labels))


# ---------------------------------------------------------------------------
# Commands


def cmd_features(args):
    manifest = read_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(args.manifest).parent
    fb = dsp.default_filterbank()
    for row in manifest:
        if not row.path:
            raise UsageError(f"item {row.item_id} has no audio path")
        path = Path(row.path)
        if not path.is_absolute():
            path = base / path
        wave = dsp.load_wav(path, force_resample=args.force_resample)
        image = dsp.extract_features(wave, fb)
        dsp.write_feature_file(feature_path(out, row.item_id), image.values)
    print(f"wrote {len(manifest)} feature files to {out}")


def cmd_split(args):
    manifest = read_manifest(args.manifest)
    try:
        props = [float(p) for p in args.proportions.split(",")]
    except ValueError:
        raise UsageError(f"bad proportions {args.proportions!r}") from None
    if len(props) != 3:
        raise UsageError("proportions must be train,valid,test")
    parts = split_manifest(manifest, SplitSpec(*props, seed=args.seed))
    for name, part in zip(("train", "valid", "test"), parts):
        write_manifest(f"{args.out_prefix}_{name}.csv", part)
    print(" ".join(f"{n}={len(p)}" for n, p in zip(("train", "valid", "test"), parts)))


def cmd_merge(args):
    merged = concat_manifests(*(read_manifest(p) for p in args.manifests))
    write_manifest(args.out, merged)
    print(f"{len(merged)} rows")


def cmd_train(args):
    cfg, arch = resolve_configs(args)
    train_set = load_feature_set(read_manifest(args.train), args.features)
    valid_set = load_feature_set(read_manifest(args.valid), args.features) if args.valid else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(arch, seed=cfg.seed)
    log_path = out / "log.csv"
    with open(log_path, "w") as fh:
        fh.write(CSV_HEADER + "\n")

        def on_epoch(rec):
            fh.write(rec.csv_row() + "\n")
            fh.flush()
            save_checkpoint(rec.checkpoint, out / f"epoch_{rec.epoch:03d}.ckpt")

        result = train(model, train_set, valid_set, cfg, on_epoch=on_epoch)
    save_checkpoint(model, out / "final.ckpt", result.records[-1].valid_auc if result.records else None,
                    cfg.epochs)
    p1 = predict_proba(model, train_set)
    train_acc = float(np.mean((p1 >= 0.5).astype(int) == train_set.labels))
    (out / "summary.txt").write_text(f"final_train_acc={train_acc!r}\nparams={model.param_count()}\n")
    print(f"final_train_acc={train_acc:.6f}")


def cmd_predict(args):
    model = read_checkpoint(args.checkpoint).to_model()
    data = load_feature_set(read_manifest(args.manifest), args.features, require_labels=False)
    preds = PredictionSet(data.item_ids, predict_proba(model, data))
    write_predictions(args.out, preds, decisions=args.decisions)
    print(f"wrote {len(preds)} predictions to {args.out}")


def cmd_evaluate(args):
    preds = read_predictions(args.predictions).with_labels(read_manifest(args.labels).labels())
    report = metric_report(preds, args.bootstrap, args.resample_size, args.seed)
    text = report.to_text()
    if args.histogram_bins:
        heights = probability_histogram(preds, args.histogram_bins)
        text += "histogram=" + ",".join(f"{h:.6f}" for h in heights) + "\n"
    if args.roc_out:
        write_roc_points(args.roc_out, preds)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_ensemble(args):
    members = [read_predictions(p) for p in args.predictions]
    combined = combine(members, args.method, args.clamp_eps)
    write_predictions(args.out, combined)
    print(f"combined {len(members)} prediction sets ({args.method}) into {args.out}")


def cmd_avg_params(args):
    ckpts = [read_checkpoint(p) for p in args.checkpoints]
    threshold = args.threshold if args.threshold is not None else TrainConfig().avg_auc_threshold
    model = averaged_model(ckpts, threshold)
    used = sum(c.valid_auc >= threshold for c in ckpts)
    save_checkpoint(model, args.out)
    print(f"averaged {used} of {len(ckpts)} checkpoints (valid AUC >= {threshold})")


def cmd_finetune(args):
    cfg, _ = resolve_configs(args)
    ckpt = read_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    data = load_feature_set(read_manifest(args.train), args.features)
    hard = select_hard_samples(model, data)
    if len(hard) == 0:
        raise UsageError("no misclassified training items; nothing to fine-tune on")
    fine_tune(model, data.subset(hard), cfg)
    after = select_hard_samples(model, data.subset(hard))
    save_checkpoint(model, args.out, ckpt.valid_auc, ckpt.epoch)
    print(f"fine-tuned on {len(hard)} hard items; {len(hard) - len(after)} now correct")


def cmd_saliency(args):
    model = read_checkpoint(args.checkpoint).to_model()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fb = dsp.default_filterbank()
    for audio in args.audio:
        wave = dsp.load_wav(audio, force_resample=args.force_resample)
        image = dsp.extract_features(wave, fb)
        if image.values.shape != model.config.input_shape:
            raise UsageError(f"{audio}: features {image.values.shape} do not fit the model input")
        smap = saliency_map(model, image, args.target_class)
        stem = wave.item_id
        dsp.write_feature_file(out / f"{stem}.sal", smap.values)
        write_pgm(out / f"{stem}.pgm", smap.values)
        masked = resynthesize(wave, expand_to_bins(smap, fb))
        dsp.write_wav(out / f"{stem}_masked.wav", masked)
        print(f"{stem}: saliency and masked audio written to {out}")


def cmd_pseudo_label(args):
    preds = read_predictions(args.predictions)
    selected = pseudo_label_select(preds, PseudoLabelConfig(args.low, args.high))
    train_manifest = read_manifest(args.train)
    paths = {}
    if args.test_manifest:
        paths = {r.item_id: r.path for r in read_manifest(args.test_manifest)}
    enlarged = merge_pseudo_into_training(train_manifest, selected, paths)
    write_manifest(args.out, enlarged)
    print(f"selected {len(selected)} of {len(preds)} items; {len(enlarged)} rows written")


def cmd_synth(args):
    from .synth import render_clip

    out = Path(args.out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([args.seed, 7])
    labels = rng.random(args.count) < args.positive_fraction
    rows = []
    for i, positive in enumerate(labels):
        wave, spec = render_clip(args.seed, i, bool(positive), duration=args.duration)
        rel = f"audio/{spec.item_id}.wav"
        dsp.write_wav(out / rel, wave)
        rows.append(ManifestRow(spec.item_id, spec.label, rel))
    write_manifest(out / "manifest.csv", Manifest(rows))
    print(f"wrote {len(rows)} clips to {out}")


# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--crop", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--reverse", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--finetune-lr-scale", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densebird", description="Bird audio detection with DenseNets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract log-Mel features for every manifest item")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force-resample", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("split", help="seeded train/valid/test split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--proportions", default="0.8,0.05,0.15")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("merge", help="concatenate manifests")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("train", help="train a model, checkpointing every epoch")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--features", required=True)
    p.add_argument("--out-dir", required=True)
    _add_train_flags(p)
    for f in fields(ArchConfig):
        flag = "--arch-" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"arch_{f.name}", type=str if f.name == "block_type" else None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write itemid,probability for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decisions", action="store_true", help="add a 0/1 decision column (threshold 0.5)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="AUC/ACC/TNR/TPR with bootstrap intervals")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--bootstrap", type=int, default=100, help="number of resamples (0 disables)")
    p.add_argument("--resample-size", type=int, default=1000)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--roc-out")
    p.add_argument("--histogram-bins", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="combine prediction files")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--method", choices=("geometric", "arithmetic", "harmonic"), default="geometric")
    p.add_argument("--clamp-eps", type=float, default=1e-7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("avg-params", help="average checkpoints above a validation AUC threshold")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_avg_params)

    p = sub.add_parser("finetune", help="fine-tune on misclassified training items")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("saliency", help="guided-backprop saliency maps and masked audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--target-class", type=int, choices=(0, 1), default=1)
    p.add_argument("--force-resample", action="store_true")
    p.add_argument("audio", nargs="+")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("pseudo-label", help="enlarge a training manifest with confident test predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test-manifest", help="supplies audio paths for the selected items")
    p.add_argument("--low", type=float, default=0.3)
    p.add_argument("--high", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("synth", help="write a synthetic chirp-in-noise corpus as WAV files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"densebird {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
