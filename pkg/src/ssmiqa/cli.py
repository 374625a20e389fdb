"""Command-line surface: dataset synthesis, training, evaluation, transfer,
and scan diagnostics.

Exit codes: 0 success, 2 argument/config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, checkpoint
from .blocks import ConfigError, IqaModel, ModelConfig, Trainer, cosine_lr, preset
from .data import (
    DISTORTION_KINDS,
    DataError,
    IqaSample,
    crop_patches,
    load_dataset,
    normalize_scores,
    split_samples,
    synth_dataset,
    write_dataset,
)
from .metrics import UndefinedCorrelationError, build_report
from .scan2d import build_orders, locality_profile
from .styleprompt import (
    attach_adapters,
    freeze_all_but_head,
    freeze_backbone,
    freeze_everything,
    tunable_fraction,
)
from .tensor import NumericError, Tensor, no_grad


@dataclass
class RunConfig:
    """Everything needed to reproduce a command; embedded in outputs."""

    preset: str = "desk"
    scan_mode: str = "local"
    seed: int = 0
    epochs: int = 9
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.05
    patch_size: int = 32
    patch_count: int = 4
    tune_head: bool = True
    model: dict = field(default_factory=dict)  # explicit ModelConfig overrides

    def to_dict(self) -> dict:
        return asdict(self)


# keys accepted in config files / as overrides, with their parsers
def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


RUN_SCHEMA = {
    "preset": str, "scan_mode": str, "seed": int, "epochs": int, "batch_size": int,
    "lr": float, "weight_decay": float, "patch_size": int, "patch_count": int,
    "tune_head": _parse_bool,
}
MODEL_SCHEMA = {
    "depths": _int_list, "embed_dims": _int_list, "windows": _int_list,
    "n_state": int, "expand": int, "mlp_ratio": float, "head_hidden": int,
    "patch": int, "chunk": int, "n_prompts": int,
}


def parse_config_file(path: str) -> RunConfig:
    """Flat KEY=VALUE file; `#` comments; model keys prefixed implicitly."""
    rc = RunConfig()
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                if key in RUN_SCHEMA:
                    setattr(rc, key, RUN_SCHEMA[key](value))
                elif key in MODEL_SCHEMA:
                    rc.model[key] = MODEL_SCHEMA[key](value)
                else:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
    return rc


def build_model(rc: RunConfig, seed: int | None = None) -> IqaModel:
    if rc.model:
        kwargs = dict(rc.model)
        kwargs.setdefault("scan_mode", rc.scan_mode)
        cfg = ModelConfig(**kwargs)
    else:
        cfg = preset(rc.preset, scan_mode=rc.scan_mode)
    return IqaModel(cfg, seed=rc.seed if seed is None else seed)


def _crop_seed(base_seed: int, sample_id: str, salt: int = 0) -> int:
    return (zlib.crc32(sample_id.encode()) ^ (base_seed * 0x9E3779B1) ^ salt) & 0x7FFFFFFF


def predict_scores(model: IqaModel, samples: list[IqaSample], rc: RunConfig) -> np.ndarray:
    """Per-image score = mean over the random-patch protocol, deterministically."""
    scores = np.empty(len(samples))
    with no_grad():
        for i, s in enumerate(samples):
            patches = crop_patches(s.image, rc.patch_count, rc.patch_size,
                                   seed=_crop_seed(rc.seed, s.sample_id))
            batch = np.stack(patches)
            scores[i] = float(model(Tensor(batch)).data.mean())
    return scores


def evaluate_samples(predict_fn, samples: list[IqaSample]):
    """Report from any predictor callable (models or test doubles)."""
    truth = np.array([s.mos for s in samples])
    domains = [s.domain for s in samples]
    pred = np.asarray(predict_fn(samples), dtype=np.float64)
    return build_report(pred, truth, domains)


def train_model(model: IqaModel, train_samples: list[IqaSample], rc: RunConfig,
                log_path: str | None = None) -> list[dict]:
    """Random-crop minibatch training; returns per-epoch log rows.

    Each epoch draws rc.patch_count fresh crops per image with random
    horizontal/vertical flips; the learning rate warms up linearly then
    follows a cosine decay. All randomness is derived from rc.seed.
    """
    trainer = Trainer(model, lr=rc.lr, weight_decay=rc.weight_decay, seed=rc.seed)
    targets = normalize_scores(train_samples)
    n = len(train_samples)
    steps_per_epoch = max(1, -(-n * rc.patch_count // rc.batch_size))
    total_steps = max(1, rc.epochs * steps_per_epoch)
    warmup = min(50, max(1, total_steps // 10))
    shuffle_rng = np.random.default_rng((rc.seed, 0xC0FFEE))
    rows = []
    step = 0
    for epoch in range(rc.epochs):
        crops, ys = [], []
        for s, y in zip(train_samples, targets):
            flip_rng = np.random.default_rng(_crop_seed(rc.seed, s.sample_id, salt=0x10000 + epoch))
            for c in crop_patches(s.image, rc.patch_count, rc.patch_size,
                                  seed=_crop_seed(rc.seed, s.sample_id, salt=epoch + 1)):
                if flip_rng.random() < 0.5:
                    c = c[:, ::-1]
                if flip_rng.random() < 0.5:
                    c = c[::-1, :]
                crops.append(np.ascontiguousarray(c))
                ys.append(y)
        crops = np.stack(crops)
        ys = np.array(ys)
        order = shuffle_rng.permutation(len(ys))
        epoch_loss = 0.0
        lr = rc.lr
        for start in range(0, len(ys), rc.batch_size):
            idx = order[start:start + rc.batch_size]
            if step < warmup:
                lr = rc.lr * (step + 1) / warmup
            else:
                lr = cosine_lr(rc.lr, step - warmup, total_steps - warmup)
            epoch_loss += trainer.train_step(crops[idx], ys[idx], lr=lr) * len(idx)
            step += 1
        rows.append({"epoch": epoch, "lr": lr, "train_loss": epoch_loss / len(ys)})
    if log_path:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


# -- commands -------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    kinds = tuple(args.kinds.split(",")) if args.kinds else None
    samples = synth_dataset(args.count, base_seed=args.seed, kinds=kinds, size=args.size)
    manifest = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples -> {manifest}")
    return 0


def _load_run_config(args) -> RunConfig:
    rc = parse_config_file(args.config) if getattr(args, "config", None) else RunConfig()
    for key in RUN_SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            setattr(rc, key, value)
    return rc


def cmd_train(args) -> int:
    rc = _load_run_config(args)
    samples = load_dataset(args.data)
    if not samples:
        raise DataError(f"no samples in manifest {args.data}")
    splits = split_samples(samples)
    model = build_model(rc)
    log_path = os.path.splitext(args.out)[0] + ".log.csv"
    rows = train_model(model, splits["train"], rc, log_path=log_path)
    checkpoint.save_model(args.out, model, rc.to_dict(), kind="full")
    final = rows[-1]["train_loss"] if rows else float("nan")
    print(f"trained {rc.epochs} epochs on {len(splits['train'])} samples; "
          f"final loss {final:.6f}; checkpoint -> {args.out}")
    return 0


def _restore(args_checkpoint: str):
    meta, _ = checkpoint.load(args_checkpoint)
    if meta.get("kind") != "full":
        raise checkpoint.CheckpointError("expected a full checkpoint")
    rc = RunConfig(**meta["run"])
    model = IqaModel(ModelConfig.from_dict(meta["model"]), seed=rc.seed)
    checkpoint.load_into_model(args_checkpoint, model)
    return model, rc, meta


def cmd_eval(args) -> int:
    model, rc, meta = _restore(args.checkpoint)
    samples = load_dataset(args.data)
    chosen = split_samples(samples)[args.split] if args.split != "all" else samples
    if len(chosen) < 2:
        raise DataError(f"split {args.split!r} has {len(chosen)} samples; need at least 2")
    report = evaluate_samples(lambda ss: predict_scores(model, ss, rc), chosen)
    payload = {"report": report.to_dict(), "run": rc.to_dict(), "split": args.split,
               "build_version": __version__}
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(report.table())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
    return 0


def cmd_transfer(args) -> int:
    model, rc, meta = _restore(args.checkpoint)
    rc_t = RunConfig(**rc.to_dict())
    if getattr(args, "config", None):
        rc_t = parse_config_file(args.config)
        rc_t.preset, rc_t.model = rc.preset, rc.model
    for key in RUN_SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            setattr(rc_t, key, value)
    samples = load_dataset(args.data)
    splits = split_samples(samples)
    if args.mode == "styleprompt":
        attach_adapters(model, seed=rc_t.seed)
        freeze_backbone(model, tune_head=rc_t.tune_head)
    elif args.mode == "linear-probe":
        freeze_all_but_head(model)
    elif args.mode == "none":
        freeze_everything(model)
    fraction = tunable_fraction(model)
    before = checkpoint.backbone_hash(model)
    if args.mode != "none":
        train_model(model, splits["train"], rc_t)
    after = checkpoint.backbone_hash(model)
    if args.mode in ("styleprompt", "linear-probe", "none") and before != after:
        raise NumericError("frozen backbone changed during transfer; refusing to continue")

    report = evaluate_samples(lambda ss: predict_scores(model, ss, rc_t), splits["test"])
    payload = {"mode": args.mode, "tunable_fraction": fraction,
               "report": report.to_dict(), "run": rc_t.to_dict(),
               "build_version": __version__}
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        if args.mode == "styleprompt":
            checkpoint.save_model(args.out, model, rc_t.to_dict(), kind="adapters",
                                  only_trainable=True, extra={"backbone_hash": after})
        else:
            checkpoint.save_model(args.out, model, rc_t.to_dict(), kind="full")
    return 0


def cmd_scan_info(args) -> int:
    rows = []
    for mode in ("cross", "local") if args.mode == "both" else (args.mode,):
        window = args.window if mode == "local" else 0
        order = build_orders(args.height, args.width, mode, max(1, window))[0]
        prof = locality_profile(order)
        rows.append((mode, args.height, args.width, window,
                     prof["max_adjacent_gap"], prof["mean_adjacent_gap"],
                     prof["median_adjacent_gap"]))
    print("mode,height,width,window,max_adjacent_gap,mean_adjacent_gap,median_adjacent_gap")
    for row in rows:
        print(",".join(str(v) for v in row))
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmiqa",
                                description="Selective state-space image quality assessment")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def positive_int(value):
        n = int(value)
        if n < 1:
            raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
        return n

    s = sub.add_parser("synth-data", help="generate a synthetic IQA dataset")
    s.add_argument("--count", type=positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--kinds", help=f"comma list from {','.join(DISTORTION_KINDS)}")
    s.set_defaults(fn=cmd_synth_data)

    def add_run_flags(sp):
        sp.add_argument("--config", help="KEY=VALUE config file")
        sp.add_argument("--preset", choices=["tiny", "small", "base", "desk"])
        sp.add_argument("--scan-mode", dest="scan_mode", choices=["cross", "local"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--weight-decay", dest="weight_decay", type=float)
        sp.add_argument("--patch-size", dest="patch_size", type=int)
        sp.add_argument("--patch-count", dest="patch_count", type=int)

    s = sub.add_parser("train", help="train a model on a manifest dataset")
    add_run_flags(s)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    s.add_argument("--json", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("transfer", help="adapt a checkpoint to a new dataset")
    add_run_flags(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["styleprompt", "full", "linear-probe", "none"],
                   required=True)
    s.add_argument("--no-tune-head", dest="tune_head", action="store_false", default=None)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_transfer)

    s = sub.add_parser("scan-info", help="print locality profiles for scan orders")
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--window", type=int, default=4)
    s.add_argument("--mode", choices=["cross", "local", "both"], default="both")
    s.set_defaults(fn=cmd_scan_info)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, UndefinedCorrelationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (NumericError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
