"""Command-line entry point: datagen, train, finetune, eval, predict.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .datamodel import DatasetError, DatasetSplit, Image, load_dataset, save_dataset
from .metrics import OraclePredictor, evaluate
from .model import ModelConfig, build_model
from .synthdata import CorpusConfig, build_corpus, build_reasoning_finetune
from .trainer import NonFiniteLossError, TrainConfig, load_checkpoint, run_training, save_checkpoint

log = logging.getLogger("embedmask")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# overlay colors, in <SEG> order
PALETTE = ((255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (255, 0, 255), (0, 255, 255))

DATAGEN_DEFAULTS = {"semantic": 100, "referring": 100, "vqa": 50, "reasoning": 40, "finetune": 24,
                    "image_size": 64, "patch_size": 8}
FINETUNE_ITERS = 300


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _opt(p, flag, default, type_, help_):
    # default None marks "not given" so config files can sit between defaults and flags
    p.add_argument(flag, type=type_, default=None, help=f"{help_} (default: {default})")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict) or any(isinstance(v, dict) for v in cfg.values()):
        raise UsageError("config file must be a flat JSON object")
    return cfg


def _resolve(defaults, args, flag_keys):
    """defaults < config file < explicit flags < --set."""
    cfg = dict(defaults)
    layers = [_load_config_file(args.config),
              {k: getattr(args, k) for k in flag_keys if getattr(args, k) is not None},
              _overrides(args.set)]
    for layer in layers:
        unknown = set(layer) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(layer)
    return cfg


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out, cfg):
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _common(p):
    p.add_argument("--config", default=None, help="flat JSON config file (default: None)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                   help="override one config key; repeatable (default: None)")


# ------------------------------------------------------------------ datagen


def cmd_datagen(args):
    cfg = _resolve({**DATAGEN_DEFAULTS, "seed": 0}, args, list(DATAGEN_DEFAULTS) + ["seed"])
    out = _prepare_out(args.out, args.force)
    size = int(cfg["image_size"])
    corpus_cfg = CorpusConfig(
        sizes={k: int(cfg[k]) for k in ("semantic", "referring", "vqa", "reasoning")},
        image_size=(size, size),
        patch_size=int(cfg["patch_size"]),
    )
    try:
        train, val, test = build_corpus(int(cfg["seed"]), corpus_cfg)
    except RuntimeError as exc:
        raise UsageError(str(exc)) from None
    for split in (train, val, test):
        save_dataset(split, out / split.name)
    if int(cfg["finetune"]) > 0:
        save_dataset(build_reasoning_finetune(int(cfg["seed"]), int(cfg["finetune"]), corpus_cfg), out / "reasoning_train")
    _echo_config(out, cfg)
    print(f"wrote {len(train)} train / {len(val)} val / {len(test)} test samples to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ train / finetune

TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("loss_weights", "betas")]
MODEL_KEYS = [f.name for f in fields(ModelConfig)]


def _train_defaults(total_iters):
    d = TrainConfig(total_iters=total_iters).to_dict()
    d.pop("betas")
    d.pop("loss_weights")
    return {**d, **ModelConfig().to_dict(), "checkpoint_every": 0}


def _split_config(cfg):
    tcfg = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    mdict = {k: cfg[k] for k in MODEL_KEYS}
    for k in ("image_size", "lora_targets"):
        mdict[k] = tuple(mdict[k])
    return tcfg, ModelConfig(**mdict)


def _data_dir(path, preferred):
    root = Path(path)
    if (root / "manifest.jsonl").exists():
        return root
    if (root / preferred / "manifest.jsonl").exists():
        return root / preferred
    raise DatasetError(f"no dataset at {root} (looked for manifest.jsonl and {preferred}/manifest.jsonl)")


def _run_phase(args, phase, defaults):
    flag_keys = ["seed", "lr", "total_iters", "warmup_iters", "batch_per_step", "grad_accum_steps", "checkpoint_every"]
    cfg = _resolve(defaults, args, flag_keys)
    train_cfg, model_cfg = _split_config(cfg)
    split = load_dataset(_data_dir(args.data, "train" if phase == "pretrain" else "reasoning_train"), "train")
    model = None
    if phase == "finetune":
        base = Path(args.checkpoint)
        if not (base / "manifest.json").exists():
            raise DatasetError(f"no checkpoint at {base}")
        model = load_checkpoint(base).model
        cfg.update(model.config.to_dict())
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
    out = _prepare_out(args.out, args.force)
    _echo_config(out, cfg)
    with open(out / "loss_log.jsonl", "w", encoding="utf-8") as logf:
        def log_fn(rec):
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

        state = run_training(split.samples, train_cfg, phase, model=model, log_fn=log_fn,
                             checkpoint_dir=out, checkpoint_every=int(cfg["checkpoint_every"]))
    save_checkpoint(out / "checkpoint", state, train_cfg)
    last = state.history[-1] if state.history else {}
    print(f"{phase}: {state.iteration} iterations, final total loss {last.get('total', float('nan')):.4f}; "
          f"checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def cmd_train(args):
    return _run_phase(args, "pretrain", _train_defaults(2000))


def cmd_finetune(args):
    return _run_phase(args, "finetune", _train_defaults(FINETUNE_ITERS))


# ------------------------------------------------------------------ eval


def cmd_eval(args):
    split = load_dataset(_data_dir(args.data, "val"))
    samples = [s for s in split.samples if args.kind == "all" or s.kind == args.kind]
    if not any(s.target_masks for s in samples):
        raise DatasetError(f"no masked samples of kind {args.kind!r} in {args.data}")
    if args.oracle:
        predictor = OraclePredictor(samples)
    else:
        ck = Path(args.checkpoint) if args.checkpoint else None
        if ck is None or not (ck / "manifest.json").exists():
            raise DatasetError(f"missing checkpoint {args.checkpoint}")
        predictor = load_checkpoint(ck).model
        predictor.eval()
    report = evaluate(predictor, DatasetSplit(split.name, samples))
    out = _prepare_out(args.out, args.force)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_table() + "\n", encoding="utf-8")
    report.dump_records(out / "records.jsonl")
    print(report.to_table())
    return EXIT_OK


# ------------------------------------------------------------------ predict


def blend(pixels_u8, mask_bits, color):
    """Alpha-blend ``color`` at 50% over the masked pixels, in exact integer arithmetic."""
    out = pixels_u8.astype(np.uint16)
    c = np.array(color, dtype=np.uint16)
    sel = mask_bits.astype(bool)
    out[sel] = (out[sel] + c) // 2
    return out.astype(np.uint8)


def read_image(path, size):
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size[1], size[0]):
                warnings.warn(f"resizing {path} from {im.size[0]}x{im.size[1]} to {size[1]}x{size[0]}")
                im = im.resize((size[1], size[0]), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr


def cmd_predict(args):
    ck = Path(args.checkpoint)
    if not (ck / "manifest.json").exists():
        raise DatasetError(f"missing checkpoint {ck}")
    model = load_checkpoint(ck).model
    model.eval()
    arr = read_image(args.image, model.config.image_size)
    image = Image(arr / 255.0, patch_size=model.config.patch_size)
    query = args.query if "<IMAGE>" in args.query else f"<IMAGE> {args.query}"
    pred = model.predict(image, query, max_new=args.max_new)
    out = _prepare_out(args.out, args.force)
    print(pred.text)
    (out / "answer.txt").write_text(pred.text + "\n", encoding="utf-8")
    if not pred.masks:
        print("notice: the answer contains no <SEG> token; no masks written")
    for k, m in enumerate(pred.masks):
        PILImage.fromarray(m.bits * 255, mode="L").save(out / f"mask_{k}.png")
        PILImage.fromarray(blend(arr, m.bits, PALETTE[k % len(PALETTE)]), mode="RGB").save(out / f"overlay_{k}.png")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="embedmask", description=__doc__, formatter_class=fmt)
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("datagen", help="write the synthetic corpus")
    p.add_argument("--out", required=True, help="output directory (required)")
    _opt(p, "--seed", 0, int, "corpus seed")
    for k in ("semantic", "referring", "vqa", "reasoning"):
        _opt(p, f"--{k}", DATAGEN_DEFAULTS[k], int, f"number of {k} samples before the split")
    _opt(p, "--finetune", DATAGEN_DEFAULTS["finetune"], int, "reasoning samples written to reasoning_train/")
    _opt(p, "--image-size", DATAGEN_DEFAULTS["image_size"], int, "square image side in pixels")
    _opt(p, "--patch-size", DATAGEN_DEFAULTS["patch_size"], int, "vision patch size")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory (default: False)")
    _common(p)
    p.set_defaults(func=cmd_datagen)

    for name, func, iters in (("train", cmd_train, 2000), ("finetune", cmd_finetune, FINETUNE_ITERS)):
        p = sub.add_parser(name, help="pretrain a model" if name == "train" else "fine-tune a checkpoint")
        p.add_argument("--data", required=True, help="dataset directory or datagen root (required)")
        p.add_argument("--out", required=True, help="run directory (required)")
        if name == "finetune":
            p.add_argument("--checkpoint", required=True, help="base checkpoint directory (required)")
        _opt(p, "--seed", 0, int, "model and data-order seed")
        _opt(p, "--lr", 3e-4, float, "peak learning rate")
        _opt(p, "--total-iters", iters, int, "optimizer steps")
        _opt(p, "--warmup-iters", 100, int, "linear warmup steps")
        _opt(p, "--batch-per-step", 2, int, "samples per micro-step")
        _opt(p, "--grad-accum-steps", 10, int, "micro-steps per optimizer step")
        _opt(p, "--checkpoint-every", 0, int, "extra checkpoint every K steps, 0 disables")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty run directory (default: False)")
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--data", required=True, help="dataset directory or datagen root (required)")
    p.add_argument("--out", required=True, help="report directory (required)")
    p.add_argument("--checkpoint", default=None, help="checkpoint directory (default: None)")
    p.add_argument("--kind", default="reasoning", choices=["reasoning", "semantic", "referring", "all"],
                   help="sample kind to score (default: reasoning)")
    p.add_argument("--oracle", action="store_true", help="score ground truth instead of a model (default: False)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty report directory (default: False)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="answer one query and write mask overlays")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory (required)")
    p.add_argument("--image", required=True, help="RGB image file (required)")
    p.add_argument("--query", required=True, help="instruction text (required)")
    p.add_argument("--out", required=True, help="output directory (required)")
    p.add_argument("--max-new", type=int, default=16, help="maximum generated tokens (default: 16)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory (default: False)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"embedmask {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"embedmask {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"embedmask {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # config values rejected by TrainConfig/ModelConfig
        print(f"embedmask {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
