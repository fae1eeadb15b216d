"""Command-line entry point: ``attcdcnet {train,evaluate,gradcam,params,synth}``.

Settings resolve in three layers: built-in defaults, then ``--config FILE``
(``key=value`` lines), then explicit flags.  Every command prints its
effective configuration first.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .checkpoint import load_checkpoint, load_model_state
from .data import (
    DEFAULT_MEAN,
    DEFAULT_STD,
    PRESETS,
    ImageSource,
    generate_synthetic,
    preprocess,
    preset_spec,
    read_grayscale,
    scan_image_folder,
    split_dataset,
    SplitAssignment,
    bilinear_resize,
)
from .errors import AttCDCNetError, CheckpointMismatchError, NumericalError
from .explain import export_overlay, grad_cam, save_heatmap_csv
from .model import ModelConfig, build_model, count_parameters, summarize
from .training import CsvMetricsSink, TrainConfig, evaluate, fit, resolve_loss

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

logger = logging.getLogger("attcdcnet")

DEFAULTS = {
    "train": {
        "data": None, "synth": None, "model": "enhanced", "loss": "focal", "batch_size": 64,
        "lr": 0.001, "epochs": 20, "seed": 0, "out": "run", "input_size": None,
        "attention_reduction": 16, "conv_mode": None, "focal_gamma": 2.0, "focal_alpha": "1.0",
        "fractions": "0.7,0.1,0.2", "augment": False, "no_wall_time": False, "resume": None,
    },
    "evaluate": {"checkpoint": None, "data": None, "split": "test", "out": None, "split_file": None},
    "gradcam": {"checkpoint": None, "image": None, "class_": "predicted", "out": None, "layer": None,
                "heatmap_csv": None},
    "params": {"model": "enhanced", "classes": 4, "attention_reduction": 16, "conv_mode": None,
               "input_size": 224, "json": False},
    "synth": {"preset": "easy", "out": None, "seed": 0, "force": False},
}


class UsageError(Exception):
    pass


def _styled(text: str, code: str) -> str:
    if os.environ.get("NO_COLOR") is not None or not sys.stdout.isatty():
        return text
    return f"\033[{code}m{text}\033[0m"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attcdcnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def add(p, *names, **kw):
        p.add_argument(*names, default=S, **kw)

    t = sub.add_parser("train", help="train a model on an image folder or a synthetic preset")
    src = t.add_mutually_exclusive_group()
    add(src, "--data", help="image-folder dataset root (<root>/<Class>/*.png)")
    add(src, "--synth", choices=sorted(PRESETS), help="generate and train on a synthetic preset")
    add(t, "--model", choices=("enhanced", "baseline"))
    add(t, "--loss", choices=("focal", "ce", "cross_entropy"))
    add(t, "--batch-size", dest="batch_size", type=int)
    add(t, "--lr", type=float)
    add(t, "--epochs", type=int)
    add(t, "--seed", type=int)
    add(t, "--out", help="output directory")
    add(t, "--input-size", dest="input_size", type=int,
        help="square resize target (default: preset size for --synth, 224 for --data)")
    add(t, "--attention-reduction", dest="attention_reduction", type=int)
    add(t, "--conv-mode", dest="conv_mode", choices=("standard", "depthwise_separable"))
    add(t, "--focal-gamma", dest="focal_gamma", type=float)
    add(t, "--focal-alpha", dest="focal_alpha", help="scalar weight or 'inverse_frequency'")
    add(t, "--fractions", help="train,val,test fractions")
    add(t, "--augment", action="store_true", help="random flips and +/-10 degree rotations")
    add(t, "--no-wall-time", dest="no_wall_time", action="store_true",
        help="write 0 in the seconds column so metrics files are reproducible byte for byte")
    add(t, "--resume", help="continue from a last.ckpt written by an earlier run")
    add(t, "--config", help="key=value file with default overrides")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    add(e, "--checkpoint")
    add(e, "--data")
    add(e, "--split", choices=("test", "val", "train"))
    add(e, "--out", help="metrics JSON path")
    add(e, "--split-file", dest="split_file", help="split CSV (default: recompute from the checkpoint seed)")
    add(e, "--config")

    g = sub.add_parser("gradcam", help="write a Grad-CAM overlay for one image")
    add(g, "--checkpoint")
    add(g, "--image")
    add(g, "--class", dest="class_", help="class index or 'predicted'")
    add(g, "--out", help="overlay PNG path")
    add(g, "--layer", help="target layer (default: final dense block output)")
    add(g, "--heatmap-csv", dest="heatmap_csv", help="also dump the normalized heatmap grid")
    add(g, "--config")

    p = sub.add_parser("params", help="parameter and complexity summary")
    add(p, "--model", choices=("enhanced", "baseline"))
    add(p, "--classes", type=int)
    add(p, "--attention-reduction", dest="attention_reduction", type=int)
    add(p, "--conv-mode", dest="conv_mode", choices=("standard", "depthwise_separable"))
    add(p, "--input-size", dest="input_size", type=int)
    add(p, "--json", action="store_true", help="emit the per-layer summary as JSON")
    add(p, "--config")

    s = sub.add_parser("synth", help="generate a synthetic image-folder dataset")
    add(s, "--preset", choices=sorted(PRESETS))
    add(s, "--out")
    add(s, "--seed", type=int)
    add(s, "--force", action="store_true", help="write into a non-empty destination")
    add(s, "--config")
    return parser


def _coerce(key: str, raw: str, reference):
    if isinstance(reference, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(reference, int):
            return int(raw)
        if isinstance(reference, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r}") from None
    return raw


def read_config_file(path, command: str) -> dict:
    defaults = DEFAULTS[command]
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        key = "class_" if key == "class" else key
        if key not in defaults:
            raise UsageError(f"{path}:{n}: unknown key {key!r} for '{command}'")
        out[key] = _coerce(key, value, defaults[key])
    return out


def resolve_settings(args: argparse.Namespace) -> dict:
    given = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    settings = dict(DEFAULTS[args.command])
    config_path = given.pop("config", None)
    if config_path:
        settings.update(read_config_file(config_path, args.command))
    settings.update(given)
    return settings


def _print_settings(command: str, settings: dict) -> None:
    print(f"effective config ({command}): {json.dumps(settings, sort_keys=True)}")


def _model_config(model: str, classes: int, reduction: int, conv_mode, input_size: int) -> ModelConfig:
    if model == "baseline":
        return ModelConfig.baseline(classes, conv_mode=conv_mode or "standard", input_size=input_size)
    return ModelConfig.enhanced(
        classes, conv_mode=conv_mode or "depthwise_separable",
        attention_reduction=reduction, input_size=input_size,
    )


def _parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in str(text).split(","))
    except ValueError:
        raise UsageError(f"--fractions must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--fractions needs exactly three values, got {text!r}")
    return parts


def _focal_alpha(text):
    if str(text) == "inverse_frequency":
        return "inverse_frequency"
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--focal-alpha must be a number or 'inverse_frequency', got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_train(s: dict) -> int:
    if (s["data"] is None) == (s["synth"] is None):
        raise UsageError("train needs exactly one of --data DIR or --synth PRESET")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    if s["synth"]:
        spec = preset_spec(s["synth"], seed=s["seed"])
        data_root = out / "data"
        generate_synthetic(spec, data_root, force=True)
        default_size = max(spec.image_size, 32)
    else:
        data_root = Path(s["data"])
        if not data_root.is_dir():
            raise UsageError(f"data directory {data_root} does not exist")
        default_size = 224
    size = s["input_size"] or default_size
    s = dict(s, input_size=size)
    _print_settings("train", s)

    manifest = scan_image_folder(data_root)
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    fractions = _parse_fractions(s["fractions"])
    split = split_dataset(manifest, fractions, seed=s["seed"])
    manifest.write_csv(out / "manifest.csv")
    split.write_csv(out / "split.csv", manifest)
    sizes = split.sizes()
    print(f"classes: {manifest.class_names}; counts {manifest.class_counts()}; split {sizes}")

    model_cfg = _model_config(s["model"], manifest.num_classes, s["attention_reduction"], s["conv_mode"], size)
    train_cfg = TrainConfig(
        batch_size=s["batch_size"], learning_rate=s["lr"], epochs=s["epochs"],
        loss="focal" if s["loss"] == "focal" else "cross_entropy",
        focal_gamma=s["focal_gamma"], focal_alpha=_focal_alpha(s["focal_alpha"]),
        seed=s["seed"], augment=s["augment"], record_wall_time=not s["no_wall_time"],
    )
    effective = {"cli": s, "model_config": model_cfg.to_dict(), "train_config": train_cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    train = ImageSource(manifest, split.indices("train"), size)
    val = ImageSource(manifest, split.indices("val"), size)
    model = build_model(model_cfg, seed=s["seed"])
    print(f"model: {s['model']} ({count_parameters(model)} parameters)")
    resume = load_checkpoint(s["resume"]) if s["resume"] else None
    meta = {
        "class_names": manifest.class_names, "input_size": size, "mean": DEFAULT_MEAN, "std": DEFAULT_STD,
        "split_seed": s["seed"], "fractions": list(fractions),
    }
    with CsvMetricsSink(out / "metrics.csv", append=resume is not None) as sink:

        def report(rec):
            sink(rec)
            print(f"epoch {rec.epoch:3d} {rec.split:5s} loss {rec.loss:.4f} acc {rec.accuracy:.4f} "
                  f"prec {rec.precision:.4f} rec {rec.recall:.4f}")

        result = fit(model, train, val, train_cfg, sinks=[report], checkpoint_dir=out,
                     resume=resume, extra_meta=meta)
    test = ImageSource(manifest, split.indices("test"), size)
    rec, metrics = evaluate(model, test, resolve_loss(train_cfg, train.labels, manifest.num_classes),
                            train_cfg.batch_size, split="test")
    (out / "test_metrics.json").write_text(metrics.to_json(indent=2) + "\n", encoding="utf-8")
    print(_styled(
        f"test: accuracy {metrics.accuracy:.4f} precision {metrics.precision:.4f} recall {metrics.recall:.4f}",
        "1",
    ))
    print(f"best val accuracy {result.best_val_accuracy:.4f} at epoch {result.best_epoch}; outputs in {out}")
    return EXIT_OK


def _load_model(path) -> tuple:
    ckpt = load_checkpoint(path)
    if "model_config" not in ckpt.meta:
        raise CheckpointMismatchError(f"{path} carries no model configuration")
    model = build_model(ModelConfig.from_dict(ckpt.meta["model_config"]))
    load_model_state(model, ckpt.tensors)
    model.eval()
    return model, ckpt


def cmd_evaluate(s: dict) -> int:
    for key in ("checkpoint", "data"):
        if not s[key]:
            raise UsageError(f"evaluate requires --{key}")
    _print_settings("evaluate", s)
    model, ckpt = _load_model(s["checkpoint"])
    root = Path(s["data"])
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    manifest = scan_image_folder(root)
    if manifest.num_classes != model.config.num_classes:
        raise CheckpointMismatchError(
            f"checkpoint has {model.config.num_classes} classes but {root} has {manifest.num_classes}"
        )
    if s["split_file"]:
        split = SplitAssignment.read_csv(s["split_file"], manifest)
    else:
        fractions = tuple(ckpt.meta.get("fractions", (0.7, 0.1, 0.2)))
        split = split_dataset(manifest, fractions, seed=int(ckpt.meta.get("split_seed", 0)))
    size = int(ckpt.meta.get("input_size", model.config.input_size))
    source = ImageSource(manifest, split.indices(s["split"]), size,
                         ckpt.meta.get("mean", DEFAULT_MEAN), ckpt.meta.get("std", DEFAULT_STD))
    rec, metrics = evaluate(model, source, "cross_entropy", split=s["split"])
    payload = dict(metrics.to_dict(), split=s["split"], samples=len(source), loss=rec.loss)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if s["out"]:
        Path(s["out"]).write_text(text, encoding="utf-8")
    print(f"{s['split']}: n={len(source)} accuracy {metrics.accuracy:.4f} "
          f"precision {metrics.precision:.4f} recall {metrics.recall:.4f}")
    return EXIT_OK


def cmd_gradcam(s: dict) -> int:
    for key in ("checkpoint", "image", "out"):
        if not s[key]:
            raise UsageError(f"gradcam requires --{key}")
    _print_settings("gradcam", s)
    model, ckpt = _load_model(s["checkpoint"])
    class_arg = str(s["class_"])
    if class_arg == "predicted":
        class_index = None
    else:
        try:
            class_index = int(class_arg)
        except ValueError:
            raise UsageError(f"--class must be an integer or 'predicted', got {class_arg!r}") from None
        if not 0 <= class_index < model.config.num_classes:
            raise UsageError(f"--class {class_index} outside [0, {model.config.num_classes})")
    out = Path(s["out"])
    if not out.parent.is_dir() or not os.access(out.parent, os.W_OK):
        raise UsageError(f"cannot write to {out}")
    gray = read_grayscale(s["image"])
    size = int(ckpt.meta.get("input_size", model.config.input_size))
    x = preprocess(gray, size, ckpt.meta.get("mean", DEFAULT_MEAN), ckpt.meta.get("std", DEFAULT_STD))
    result = grad_cam(model, Tensor(x[None]), class_index, s["layer"])
    heat = result.heatmap
    if heat.shape != gray.shape:
        heat = np.clip(bilinear_resize(heat, *gray.shape), 0.0, 1.0)
    export_overlay(gray, heat, out)
    if s["heatmap_csv"]:
        save_heatmap_csv(result.heatmap, s["heatmap_csv"])
    names = ckpt.meta.get("class_names") or [str(i) for i in range(model.config.num_classes)]
    probs = result.probabilities
    print(f"predicted class {result.predicted} ({names[result.predicted]}) score {probs[result.predicted]:.4f}")
    print(f"heatmap for class {result.class_index} at layer {result.layer} written to {out}")
    return EXIT_OK


def cmd_params(s: dict) -> int:
    _print_settings("params", s)
    cfg = _model_config(s["model"], s["classes"], s["attention_reduction"], s["conv_mode"], s["input_size"])
    model = build_model(cfg)
    summary = summarize(model)
    if s["json"]:
        print(summary.to_json())
    else:
        print(summary.to_text())
    print(f"parameters: {count_parameters(model)}")
    return EXIT_OK


def cmd_synth(s: dict) -> int:
    if not s["out"]:
        raise UsageError("synth requires --out")
    _print_settings("synth", s)
    spec = preset_spec(s["preset"], seed=s["seed"])
    manifest = generate_synthetic(spec, s["out"], force=s["force"])
    counts = manifest.class_counts()
    print("counts: " + "/".join(str(c) for c in counts))
    for name, c in zip(manifest.class_names, counts):
        print(f"  {name}: {c}")
    print(f"wrote {len(manifest)} images and manifest.csv to {s['out']}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "gradcam": cmd_gradcam,
            "params": cmd_params, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](settings)
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, AttCDCNetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
