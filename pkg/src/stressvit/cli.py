"""Command-line entry point for the two classification workflows.

Subcommands: synth, train, eval, extract-features, svm-train, svm-eval,
attn, kfold. Every run writes a manifest (resolved config, seeds, input and
output hashes, timestamps) next to its artifacts; identical flags, seeds and
inputs produce byte-identical artifacts. Failures print a machine-readable
error JSON on stderr and exit nonzero; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .attention_maps import write_overlays
from .data import (
    SynthConfig,
    dataset_windows,
    load_dataset,
    save_dataset,
    synthesize_dataset,
    windows_to_arrays,
)
from .metrics import roc_to_csv
from .ppm import read_ppm
from .svm import (
    KernelSpec,
    SvmTrainConfig,
    decision_scores,
    load_model,
    predict_many,
    read_features,
    save_model,
    train as svm_train,
    write_features,
)
from .training import (
    ScenarioConfig,
    checkpoint_load,
    checkpoint_save,
    evaluate_model,
    kfold_evaluate,
    run_training,
)
from .vit import ViTModel, pooled_representation, preset_config, vit_forward


def _default_seed() -> int:
    return int(os.environ.get("STRESSVIT_SEED", "0"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stressvit",
        description="vision-transformer stress classification workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic field dataset")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--images", type=int, default=40)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--healthy", type=int, default=3, help="healthy regions per image")
    p.add_argument("--stressed", type=int, default=2, help="stressed regions per image")
    p.add_argument("--noise", type=int, default=10, help="pixel noise amplitude")

    p = sub.add_parser("train", help="fine-tune a model on a dataset")
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="starting weights (transfer learning)")
    p.add_argument("--val-fraction", type=float, default=0.1)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", default="tiny", help="model preset the checkpoint fits")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("extract-features", help="pooled features to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", default="tiny")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="feature CSV path")

    p = sub.add_parser("svm-train", help="train the SVM on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--kernel", choices=["rbf", "linear"], default="rbf")
    p.add_argument("--gamma", default="scale", help="'scale' or a positive number")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("svm-eval", help="evaluate an SVM model on a feature CSV")
    p.add_argument("--model", required=True, help="SVM model JSON")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("attn", help="per-layer attention overlays for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", default="tiny")
    p.add_argument("--image", required=True, help="PPM image to explain")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--alpha", type=float, default=0.5)

    p = sub.add_parser("kfold", help="cross-validate the ViT-feature + SVM pipeline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model", default="tiny")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--C", type=float, default=1.0)

    return parser


def parse_cli(argv):
    """Parse argv into a command namespace; exits 2 on usage errors."""
    return build_parser().parse_args(argv)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class _Manifest:
    def __init__(self, command: str, config: dict):
        self.data = {
            "command": command,
            "config": config,
            "inputs": {},
            "outputs": {},
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }

    def add_input(self, path):
        path = Path(path)
        if path.is_dir():
            for child in sorted(path.rglob("*")):
                if child.is_file():
                    self.data["inputs"][str(child)] = _sha256(child)
        else:
            self.data["inputs"][str(path)] = _sha256(path)

    def add_output(self, path):
        self.data["outputs"][str(path)] = _sha256(path)

    def write(self, directory) -> Path:
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        for path in self.data["outputs"]:
            if not Path(path).is_file():
                raise RuntimeError(f"declared output {path} was not written")
        out = Path(directory) / "run_manifest.json"
        with open(out, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
        return out


def _load_vit(checkpoint: str, preset: str) -> ViTModel:
    return checkpoint_load(checkpoint, preset_config(preset))


def _dataset_arrays(data_dir: str, image_size: int):
    windows = dataset_windows(load_dataset(data_dir))
    if not windows:
        raise ValueError(f"no annotated windows found under {data_dir}")
    return windows_to_arrays(windows, image_size)


def _write_json(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_synth(args, manifest):
    cfg = SynthConfig(image_size=args.image_size, healthy_regions=args.healthy,
                      stressed_regions=args.stressed, noise_amplitude=args.noise,
                      seed=args.seed)
    images = synthesize_dataset(args.images, cfg)
    out = Path(args.out)
    save_dataset(images, out)
    for image in images:
        manifest.add_output(out / "images" / f"{image.image_id}.ppm")
    manifest.add_output(out / "annotations.csv")
    return out


def _cmd_train(args, manifest):
    scenario = ScenarioConfig.from_json(args.scenario)
    manifest.add_input(args.scenario)
    manifest.add_input(args.data)
    config = preset_config(scenario.model, scenario.attn_dropout, scenario.mlp_dropout)
    X, y = _dataset_arrays(args.data, config.image_size)

    split_rng = np.random.default_rng(scenario.seed)
    perm = split_rng.permutation(len(X))
    n_val = max(1, int(round(args.val_fraction * len(X))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    start = None
    if args.checkpoint:
        manifest.add_input(args.checkpoint)
        start = checkpoint_load(args.checkpoint, config)

    model, log = run_training(scenario, (X[train_idx], y[train_idx]),
                              (X[val_idx], y[val_idx]), model=start)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt"
    checkpoint_save(model, ckpt_path)
    log.checkpoint_path = ckpt_path.name  # relative, keeps run dirs relocatable
    _write_json(log.to_dict(), out / "trainlog.json")
    manifest.add_output(ckpt_path)
    manifest.add_output(out / "trainlog.json")
    return out


def _cmd_eval(args, manifest):
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.data)
    model = _load_vit(args.checkpoint, args.model)
    X, y = _dataset_arrays(args.data, model.config.image_size)
    report = evaluate_model(model, X, y.astype(int))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), out / "eval_report.json")
    roc_to_csv(report.roc, out / "roc.csv")
    manifest.add_output(out / "eval_report.json")
    manifest.add_output(out / "roc.csv")
    return out


def _cmd_extract_features(args, manifest):
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.data)
    model = _load_vit(args.checkpoint, args.model)
    windows = dataset_windows(load_dataset(args.data))
    if not windows:
        raise ValueError(f"no annotated windows found under {args.data}")
    X, y = windows_to_arrays(windows, model.config.image_size)
    features = np.stack([pooled_representation(x, model).data for x in X])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(features, y.astype(int), out)
    manifest.add_output(out)
    return out.parent


def _cmd_svm_train(args, manifest):
    manifest.add_input(args.features)
    X, y = read_features(args.features)
    gamma = args.gamma if args.gamma == "scale" else float(args.gamma)
    config = SvmTrainConfig(C=args.C, tol=args.tol,
                            kernel=KernelSpec(args.kernel, gamma))
    model = svm_train(X, y, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    manifest.add_output(out)
    return out.parent


def _cmd_svm_eval(args, manifest):
    manifest.add_input(args.model)
    manifest.add_input(args.features)
    model = load_model(args.model)
    X, y = read_features(args.features)
    from .metrics import evaluate_predictions

    labels = predict_many(model, X)
    scores = decision_scores(model, X)
    report = evaluate_predictions(labels, scores, y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), out / "eval_report.json")
    roc_to_csv(report.roc, out / "roc.csv")
    manifest.add_output(out / "eval_report.json")
    manifest.add_output(out / "roc.csv")
    return out


def _cmd_attn(args, manifest):
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.image)
    model = _load_vit(args.checkpoint, args.model)
    rgb = read_ppm(args.image)
    size = model.config.image_size
    model_rgb = rgb
    if rgb.shape[:2] != (size, size):
        from .attention_maps import resize_bilinear

        channels = [resize_bilinear(rgb[:, :, c].astype(np.float64), size, size)
                    for c in range(3)]
        model_rgb = np.clip(np.floor(np.stack(channels, axis=-1) + 0.5),
                            0, 255).astype(np.uint8)
    batch = (model_rgb.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]
    _, records = vit_forward(batch, model, capture=True)
    # maps upsample to the original resolution; the overlay keeps its pixels
    out = Path(args.out)
    paths = write_overlays(rgb, records, out, alpha=args.alpha)
    for path in paths:
        manifest.add_output(path)
    return out


def _cmd_kfold(args, manifest):
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.data)
    model = _load_vit(args.checkpoint, args.model)
    windows = dataset_windows(load_dataset(args.data))
    X, y = windows_to_arrays(windows, model.config.image_size)
    features = np.stack([pooled_representation(x, model).data for x in X])
    config = SvmTrainConfig(C=args.C)

    report = kfold_evaluate(
        lambda Xt, yt: svm_train(Xt, yt, config),
        lambda m, Xe: (predict_many(m, Xe), decision_scores(m, Xe)),
        features, y.astype(int), k=args.k, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(report.to_dict(), out / "cv_report.json")
    manifest.add_output(out / "cv_report.json")
    return out


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "extract-features": _cmd_extract_features,
    "svm-train": _cmd_svm_train,
    "svm-eval": _cmd_svm_eval,
    "attn": _cmd_attn,
    "kfold": _cmd_kfold,
}


def run_command(args) -> int:
    """Execute a parsed command; returns the exit code."""
    config = {k: v for k, v in vars(args).items() if k != "command"}
    manifest = _Manifest(args.command, config)
    manifest_dir = _COMMANDS[args.command](args, manifest)
    manifest.write(manifest_dir)
    return 0


def main(argv=None) -> int:
    args = parse_cli(sys.argv[1:] if argv is None else argv)
    try:
        return run_command(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
