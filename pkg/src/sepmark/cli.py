"""Command-line surface: synth, train, embed, extract, verify, evaluate.

Exit codes: 0 success (and all-genuine for verify), 1 usage/config/data
error, 2 verify saw at least one forged image - so the verify command can
gate a pipeline directly. Marked images are only ever written as PNG to
avoid recompression on the save path.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import datasets, evaluator, synth, trainer
from .config import ConfigError, read_config_file, resolve, write_config_file
from .distortions import DistortionError, DistortionSpec, default_pool
from .losses import LossWeights
from .messages import MessageError, binarize, bits_to_hex, hex_to_bits, random_bits
from .networks import ArchConfig, CheckpointError, ShapeError, load_checkpoint

log = logging.getLogger(__name__)

TRAIN_SCHEMA: dict[str, tuple[type, object]] = {
    "data_dir": (str, ""),
    "out_dir": (str, "runs/train"),
    "image_size": (int, 64),
    "message_length": (int, 16),
    "base_channels": (int, 32),
    "down_levels": (int, 2),
    "alpha": (float, 0.1),
    "epochs": (int, 100),
    "batch_size": (int, 16),
    "lr": (float, 2e-4),
    "beta1": (float, 0.5),
    "beta2": (float, 0.999),
    "lambda_ad2": (float, 0.1),
    "lambda_en": (float, 1.0),
    "lambda_tr": (float, 10.0),
    "lambda_de1": (float, 10.0),
    "lambda_de2": (float, 10.0),
    "seed": (int, 0),
    "checkpoint_interval": (int, 10),
    "val_size": (int, 256),
    "split_train": (float, 0.8),
    "split_val": (float, 0.1),
    "split_test": (float, 0.1),
    "external_malicious_command": (str, ""),
    "external_timeout": (float, 120.0),
}

_USER_ERRORS = (ConfigError, MessageError, ShapeError, CheckpointError,
                DistortionError, datasets.DatasetError, trainer.TrainingError, OSError)


def _build_pool(seed: int, external_command: str = "", external_timeout: float = 120.0):
    pool = default_pool(seed)
    if external_command:
        pool.malicious.append(DistortionSpec(
            "External", "malicious",
            {"command": external_command, "timeout": external_timeout}))
    return pool


def _train_config_from(resolved: dict) -> trainer.TrainConfig:
    arch = ArchConfig(
        image_size=resolved["image_size"],
        message_length=resolved["message_length"],
        base_channels=resolved["base_channels"],
        down_levels=resolved["down_levels"],
        alpha=resolved["alpha"],
        seed=resolved["seed"],
    )
    weights = LossWeights(
        ad2=resolved["lambda_ad2"], en=resolved["lambda_en"], tr=resolved["lambda_tr"],
        de1=resolved["lambda_de1"], de2=resolved["lambda_de2"])
    pool = _build_pool(resolved["seed"], resolved["external_malicious_command"],
                       resolved["external_timeout"])
    return trainer.TrainConfig(
        epochs=resolved["epochs"], batch_size=resolved["batch_size"], lr=resolved["lr"],
        beta1=resolved["beta1"], beta2=resolved["beta2"], alpha=resolved["alpha"],
        weights=weights, arch=arch, pool=pool, seed=resolved["seed"],
        checkpoint_interval=resolved["checkpoint_interval"], val_size=resolved["val_size"])


def cmd_train(args) -> int:
    pairs = read_config_file(args.config) if args.config else {}
    overrides = {"data_dir": args.data, "out_dir": args.out, "seed": args.seed,
                 "epochs": args.epochs}
    resolved = resolve(TRAIN_SCHEMA, pairs, overrides)
    if not resolved["data_dir"]:
        raise ConfigError("no data_dir configured (config key data_dir or --data)")
    cfg = _train_config_from(resolved)
    out = Path(resolved["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "config.resolved.cfg", resolved)
    dataset = datasets.ingest(resolved["data_dir"], resolved["image_size"])
    ratios = (resolved["split_train"], resolved["split_val"], resolved["split_test"])
    manifest = datasets.split(dataset, ratios=ratios, seed=resolved["seed"])
    log.info("corpus: %d images (train %d / val %d / test %d)", len(dataset),
             len(manifest.train), len(manifest.val), len(manifest.test))
    if args.two_stage:
        trainer.train_two_stage(cfg, dataset, args.two_stage, out, manifest=manifest)
    else:
        trainer.train(cfg, dataset, out, manifest=manifest, resume=args.resume)
    print(f"training complete; outputs in {out}")
    return 0


def cmd_synth(args) -> int:
    names = synth.generate_face_corpus(args.out, args.count, size=args.size, seed=args.seed)
    print(f"wrote {len(names)} images to {args.out}")
    return 0


def _load_bundle(path):
    bundle, _extra = load_checkpoint(path)
    for net in bundle.networks().values():
        net.eval()
    return bundle


def cmd_embed(args) -> int:
    bundle = _load_bundle(args.ckpt)
    length = bundle.arch.message_length
    rng = np.random.default_rng(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar_lines = []
    with torch.no_grad():
        for image_path in args.images:
            cover = datasets.load_image(image_path).unsqueeze(0)
            if args.random:
                bits = random_bits(rng, length)
            else:
                bits = hex_to_bits(args.message, length)
            message = torch.as_tensor(bits[None, :] * 2.0 - 1.0, dtype=cover.dtype) * bundle.arch.alpha
            marked = bundle.encode(cover, message)
            name = Path(image_path).stem + "_marked.png"
            datasets.save_image(marked[0], out_dir / name)
            quality = evaluator.psnr(cover, marked)
            sidecar_lines.append(f"file={name} message={bits_to_hex(bits)} alpha={bundle.arch.alpha}")
            print(f"file={name} psnr={quality:.2f}dB message={bits_to_hex(bits)}")
    sidecar = out_dir / "messages.txt"
    with sidecar.open("a") as fh:
        fh.write("\n".join(sidecar_lines) + "\n")
    return 0


def cmd_extract(args) -> int:
    bundle = _load_bundle(args.ckpt)
    with torch.no_grad():
        for image_path in args.images:
            image = datasets.load_image(image_path).unsqueeze(0)
            fields = [f"file={Path(image_path).name}"]
            if args.decoder in ("tracer", "both"):
                fields.append(f"tracer={bits_to_hex(binarize(bundle.decode_trace(image)[0]))}")
            if args.decoder in ("detector", "both"):
                fields.append(f"detector={bits_to_hex(binarize(bundle.decode_detect(image)[0]))}")
            print(" ".join(fields))
    return 0


def cmd_verify(args) -> int:
    bundle = _load_bundle(args.ckpt)
    length = bundle.arch.message_length
    expected = hex_to_bits(args.expected, length) if args.expected else None
    any_forged = False
    with torch.no_grad():
        for image_path in args.images:
            image = datasets.load_image(image_path).unsqueeze(0)
            m_tr = bundle.decode_trace(image)[0]
            m_de = bundle.decode_detect(image)[0]
            result = evaluator.verdict(m_tr, m_de, threshold=args.threshold)
            any_forged |= result.decision == "forged"
            fields = [
                f"file={Path(image_path).name}",
                f"decision={result.decision}",
                f"evidence={result.evidence:.2f}%",
                f"threshold={result.threshold_used:.2f}%",
                f"source={bits_to_hex(result.source_bits)}",
            ]
            if expected is not None:
                match = bool((result.source_bits == expected).all())
                fields.append(f"source_match={'yes' if match else 'no'}")
            print(" ".join(fields))
    return 2 if any_forged else 0


def cmd_evaluate(args) -> int:
    bundle = _load_bundle(args.ckpt)
    pool = _build_pool(args.seed, args.external_command, args.external_timeout)
    dataset = datasets.ingest(args.test_dir, bundle.arch.image_size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports: list[tuple[str, str]] = []

    rows = evaluator.robustness_sweep(bundle, dataset, pool, seed=args.seed,
                                      batch_size=args.batch_size)
    reports.append(("robustness", evaluator.format_table(rows, title="Robustness")))
    (out_dir / "robustness.dat").write_text(evaluator.format_machine(rows) + "\n")

    if args.pristine:
        rows = evaluator.pristine_study(bundle, dataset, pool, seed=args.seed,
                                        batch_size=args.batch_size)
        reports.append(("pristine", evaluator.format_table(rows, title="Pristine (never marked)")))
        (out_dir / "pristine.dat").write_text(evaluator.format_machine(rows) + "\n")

    if args.cross_size:
        sizes = [int(s) for s in args.cross_size.split(",") if s]
        by_size = {size: datasets.ingest(args.test_dir, size) for size in sizes}
        for report in evaluator.cross_size_study(bundle, by_size, pool, seed=args.seed,
                                                 batch_size=max(args.batch_size // 2, 1)):
            title = f"Cross-size {report.size}x{report.size} (encoder PSNR {report.psnr:.2f}dB)"
            reports.append((f"cross_size_{report.size}", evaluator.format_table(report.rows, title=title)))
            (out_dir / f"cross_size_{report.size}.dat").write_text(
                evaluator.format_machine(report.rows) + "\n")

    text = "\n\n".join(body for _name, body in reports) + "\n"
    (out_dir / "report.txt").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepmark", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", help="key=value config file (see presets/)")
    p.add_argument("--data", help="override data_dir")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--epochs", type=int, help="override epochs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--two-stage", choices=("tracer-first", "detector-first"),
                   help="ablation protocol: one decoder, then the other")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="generate a procedural face-crop corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2600)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed", help="embed a message into images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--message", help="hex message of the model's configured length")
    group.add_argument("--random", action="store_true", help="fresh random message per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="read messages back out of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--decoder", choices=("tracer", "detector", "both"), default="both")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="genuine/forged verdict per image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--expected", help="hex message the source is expected to carry")
    p.add_argument("--threshold", type=float, default=evaluator.DEFAULT_VERDICT_THRESHOLD)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("evaluate", help="robustness tables over a test directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--out", default="runs/evaluate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--pristine", action="store_true", help="add the never-marked study")
    p.add_argument("--cross-size", help="comma-separated extra sizes, e.g. 128,256")
    p.add_argument("--external-command", default="", help="external malicious channel command")
    p.add_argument("--external-timeout", type=float, default=120.0)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    if os.environ.get("SEPMARK_BACKEND_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True, warn_only=True)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
