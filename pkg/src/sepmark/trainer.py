"""End-to-end combined training.

Each step: sample fresh random message bits, embed them, draw three noised
batches from the pool (mixed, common-only, malicious-only), decode, then run
one Adam update of the main networks followed by one Adam update of the
discriminator. The tracer only ever sees the mixed batch; the detector sees
the common and malicious batches with their respective targets.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import datasets
from .config import ConfigError
from .distortions import NoisePool, default_pool, sample_batches
from .losses import (LossReport, LossWeights, loss_adversarial_for_encoder,
                     loss_detector_common, loss_detector_malicious, loss_discriminator,
                     loss_encoder, loss_tracer, total_loss)
from .messages import bit_error_ratio, encode_message, random_bits
from .networks import ArchConfig, ModelBundle, build_models, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

BOTH_DECODERS = frozenset(("tracer", "detector"))


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or an inconsistent stage setup."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    alpha: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pool: NoisePool = field(default_factory=default_pool)
    seed: int = 0
    checkpoint_interval: int = 10
    val_size: int = 256


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def signal_messages(rng: np.random.Generator, batch: int, length: int, alpha: float,
                    dtype=torch.float32) -> torch.Tensor:
    bits = random_bits(rng, length, batch=batch)
    return torch.as_tensor(encode_message(bits, alpha), dtype=dtype)


def _dump_diagnostics(dump_dir, step: int, tensors: dict) -> str:
    if dump_dir is None:
        return "(no dump dir configured)"
    path = Path(dump_dir) / f"diagnostic_step{step}.pt"
    torch.save({k: (v.detach() if isinstance(v, torch.Tensor) else v) for k, v in tensors.items()}, path)
    return str(path)


def train_step(bundle: ModelBundle, cover: torch.Tensor, rng: np.random.Generator,
               cfg: TrainConfig, opt_main, opt_disc, *,
               active: frozenset = BOTH_DECODERS, train_encoder: bool = True,
               train_disc: bool = True, dump_dir=None, step: int = 0) -> LossReport:
    """One main update and one discriminator update on a single cover batch."""
    m_en = signal_messages(rng, cover.shape[0], bundle.arch.message_length, cfg.alpha, cover.dtype)
    encoded = bundle.encode(cover, m_en)
    mixed, common, malicious = sample_batches(cfg.pool, encoded, rng, cover)

    zero = cover.new_zeros(())
    en = loss_encoder(cover, encoded) if train_encoder else zero
    tr = loss_tracer(m_en, bundle.decode_trace(mixed)) if "tracer" in active else zero
    de1 = loss_detector_common(m_en, bundle.decode_detect(common)) if "detector" in active else zero
    de2 = loss_detector_malicious(bundle.decode_detect(malicious)) if "detector" in active else zero
    if train_encoder:
        ad2 = loss_adversarial_for_encoder(bundle.discriminate(cover), bundle.discriminate(encoded))
    else:
        ad2 = zero
    total = total_loss(en, tr, de1, de2, ad2, cfg.weights)
    if not torch.isfinite(total):
        where = _dump_diagnostics(dump_dir, step, {
            "cover": cover, "message": m_en, "encoded": encoded,
            "losses": {k: float(v) for k, v in
                       (("en", en), ("tr", tr), ("de1", de1), ("de2", de2), ("ad2", ad2))},
        })
        raise TrainingError(f"non-finite total loss at step {step}; inputs dumped to {where}")

    opt_main.zero_grad(set_to_none=True)
    total.backward()
    opt_main.step()

    ad1 = zero
    if train_disc:
        ad1 = loss_discriminator(bundle.discriminate(cover), bundle.discriminate(encoded.detach()))
        if not torch.isfinite(ad1):
            where = _dump_diagnostics(dump_dir, step, {"cover": cover, "encoded": encoded})
            raise TrainingError(f"non-finite discriminator loss at step {step}; dumped to {where}")
        opt_disc.zero_grad(set_to_none=True)
        ad1.backward()
        opt_disc.step()

    scalars = [float(t.detach()) for t in (en, tr, de1, de2, ad1, ad2, total)]
    return LossReport(*scalars)


def validate(bundle: ModelBundle, val_ds, cfg: TrainConfig, batch_size: int | None = None) -> dict:
    """Fixed-seed validation pass: encoder PSNR plus decoder BERs per batch regime."""
    from .evaluator import psnr  # local import keeps module load light

    rng = np.random.default_rng((cfg.seed, 0xA11))
    sums = {"psnr": 0.0, "tracer_identity": 0.0, "tracer_mixed": 0.0,
            "detector_common": 0.0, "detector_malicious": 0.0}
    batches = 0
    with torch.no_grad():
        for cover, _ids in datasets.iter_batches(val_ds, batch_size or cfg.batch_size):
            m_en = signal_messages(rng, cover.shape[0], bundle.arch.message_length, cfg.alpha)
            encoded = bundle.encode(cover, m_en)
            mixed, common, malicious = sample_batches(cfg.pool, encoded, rng, cover)
            sums["psnr"] += psnr(cover, encoded)
            sums["tracer_identity"] += bit_error_ratio(m_en, bundle.decode_trace(encoded))
            sums["tracer_mixed"] += bit_error_ratio(m_en, bundle.decode_trace(mixed))
            sums["detector_common"] += bit_error_ratio(m_en, bundle.decode_detect(common))
            sums["detector_malicious"] += bit_error_ratio(m_en, bundle.decode_detect(malicious))
            batches += 1
    if batches == 0:
        return {}
    return {k: v / batches for k, v in sums.items()}


def _run_epochs(bundle: ModelBundle, cfg: TrainConfig, train_ds, val_ds, out_dir: Path, *,
                epochs: int, active: frozenset, train_encoder: bool, train_disc: bool,
                opt_main, opt_disc, rng: np.random.Generator, start_epoch: int,
                start_step: int, metrics_path: Path, checkpoint_dir: Path) -> int:
    step = start_step
    with metrics_path.open("a") as metrics:
        for epoch in range(start_epoch + 1, epochs + 1):
            began = time.time()
            for cover, _ids in datasets.iter_batches(
                    train_ds, cfg.batch_size, seed=int(rng.integers(2 ** 31))):
                step += 1
                report = train_step(bundle, cover, rng, cfg, opt_main, opt_disc,
                                    active=active, train_encoder=train_encoder,
                                    train_disc=train_disc, dump_dir=out_dir, step=step)
                metrics.write(report.as_line(step) + "\n")
            val = validate(bundle, val_ds, cfg)
            val_line = " ".join(f"val_{k}={v:.4f}" for k, v in val.items())
            metrics.write(f"epoch={epoch} step={step} {val_line}\n")
            metrics.flush()
            log.info("epoch %d/%d done in %.1fs %s", epoch, epochs, time.time() - began, val_line)
            if epoch % cfg.checkpoint_interval == 0 or epoch == epochs:
                _save(bundle, cfg, checkpoint_dir, epoch, step, opt_main, opt_disc, rng)
    return step


def _save(bundle, cfg, checkpoint_dir: Path, epoch: int, step: int, opt_main, opt_disc,
          rng: np.random.Generator) -> Path:
    path = checkpoint_dir / f"sepmark_e{epoch}.ckpt"
    extra = {
        "epoch": epoch,
        "step": step,
        "train_config": json.dumps(asdict(cfg)),
        "optimizer_main": opt_main.state_dict(),
        "optimizer_disc": opt_disc.state_dict(),
        "rng_state": rng.bit_generator.state,
    }
    save_checkpoint(bundle, path, extra)
    log.info("checkpoint written: %s", path)
    return path


def train(cfg: TrainConfig, dataset, out_dir, manifest: datasets.SplitManifest | None = None,
          resume: str | Path | None = None) -> ModelBundle:
    """Full combined training; returns the trained bundle.

    Writes metrics.log, the split manifest, and periodic checkpoints named
    sepmark_e<epoch>.ckpt under out_dir. `resume` continues the step counter
    and restores optimizer and RNG state when the checkpoint carries them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        manifest = datasets.split(dataset, seed=cfg.seed)
    manifest.save(out / "manifest.tsv")
    train_ds = dataset.subset(manifest.train)
    val_ds = dataset.subset(manifest.val[:cfg.val_size])
    if len(train_ds) == 0:
        raise datasets.DatasetError("training split is empty")

    start_epoch = 0
    start_step = 0
    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        bundle, extra = load_checkpoint(resume)
        start_epoch = int(extra.get("epoch", 0))
        start_step = int(extra.get("step", 0))
        opt_main = _make_optimizer(bundle.main_parameters(), cfg)
        opt_disc = _make_optimizer(bundle.discriminator.parameters(), cfg)
        if "optimizer_main" in extra:
            opt_main.load_state_dict(extra["optimizer_main"])
            opt_disc.load_state_dict(extra["optimizer_disc"])
        else:
            log.warning("resume checkpoint has no optimizer state: fresh-optimizer restart")
            (out / "metrics.log").open("a").write(
                f"resume={resume} note=fresh-optimizer-restart\n")
        if "rng_state" in extra:
            rng.bit_generator.state = extra["rng_state"]
    else:
        bundle = build_models(cfg.arch)
        opt_main = _make_optimizer(bundle.main_parameters(), cfg)
        opt_disc = _make_optimizer(bundle.discriminator.parameters(), cfg)

    if cfg.epochs <= start_epoch:
        _save(bundle, cfg, out, start_epoch, start_step, opt_main, opt_disc, rng)
        return bundle

    _run_epochs(bundle, cfg, train_ds, val_ds, out,
                epochs=cfg.epochs, active=BOTH_DECODERS, train_encoder=True, train_disc=True,
                opt_main=opt_main, opt_disc=opt_disc, rng=rng, start_epoch=start_epoch,
                start_step=start_step, metrics_path=out / "metrics.log", checkpoint_dir=out)
    return bundle


_STAGE_ORDERS = {
    "tracer-first": ("tracer", "detector"),
    "detector-first": ("detector", "tracer"),
}


def train_two_stage(cfg: TrainConfig, dataset, order: str, out_dir,
                    manifest: datasets.SplitManifest | None = None) -> ModelBundle:
    """Ablation protocol: joint training with one decoder, then the other alone.

    Stage 1 trains encoder + first decoder + discriminator for cfg.epochs.
    Stage 2 freezes everything except the second decoder and trains it for an
    equal epoch budget.
    """
    if order not in _STAGE_ORDERS:
        raise ConfigError(f"order must be one of {sorted(_STAGE_ORDERS)}, got {order!r}")
    first, second = _STAGE_ORDERS[order]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        manifest = datasets.split(dataset, seed=cfg.seed)
    manifest.save(out / "manifest.tsv")
    train_ds = dataset.subset(manifest.train)
    val_ds = dataset.subset(manifest.val[:cfg.val_size])

    bundle = build_models(cfg.arch)
    rng = np.random.default_rng(cfg.seed)
    decoders = {"tracer": bundle.tracer, "detector": bundle.detector}

    stage1_dir = out / "stage1"
    stage1_dir.mkdir(exist_ok=True)
    opt_main = _make_optimizer(
        list(bundle.encoder.parameters()) + list(decoders[first].parameters()), cfg)
    opt_disc = _make_optimizer(bundle.discriminator.parameters(), cfg)
    step = _run_epochs(bundle, cfg, train_ds, val_ds, stage1_dir,
                       epochs=cfg.epochs, active=frozenset((first,)), train_encoder=True,
                       train_disc=True, opt_main=opt_main, opt_disc=opt_disc, rng=rng,
                       start_epoch=0, start_step=0, metrics_path=stage1_dir / "metrics.log",
                       checkpoint_dir=stage1_dir)

    stage2_dir = out / "stage2"
    stage2_dir.mkdir(exist_ok=True)
    frozen = [bundle.encoder, bundle.discriminator, decoders[first]]
    for net in frozen:
        net.requires_grad_(False)
    try:
        opt_second = _make_optimizer(decoders[second].parameters(), cfg)
        _run_epochs(bundle, cfg, train_ds, val_ds, stage2_dir,
                    epochs=cfg.epochs, active=frozenset((second,)), train_encoder=False,
                    train_disc=False, opt_main=opt_second, opt_disc=opt_disc, rng=rng,
                    start_epoch=0, start_step=step, metrics_path=stage2_dir / "metrics.log",
                    checkpoint_dir=stage2_dir)
    finally:
        for net in frozen:
            net.requires_grad_(True)

    save_checkpoint(bundle, out / f"sepmark_e{2 * cfg.epochs}.ckpt",
                    {"epoch": 2 * cfg.epochs, "step": step,
                     "train_config": json.dumps(asdict(cfg)), "order": order})
    return bundle
