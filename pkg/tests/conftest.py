import numpy as np
import pytest
import torch

from sepmark import datasets, trainer
from sepmark.distortions import DistortionSpec, NoisePool, apply_distortion
from sepmark.losses import LossWeights
from sepmark.messages import bit_error_ratio
from sepmark.networks import ArchConfig, build_models, save_checkpoint
from sepmark.synth import generate_face_corpus


@pytest.fixture(scope="session")
def face_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("faces")
    generate_face_corpus(root, 48, size=32, seed=5)
    return root


@pytest.fixture(scope="session")
def micro_face_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("faces16")
    generate_face_corpus(root, 256, size=16, seed=9)
    return root


@pytest.fixture()
def tiny_arch():
    return ArchConfig(image_size=32, message_length=8, base_channels=8,
                      down_levels=2, alpha=0.1, seed=3)


@pytest.fixture()
def tiny_bundle(tiny_arch):
    return build_models(tiny_arch)


def micro_train_config(seed: int = 11) -> trainer.TrainConfig:
    """Fast-converging toy setup: 16px images, 8-bit messages, two channels."""
    arch = ArchConfig(image_size=16, message_length=8, base_channels=8,
                      down_levels=1, alpha=0.3, seed=seed)
    pool = NoisePool(
        common=[DistortionSpec("Identity", "common", {}, differentiable=True)],
        malicious=[DistortionSpec("RegionOverwrite", "malicious",
                                  {"blend": 1.0, "region": 0.6, "feather": 0.2})],
        sampler_seed=seed,
    )
    return trainer.TrainConfig(
        epochs=1, batch_size=16, lr=1e-3, alpha=0.3,
        weights=LossWeights(ad2=0.05), arch=arch, pool=pool, seed=seed,
        checkpoint_interval=1000, val_size=32)


class MicroModel:
    def __init__(self, bundle, cfg, ckpt_path, corpus_dir, dataset, steps):
        self.bundle = bundle
        self.cfg = cfg
        self.ckpt_path = ckpt_path
        self.corpus_dir = corpus_dir
        self.dataset = dataset
        self.steps = steps


@pytest.fixture(scope="session")
def micro_model(micro_face_dir, tmp_path_factory):
    """A small trained model: exact identity-channel recovery plus a detector
    that collapses on the malicious proxy. Trains in about a minute."""
    cfg = micro_train_config()
    dataset = datasets.ingest(micro_face_dir, 16)
    bundle = build_models(cfg.arch)
    opt_main = torch.optim.Adam(bundle.main_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_disc = torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.lr,
                                betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(cfg.seed)
    probe_cover, _ = datasets.load_batch(dataset, range(64))
    probe_rng = np.random.default_rng(123)
    probe_msg = trainer.signal_messages(probe_rng, 64, 8, cfg.alpha)

    step = 0
    converged = False
    for epoch in range(30):
        for cover, _ids in datasets.iter_batches(dataset, cfg.batch_size, seed=epoch):
            trainer.train_step(bundle, cover, rng, cfg, opt_main, opt_disc, step=step)
            step += 1
            if step >= 200 and step % 50 == 0:
                with torch.no_grad():
                    marked = bundle.encode(probe_cover, probe_msg)
                    tr_ber = bit_error_ratio(probe_msg, bundle.decode_trace(marked))
                    de_ber = bit_error_ratio(probe_msg, bundle.decode_detect(marked))
                    overwritten = apply_distortion(cfg.pool.malicious[0], marked,
                                                   np.random.default_rng(5), probe_cover)
                    mal_ber = bit_error_ratio(probe_msg, bundle.decode_detect(overwritten))
                if tr_ber == 0.0 and de_ber == 0.0 and mal_ber >= 30.0:
                    converged = True
                    break
        if converged or step >= 1500:
            break
    if not converged:
        pytest.fail(f"micro model failed to converge in {step} steps "
                    f"(tracer {tr_ber:.1f}%, detector {de_ber:.1f}%, malicious {mal_ber:.1f}%)")

    ckpt_dir = tmp_path_factory.mktemp("micro_ckpt")
    ckpt_path = ckpt_dir / "micro.ckpt"
    save_checkpoint(bundle, ckpt_path, {"steps": step})
    return MicroModel(bundle, cfg, ckpt_path, micro_face_dir, dataset, step)
