"""Visual-quality metrics, robustness sweeps, and the forensic verdict.

Metrics operate on the 8-bit 0..255 scale regardless of the in-memory
[-1, 1] representation, so a PSNR here is comparable to any other tool's.
Sweeps embed one fresh random message per test image, push the marked image
through every channel in the pool, and report the tracer-vs-embedded,
detector-vs-embedded, and tracer-vs-detector ("both") bit error ratios in
the usual table layout with Average Common / Average Malicious rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import datasets
from .distortions import DistortionError, DistortionSpec, NoisePool, apply_distortion
from .messages import binarize, bit_error_ratio
from .networks import ModelBundle, ShapeError
from .trainer import signal_messages

log = logging.getLogger(__name__)

DEFAULT_VERDICT_THRESHOLD = 25.0


def _to_255(image: torch.Tensor) -> torch.Tensor:
    return (image.detach().to(torch.float64) + 1.0) * (255.0 / 2.0)


def psnr(reference: torch.Tensor, candidate: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB on the 8-bit scale; +inf for identical inputs."""
    if reference.shape != candidate.shape:
        raise ShapeError(f"shape mismatch: {tuple(reference.shape)} vs {tuple(candidate.shape)}")
    mse = float(torch.mean((_to_255(reference) - _to_255(candidate)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, size, size)


def ssim(reference: torch.Tensor, candidate: torch.Tensor,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with a Gaussian window, standard constants."""
    if reference.shape != candidate.shape:
        raise ShapeError(f"shape mismatch: {tuple(reference.shape)} vs {tuple(candidate.shape)}")
    x = _to_255(reference)
    y = _to_255(candidate)
    if x.dim() == 3:
        x = x.unsqueeze(0)
        y = y.unsqueeze(0)
    channels = x.shape[1]
    window = _gaussian_window(window_size, sigma).repeat(channels, 1, 1, 1)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    mu_x = F.conv2d(x, window, groups=channels)
    mu_y = F.conv2d(y, window, groups=channels)
    var_x = F.conv2d(x * x, window, groups=channels) - mu_x ** 2
    var_y = F.conv2d(y * y, window, groups=channels) - mu_y ** 2
    cov = F.conv2d(x * y, window, groups=channels) - mu_x * mu_y
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(score.mean())


@dataclass
class RobustnessRow:
    distortion: str
    tracer_ber: float
    detector_ber: float
    both_ber: float
    error: str | None = None


@dataclass
class ForensicVerdict:
    source_bits: np.ndarray
    decision: str  # "genuine" | "forged"
    evidence: float  # BER(M_tr, M_de) in percent
    threshold_used: float


def verdict(m_tr, m_de, threshold: float = DEFAULT_VERDICT_THRESHOLD) -> ForensicVerdict:
    """Decide genuine vs forged from the two decoder outputs.

    The source is always read off the tracer; the decision only compares the
    decoders, so no knowledge of the embedded message is needed. The boundary
    is inclusive: evidence equal to the threshold still counts as genuine.
    """
    evidence = bit_error_ratio(m_tr, m_de)
    decision = "genuine" if evidence <= threshold else "forged"
    return ForensicVerdict(source_bits=binarize(m_tr), decision=decision,
                           evidence=evidence, threshold_used=threshold)


class _BerAccumulator:
    def __init__(self):
        self.mismatches = {"tracer": 0, "detector": 0, "both": 0}
        self.total_bits = 0

    def add(self, m_en, m_tr, m_de) -> None:
        b_en, b_tr, b_de = binarize(m_en), binarize(m_tr), binarize(m_de)
        self.mismatches["tracer"] += int(np.count_nonzero(b_en ^ b_tr))
        self.mismatches["detector"] += int(np.count_nonzero(b_en ^ b_de))
        self.mismatches["both"] += int(np.count_nonzero(b_tr ^ b_de))
        self.total_bits += b_en.size

    def row(self, name: str) -> RobustnessRow:
        if self.total_bits == 0:
            return RobustnessRow(name, math.nan, math.nan, math.nan, error="no data")
        return RobustnessRow(
            name,
            100.0 * self.mismatches["tracer"] / self.total_bits,
            100.0 * self.mismatches["detector"] / self.total_bits,
            100.0 * self.mismatches["both"] / self.total_bits,
        )


def _average_rows(rows: list[RobustnessRow], specs: list[DistortionSpec], kind: str,
                  label: str) -> RobustnessRow | None:
    names = {s.name for s in specs if s.kind == kind}
    picked = [r for r in rows if r.distortion in names and r.error is None]
    if not picked:
        return None
    return RobustnessRow(
        label,
        float(np.mean([r.tracer_ber for r in picked])),
        float(np.mean([r.detector_ber for r in picked])),
        float(np.mean([r.both_ber for r in picked])),
    )


def robustness_sweep(bundle: ModelBundle, dataset, pool: NoisePool, seed: int = 0,
                     batch_size: int = 16, embed: bool = True) -> list[RobustnessRow]:
    """Per-channel BER table over a test set; `embed=False` gives the pristine study."""
    specs = pool.all_specs()
    accs = {spec.name: _BerAccumulator() for spec in specs}
    errors: dict[str, str] = {}
    rng = np.random.default_rng(seed)
    alpha = bundle.arch.alpha
    with torch.no_grad():
        for cover, _ids in datasets.iter_batches(dataset, batch_size):
            m_en = signal_messages(rng, cover.shape[0], bundle.arch.message_length, alpha)
            marked = bundle.encode(cover, m_en) if embed else cover
            for spec in specs:
                if spec.name in errors:
                    continue
                try:
                    noised = apply_distortion(spec, marked, rng, cover)
                except (DistortionError, OSError) as exc:
                    errors[spec.name] = str(exc)
                    log.warning("channel %s failed, skipping: %s", spec.name, exc)
                    continue
                accs[spec.name].add(m_en, bundle.decode_trace(noised), bundle.decode_detect(noised))
    rows = []
    for spec in specs:
        if spec.name in errors:
            rows.append(RobustnessRow(spec.name, math.nan, math.nan, math.nan, error=errors[spec.name]))
        else:
            rows.append(accs[spec.name].row(spec.name))
    for kind, label in (("common", "Average Common"), ("malicious", "Average Malicious")):
        avg = _average_rows(rows, specs, kind, label)
        if avg is not None:
            rows.append(avg)
    return rows


def pristine_study(bundle: ModelBundle, dataset, pool: NoisePool, seed: int = 0,
                   batch_size: int = 16) -> list[RobustnessRow]:
    """Run both decoders on never-marked images; only the Both column is meaningful."""
    return robustness_sweep(bundle, dataset, pool, seed=seed, batch_size=batch_size, embed=False)


@dataclass
class SizeReport:
    size: int
    psnr: float
    rows: list[RobustnessRow] = field(default_factory=list)


def cross_size_study(bundle: ModelBundle, datasets_by_size: dict[int, object], pool: NoisePool,
                     seed: int = 0, batch_size: int = 8) -> list[SizeReport]:
    """Evaluate a fixed-size-trained bundle at other input sizes without retraining."""
    reports = []
    for size in sorted(datasets_by_size):
        ds = datasets_by_size[size]
        rng = np.random.default_rng((seed, size))
        psnr_sum, batches = 0.0, 0
        with torch.no_grad():
            for cover, _ids in datasets.iter_batches(ds, batch_size):
                m_en = signal_messages(rng, cover.shape[0], bundle.arch.message_length,
                                       bundle.arch.alpha)
                psnr_sum += psnr(cover, bundle.encode(cover, m_en))
                batches += 1
        rows = robustness_sweep(bundle, ds, pool, seed=seed, batch_size=batch_size)
        reports.append(SizeReport(size=size, psnr=psnr_sum / max(batches, 1), rows=rows))
    return reports


def format_table(rows: list[RobustnessRow], title: str = "") -> str:
    """Aligned text table mirroring the usual robustness-table layout."""
    header = f"{'Distortion':<20} {'Tracer':>10} {'Detector':>10} {'Both':>10}"
    lines = [title, header, "-" * len(header)] if title else [header, "-" * len(header)]
    for row in rows:
        if row.error is not None:
            lines.append(f"{row.distortion:<20} {'error':>10} {'':>10} {'':>10}  # {row.error}")
        else:
            lines.append(f"{row.distortion:<20} {row.tracer_ber:>9.4f}% {row.detector_ber:>9.4f}% "
                         f"{row.both_ber:>9.4f}%")
    return "\n".join(lines)


def format_machine(rows: list[RobustnessRow]) -> str:
    """Line-oriented machine format: channel=<name> tracer=<v> detector=<v> both=<v>."""
    lines = []
    for row in rows:
        name = row.distortion.replace(" ", "_")
        if row.error is not None:
            lines.append(f"channel={name} error={row.error.splitlines()[0]!r}")
        else:
            lines.append(f"channel={name} tracer={row.tracer_ber:.4f} "
                         f"detector={row.detector_ber:.4f} both={row.both_ber:.4f}")
    return "\n".join(lines)
