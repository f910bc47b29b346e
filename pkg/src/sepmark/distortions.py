"""Distortion channels and the random forward noise pool.

Every channel maps [-1, 1] image batches back into [-1, 1]. Channels are
applied for their values only; gradients are routed around them by the
straight-through composition `x + stopgrad(distort(x) - x)`, which makes the
backward pass an identity Jacobian even for real JPEG round trips or an
external command. Sampling is per item: two items of one batch can land in
different channels.
"""

from __future__ import annotations

import io
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.transforms import functional as tvf
from PIL import Image

from .config import ConfigError
from .datasets import VALUE_MAX, VALUE_MIN, denormalize_to_u8, load_image, normalize_u8, save_image


class DistortionError(RuntimeError):
    """A channel failed to produce output (external command, bad payload)."""


@dataclass
class DistortionSpec:
    name: str
    kind: str  # "common" | "malicious"
    params: dict = field(default_factory=dict)
    differentiable: bool = False


@dataclass
class NoisePool:
    common: list[DistortionSpec]
    malicious: list[DistortionSpec]
    sampler_seed: int = 0

    def all_specs(self) -> list[DistortionSpec]:
        return list(self.common) + list(self.malicious)


def _to01(images: torch.Tensor) -> torch.Tensor:
    return (images + 1.0) * 0.5


def _from01(images: torch.Tensor) -> torch.Tensor:
    return images * 2.0 - 1.0


def _factors(rng: np.random.Generator, batch: int, lo: float, hi: float, dtype) -> torch.Tensor:
    vals = rng.uniform(lo, hi, size=(batch, 1, 1, 1))
    return torch.as_tensor(vals, dtype=dtype)


def _grayscale(x01: torch.Tensor) -> torch.Tensor:
    r, g, b = x01[:, 0:1], x01[:, 1:2], x01[:, 2:3]
    return 0.299 * r + 0.587 * g + 0.114 * b


def _identity(images, params, rng, cover):
    return images.clone()


def _jpeg(images, params, rng, cover):
    quality = int(params.get("quality", 50))
    out = torch.empty_like(images)
    for i in range(images.shape[0]):
        arr = denormalize_to_u8(images[i].permute(1, 2, 0))
        buf = io.BytesIO()
        Image.fromarray(arr, mode="RGB").save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        with Image.open(buf) as decoded:
            dec = np.asarray(decoded.convert("RGB"), dtype=np.uint8)
        out[i] = torch.from_numpy(normalize_u8(dec)).permute(2, 0, 1)
    return out


def _resize(images, params, rng, cover):
    scale = float(params.get("scale", 0.5))
    small = F.interpolate(images, scale_factor=scale, mode="bilinear", align_corners=False)
    return F.interpolate(small, size=images.shape[-2:], mode="bilinear", align_corners=False)


def _gaussian_blur(images, params, rng, cover):
    kernel = int(params.get("kernel", 5))
    sigma = float(params.get("sigma", 1.0))
    return tvf.gaussian_blur(images, [kernel, kernel], [sigma, sigma])


def _median_blur(images, params, rng, cover):
    kernel = int(params.get("kernel", 5))
    pad = kernel // 2
    padded = F.pad(images, (pad, pad, pad, pad), mode="reflect")
    patches = padded.unfold(2, kernel, 1).unfold(3, kernel, 1)
    return patches.contiguous().flatten(-2).median(dim=-1).values


def _brightness(images, params, rng, cover):
    f = _factors(rng, images.shape[0], params.get("low", 0.5), params.get("high", 1.5), images.dtype)
    return _from01(_to01(images) * f)


def _contrast(images, params, rng, cover):
    f = _factors(rng, images.shape[0], params.get("low", 0.5), params.get("high", 1.5), images.dtype)
    x01 = _to01(images)
    mean = _grayscale(x01).mean(dim=(2, 3), keepdim=True)
    return _from01((x01 - mean) * f + mean)


def _saturation(images, params, rng, cover):
    f = _factors(rng, images.shape[0], params.get("low", 0.5), params.get("high", 1.5), images.dtype)
    x01 = _to01(images)
    gray = _grayscale(x01)
    return _from01(gray + (x01 - gray) * f)


def _hue(images, params, rng, cover):
    max_shift = float(params.get("max_shift", 0.1))
    out = torch.empty_like(images)
    for i in range(images.shape[0]):
        shift = float(rng.uniform(-max_shift, max_shift))
        out[i] = _from01(tvf.adjust_hue(_to01(images[i]), shift))
    return out


def _dropout(images, params, rng, cover):
    p = float(params.get("p", 0.3))
    b, _, h, w = images.shape
    mask = torch.from_numpy(rng.random((b, 1, h, w)) < p)
    fill = cover if cover is not None else torch.full_like(images, VALUE_MIN)
    return torch.where(mask, fill, images)


def _salt_pepper(images, params, rng, cover):
    p = float(params.get("p", 0.05))
    b, _, h, w = images.shape
    hit = torch.from_numpy(rng.random((b, 1, h, w)) < p)
    salt = torch.from_numpy(rng.random((b, 1, h, w)) < 0.5)
    out = torch.where(hit & salt, torch.full_like(images, VALUE_MAX), images)
    return torch.where(hit & ~salt, torch.full_like(images, VALUE_MIN), out)


def _gaussian_noise(images, params, rng, cover):
    sigma = float(params.get("sigma", 0.05))  # fraction of the full value range
    std = sigma * (VALUE_MAX - VALUE_MIN)
    noise = torch.as_tensor(rng.normal(0.0, std, size=tuple(images.shape)), dtype=images.dtype)
    return images + noise


def _soft_box_mask(h: int, w: int, region: float, feather: float, dtype) -> torch.Tensor:
    def profile(n: int) -> torch.Tensor:
        u = torch.linspace(-0.5, 0.5, n, dtype=dtype).abs()
        outer = region / 2.0
        inner = outer * (1.0 - feather)
        ramp = (outer - u) / max(outer - inner, 1e-6)
        return ramp.clamp(0.0, 1.0)

    return profile(h)[:, None] * profile(w)[None, :]


def _region_overwrite(images, params, rng, cover):
    blend = float(params.get("blend", 1.0))
    region = float(params.get("region", 0.5))
    feather = float(params.get("feather", 0.3))
    b, _, h, w = images.shape
    donor = torch.roll(images, 1, dims=0) if b > 1 else torch.flip(images, dims=(3,))
    mask = _soft_box_mask(h, w, region, feather, images.dtype) * blend
    return images * (1.0 - mask) + donor * mask


class _ProxyAutoencoder(nn.Module):
    """Frozen random bottleneck autoencoder used as a face-regeneration stand-in."""

    def __init__(self, seed: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(32, 16, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(16, 3, 3, padding=1), nn.Tanh(),
        )
        generator = torch.Generator().manual_seed(seed)
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * 0.2)
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()


_PROXY_CACHE: dict[int, _ProxyAutoencoder] = {}


def _autoencoder_proxy(images, params, rng, cover):
    seed = int(params.get("weights_seed", 77))
    mix = float(params.get("mix", 0.5))
    proxy = _PROXY_CACHE.get(seed)
    if proxy is None:
        proxy = _PROXY_CACHE[seed] = _ProxyAutoencoder(seed)
    with torch.no_grad():
        regen = proxy.net(images.to(torch.float32)).to(images.dtype)
    if regen.shape[-2:] != images.shape[-2:]:  # odd input sizes
        regen = F.interpolate(regen, size=images.shape[-2:], mode="bilinear", align_corners=False)
    return (1.0 - mix) * images + mix * regen


def _elastic_warp(images, params, rng, cover):
    grid_n = int(params.get("grid", 4))
    magnitude = float(params.get("magnitude", 0.1))
    b, _, h, w = images.shape
    coarse = rng.normal(0.0, magnitude, size=(b, 2, grid_n, grid_n)).astype(np.float32)
    field = F.interpolate(torch.from_numpy(coarse), size=(h, w), mode="bilinear", align_corners=True)
    field = field.to(images.dtype)
    ys = torch.linspace(-1.0, 1.0, h, dtype=images.dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=images.dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack([xx + field[:, 0], yy + field[:, 1]], dim=-1)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="reflection", align_corners=True)


def _external(images, params, rng, cover):
    command = params.get("command")
    if not command:
        raise DistortionError("external channel has no 'command' configured")
    timeout = float(params.get("timeout", 120.0))
    argv = shlex.split(str(command))
    with tempfile.TemporaryDirectory(prefix="sepmark-ext-") as tmp:
        in_dir = Path(tmp) / "in"
        out_dir = Path(tmp) / "out"
        in_dir.mkdir()
        out_dir.mkdir()
        for i in range(images.shape[0]):
            save_image(images[i], in_dir / f"{i:05d}.png")
        try:
            proc = subprocess.run(argv + [str(in_dir), str(out_dir)],
                                  capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            raise DistortionError(f"external command timed out after {timeout}s: {command}") from exc
        except OSError as exc:
            raise DistortionError(f"external command failed to start: {exc}") from exc
        if proc.returncode != 0:
            raise DistortionError(
                f"external command exited {proc.returncode}: {command}\n"
                f"stdout: {proc.stdout[-2000:]}\nstderr: {proc.stderr[-2000:]}")
        out = torch.empty_like(images)
        for i in range(images.shape[0]):
            result = out_dir / f"{i:05d}.png"
            if not result.exists():
                raise DistortionError(f"external command produced no output for item {i}")
            img = load_image(result)
            if img.shape != images[i].shape:
                raise DistortionError(
                    f"external output shape {tuple(img.shape)} != input {tuple(images[i].shape)}")
            out[i] = img
    return out


_CHANNELS = {
    "Identity": _identity,
    "JpegTest": _jpeg,
    "Resize": _resize,
    "GaussianBlur": _gaussian_blur,
    "MedianBlur": _median_blur,
    "Brightness": _brightness,
    "Contrast": _contrast,
    "Saturation": _saturation,
    "Hue": _hue,
    "Dropout": _dropout,
    "SaltPepper": _salt_pepper,
    "GaussianNoise": _gaussian_noise,
    "RegionOverwrite": _region_overwrite,
    "AutoencoderProxy": _autoencoder_proxy,
    "ElasticWarp": _elastic_warp,
    "External": _external,
}


def default_common_specs() -> list[DistortionSpec]:
    return [
        DistortionSpec("Identity", "common", {}, differentiable=True),
        DistortionSpec("JpegTest", "common", {"quality": 50}),
        DistortionSpec("Resize", "common", {"scale": 0.5}, differentiable=True),
        DistortionSpec("GaussianBlur", "common", {"kernel": 5, "sigma": 1.0}, differentiable=True),
        DistortionSpec("MedianBlur", "common", {"kernel": 5}),
        DistortionSpec("Brightness", "common", {"low": 0.5, "high": 1.5}, differentiable=True),
        DistortionSpec("Contrast", "common", {"low": 0.5, "high": 1.5}, differentiable=True),
        DistortionSpec("Saturation", "common", {"low": 0.5, "high": 1.5}, differentiable=True),
        DistortionSpec("Hue", "common", {"max_shift": 0.1}),
        DistortionSpec("Dropout", "common", {"p": 0.3}),
        DistortionSpec("SaltPepper", "common", {"p": 0.05}),
        DistortionSpec("GaussianNoise", "common", {"sigma": 0.05}, differentiable=True),
    ]


def default_malicious_specs() -> list[DistortionSpec]:
    return [
        DistortionSpec("RegionOverwrite", "malicious", {"blend": 1.0, "region": 0.5, "feather": 0.3}),
        DistortionSpec("AutoencoderProxy", "malicious", {"weights_seed": 77, "mix": 0.5}),
        DistortionSpec("ElasticWarp", "malicious", {"grid": 4, "magnitude": 0.1}),
    ]


def default_pool(sampler_seed: int = 0) -> NoisePool:
    return NoisePool(default_common_specs(), default_malicious_specs(), sampler_seed)


def apply_distortion(spec: DistortionSpec, images: torch.Tensor, rng: np.random.Generator,
                     cover: torch.Tensor | None = None) -> torch.Tensor:
    """Apply one channel by value; result is clamped into [-1, 1]."""
    channel = _CHANNELS.get(spec.name)
    if channel is None:
        raise ConfigError(f"unknown distortion channel {spec.name!r}")
    if images.dim() != 4:
        raise ValueError(f"expected a Bx3xHxW batch, got {tuple(images.shape)}")
    out = channel(images, spec.params, rng, cover)
    return out.clamp(VALUE_MIN, VALUE_MAX)


def straight_through(images: torch.Tensor, spec: DistortionSpec, rng: np.random.Generator,
                     cover: torch.Tensor | None = None) -> torch.Tensor:
    """Channel value with an identity Jacobian: x + stopgrad(distort(x) - x).

    Written as noised + (x - stopgrad(x)) so the value matches apply_distortion
    bit-for-bit (the gradient-carrying term is exactly zero in the forward pass).
    """
    with torch.no_grad():
        noised = apply_distortion(spec, images.detach(), rng, cover)
    return noised + (images - images.detach())


def _mixed_apply(specs: list[DistortionSpec], images: torch.Tensor, rng: np.random.Generator,
                 cover: torch.Tensor | None) -> torch.Tensor:
    choices = rng.integers(0, len(specs), size=images.shape[0])
    base = images.detach()
    out = base.clone()
    with torch.no_grad():
        for idx in np.unique(choices):
            mask = torch.from_numpy(choices == idx)
            sub_cover = cover.detach()[mask] if cover is not None else None
            out[mask] = apply_distortion(specs[int(idx)], base[mask], rng, sub_cover)
    return out


def sample_batches(pool: NoisePool, images: torch.Tensor, rng: np.random.Generator,
                   cover: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Three straight-through noised batches: mixed draw, common-only, malicious-only."""
    if not pool.common:
        raise ConfigError("noise pool has no common channels")
    if not pool.malicious:
        raise ConfigError("noise pool has no malicious channels")
    outputs = []
    for specs in (pool.common + pool.malicious, pool.common, pool.malicious):
        noised = _mixed_apply(specs, images, rng, cover)
        outputs.append(noised + (images - images.detach()))
    return tuple(outputs)
