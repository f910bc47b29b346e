"""The four networks: message encoder, tracer decoder, detector decoder, patch discriminator.

The encoder is a UNet: stride-2 conv-in-relu downsampling with channel-doubling
double-conv stages, nearest-neighbour upsampling, and squeeze-excitation
residual fusion of skip features plus an interpolated message map at every
resolution. The decoders reuse the same body, squeeze the output to a
single-channel residual, pool it to an LxL grid and read the message off with
a linear head, so they accept any input size. The discriminator is a
fully-convolutional patch classifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Tensor shape incompatible with the model contract."""


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint."""


@dataclass
class ArchConfig:
    image_size: int = 64
    message_length: int = 16
    base_channels: int = 32
    down_levels: int = 2
    alpha: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.image_size % (2 ** self.down_levels) != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{self.down_levels}")
        if self.message_length <= 0 or self.message_length > self.image_size:
            raise ConfigError(
                f"message map {self.message_length}x{self.message_length} exceeds "
                f"{self.image_size}x{self.image_size} images")
        if self.base_channels < 8:
            raise ConfigError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")


class ConvINReLU(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=True)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DoubleConv(nn.Module):
    """Two conv-in-relu layers; the first changes the channel count."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = nn.Sequential(ConvINReLU(cin, cout), ConvINReLU(cout, cout))

    def forward(self, x):
        return self.block(x)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        w = x.mean(dim=(2, 3))
        w = torch.sigmoid(self.fc2(F.relu(self.fc1(w))))
        return x * w.unsqueeze(-1).unsqueeze(-1)


class SEResidualBlock(nn.Module):
    """Bottleneck residual block with instance norm and squeeze-excitation."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(cout // 2, 8)
        self.body = nn.Sequential(
            nn.Conv2d(cin, mid, 1),
            nn.InstanceNorm2d(mid, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1),
            nn.InstanceNorm2d(mid, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, cout, 1),
            nn.InstanceNorm2d(cout, affine=True),
        )
        self.se = SqueezeExcite(cout)
        if cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1), nn.InstanceNorm2d(cout, affine=True))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return F.relu(self.se(self.body(x)) + self.shortcut(x))


class MessageDiffuser(nn.Module):
    """Spread an L-bit signal message into a single-channel LxL map.

    Initialized as a column tiling (cell (r, c) carries bit c at full
    amplitude) with an identity-center conv, so the map enters the encoder
    at the +-alpha scale instead of being crushed by a random projection;
    both layers stay trainable.
    """

    def __init__(self, message_length: int):
        super().__init__()
        self.length = message_length
        self.fc = nn.Linear(message_length, message_length * message_length)
        self.conv = nn.Conv2d(1, 1, 3, padding=1)

    def reset_structured(self) -> None:
        length = self.length
        with torch.no_grad():
            tiling = torch.zeros(length * length, length)
            for row in range(length):
                for col in range(length):
                    tiling[row * length + col, col] = 1.0
            self.fc.weight.copy_(tiling)
            self.fc.bias.zero_()
            self.conv.weight.zero_()
            self.conv.weight[0, 0, 1, 1] = 1.0
            self.conv.bias.zero_()

    def forward(self, message):
        b = message.shape[0]
        grid = self.fc(message).view(b, 1, self.length, self.length)
        return self.conv(grid)


class _UNetBody(nn.Module):
    """Shared downsample/upsample trunk; `extra` channels ride along at fusion."""

    def __init__(self, arch: ArchConfig, extra_channels: int):
        super().__init__()
        chs = [arch.base_channels * 2 ** i for i in range(arch.down_levels + 1)]
        self.chs = chs
        self.min_size = 2 ** arch.down_levels
        self.stem = ConvINReLU(3, chs[0])
        self.downs = nn.ModuleList()
        self.grows = nn.ModuleList()
        for i in range(arch.down_levels):
            self.downs.append(ConvINReLU(chs[i], chs[i], stride=2))
            self.grows.append(DoubleConv(chs[i], chs[i + 1]))
        self.reduces = nn.ModuleList()
        self.fuses = nn.ModuleList()
        for i in range(arch.down_levels, 0, -1):
            self.reduces.append(ConvINReLU(chs[i], chs[i - 1]))
            self.fuses.append(SEResidualBlock(2 * chs[i - 1] + extra_channels, chs[i - 1]))

    def forward(self, image, extra_map=None):
        if min(image.shape[-2:]) < self.min_size:
            raise ShapeError(
                f"input {tuple(image.shape[-2:])} smaller than minimum {self.min_size}")
        skips = [self.stem(image)]
        x = skips[0]
        for down, grow in zip(self.downs, self.grows):
            x = grow(down(x))
            skips.append(x)
        for i, (reduce, fuse) in enumerate(zip(self.reduces, self.fuses)):
            skip = skips[-2 - i]
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = reduce(x)
            parts = [x, skip]
            if extra_map is not None:
                parts.append(F.interpolate(extra_map, size=skip.shape[-2:], mode="nearest"))
            x = fuse(torch.cat(parts, dim=1))
        return x


class Encoder(nn.Module):
    """Embed a signal message into a cover image; output shape equals input shape.

    The head is a zero-initialized 1x1 conv over [features, cover] added onto
    the cover skip, so a freshly built encoder returns the cover unchanged and
    training only has to learn the watermark residual.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.diffuser = MessageDiffuser(arch.message_length)
        self.body = _UNetBody(arch, extra_channels=1)
        self.head = nn.Conv2d(arch.base_channels + 3, 3, 1)

    def forward(self, cover, message):
        _check_image_batch(cover)
        if message.dim() != 2 or message.shape[0] != cover.shape[0]:
            raise ShapeError(
                f"message batch {tuple(message.shape)} does not match images "
                f"{tuple(cover.shape)}")
        if message.shape[1] != self.arch.message_length:
            raise ShapeError(
                f"message length {message.shape[1]} != configured {self.arch.message_length}")
        msg_map = self.diffuser(message)
        feats = self.body(cover, msg_map)
        out = cover + self.head(torch.cat([feats, cover], dim=1))
        return out.clamp(-1.0, 1.0)


class Decoder(nn.Module):
    """Extract an L-value signal message from an image of any size."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.body = _UNetBody(arch, extra_channels=0)
        self.head = nn.Conv2d(arch.base_channels, 1, 1)
        length = arch.message_length
        self.inverse_diffuser = nn.Linear(length * length, length)

    def reset_structured(self) -> None:
        # column-mean readout, the transpose of the diffuser's tiling
        length = self.arch.message_length
        with torch.no_grad():
            readout = torch.zeros(length, length * length)
            for row in range(length):
                for col in range(length):
                    readout[col, row * length + col] = 1.0 / length
            self.inverse_diffuser.weight.copy_(readout)
            self.inverse_diffuser.bias.zero_()

    def forward(self, image):
        _check_image_batch(image)
        residual = self.head(self.body(image))
        length = self.arch.message_length
        grid = F.adaptive_avg_pool2d(residual, (length, length))
        return self.inverse_diffuser(grid.flatten(1))


class PatchDiscriminator(nn.Module):
    """Fully-convolutional patch scorer: conv-in-leakyrelu stack, 1x1 conv head.

    Depth shrinks on tiny configs so the output stays a patch map of at least
    2x2 (instance norm needs more than one spatial element).
    """

    def __init__(self, arch: ArchConfig, depth: int = 4, slope: float = 0.2):
        super().__init__()
        depth = min(depth, max(1, arch.image_size.bit_length() - 2))
        self.min_size = 2 ** (depth + 1)
        layers = []
        cin = 3
        cout = arch.base_channels
        for _ in range(depth):
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.InstanceNorm2d(cout, affine=True),
                nn.LeakyReLU(slope, inplace=True),
            ]
            cin, cout = cout, min(cout * 2, 8 * arch.base_channels)
        layers.append(nn.Conv2d(cin, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, image):
        _check_image_batch(image)
        if min(image.shape[-2:]) < self.min_size:
            raise ShapeError(
                f"discriminator needs inputs of at least {self.min_size}px, "
                f"got {tuple(image.shape[-2:])}")
        return self.net(image)


def _check_image_batch(image) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected a Bx3xHxW image batch, got {tuple(image.shape)}")


def _init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    # normal(0, 0.02) for conv/linear weights, zero biases; walk order is the
    # registration order, so identical seeds give bit-identical parameters
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass
class ModelBundle:
    """The four networks plus their shared architecture config.

    Tracer and detector are distinct module instances; nothing is shared, so
    mutating one never affects the other.
    """

    encoder: Encoder
    tracer: Decoder
    detector: Decoder
    discriminator: PatchDiscriminator
    arch: ArchConfig

    def encode(self, cover: torch.Tensor, message) -> torch.Tensor:
        message = torch.as_tensor(message, dtype=cover.dtype)
        return self.encoder(cover, message)

    def decode_trace(self, image: torch.Tensor) -> torch.Tensor:
        return self.tracer(image)

    def decode_detect(self, image: torch.Tensor) -> torch.Tensor:
        return self.detector(image)

    def discriminate(self, image: torch.Tensor) -> torch.Tensor:
        return self.discriminator(image)

    def main_parameters(self):
        yield from self.encoder.parameters()
        yield from self.tracer.parameters()
        yield from self.detector.parameters()

    def networks(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "tracer": self.tracer,
            "detector": self.detector,
            "discriminator": self.discriminator,
        }


def build_models(arch: ArchConfig) -> ModelBundle:
    """Construct and deterministically initialize all four networks."""
    arch.validate()
    bundle = ModelBundle(
        encoder=Encoder(arch),
        tracer=Decoder(arch),
        detector=Decoder(arch),
        discriminator=PatchDiscriminator(arch),
        arch=arch,
    )
    generator = torch.Generator().manual_seed(arch.seed)
    for net in bundle.networks().values():
        _init_parameters(net, generator)
    with torch.no_grad():  # residual head starts silent: encode(cover) == cover
        bundle.encoder.head.weight.zero_()
        bundle.encoder.head.bias.zero_()
    bundle.encoder.diffuser.reset_structured()
    bundle.tracer.reset_structured()
    bundle.detector.reset_structured()
    return bundle


def save_checkpoint(bundle: ModelBundle, path, extra: dict | None = None) -> None:
    """Versioned checkpoint: arch config as JSON text plus named parameter arrays."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": json.dumps(asdict(bundle.arch)),
        "extra": extra or {},
    }
    for name, net in bundle.networks().items():
        payload[name] = net.state_dict()
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle from a checkpoint; refuses on version mismatch."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    arch = ArchConfig(**json.loads(payload["arch"]))
    bundle = build_models(arch)
    for name, net in bundle.networks().items():
        net.load_state_dict(payload[name])
    return bundle, payload.get("extra", {})
