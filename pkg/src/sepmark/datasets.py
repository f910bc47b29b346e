"""Image ingestion, normalization, deterministic splits, and batch assembly.

Pixels are mapped from 8-bit [0, 255] to the working range [-1, 1]
(p -> 2p/255 - 1); every module downstream assumes that range. Splits are
assigned by a stable hash of (seed, identifier) so a manifest is
reproducible from the corpus and seed alone.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

VALUE_MIN = -1.0
VALUE_MAX = 1.0
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class DatasetError(RuntimeError):
    """Unusable corpus (empty directory, missing manifest entries, ...)."""


def normalize_u8(pixels: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1]."""
    return pixels.astype(np.float32) * (2.0 / 255.0) - 1.0


def denormalize_to_u8(values) -> np.ndarray:
    """[-1, 1] -> rounded uint8 [0, 255]."""
    detach = getattr(values, "detach", None)
    if detach is not None:
        values = detach().cpu().numpy()
    arr = (np.asarray(values, dtype=np.float64) + 1.0) * (255.0 / 2.0)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def load_image(path: str | Path, resolution: int | None = None) -> torch.Tensor:
    """Decode an RGB image to a 3xHxW float tensor in [-1, 1], optionally resized."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        arr = normalize_u8(np.asarray(img, dtype=np.uint8))
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path: str | Path) -> None:
    """Write a 3xHxW tensor in [-1, 1] as an 8-bit PNG (or whatever the suffix says)."""
    if tensor.dim() != 3 or tensor.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image tensor, got {tuple(tensor.shape)}")
    arr = denormalize_to_u8(tensor.permute(1, 2, 0))
    Image.fromarray(arr, mode="RGB").save(path)


class ImageFolderDataset:
    """Lazy view over the decodable RGB images below a directory.

    Identifiers are POSIX-style relative paths; iteration order is the
    sorted identifier order, so indices are stable across runs.
    """

    def __init__(self, root: str | Path, resolution: int | None):
        self.root = Path(root)
        self.resolution = resolution
        self.identifiers: list[str] = []
        for path in sorted(self.root.rglob("*")):
            if not path.is_file() or path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(path) as img:
                    img.verify()
            except Exception as exc:  # noqa: BLE001 - any decode failure skips the file
                log.warning("skipping unreadable image %s (%s)", path, exc)
                continue
            self.identifiers.append(path.relative_to(self.root).as_posix())

    def __len__(self) -> int:
        return len(self.identifiers)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, str]:
        ident = self.identifiers[index]
        return load_image(self.root / ident, self.resolution), ident

    def load_by_id(self, ident: str) -> torch.Tensor:
        return load_image(self.root / ident, self.resolution)

    def subset(self, identifiers: list[str]) -> "ImageSubset":
        return ImageSubset(self, identifiers)


class ImageSubset:
    """A dataset restricted to an explicit identifier list (keeps its order)."""

    def __init__(self, parent: ImageFolderDataset, identifiers: list[str]):
        known = set(parent.identifiers)
        missing = [i for i in identifiers if i not in known]
        if missing:
            raise DatasetError(f"manifest references unknown images, e.g. {missing[0]!r}")
        self.parent = parent
        self.identifiers = list(identifiers)
        self.resolution = parent.resolution

    def __len__(self) -> int:
        return len(self.identifiers)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, str]:
        ident = self.identifiers[index]
        return self.parent.load_by_id(ident), ident

    def load_by_id(self, ident: str) -> torch.Tensor:
        return self.parent.load_by_id(ident)


def ingest(dir_path: str | Path, resolution: int | None) -> ImageFolderDataset:
    """Scan a directory tree into a dataset; an empty corpus is fatal."""
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    ds = ImageFolderDataset(root, resolution)
    if len(ds) == 0:
        raise DatasetError(f"no decodable images under {root}")
    return ds


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def save(self, path: str | Path) -> None:
        lines = [f"# seed={self.seed}"]
        for name in ("train", "val", "test"):
            lines.extend(f"{name}\t{ident}" for ident in getattr(self, name))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        seed = 0
        parts: dict[str, list[str]] = {"train": [], "val": [], "test": []}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "seed=" in line:
                    seed = int(line.split("seed=", 1)[1])
                continue
            name, ident = line.split("\t", 1)
            if name not in parts:
                raise DatasetError(f"unknown split {name!r} in manifest {path}")
            parts[name].append(ident)
        return cls(train=parts["train"], val=parts["val"], test=parts["test"], seed=seed)


def _split_fraction(seed: int, ident: str) -> float:
    digest = hashlib.blake2b(f"{seed}:{ident}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def split(corpus, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Deterministic train/val/test partition of a corpus by hashed identifier."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    identifiers = list(corpus.identifiers) if hasattr(corpus, "identifiers") else list(corpus)
    manifest = SplitManifest(train=[], val=[], test=[], seed=seed)
    train_cut = ratios[0]
    val_cut = ratios[0] + ratios[1]
    for ident in sorted(identifiers):
        u = _split_fraction(seed, ident)
        if u < train_cut:
            manifest.train.append(ident)
        elif u < val_cut:
            manifest.val.append(ident)
        else:
            manifest.test.append(ident)
    return manifest


def load_batch(dataset, indices) -> tuple[torch.Tensor, list[str]]:
    """Stack the given items into a Bx3xHxW batch, preserving index order."""
    images, idents = [], []
    for i in indices:
        img, ident = dataset[int(i)]
        images.append(img)
        idents.append(ident)
    return torch.stack(images), idents


def iter_batches(dataset, batch_size: int, seed: int | None = None, drop_last: bool = False):
    """Yield (batch, identifiers) tuples; shuffled reproducibly when a seed is given."""
    order = np.arange(len(dataset))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and len(chunk) < batch_size:
            return
        yield load_batch(dataset, chunk)
