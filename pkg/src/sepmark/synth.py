"""Procedural face-crop corpus generator.

Paints stylized face crops (background, head, hair, eyes, mouth) with
randomized geometry, palette, lighting, and grain. Nothing here pretends to
be photoreal; the point is a few thousand varied images for desk-scale
training runs, demos, and tests without shipping real face data.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

_SKIN_TONES = [
    (243, 210, 185), (228, 185, 150), (205, 160, 120),
    (180, 130, 95), (140, 95, 65), (100, 65, 45),
]
_HAIR_TONES = [
    (25, 20, 18), (60, 40, 25), (110, 70, 35), (160, 120, 60),
    (200, 180, 140), (90, 90, 95), (150, 60, 40),
]


def _jitter(rng: np.random.Generator, color: tuple[int, int, int], spread: int = 18) -> tuple[int, int, int]:
    return tuple(int(np.clip(c + rng.integers(-spread, spread + 1), 0, 255)) for c in color)


def render_face(rng: np.random.Generator, size: int) -> Image.Image:
    """One random face crop at the requested square size."""
    hi = 4 * size  # paint at 4x and downsample for soft edges
    img = Image.new("RGB", (hi, hi))
    draw = ImageDraw.Draw(img)

    top = _jitter(rng, tuple(rng.integers(30, 220, size=3)), 30)
    bottom = _jitter(rng, tuple(rng.integers(30, 220, size=3)), 30)
    for y in range(hi):
        t = y / (hi - 1)
        row = tuple(int(a + (b - a) * t) for a, b in zip(top, bottom))
        draw.line([(0, y), (hi, y)], fill=row)

    skin = _jitter(rng, _SKIN_TONES[rng.integers(len(_SKIN_TONES))])
    cx = hi // 2 + int(rng.normal(0, hi * 0.03))
    cy = hi // 2 + int(rng.normal(0, hi * 0.03))
    fw = int(hi * rng.uniform(0.30, 0.40))
    fh = int(hi * rng.uniform(0.38, 0.48))
    draw.ellipse([cx - fw, cy - fh, cx + fw, cy + fh], fill=skin)

    hair = _jitter(rng, _HAIR_TONES[rng.integers(len(_HAIR_TONES))])
    hair_h = int(fh * rng.uniform(0.35, 0.75))
    draw.chord([cx - fw, cy - fh - int(fh * 0.1), cx + fw, cy - fh + 2 * hair_h],
               180, 360, fill=hair)
    if rng.random() < 0.5:  # side hair
        side = int(fw * rng.uniform(0.12, 0.3))
        draw.rectangle([cx - fw, cy - fh + hair_h, cx - fw + side, cy + int(fh * 0.3)], fill=hair)
        draw.rectangle([cx + fw - side, cy - fh + hair_h, cx + fw, cy + int(fh * 0.3)], fill=hair)

    eye_y = cy - int(fh * rng.uniform(0.05, 0.2))
    eye_dx = int(fw * rng.uniform(0.38, 0.52))
    eye_w = int(fw * rng.uniform(0.16, 0.24))
    eye_h = int(eye_w * rng.uniform(0.45, 0.7))
    iris = tuple(rng.integers(20, 160, size=3))
    for sx in (-1, 1):
        ex = cx + sx * eye_dx
        draw.ellipse([ex - eye_w, eye_y - eye_h, ex + eye_w, eye_y + eye_h], fill=(245, 245, 245))
        r = int(eye_h * rng.uniform(0.6, 0.95))
        draw.ellipse([ex - r, eye_y - r, ex + r, eye_y + r], fill=iris)
        brow_y = eye_y - int(eye_h * rng.uniform(1.8, 2.8))
        draw.line([ex - eye_w, brow_y, ex + eye_w, brow_y - int(rng.integers(-6, 10))],
                  fill=hair, width=max(2, hi // 80))

    nose_len = int(fh * rng.uniform(0.18, 0.3))
    draw.line([cx, eye_y + eye_h, cx + int(rng.normal(0, hi * 0.01)), eye_y + eye_h + nose_len],
              fill=_jitter(rng, skin, 35), width=max(2, hi // 90))

    mouth_y = cy + int(fh * rng.uniform(0.4, 0.6))
    mouth_w = int(fw * rng.uniform(0.3, 0.55))
    mouth_h = int(mouth_w * rng.uniform(0.2, 0.45))
    mouth = _jitter(rng, (170, 70, 70), 40)
    if rng.random() < 0.6:  # smile arc vs closed mouth
        draw.arc([cx - mouth_w, mouth_y - mouth_h, cx + mouth_w, mouth_y + mouth_h],
                 20, 160, fill=mouth, width=max(3, hi // 60))
    else:
        draw.ellipse([cx - mouth_w, mouth_y - mouth_h // 2, cx + mouth_w, mouth_y + mouth_h // 2],
                     fill=mouth)

    img = img.rotate(float(rng.normal(0, 4.0)), resample=Image.BILINEAR)
    img = img.filter(ImageFilter.GaussianBlur(radius=hi / 256))
    img = img.resize((size, size), Image.BILINEAR)

    arr = np.asarray(img, dtype=np.float32)
    gain = rng.uniform(0.8, 1.15)
    arr = arr * gain + rng.normal(0, rng.uniform(1.0, 5.0), size=arr.shape)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))


def generate_face_corpus(out_dir: str | Path, count: int, size: int = 64, seed: int = 0) -> list[str]:
    """Write `count` PNG face crops into out_dir; returns the written filenames."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(count):
        name = f"face_{i:05d}.png"
        render_face(rng, size).save(out / name)
        names.append(name)
    return names
