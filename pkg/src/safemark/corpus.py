"""Deterministic synthetic corpora: soft-edged shape scenes, textures and watermark glyphs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .datamodel import DomainError, from_uint8, save_image

IMAGE_FAMILIES = ("shapes", "textures")
WATERMARK_FAMILIES = ("qr-like", "logo-glyph")
_KIND_CODES = {"image": 1, "watermark": 2}


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_images: int = 64
    n_watermarks: int = 16
    resolution: int = 32
    image_family: str = "shapes"
    watermark_family: str = "qr-like"
    seed: int = 0
    blocks: int = 8

    def validate(self):
        if self.n_images < 1 or self.n_watermarks < 1:
            raise DomainError("corpus counts must be >= 1")
        if self.image_family not in IMAGE_FAMILIES:
            raise DomainError(f"unknown image family {self.image_family!r}")
        if self.watermark_family not in WATERMARK_FAMILIES:
            raise DomainError(f"unknown watermark family {self.watermark_family!r}")
        if self.resolution % self.blocks:
            raise DomainError("resolution must be divisible by the QR block count")


def item_seed(seed: int, kind: str, index: int) -> int:
    ss = np.random.SeedSequence([seed, _KIND_CODES[kind], index])
    return int(ss.generate_state(1)[0])


def _smoothstep(edge_dist, width):
    return np.clip(0.5 - edge_dist / width, 0.0, 1.0)


def _grid(res):
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c, indexing="xy")


def shapes_scene(res: int, rng: np.random.Generator) -> np.ndarray:
    """A two-colour gradient with 1-3 anti-aliased shapes; float RGB in [0, 1]."""
    xx, yy = _grid(res)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)), 0, 1)[..., None]
    img = c0 * (1 - ramp) + c1 * ramp
    px = 1.0 / res
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.0, 1.0, 3)
        cx, cy = rng.uniform(0.2, 0.8, 2)
        size = rng.uniform(0.12, 0.3)
        kind = rng.integers(0, 3)
        if kind == 0:
            dist = np.hypot(xx - cx, yy - cy) - size
        elif kind == 1:
            hx, hy = size, size * rng.uniform(0.5, 1.0)
            dist = np.maximum(np.abs(xx - cx) - hx, np.abs(yy - cy) - hy)
        else:
            # diamond
            dist = (np.abs(xx - cx) + np.abs(yy - cy)) / np.sqrt(2) - size * 0.8
        alpha = _smoothstep(dist, 2.5 * px)[..., None]
        img = img * (1 - alpha) + color * alpha
    return img


def texture_scene(res: int, rng: np.random.Generator) -> np.ndarray:
    xx, yy = _grid(res)
    img = np.zeros((res, res, 3)) + rng.uniform(0.3, 0.7, 3)
    for _ in range(3):
        freq = rng.uniform(1.0, 3.0)
        ang = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
        img += 0.15 * wave[..., None] * rng.uniform(-1, 1, 3)
    return np.clip(img, 0, 1)


def qr_like(res: int, rng: np.random.Generator, blocks: int = 8) -> np.ndarray:
    """Random black/white block grid with a one-block white quiet border."""
    bits = np.ones((blocks, blocks))
    bits[1:-1, 1:-1] = rng.integers(0, 2, (blocks - 2, blocks - 2))
    side = res // blocks
    img = np.kron(bits, np.ones((side, side)))
    return np.repeat(img[..., None], 3, axis=2)


def logo_glyph(res: int, rng: np.random.Generator) -> np.ndarray:
    xx, yy = _grid(res)
    img = np.ones((res, res, 3))
    color = rng.uniform(0, 0.6, 3)
    px = 1.0 / res
    kind = rng.integers(0, 3)
    r = rng.uniform(0.22, 0.35)
    if kind == 0:
        dist = np.abs(np.hypot(xx - 0.5, yy - 0.5) - r) - 0.06
    elif kind == 1:
        dist = np.minimum(np.maximum(np.abs(xx - 0.5) - r, np.abs(yy - 0.5) - 0.07),
                          np.maximum(np.abs(xx - 0.5) - 0.07, np.abs(yy - 0.5) - r))
    else:
        dist = np.maximum(np.abs(xx - 0.5) + np.abs(yy - 0.5) - r, -(np.abs(xx - 0.5) + np.abs(yy - 0.5) - r + 0.1))
    alpha = _smoothstep(dist, 1.5 * px)[..., None]
    return img * (1 - alpha) + color * alpha


def _quantize(img01: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img01, 0, 1) * 255).astype(np.uint8)


def render(kind: str, family: str, res: int, seed: int, blocks: int = 8) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if family == "shapes":
        img = shapes_scene(res, rng)
    elif family == "textures":
        img = texture_scene(res, rng)
    elif family == "qr-like":
        img = qr_like(res, rng, blocks)
    elif family == "logo-glyph":
        img = logo_glyph(res, rng)
    else:
        raise DomainError(f"unknown family {family!r}")
    return _quantize(img)


def synth_images(n: int, res: int = 32, family: str = "shapes", seed: int = 0, offset: int = 0) -> torch.Tensor:
    if n < 1:
        raise DomainError("n must be >= 1")
    arrs = [render("image", family, res, item_seed(seed, "image", offset + i)) for i in range(n)]
    return torch.stack([from_uint8(a) for a in arrs])


def synth_watermarks(n: int, res: int = 32, family: str = "qr-like", seed: int = 0, offset: int = 0,
                     blocks: int = 8) -> torch.Tensor:
    if n < 1:
        raise DomainError("n must be >= 1")
    arrs = [render("watermark", family, res, item_seed(seed, "watermark", offset + i), blocks) for i in range(n)]
    return torch.stack([from_uint8(a) for a in arrs])


def make_dataset(spec: SyntheticCorpusSpec, out: str | os.PathLike) -> list[dict]:
    """Write the corpus as PNG files plus ``manifest.jsonl``; returns the manifest rows."""
    spec.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind, count, family in (("image", spec.n_images, spec.image_family),
                                ("watermark", spec.n_watermarks, spec.watermark_family)):
        for i in range(count):
            seed = item_seed(spec.seed, kind, i)
            arr = render(kind, family, spec.resolution, seed, spec.blocks)
            name = f"{kind}_{i:05d}.png"
            save_image(from_uint8(arr), out / name)
            rows.append({"file": name, "kind": kind, "seed": seed})
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return rows


def load_manifest(root: str | os.PathLike, resolution: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    from .datamodel import load_image

    root = Path(root)
    images, wms = [], []
    with open(root / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            img = load_image(root / row["file"], resolution)
            (images if row["kind"] == "image" else wms).append(img)
    if not images or not wms:
        raise DomainError(f"{root}: manifest lacks images or watermarks")
    return torch.stack(images), torch.stack(wms)
