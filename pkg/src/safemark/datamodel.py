"""Shared types, image I/O, checkpoint container and the provenance ledger.

Tensors follow the torch layout: images are ``(3, H, W)`` (or batched
``(B, 3, H, W)``) float tensors in ``[-1, 1]``; latents are ``(d, h, w)``
with ``h = H / f``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from filelock import FileLock
from PIL import Image

CHECKPOINT_MAGIC = b"SAFESD1\0"


class SafemarkError(Exception):
    """Base class for package errors."""


class DomainError(SafemarkError, ValueError):
    pass


class ShapeError(SafemarkError, ValueError):
    pass


class StateError(SafemarkError, RuntimeError):
    """A required checkpoint or registry entry is missing."""


class FormatError(SafemarkError, ValueError):
    pass


@dataclass
class RunConfig:
    T: int = 50
    lam: int = 10
    gamma: float = 1.0
    f: int = 4
    d: int = 4
    cfg_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0
    resolution: int = 32
    batch: int = 8
    lr: float = 1e-3
    budget: int = 2000
    base_budget: int = 1500
    stage2_budget: int = 5000
    stage2_lr: float = 5e-4
    schedule: str = "linear-vp"
    time_bias: str = "uniform"
    adv: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.T < 1:
            raise DomainError(f"T must be >= 1, got {self.T}")
        if not 0 <= self.lam <= self.T:
            raise DomainError(f"lambda must lie in [0, T={self.T}], got {self.lam}")
        if self.gamma <= 0:
            raise DomainError("gamma must be positive")
        if self.f not in (2, 4, 8):
            raise DomainError(f"scale factor f must be one of 2, 4, 8, got {self.f}")
        if self.cfg_scale < 0:
            raise DomainError("cfg_scale must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise DomainError("eta must lie in [0, 1]")
        if self.resolution % self.f:
            raise DomainError("resolution must be divisible by f")

    # config-file keys mirror the field names; ``lambda`` is accepted for ``lam``
    @classmethod
    def from_mapping(cls, values: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        current = dataclasses.asdict(base)
        for key, raw in values.items():
            key = "lam" if key == "lambda" else key
            if key not in kinds:
                raise DomainError(f"unknown config key {key!r}")
            current[key] = _coerce(raw, type(current[key]))
        return cls(**current)

    @classmethod
    def from_file(cls, path: str | os.PathLike, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"config line without '=': {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values, base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return kind(raw)


# ---------------------------------------------------------------------------
# images


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Quantize a ``(3, H, W)`` tensor in [-1, 1] to an ``(H, W, 3)`` byte array."""
    arr = img.detach().to(torch.float64).clamp(-1, 1).cpu().numpy()
    arr = np.rint((arr + 1.0) * 127.5).astype(np.uint8)
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0)


def load_image(path: str | os.PathLike, resolution: int | None = None) -> torch.Tensor:
    path = Path(path)
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    with im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected an 8-bit RGB raster, got mode {im.mode}")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    if arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"{path}: image is not square ({arr.shape[1]}x{arr.shape[0]})")
    return from_uint8(arr)


def png_bytes(img: torch.Tensor) -> bytes:
    import io

    buf = io.BytesIO()
    # fixed compression settings keep the encoded bytes stable
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def save_image(img: torch.Tensor, path: str | os.PathLike) -> str:
    """Write a lossless PNG and return the sha256 digest of the file bytes."""
    if img.dim() != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {tuple(img.shape)}")
    if not torch.isfinite(img).all():
        raise DomainError("image contains non-finite values")
    data = png_bytes(img)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_latent_shape(image_side: int, f: int) -> int:
    if image_side % f:
        raise ShapeError(f"image side {image_side} is not divisible by f={f}")
    return image_side // f


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic "SAFESD1\0" | u32 LE metadata length | UTF-8 JSON metadata |
#   raw little-endian float32 arrays in metadata order


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, torch.Tensor], config: dict | None = None,
                    extra: dict | None = None) -> str:
    names = list(tensors)
    meta = {
        "names": names,
        "shapes": [list(tensors[n].shape) for n in names],
        "config": config or {},
    }
    if extra:
        meta["extra"] = extra
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    for n in names:
        arr = tensors[n].detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(arr.astype("<f4", copy=False).tobytes())
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (n,) = struct.unpack("<I", data[8:12])
    meta = json.loads(data[12:12 + n].decode("utf-8"))
    offset = 12 + n
    tensors = {}
    for name, shape in zip(meta["names"], meta["shapes"]):
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return tensors, meta


# ---------------------------------------------------------------------------
# provenance


@dataclass(frozen=True)
class ProvenanceRecord:
    image_digest: str
    watermark_id: str
    key: str
    seed: int
    timestamp: int
    prompt: str

    def to_json(self) -> str:
        obj = {
            "digest": self.image_digest,
            "watermark_id": self.watermark_id,
            "key": self.key,
            "seed": self.seed,
            "ts": self.timestamp,
            "prompt": self.prompt,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ProvenanceRecord":
        obj = json.loads(line)
        return cls(obj["digest"], obj["watermark_id"], obj["key"], int(obj["seed"]), int(obj["ts"]), obj["prompt"])


def utc_seconds() -> int:
    # SOURCE_DATE_EPOCH pins timestamps for byte-reproducible runs
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    return int(pinned) if pinned else int(time.time())


@dataclass
class Ledger:
    """Append-only JSON-lines provenance store."""

    path: Path
    _lock: FileLock = field(init=False, repr=False)

    def __post_init__(self):
        self.path = Path(self.path)
        self._lock = FileLock(str(self.path) + ".lock")

    def append(self, record: ProvenanceRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")

    def records(self) -> list[ProvenanceRecord]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [ProvenanceRecord.from_json(line) for line in fh if line.strip()]

    def lookup(self, digest: str) -> ProvenanceRecord | None:
        for rec in self.records():
            if rec.image_digest == digest:
                return rec
        return None

    def index(self) -> dict[str, ProvenanceRecord]:
        return {rec.image_digest: rec for rec in self.records()}


def batched(items: Iterable, n: int):
    chunk = []
    for item in items:
        chunk.append(item)
        if len(chunk) == n:
            yield chunk
            chunk = []
    if chunk:
        yield chunk
