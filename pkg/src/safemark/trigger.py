"""Prompt trigger: watermark registry, text/image embedders and argmax selection."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import DomainError, FormatError, SafemarkError, load_image, save_image

EMBED_DIM = 64
USER_TOKEN = "[U]"
DEFAULT_TOKEN = "[V]"
_TOKEN_RE = re.compile(r"\[[A-Za-z]\]|[a-z0-9]+")


class MissingWatermarkError(SafemarkError):
    pass


class ConflictError(SafemarkError):
    pass


def tokenize(prompt: str) -> list[str]:
    return _TOKEN_RE.findall(prompt.lower().replace("[u]", "[U]").replace("[v]", "[V]"))


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng(seed).standard_normal(dim)


def embed_text(prompt: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Token-hash bag-of-words embedding, unit norm, float64."""
    if not prompt or not prompt.strip():
        raise DomainError("prompt must be non-empty")
    tokens = tokenize(prompt)
    if not tokens:
        raise DomainError(f"prompt {prompt!r} has no tokens")
    vec = np.zeros(dim)
    for tok in tokens:
        vec += _token_vector(tok, dim)
    return vec / np.linalg.norm(vec)


def embed_image(img: torch.Tensor, dim: int = EMBED_DIM, pool: int = 8) -> np.ndarray:
    """Fixed random projection of an 8x8 average-pooled image, unit norm."""
    x = F.adaptive_avg_pool2d(img.detach().to(torch.float64).reshape(1, *img.shape[-3:]), pool).flatten().numpy()
    proj = np.random.default_rng(20240611).standard_normal((dim, x.size)) / np.sqrt(x.size)
    v = proj @ (x - x.mean())
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


TextEmbedder = Callable[[str], np.ndarray]
ImageEmbedder = Callable[[torch.Tensor], np.ndarray]


@dataclass(frozen=True)
class RegistryEntry:
    id: str
    watermark: torch.Tensor
    embedding: np.ndarray


@dataclass(frozen=True)
class TriggerRegistry:
    """Immutable registry; mutators return a new value."""

    entries: tuple[RegistryEntry, ...] = ()
    weights: np.ndarray = field(default_factory=lambda: np.eye(EMBED_DIM))

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def get(self, wid: str) -> RegistryEntry:
        for e in self.entries:
            if e.id == wid:
                return e
        raise KeyError(wid)

    def embeddings(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])

    def with_weights(self, weights: np.ndarray) -> "TriggerRegistry":
        return replace(self, weights=np.array(weights, dtype=np.float64))

    def save(self, root: str | os.PathLike) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        lines = []
        for e in self.entries:
            fname = f"{e.id}.png"
            save_image(e.watermark, root / fname)
            lines.append(json.dumps({"id": e.id, "file": fname, "embedding": [float(v) for v in e.embedding]}))
        (root / "index.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        with open(root / "trigger.npy", "wb") as fh:
            np.save(fh, self.weights)

    @classmethod
    def load(cls, root: str | os.PathLike) -> "TriggerRegistry":
        root = Path(root)
        index = root / "index.jsonl"
        if not index.exists():
            return cls()
        entries = []
        for n, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                entries.append(RegistryEntry(row["id"], load_image(root / row["file"]),
                                             np.asarray(row["embedding"], dtype=np.float64)))
            except (KeyError, json.JSONDecodeError) as exc:
                raise FormatError(f"{index}:{n}: bad registry line") from exc
        weights = np.load(root / "trigger.npy") if (root / "trigger.npy").exists() else np.eye(EMBED_DIM)
        return cls(tuple(entries), weights)


def register_watermark(reg: TriggerRegistry, wid: str, image: torch.Tensor,
                       embedder: ImageEmbedder = embed_image) -> TriggerRegistry:
    if not wid or not re.fullmatch(r"[A-Za-z0-9_.-]+", wid) or wid == "user":
        raise DomainError(f"invalid watermark id {wid!r}")
    if wid in reg.ids:
        raise ConflictError(f"watermark id {wid!r} already registered")
    emb = np.asarray(embedder(image), dtype=np.float64)
    if reg.entries and emb.shape != reg.entries[0].embedding.shape:
        raise DomainError("embedding dimension differs from the registry")
    return replace(reg, entries=reg.entries + (RegistryEntry(wid, image.detach().clone(), emb),))


def trigger_scores(prompt_emb: np.ndarray, reg: TriggerRegistry) -> np.ndarray:
    return reg.embeddings() @ (reg.weights.T @ prompt_emb)


def trigger_probabilities(prompt: str, reg: TriggerRegistry, embedder: TextEmbedder = embed_text) -> dict[str, float]:
    s = trigger_scores(embedder(prompt), reg)
    p = np.exp(s - s.max())
    p /= p.sum()
    return dict(zip(reg.ids, p.tolist()))


def select_index(scores: np.ndarray, ids: Sequence[str], rtol: float = 1e-9) -> int:
    """Argmax with ties (within ``rtol`` of the best) going to the smallest id."""
    best = scores.max()
    tol = rtol * max(1.0, abs(best))
    tied = [i for i, s in enumerate(scores) if s >= best - tol]
    return min(tied, key=lambda i: ids[i])


def select_by_embedding(prompt_emb: np.ndarray, reg: TriggerRegistry) -> str:
    if not reg.entries:
        raise DomainError("trigger registry is empty")
    return reg.ids[select_index(trigger_scores(prompt_emb, reg), reg.ids)]


def trigger_select(prompt: str, reg: TriggerRegistry, user_wm: torch.Tensor | None = None,
                   embedder: TextEmbedder = embed_text) -> tuple[torch.Tensor, str]:
    if USER_TOKEN in tokenize(prompt):
        if user_wm is None:
            raise MissingWatermarkError(f"prompt requests {USER_TOKEN} but no user watermark was given")
        return user_wm, "user"
    if not reg.entries:
        raise DomainError("trigger registry is empty")
    wid = select_by_embedding(embedder(prompt), reg)
    return reg.get(wid).watermark, wid


def fit_trigger(reg: TriggerRegistry, pairs: Sequence[tuple[str, str]], steps: int = 300, lr: float = 0.1,
                seed: int = 0, embedder: TextEmbedder = embed_text) -> tuple[TriggerRegistry, list[float]]:
    """Cross-entropy fit of the linear trigger map on (prompt, watermark id) pairs."""
    if not pairs:
        raise DomainError("no training pairs")
    index = {wid: i for i, wid in enumerate(reg.ids)}
    try:
        y = torch.tensor([index[wid] for _, wid in pairs])
    except KeyError as exc:
        raise DomainError(f"unknown watermark id {exc.args[0]!r}") from None
    X = torch.tensor(np.stack([embedder(p) for p, _ in pairs]))
    E = torch.tensor(reg.embeddings())
    torch.manual_seed(seed)
    W = torch.tensor(reg.weights, requires_grad=True)
    opt = torch.optim.Adam([W], lr=lr)
    losses = []
    for _ in range(steps):
        loss = F.cross_entropy((X @ W) @ E.T, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return reg.with_weights(W.detach().numpy()), losses
