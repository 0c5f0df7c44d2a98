"""Metrics, attacks, detection and the experiment suites.

The Frechet, perceptual and clip-style scores are proxies built on the
stage-1 encoder features, not the usual pretrained-network metrics.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .datamodel import DomainError, ShapeError, StateError

PSNR_CAP = 100.0
ATTACK_KINDS = ("none", "rotate90", "resize", "brightness", "crop", "combined")
DEFAULT_FACTORS = {"resize": 0.7, "brightness": 2.0, "crop": 0.1}


# ---------------------------------------------------------------------------
# metrics


def psnr(a: torch.Tensor, b: torch.Tensor, value_range: float = 2.0) -> float:
    """PSNR in dB over all elements; images in [-1, 1] have a value range of 2."""
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float((a.detach().double() - b.detach().double()).pow(2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(value_range ** 2 / mse))


def psnr_batch(a: torch.Tensor, b: torch.Tensor, value_range: float = 2.0) -> list[float]:
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return [psnr(x, y, value_range) for x, y in zip(a, b)]


class FrechetResult(NamedTuple):
    distance: float
    regularized: bool


def _order_key(x: np.ndarray) -> bytes:
    return x.shape[0].to_bytes(8, "little") + np.ascontiguousarray(x).tobytes()


def frechet_proxy(feats_a, feats_b, eps: float = 1e-6) -> FrechetResult:
    """Frechet distance between Gaussian fits of two ``(n, k)`` feature sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DomainError("each feature set needs at least 2 samples")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("feature dimensions differ")
    # canonical argument order makes the float result exactly symmetric
    if _order_key(b) < _order_key(a):
        a, b = b, a
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    k = cov_a.shape[0]
    regularized = False
    if min(np.linalg.eigvalsh(cov_a).min(), np.linalg.eigvalsh(cov_b).min()) < eps:
        cov_a = cov_a + eps * np.eye(k)
        cov_b = cov_b + eps * np.eye(k)
        regularized = True
    root = scipy.linalg.sqrtm(cov_a @ cov_b)
    root = np.real(root)
    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * root))
    return FrechetResult(max(dist, 0.0), regularized)


def encoder_features(imgs: torch.Tensor, ae) -> np.ndarray:
    """Global-average-pooled deepest encoder feature map, one row per image."""
    if ae is None:
        raise StateError("a trained stage-1 checkpoint is required")
    with torch.no_grad():
        feats = ae.enc.features(imgs.reshape(-1, *imgs.shape[-3:]))
    return feats[-2].mean(dim=(-2, -1)).double().numpy()


def perceptual_proxy(a: torch.Tensor, b: torch.Tensor, ae) -> float:
    """Mean squared distance of channel-normalized encoder feature maps across levels."""
    if ae is None:
        raise StateError("a trained stage-1 checkpoint is required")
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa = ae.enc.features(a.reshape(-1, *a.shape[-3:]))
        fb = ae.enc.features(b.reshape(-1, *b.shape[-3:]))
    total = 0.0
    for x, y in zip(fa, fb):
        x = x.double() / (x.double().pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
        y = y.double() / (y.double().pow(2).sum(1, keepdim=True).sqrt() + 1e-10)
        total += float((x - y).pow(2).sum(1).mean())
    return total / len(fa)


def clip_proxy(a: torch.Tensor, b: torch.Tensor, ae) -> float:
    """Mean cosine similarity of pooled encoder features (a stand-in for CLIP score)."""
    fa, fb = encoder_features(a, ae), encoder_features(b, ae)
    num = (fa * fb).sum(1)
    den = np.linalg.norm(fa, axis=1) * np.linalg.norm(fb, axis=1) + 1e-12
    return float((num / den).mean())


def pixel_diff(orig: torch.Tensor, marked: torch.Tensor, gain: float = 10.0) -> torch.Tensor:
    """``clamp(gain * |orig - marked|)`` on the [0, 1] scale, returned in [-1, 1] for display."""
    if orig.shape != marked.shape:
        raise ShapeError(f"shapes differ: {tuple(orig.shape)} vs {tuple(marked.shape)}")
    diff = (orig - marked).abs() / 2
    return (gain * diff).clamp(0, 1) * 2 - 1


# ---------------------------------------------------------------------------
# attacks


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    factor: float | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise DomainError(f"unknown attack {self.kind!r}")
        if self.factor is None and self.kind in DEFAULT_FACTORS:
            object.__setattr__(self, "factor", DEFAULT_FACTORS[self.kind])
        f = self.factor
        if self.kind in ("resize", "crop") and not (0 < f <= 1):
            raise DomainError(f"{self.kind} factor must lie in (0, 1], got {f}")
        if self.kind == "brightness" and not f > 0:
            raise DomainError(f"brightness gain must be positive, got {f}")

    @property
    def label(self) -> str:
        return self.kind if self.factor is None else f"{self.kind} {self.factor:g}"


def _resize(img: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)


def crop_side(side: int, fraction: float) -> int:
    return max(1, int(round(math.sqrt(fraction) * side)))


def attack(img: torch.Tensor, spec: AttackSpec, rng=None) -> torch.Tensor:
    """Apply one attack to a ``(3, H, W)`` or ``(B, 3, H, W)`` image; ``rng`` is unused
    by the deterministic attacks and accepted for interface symmetry."""
    single = img.dim() == 3
    x = img[None] if single else img
    side = x.shape[-1]
    if spec.kind == "none":
        out = x.clone()
    elif spec.kind == "rotate90":
        out = torch.rot90(x, 1, dims=(-2, -1))
    elif spec.kind == "resize":
        small = max(1, int(round(spec.factor * side)))
        out = _resize(_resize(x, small), side)
    elif spec.kind == "brightness":
        out = ((spec.factor * (x + 1) / 2).clamp(0, 1)) * 2 - 1
    elif spec.kind == "crop":
        c = crop_side(side, spec.factor)
        o = (side - c) // 2
        out = _resize(x[..., o:o + c, o:o + c], side)
    else:
        out = x
        for kind in ("rotate90", "resize", "brightness", "crop"):
            out = attack(out, AttackSpec(kind))
    return out[0] if single else out


TABLE_ATTACKS = (AttackSpec("none"), AttackSpec("rotate90"), AttackSpec("resize", 0.7),
                 AttackSpec("brightness", 2.0), AttackSpec("crop", 0.1), AttackSpec("combined"))


# ---------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class DetectionDecision:
    best_id: str
    score: float
    threshold: float
    accepted: bool


def match_scores(extracted: torch.Tensor, reg) -> tuple[str, float]:
    scores = [psnr(extracted, e.watermark) for e in reg.entries]
    best = min(range(len(scores)), key=lambda i: (-scores[i], reg.entries[i].id))
    return reg.entries[best].id, scores[best]


def detect(img: torch.Tensor, reg, ae, tau: float) -> DetectionDecision:
    if ae is None:
        raise StateError("a trained stage-1 checkpoint is required")
    if reg is None or not reg.entries:
        raise DomainError("detection needs a non-empty registry")
    with torch.no_grad():
        ext = ae.extract(img[None] if img.dim() == 3 else img)[0]
    best, score = match_scores(ext, reg)
    return DetectionDecision(best, score, tau, score >= tau)


def detect_batch(imgs: torch.Tensor, reg, ae, tau: float) -> list[DetectionDecision]:
    if reg is None or not reg.entries:
        raise DomainError("detection needs a non-empty registry")
    with torch.no_grad():
        ext = ae.extract(imgs)
    out = []
    for e in ext:
        best, score = match_scores(e, reg)
        out.append(DetectionDecision(best, score, tau, score >= tau))
    return out


def calibrate_threshold(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Midpoint between the positive and negative mean scores."""
    if not len(pos_scores) or not len(neg_scores):
        raise DomainError("calibration needs positive and negative scores")
    return 0.5 * (float(np.mean(pos_scores)) + float(np.mean(neg_scores)))


def rates(pos: Sequence[DetectionDecision], neg: Sequence[DetectionDecision],
          truth: Sequence[str] | None = None) -> tuple[float, float]:
    """(TPR, FPR); with ``truth`` a positive counts only when the best id is correct."""
    if truth is None:
        tp = sum(d.accepted for d in pos)
    else:
        tp = sum(d.accepted and d.best_id == t for d, t in zip(pos, truth))
    fp = sum(d.accepted for d in neg)
    return tp / max(len(pos), 1), fp / max(len(neg), 1)


# ---------------------------------------------------------------------------
# report output


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def _savefig(fig, path):
    fig.savefig(path, format="png", dpi=80, metadata={"Software": None})


def bar_plot(path, labels: Sequence[str], values: Sequence[float], ylabel: str, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(len(values)), values, color="#4a7bb7")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def curve_plot(path, curves: dict[str, Sequence[float]], ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    for name, ys in curves.items():
        ax.plot(ys, label=name, linewidth=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def image_grid(imgs: Sequence[torch.Tensor], ncol: int, pad: int = 1) -> torch.Tensor:
    """Tile ``(3, H, W)`` images row-major with a white gutter."""
    if not imgs:
        raise DomainError("empty grid")
    h, w = imgs[0].shape[-2:]
    nrow = math.ceil(len(imgs) / ncol)
    grid = torch.ones(3, nrow * (h + pad) + pad, ncol * (w + pad) + pad)
    for k, im in enumerate(imgs):
        r, c = divmod(k, ncol)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[:, y:y + h, x:x + w] = im.clamp(-1, 1)
    return grid


def moving_mean(values: Sequence[float], n: int) -> tuple[float, float]:
    """Mean of the first and last ``n`` entries."""
    v = np.asarray(values, dtype=np.float64)
    n = max(1, min(n, len(v)))
    return float(v[:n].mean()), float(v[-n:].mean())


def out_dir(path: str | os.PathLike) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# experiment suites


@dataclass
class EvalSet:
    """Aligned (image, watermark) pairs with the watermark ids and prompts used."""

    images: torch.Tensor
    wms: torch.Tensor
    wm_ids: list[str]
    prompts: list[str]

    def __len__(self):
        return self.images.shape[0]


def watermark_set(models, data: EvalSet, cfg, seed: int | None = None, chunk: int = 25):
    """Watermark every pair in chunks; returns (images, keys per chunk)."""
    from . import pipeline

    seed = cfg.seed if seed is None else seed
    outs, keys = [], []
    for ci, lo in enumerate(range(0, len(data), chunk)):
        hi = min(lo + chunk, len(data))
        g = pipeline.watermark_batch(data.images[lo:hi], [data.wms[lo:hi]], models, cfg,
                                     cond=pipeline.text_conditions(data.prompts[lo:hi]), seed=seed + ci)
        outs.append(g.images)
        keys.append(g.keys[0])
    return torch.cat(outs), keys


def robustness_suite(models, data: EvalSet, reg, cfg, tau: float, specs: Sequence[AttackSpec] = TABLE_ATTACKS,
                     out=None, seed: int | None = None, marked: torch.Tensor | None = None) -> list[dict]:
    """Per-attack image metrics (original vs attacked watermarked) and detection rate."""
    if marked is None:
        marked, _ = watermark_set(models, data, cfg, seed)
    ref_feats = encoder_features(data.images, models.ae)
    rows = []
    for spec in specs:
        att = attack(marked, spec)
        fr = frechet_proxy(ref_feats, encoder_features(att, models.ae))
        dec = detect_batch(att, reg, models.ae, tau)
        rows.append({
            "attack": spec.label,
            "psnr": float(np.mean(psnr_batch(data.images, att))),
            "frechet_proxy": fr.distance,
            "frechet_regularized": int(fr.regularized),
            "perceptual_proxy": perceptual_proxy(data.images, att, models.ae),
            "clip_proxy": clip_proxy(data.images, att, models.ae),
            "detection_rate": rates(dec, [], data.wm_ids)[0],
        })
    if out is not None:
        d = out_dir(out)
        header = list(rows[0])
        write_csv(d / "robustness.csv", header, [[r[h] for h in header] for r in rows])
        bar_plot(d / "robustness.png", [r["attack"] for r in rows], [r["psnr"] for r in rows], "PSNR (dB)",
                 "original vs attacked watermarked")
    return rows


@dataclass
class MultiResult:
    image: torch.Tensor
    keys: list
    extractions: list[torch.Tensor]
    psnrs: list[float]
    pixel_psnrs: list[float]


def multi_watermark_run(image: torch.Tensor, wms: Sequence[torch.Tensor | None], cfg, models, cond=None,
                        schedules=None, seed: int | None = None) -> MultiResult:
    """Inject up to two watermarks over disjoint parts of the sampled step set.

    Each watermark is read out through its own key: the extractor is applied to
    the mixture re-formed from the denoised image chain and that key's
    watermark chain.  Pixel-path PSNRs of ``extract(image)`` are reported too.
    """
    from . import pipeline

    present = [w for w in wms if w is not None]
    if not present:
        raise DomainError("need at least one watermark")
    if schedules is not None and len(schedules) != len(present):
        raise DomainError("need one schedule per watermark")
    single = image.dim() == 3
    x = image[None] if single else image
    ws = [w[None] if w.dim() == 3 else w for w in present]
    g = pipeline.watermark_batch(x, ws, models, cfg, cond=cond, schedules=schedules, seed=seed)
    readouts = pipeline.keyed_readout(g, models)
    pix = pipeline.extract_watermark(g.images, models.ae)
    out = g.images[0] if single else g.images
    ext = [r[0] if single else r for r in readouts]
    return MultiResult(out, g.keys, ext, [psnr(r, w) for r, w in zip(readouts, ws)],
                       [psnr(pix, w) for w in ws])


def sweep_lambda(models, data: EvalSet, cfg, lams: Sequence[int] = (5, 10, 15),
                 biases: Sequence[str] = ("early", "mid", "late"), out=None, seed: int | None = None) -> list[dict]:
    """Image and extraction PSNR per (lambda, time window), plus the lambda=0 baseline."""
    from . import pipeline

    configs = [(0, "uniform")] + [(lam, bias) for lam in lams for bias in biases]
    rows, grid = [], []
    for lam, bias in configs:
        c = cfg.replace(lam=lam, time_bias=bias)
        marked, _ = watermark_set(models, data, c, seed)
        ext = pipeline.extract_watermark(marked, models.ae)
        rows.append({"lambda": lam, "bias": bias if lam else "none",
                     "image_psnr": float(np.mean(psnr_batch(data.images, marked))),
                     "watermark_psnr": float(np.mean(psnr_batch(data.wms, ext)))})
        grid.extend(marked[:4])
    if out is not None:
        d = out_dir(out)
        header = list(rows[0])
        write_csv(d / "sweep_lambda.csv", header, [[r[h] for h in header] for r in rows])
        from .datamodel import save_image

        save_image(image_grid(grid, 4), d / "sweep_lambda_grid.png")
    return rows


def sweep_gamma(base, images: torch.Tensor, wms: torch.Tensor, cfg, gammas: Sequence[float] = (1.0, 0.1, 0.01),
                steps: int | None = None, window: int = 50, out=None, probe: torch.Tensor | None = None) -> list[dict]:
    """Seed-matched stage-1 runs from one pretrained base, one per gamma."""
    from . import autoencoder as aem

    rows, curves, grid = [], {}, []
    for g in gammas:
        c = cfg.replace(gamma=g)
        ae = aem.WatermarkAutoencoder.from_base(base)
        ae, cur = aem.train_stage1(images, wms, c, ae, steps=steps)
        wm = [r["wm"] for r in cur]
        first, last = moving_mean(wm, window)
        rows.append({"gamma": g, "wm_initial": first, "wm_final": last, "ratio": last / first})
        curves[f"gamma={g:g}"] = wm
        if out is not None:
            aem.write_curves(cur, out_dir(out) / f"curves_gamma_{g:g}.csv")
        if probe is not None:
            with torch.no_grad():
                z = ae.inject(ae.encode(probe), ae.encode(wms[: probe.shape[0]]))
                grid.extend(ae.decode_watermark(z).clamp(-1, 1))
    if out is not None:
        d = out_dir(out)
        header = list(rows[0])
        write_csv(d / "sweep_gamma.csv", header, [[r[h] for h in header] for r in rows])
        curve_plot(d / "sweep_gamma.png", curves, "watermark loss")
        if grid:
            from .datamodel import save_image

            save_image(image_grid(grid, probe.shape[0]), d / "sweep_gamma_grid.png")
    return rows
