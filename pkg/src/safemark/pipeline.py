"""End-to-end pipeline: model bundle, training orchestration, generation and extraction."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import autoencoder as aem
from .datamodel import (DomainError, Ledger, ProvenanceRecord, RunConfig, StateError, load_checkpoint,
                        png_bytes, save_checkpoint, utc_seconds)
from .diffuser import (Denoiser, ForwardState, denoiser_from_tensors, finetune_stage2, forward_diffuse_multi,
                       invert_denoise_multi, pair_predictor, plain_denoise)
from .scheduler import KeyMask, LambdaSchedule, lambda_sample, make_noise_schedule, partition
from .trigger import TriggerRegistry, embed_text, trigger_select

log = logging.getLogger(__name__)

STAGE1_FILE = "stage1.ckpt"
STAGE2_FILE = "stage2.ckpt"
DEFAULT_AE_CHANNELS = (32, 64)
DEFAULT_UNET_CHANNELS = (64, 128)
WM_GAIN = 2.0
PROMPT_TEMPLATE = "a photo with watermark [V] {wid}"


def default_home() -> Path:
    return Path(os.environ.get("SAFEMARK_HOME", Path.home() / ".safemark"))


def deterministic_mode(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels for byte-reproducible runs."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


@dataclass
class Models:
    ae: aem.WatermarkAutoencoder
    denoiser: Denoiser | None = None

    @property
    def scale(self) -> float:
        return float(self.denoiser.latent_scale) if self.denoiser is not None else 1.0

    @property
    def wm_scale(self) -> float:
        return float(self.denoiser.wm_scale) if self.denoiser is not None else 1.0

    def require_denoiser(self) -> Denoiser:
        if self.denoiser is None:
            raise StateError("stage-2 checkpoint missing; run finetune first")
        return self.denoiser

    # diffusion-space helpers: image and watermark latents are divided by their stored scales
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.ae.encode(x) / self.scale

    def encode_wm(self, w: torch.Tensor) -> torch.Tensor:
        return self.ae.encode(w) / self.wm_scale

    def inject(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        s = self.scale
        return self.ae.inject(a * s, b * self.wm_scale) / s

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.ae.decode_image(z * self.scale).clamp(-1, 1)


def save_stage1(ae: aem.WatermarkAutoencoder, home: str | os.PathLike, cfg: RunConfig) -> str:
    home = Path(home)
    home.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(home / STAGE1_FILE, aem.ae_to_tensors(ae), ae.arch, {"run": cfg.to_dict()})


def save_stage2(model: Denoiser, home: str | os.PathLike, cfg: RunConfig) -> str:
    home = Path(home)
    home.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(home / STAGE2_FILE, dict(model.state_dict()), model.arch, {"run": cfg.to_dict()})


def load_models(home: str | os.PathLike, need_denoiser: bool = True) -> Models:
    home = Path(home)
    tensors, meta = load_checkpoint(home / STAGE1_FILE)
    ae = aem.ae_from_tensors(tensors, meta["config"])
    model = None
    if need_denoiser or (home / STAGE2_FILE).exists():
        t2, m2 = load_checkpoint(home / STAGE2_FILE)
        model = denoiser_from_tensors(t2, m2["config"])
    return Models(ae, model)


# ---------------------------------------------------------------------------
# training


def train_autoencoder(images: torch.Tensor, watermarks: torch.Tensor, cfg: RunConfig,
                      channels: Sequence[int] = DEFAULT_AE_CHANNELS, base_steps: int | None = None,
                      steps: int | None = None) -> tuple[aem.WatermarkAutoencoder, list[dict]]:
    base = aem.pretrain_base(images, watermarks, cfg, channels=channels, steps=base_steps)
    ae = aem.WatermarkAutoencoder.from_base(base, adv=cfg.adv)
    return aem.train_stage1(images, watermarks, cfg, ae, steps=steps)


def prompts_for(ids: Sequence[str]) -> list[str]:
    return [PROMPT_TEMPLATE.format(wid=wid) for wid in ids]


def text_conditions(prompts: Sequence[str]) -> torch.Tensor:
    return torch.tensor(np.stack([embed_text(p) for p in prompts]), dtype=torch.float32)


@torch.no_grad()
def encode_all(ae: aem.WatermarkAutoencoder, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    return torch.cat([ae.encode(images[i:i + batch]) for i in range(0, images.shape[0], batch)])


def train_denoiser(ae: aem.WatermarkAutoencoder, images: torch.Tensor, watermarks: torch.Tensor,
                   prompts: Sequence[str], cfg: RunConfig, channels: Sequence[int] = DEFAULT_UNET_CHANNELS,
                   steps: int | None = None, wm_gain: float = WM_GAIN) -> tuple[Denoiser, list[dict]]:
    """Stage-2 fine-tuning on frozen stage-1 latents; ``prompts[k]`` pairs with ``watermarks[k]``.

    Watermark latents enter diffusion space ``wm_gain`` times louder than image
    latents, so forward noise at the last steps rarely flips a watermark cell.
    """
    if len(prompts) != watermarks.shape[0]:
        raise DomainError("need one prompt per watermark")
    before = aem.frozen_digest(ae), _digest(ae)
    z_i = encode_all(ae, images)
    z_w = encode_all(ae, watermarks)
    scale = float(torch.cat([z_i, z_w]).std())
    torch.manual_seed(cfg.seed + 10)
    model = Denoiser(cfg.d, channels)
    model.latent_scale.fill_(scale)
    model.wm_scale.fill_(scale / wm_gain)
    models = Models(ae, model)
    model, curves = finetune_stage2(z_i / scale, z_w / models.wm_scale, text_conditions(prompts), models.inject, cfg,
                                    model, steps=steps, nsched=make_noise_schedule(cfg.T, cfg.schedule, 0.0))
    if (aem.frozen_digest(ae), _digest(ae)) != before:
        raise StateError("autoencoder parameters changed during stage-2 fine-tuning")
    return model, curves


def _digest(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# generation


@dataclass
class Generation:
    images: torch.Tensor
    keys: list[KeyMask]
    state: ForwardState
    z0_m: torch.Tensor
    z0_i: torch.Tensor
    z0_w: list[torch.Tensor]


def _condition(cond, batch: int) -> torch.Tensor | None:
    if cond is None:
        return None
    if isinstance(cond, str):
        cond = embed_text(cond)
    cond = torch.as_tensor(np.asarray(cond), dtype=torch.float32)
    return cond.expand(batch, -1) if cond.dim() == 1 else cond


@torch.no_grad()
def watermark_batch(source: torch.Tensor | None, wms: Sequence[torch.Tensor], models: Models, cfg: RunConfig,
                    cond=None, schedules: Sequence[LambdaSchedule] | None = None, seed: int | None = None,
                    batch: int | None = None) -> Generation:
    """Watermark a batch (editing mode) or synthesize one (``source`` None).

    ``wms`` holds one ``(B, 3, H, W)`` tensor per watermark; several watermarks
    split the sampled step set disjointly.  Synthesis draws the starting image
    latent from a standard normal and runs the same chain.
    """
    model = models.require_denoiser()
    seed = cfg.seed if seed is None else seed
    b = wms[0].shape[0] if source is None else source.shape[0]
    nsched = make_noise_schedule(cfg.T, cfg.schedule, cfg.eta)
    if schedules is None:
        full = lambda_sample(cfg.T, cfg.lam, np.random.default_rng(seed), cfg.time_bias)
        schedules = [full] if len(wms) == 1 else partition(full, len(wms), np.random.default_rng(seed + 1))
    gen = torch.Generator().manual_seed(seed)
    z_ws = [models.encode_wm(w) for w in wms]
    if source is None:
        z_i = torch.randn(z_ws[0].shape, generator=gen)
    else:
        z_i = models.encode(source)
    state = forward_diffuse_multi(z_i, z_ws, schedules, nsched, models.inject, gen)
    predict = pair_predictor(model, _condition(cond, b), cfg.cfg_scale)
    z_m, z0_i, z0_w, _ = invert_denoise_multi(state.zT_m, state.zT_i, state.zT_w, state.keys, predict, nsched,
                                              gen if cfg.eta > 0 else None)
    return Generation(models.decode(z_m), state.keys, state, z_m, z0_i, z0_w)


@torch.no_grad()
def reconstruct_unwatermarked(source: torch.Tensor, wm: torch.Tensor, models: Models, cfg: RunConfig,
                              cond=None, seed: int | None = None) -> torch.Tensor:
    """Reference path without any key: plain forward noising and paired DDIM decoding."""
    model = models.require_denoiser()
    seed = cfg.seed if seed is None else seed
    nsched = make_noise_schedule(cfg.T, cfg.schedule, cfg.eta)
    gen = torch.Generator().manual_seed(seed)
    z, w = models.encode(source), models.encode_wm(wm)
    for t in range(1, cfg.T + 1):
        r = nsched.step_coef(t)
        k = math.sqrt(max(1.0 - r * r, 0.0))
        e = torch.randn(z.shape, generator=gen)
        e_w = torch.randn(z.shape, generator=gen)
        z = r * z + k * e
        w = r * w + k * e_w
    predict = pair_predictor(model, _condition(cond, source.shape[0]), cfg.cfg_scale)
    z0, _ = plain_denoise(z, w, predict, nsched, gen if cfg.eta > 0 else None)
    return models.decode(z0)


@torch.no_grad()
def extract_watermark(img: torch.Tensor, ae: aem.WatermarkAutoencoder | None) -> torch.Tensor:
    if ae is None:
        raise StateError("stage-1 checkpoint missing")
    single = img.dim() == 3
    out = ae.extract(img[None] if single else img).clamp(-1, 1)
    return out[0] if single else out


@torch.no_grad()
def keyed_readout(gen: Generation, models: Models) -> list[torch.Tensor]:
    """Per-key watermark readout: the extractor applied to each key's re-formed mixture."""
    return [models.ae.decode_watermark(models.inject(gen.z0_i, z_w) * models.scale).clamp(-1, 1) for z_w in gen.z0_w]


@dataclass
class GenerateResult:
    image: torch.Tensor
    key: KeyMask
    record: ProvenanceRecord | None
    watermark_id: str


def generate(prompt: str, source: torch.Tensor | None, wm: torch.Tensor | None, cfg: RunConfig, models: Models,
             registry: TriggerRegistry | None = None, watermark_id: str | None = None,
             user_wm: torch.Tensor | None = None, ledger: Ledger | None = None) -> GenerateResult:
    """Single-image pipeline: trigger, encode, keyed diffusion, decode and ledger append.

    The watermark comes from ``wm`` (with ``watermark_id``), a registry id,
    or trigger selection on the prompt, in that order.
    """
    if models is None or models.ae is None:
        raise StateError("stage-1 checkpoint missing")
    models.require_denoiser()
    if wm is None:
        if watermark_id is not None and watermark_id != "user":
            if registry is None:
                raise StateError("watermark registry missing")
            wm = registry.get(watermark_id).watermark
        else:
            wm, watermark_id = trigger_select(prompt, registry or TriggerRegistry(), user_wm)
    watermark_id = watermark_id or "user"
    src = None if source is None else source[None]
    out = watermark_batch(src, [wm[None]], models, cfg, cond=prompt)
    image = out.images[0]
    record = None
    if ledger is not None:
        import hashlib

        digest = hashlib.sha256(png_bytes(image)).hexdigest()
        record = ProvenanceRecord(digest, watermark_id, str(out.keys[0]), cfg.seed, utc_seconds(), prompt)
        ledger.append(record)
    return GenerateResult(image, out.keys[0], record, watermark_id)
