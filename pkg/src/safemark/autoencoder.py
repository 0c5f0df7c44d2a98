"""Stage-1 model: shared encoder, injection convolution and dual decoders."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import DomainError, RunConfig, SafemarkError, ShapeError, StateError

log = logging.getLogger(__name__)


class TrainingDiverged(SafemarkError, RuntimeError):
    pass


def _groups(ch: int, groups: int) -> int:
    g = min(groups, ch)
    while ch % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    def __init__(self, ch: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch, groups), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch, groups), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


def _widths(channels: Sequence[int], levels: int) -> list[int]:
    widths = list(channels)
    while len(widths) < levels + 1:
        widths.append(widths[-1])
    return widths[: levels + 1]


class Encoder(nn.Module):
    def __init__(self, d: int = 4, f: int = 4, channels: Sequence[int] = (32, 64), n_res: int = 1, groups: int = 8):
        super().__init__()
        levels = int(round(math.log2(f)))
        if 2 ** levels != f:
            raise DomainError(f"f must be a power of two, got {f}")
        self.f = f
        w = _widths(channels, levels)
        self.conv_in = nn.Conv2d(3, w[0], 3, padding=1)
        self.stages = nn.ModuleList()
        for i in range(levels):
            self.stages.append(nn.Sequential(
                *[ResBlock(w[i], groups) for _ in range(n_res)],
                nn.Conv2d(w[i], w[i + 1], 3, stride=2, padding=1),
            ))
        self.mid = nn.Sequential(*[ResBlock(w[-1], groups) for _ in range(n_res)])
        self.norm_out = nn.GroupNorm(_groups(w[-1], groups), w[-1])
        self.conv_out = nn.Conv2d(w[-1], d, 3, padding=1)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Intermediate activations, one per resolution level plus the latent."""
        feats = []
        h = self.conv_in(x)
        feats.append(h)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        h = self.mid(h)
        z = self.conv_out(F.silu(self.norm_out(h)))
        feats.append(z)
        return feats

    def forward(self, x):
        return self.features(x)[-1]


class Decoder(nn.Module):
    def __init__(self, d: int = 4, f: int = 4, channels: Sequence[int] = (32, 64), n_res: int = 1, groups: int = 8):
        super().__init__()
        levels = int(round(math.log2(f)))
        w = _widths(channels, levels)[::-1]
        self.conv_in = nn.Conv2d(d, w[0], 3, padding=1)
        self.mid = nn.Sequential(*[ResBlock(w[0], groups) for _ in range(n_res)])
        self.stages = nn.ModuleList()
        for i in range(levels):
            self.stages.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(w[i], w[i + 1], 3, padding=1),
                *[ResBlock(w[i + 1], groups) for _ in range(n_res)],
            ))
        self.norm_out = nn.GroupNorm(_groups(w[-1], groups), w[-1])
        self.conv_out = nn.Conv2d(w[-1], 3, 3, padding=1)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for stage in self.stages:
            h = stage(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class InjectionConv(nn.Module):
    """Maps the channel concatenation ``[z_i, z_w]`` (2d channels) to a d-channel mixture."""

    def __init__(self, d: int, kernel_size: int = 3):
        super().__init__()
        self.d = d
        self.conv = nn.Conv2d(2 * d, d, kernel_size, padding=kernel_size // 2)
        self.pass_through_()

    @torch.no_grad()
    def pass_through_(self):
        """Identity on the image half, zeros on the watermark half."""
        w = self.conv.weight
        w.zero_()
        c = w.shape[-1] // 2
        for k in range(self.d):
            w[k, k, c, c] = 1.0
        self.conv.bias.zero_()

    def forward(self, z_i, z_w):
        if z_i.shape != z_w.shape:
            raise ShapeError(f"latent shapes differ: {tuple(z_i.shape)} vs {tuple(z_w.shape)}")
        return self.conv(torch.cat([z_i, z_w], dim=-3))


class PatchDiscriminator(nn.Module):
    """Small hinge-loss patch critic for the optional adversarial term."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels * 2, 4, 2, 1), nn.GroupNorm(_groups(channels * 2, 8), channels * 2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels * 2, 1, 3, 1, 1),
        )

    def forward(self, x):
        return self.net(x)


class BaseAutoencoder(nn.Module):
    """Plain encoder/decoder pair pretrained on images and watermarks."""

    def __init__(self, d=4, f=4, channels=(32, 64), n_res=1, groups=8):
        super().__init__()
        self.arch = dict(d=d, f=f, channels=list(channels), n_res=n_res, groups=groups)
        self.enc = Encoder(d, f, channels, n_res, groups)
        self.dec = Decoder(d, f, channels, n_res, groups)

    def forward(self, x):
        return self.dec(self.enc(x))


class WatermarkAutoencoder(nn.Module):
    """Shared encoder ``enc``, injection layer ``inj``, frozen image decoder ``dec_i``
    and trainable watermark extractor ``dec_w``."""

    def __init__(self, d=4, f=4, channels=(32, 64), n_res=1, groups=8, adv: bool = False):
        super().__init__()
        self.arch = dict(d=d, f=f, channels=list(channels), n_res=n_res, groups=groups)
        self.d, self.f = d, f
        self.enc = Encoder(d, f, channels, n_res, groups)
        self.inj = InjectionConv(d)
        self.dec_i = Decoder(d, f, channels, n_res, groups)
        self.dec_w = copy.deepcopy(self.dec_i)
        self.dec_i.requires_grad_(False)
        self.disc = PatchDiscriminator() if adv else None

    @classmethod
    def from_base(cls, base: BaseAutoencoder, adv: bool = False) -> "WatermarkAutoencoder":
        ae = cls(**base.arch, adv=adv)
        ae.enc.load_state_dict(base.enc.state_dict())
        ae.dec_i.load_state_dict(base.dec.state_dict())
        ae.dec_w.load_state_dict(base.dec.state_dict())
        ae.dec_i.requires_grad_(False)
        return ae

    def _check_image(self, x):
        if x.shape[-1] != x.shape[-2]:
            raise ShapeError(f"image must be square, got {tuple(x.shape[-2:])}")
        if x.shape[-1] % self.f:
            raise ShapeError(f"image side {x.shape[-1]} not divisible by f={self.f}")
        if x.shape[-3] != 3:
            raise ShapeError("image must have 3 channels")

    def _check_latent(self, z):
        if z.shape[-3] != self.d:
            raise ShapeError(f"latent must have {self.d} channels, got {z.shape[-3]}")

    def encode(self, x):
        self._check_image(x)
        return self.enc(x)

    def inject(self, z_i, z_w):
        return self.inj(z_i, z_w)

    def decode_image(self, z_m):
        self._check_latent(z_m)
        return self.dec_i(z_m)

    def decode_watermark(self, z_m):
        self._check_latent(z_m)
        return self.dec_w(z_m)

    def extract(self, img):
        """Watermark readout from a pixel image: ``dec_w(enc(img))``."""
        return self.decode_watermark(self.encode(img))

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(("dec_i.", "disc."))]


def frozen_digest(ae: WatermarkAutoencoder) -> str:
    h = hashlib.sha256()
    for name, p in sorted(ae.dec_i.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Stage1Loss(NamedTuple):
    total: torch.Tensor
    img: torch.Tensor
    wm: torch.Tensor
    adv: torch.Tensor


def stage1_loss(x, w, x_hat, w_hat, gamma: float, adv: torch.Tensor | None = None) -> Stage1Loss:
    """``mse(x, x_hat) + gamma * mse(w, w_hat) + adv`` with mean reduction."""
    if gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    if x.shape != x_hat.shape or w.shape != w_hat.shape:
        raise ShapeError("prediction/target shapes differ")
    img = (x - x_hat).pow(2).mean()
    wm = (w - w_hat).pow(2).mean()
    adv_term = adv if adv is not None else torch.zeros((), dtype=img.dtype)
    return Stage1Loss(img + gamma * wm + adv_term, img, wm, adv_term)


def emit_straight_through(x_hat: torch.Tensor) -> torch.Tensor:
    """Clamp + 8-bit quantize in the forward pass, identity gradient in the backward pass."""
    q = torch.round((x_hat.clamp(-1, 1) + 1) * 127.5) / 127.5 - 1
    return x_hat + (q - x_hat).detach()


def _sample(pool: torch.Tensor, n: int, gen: torch.Generator) -> torch.Tensor:
    idx = torch.randint(0, pool.shape[0], (n,), generator=gen)
    return pool[idx]


def pretrain_base(images: torch.Tensor, watermarks: torch.Tensor, cfg: RunConfig,
                  channels=(32, 64), n_res=1, steps: int | None = None) -> BaseAutoencoder:
    """Reconstruction pretraining of the plain autoencoder on both image kinds."""
    torch.manual_seed(cfg.seed)
    base = BaseAutoencoder(cfg.d, cfg.f, channels, n_res)
    steps = cfg.base_budget if steps is None else steps
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam(base.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1), eta_min=cfg.lr * 0.05)
    half = max(cfg.batch // 2, 1)
    for step in range(steps):
        x = torch.cat([_sample(images, cfg.batch - half, gen), _sample(watermarks, half, gen)])
        loss = (base(x) - x).pow(2).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"base pretraining loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("base step %d mse %.5f", step, loss.item())
    return base


def _adv_terms(ae: WatermarkAutoencoder, x, x_hat, disc_opt, weight: float):
    # hinge critic update, then the generator term for the encoder/injection path
    logits_real = ae.disc(x)
    logits_fake = ae.disc(x_hat.detach())
    d_loss = F.relu(1 - logits_real).mean() + F.relu(1 + logits_fake).mean()
    disc_opt.zero_grad()
    d_loss.backward()
    disc_opt.step()
    return -weight * ae.disc(x_hat).mean()


def train_stage1(images: torch.Tensor, watermarks: torch.Tensor, cfg: RunConfig,
                 ae: WatermarkAutoencoder, steps: int | None = None, reencode: bool = True,
                 adv_weight: float = 0.1, adv_start: int = 500) -> tuple[WatermarkAutoencoder, list[dict]]:
    """Jointly train encoder, injection layer and watermark extractor; ``dec_i`` stays frozen.

    With ``reencode`` the extractor is also supervised through the pixel path
    ``dec_w(enc(emit(dec_i(z_m))))`` so watermarks survive decoding to an image file.
    Both readouts enter the watermark term as one stacked batch.
    Returns the model and per-step loss rows ``{step, img, wm, adv}``.
    """
    if images.shape[0] == 0 or watermarks.shape[0] == 0:
        raise DomainError("training sets must be non-empty")
    steps = cfg.budget if steps is None else steps
    curves: list[dict] = []
    if steps == 0:
        return ae, curves
    before = frozen_digest(ae)
    torch.manual_seed(cfg.seed + 2)
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    opt = torch.optim.Adam(ae.trainable_parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps, eta_min=cfg.lr * 0.05)
    use_adv = cfg.adv and ae.disc is not None
    disc_opt = torch.optim.Adam(ae.disc.parameters(), lr=cfg.lr, betas=(0.5, 0.9)) if use_adv else None
    ae.train()
    for step in range(steps):
        x = _sample(images, cfg.batch, gen)
        w = _sample(watermarks, cfg.batch, gen)
        z_m = ae.inject(ae.encode(x), ae.encode(w))
        x_hat = ae.decode_image(z_m)
        w_hat = ae.decode_watermark(z_m)
        if reencode:
            w_img = ae.decode_watermark(ae.enc(emit_straight_through(x_hat)))
            w_hat, w_ref = torch.cat([w_hat, w_img]), torch.cat([w, w])
        else:
            w_ref = w
        adv = _adv_terms(ae, x, x_hat, disc_opt, adv_weight) if use_adv and step >= adv_start else None
        loss = stage1_loss(x, w_ref, x_hat, w_hat, cfg.gamma, adv)
        if not torch.isfinite(loss.total):
            raise TrainingDiverged(
                f"stage-1 loss became {loss.total.item()} at step {step} "
                f"(img={loss.img.item()}, wm={loss.wm.item()}, adv={loss.adv.item()})")
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        sched.step()
        curves.append({"step": step, "img": loss.img.item(), "wm": loss.wm.item(), "adv": loss.adv.item()})
        if step % 250 == 0:
            log.info("stage1 step %d img %.5f wm %.5f", step, loss.img.item(), loss.wm.item())
    ae.eval()
    if frozen_digest(ae) != before:
        raise StateError("frozen image decoder changed during stage-1 training")
    return ae, curves


def write_curves(curves: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "img", "wm", "adv"])
        for row in curves:
            writer.writerow([row["step"], f"{row['img']:.8g}", f"{row['wm']:.8g}", f"{row['adv']:.8g}"])


def ae_to_tensors(ae: WatermarkAutoencoder) -> dict[str, torch.Tensor]:
    return {k: v for k, v in ae.state_dict().items()}


def ae_from_tensors(tensors: dict[str, torch.Tensor], arch: dict) -> WatermarkAutoencoder:
    adv = any(k.startswith("disc.") for k in tensors)
    ae = WatermarkAutoencoder(**arch, adv=adv)
    ae.load_state_dict(tensors)
    ae.dec_i.requires_grad_(False)
    ae.eval()
    return ae
