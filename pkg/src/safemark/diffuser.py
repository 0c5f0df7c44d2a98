"""Stage-2 latent diffuser: key-driven forward diffusion, inverted DDIM denoising and fine-tuning.

Chain semantics used throughout (one image chain carries the watermark):

* forward, step ``t`` with ``m_t = 0``: the image chain is noised with the
  per-step factor ``r_t = sqrt(a_t / a_{t-1})``; the clean chain takes the
  same update.
* forward, ``m_t = 1``: the mixture is re-formed as ``f_c(image, watermark)``
  from the step ``t-1`` latents and then noised; the clean chain is held.
* the watermark chain is noised at every step.
* inverse, ``m_t = 1``: the mixture chain is DDIM-updated from the shared
  denoiser evaluated on ``[z_m, z_w]``; ``m_t = 0``: the clean chain is updated
  from ``[z_i, z_w]``.  The idle image chain coasts along its last predicted
  noise (a deterministic DDIM transport, no extra evaluation) or, before it
  has any prediction, mirrors the active chain (mixture) / stays put (clean).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import TrainingDiverged, _groups
from .datamodel import DomainError, RunConfig, ShapeError, StateError
from .scheduler import KeyMask, LambdaSchedule, NoiseSchedule, key_compose

log = logging.getLogger(__name__)

CFG_DROP = 0.1


# ---------------------------------------------------------------------------
# conditional U-Net


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class CondResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, groups), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(_groups(cout, groups), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Noise predictor on channel-concatenated latent pairs (``2d`` in, ``2d`` out).

    The timestep embedding and the text embedding are concatenated and injected
    by FiLM into every residual block at every resolution.  A learned branch
    embedding tells the network whether the first latent is the watermarked
    mixture (1) or the clean image (0); without it the injected residual is
    regressed away as noise.  ``calls`` counts forward evaluations.
    """

    def __init__(self, d: int = 4, channels: Sequence[int] = (64, 128), text_dim: int = 64,
                 emb_dim: int = 128, n_res: int = 1, groups: int = 8, zero_out: bool = True):
        super().__init__()
        self.arch = dict(d=d, channels=list(channels), text_dim=text_dim, emb_dim=emb_dim,
                         n_res=n_res, groups=groups)
        self.d = d
        self.text_dim = text_dim
        self.emb_dim = emb_dim
        self.null_embedding = nn.Parameter(torch.zeros(text_dim))
        self.register_buffer("latent_scale", torch.ones(()))
        # watermark latents get their own, smaller divisor: a louder watermark chain
        self.register_buffer("wm_scale", torch.ones(()))
        self.cond_mlp = nn.Sequential(nn.Linear(emb_dim + text_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.branch_embedding = nn.Embedding(2, emb_dim)
        chans = list(channels)
        self.conv_in = nn.Conv2d(2 * d, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, c in enumerate(chans):
            self.down.append(nn.ModuleList([CondResBlock(prev if j == 0 else c, c, emb_dim, groups) for j in range(n_res)]))
            prev = c
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = CondResBlock(prev, prev, emb_dim, groups)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            c = chans[i]
            self.up.append(CondResBlock(prev + c, c, emb_dim, groups))
            prev = c
            if i > 0:
                self.upsample.append(nn.Conv2d(c, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]
        self.norm_out = nn.GroupNorm(_groups(prev, groups), prev)
        self.conv_out = nn.Conv2d(prev, 2 * d, 3, padding=1)
        if zero_out:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)
        self.calls = 0

    def condition(self, cond: torch.Tensor | None, batch: int) -> torch.Tensor:
        if cond is None:
            return self.null_embedding.expand(batch, -1)
        cond = cond.to(self.null_embedding.dtype)
        if cond.dim() == 1:
            cond = cond.expand(batch, -1)
        return cond

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None,
                drop: torch.Tensor | None = None, branch: torch.Tensor | int | None = None) -> torch.Tensor:
        if z.shape[1] != 2 * self.d:
            raise ShapeError(f"denoiser expects {2 * self.d} channels, got {z.shape[1]}")
        self.calls += 1
        b = z.shape[0]
        if t.dim() == 0:
            t = t.expand(b)
        c = self.condition(cond, b)
        if drop is not None:
            c = torch.where(drop[:, None], self.null_embedding.expand(b, -1), c)
        # unit-norm text vectors are rescaled to unit-variance entries, like the timestep features
        emb = self.cond_mlp(torch.cat([timestep_embedding(t, self.emb_dim).to(z.dtype), c], dim=1))
        if branch is None:
            branch = 0
        if not torch.is_tensor(branch):
            branch = torch.full((b,), int(branch), dtype=torch.long)
        emb = emb + self.branch_embedding(branch.long().expand(b))
        h = self.conv_in(z)
        skips = []
        for i, blocks in enumerate(self.down):
            for blk in blocks:
                h = blk(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for j, blk in enumerate(self.up):
            h = blk(torch.cat([h, skips.pop()], dim=1), emb)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# forward diffusion


Injector = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class ForwardState:
    zT_m: torch.Tensor
    zT_i: torch.Tensor
    zT_w: list[torch.Tensor]
    keys: list[KeyMask]
    # per-step (image noise, [watermark noises]) when recorded
    noises: list[tuple[torch.Tensor, list[torch.Tensor]]] = field(default_factory=list)


def _owners(scheds: Sequence[LambdaSchedule], T: int) -> list[int | None]:
    owner: list[int | None] = [None] * (T + 1)
    for k, s in enumerate(scheds):
        if s.T != T:
            raise DomainError(f"lambda schedule has T={s.T}, noise schedule has T={T}")
        for t in s.injected:
            if owner[t] is not None:
                raise DomainError(f"step {t} is claimed by two watermarks")
            owner[t] = k
    return owner


def forward_diffuse_multi(z_i: torch.Tensor, z_ws: Sequence[torch.Tensor], scheds: Sequence[LambdaSchedule],
                          nsched: NoiseSchedule, inj: Injector, rng: torch.Generator,
                          record_noise: bool = False) -> ForwardState:
    """Forward chain with one watermark chain per disjoint schedule.

    At a step owned by watermark ``k`` the mixture is re-formed by ``inj`` from
    the previous clean latent and chain ``k`` and then noised; elsewhere the
    clean chain is noised and copied to the mixture.  Injections therefore do
    not compound.  Noise draw order per step: image chain, then each watermark
    chain.
    """
    if len(z_ws) != len(scheds):
        raise DomainError("need one lambda schedule per watermark latent")
    for z_w in z_ws:
        if z_w.shape != z_i.shape:
            raise ShapeError(f"latent shapes differ: {tuple(z_i.shape)} vs {tuple(z_w.shape)}")
    T = nsched.T
    owner = _owners(scheds, T)
    clean = z_i.clone()
    mix = z_i.clone()
    ws = [z.clone() for z in z_ws]
    flags = [[0] * T for _ in scheds]
    noises = []
    for t in range(1, T + 1):
        r = nsched.step_coef(t)
        k = math.sqrt(max(1.0 - r * r, 0.0))
        eps = torch.randn(z_i.shape, generator=rng, dtype=z_i.dtype)
        eps_w = [torch.randn(z_i.shape, generator=rng, dtype=z_i.dtype) for _ in ws]
        o = owner[t]
        if o is None:
            clean = r * clean + k * eps
            mix = clean
        else:
            # re-form from the previous clean and watermark latents; the clean chain is held
            mix = r * inj(clean, ws[o]) + k * eps
            flags[o][t - 1] = 1
        ws = [r * w + k * e for w, e in zip(ws, eps_w)]
        if record_noise:
            noises.append((eps, eps_w))
    keys = [key_compose(f, T) for f in flags]
    for key, sch in zip(keys, scheds):
        assert key.popcount == sch.lam
    return ForwardState(mix, clean, ws, keys, noises)


def forward_diffuse(z_i: torch.Tensor, z_w: torch.Tensor, lsched: LambdaSchedule, nsched: NoiseSchedule,
                    inj: Injector, rng: torch.Generator, return_state: bool = False):
    """Lambda-sampling forward diffusion; returns ``(z_m^T, key)``."""
    state = forward_diffuse_multi(z_i, [z_w], [lsched], nsched, inj, rng)
    if return_state:
        return state.zT_m, state.keys[0], state
    return state.zT_m, state.keys[0]


def plain_diffuse(z0: torch.Tensor, nsched: NoiseSchedule, rng: torch.Generator, extra_chains: int = 1):
    """Per-step noising of a single chain, consuming the rng like the keyed chain."""
    z = z0.clone()
    for t in range(1, nsched.T + 1):
        r = nsched.step_coef(t)
        k = math.sqrt(max(1.0 - r * r, 0.0))
        eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
        for _ in range(extra_chains):
            torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
        z = r * z + k * eps
    return z


def marginal_noise(z0: torch.Tensor, eps: torch.Tensor, t: int, nsched: NoiseSchedule) -> torch.Tensor:
    a = nsched.a[t]
    return math.sqrt(a) * z0 + math.sqrt(1 - a) * eps


# ---------------------------------------------------------------------------
# denoising


def ddim_step(z_t: torch.Tensor, eps: torch.Tensor, t: int, nsched: NoiseSchedule,
              rng: torch.Generator | None = None, sigma: float | None = None) -> torch.Tensor:
    """One DDIM update ``z_t -> z_{t-1}``; draws noise only when ``sigma_t > 0``."""
    if eps.shape != z_t.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(z_t.shape)}")
    a_t, a_prev = nsched.a[t], nsched.a[t - 1]
    s = nsched.sigma[t] if sigma is None else sigma
    x0 = (z_t - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
    out = math.sqrt(a_prev) * x0 + nsched.direction_coef(t, s) * eps
    if s > 0:
        if rng is None:
            raise DomainError("stochastic DDIM step needs an rng")
        out = out + s * torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
    return out


def _t(t: int, batch: int) -> torch.Tensor:
    return torch.full((batch,), t, dtype=torch.long)


def cfg_predict(z: torch.Tensor, c: torch.Tensor | None, t: int, model: Denoiser, scale: float,
                branch: int | None = None) -> torch.Tensor:
    """Classifier-free guidance ``u + scale * (c - u)`` from one batched evaluation."""
    if scale < 0:
        raise DomainError("guidance scale must be >= 0")
    b = z.shape[0]
    kw = {} if branch is None else {"branch": branch}
    if c is None or scale == 1.0:
        return model(z, _t(t, b), c, **kw)
    if scale == 0.0:
        return model(z, _t(t, b), None, **kw)
    cond = model.condition(c, b)
    null = model.null_embedding.expand(b, -1)
    out = model(torch.cat([z, z]), _t(t, 2 * b), torch.cat([cond, null]), **kw)
    e_c, e_u = out.chunk(2)
    return e_u + scale * (e_c - e_u)


def denoise_pair(z_a: torch.Tensor, z_w: torch.Tensor, c: torch.Tensor | None, t: int, model: Denoiser,
                 guidance: float | None = None, branch: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Single shared evaluation on ``[z_a, z_w]``, split back into two predictions."""
    if z_a.shape != z_w.shape:
        raise ShapeError(f"latent shapes differ: {tuple(z_a.shape)} vs {tuple(z_w.shape)}")
    z = torch.cat([z_a, z_w], dim=1)
    if guidance is None:
        eps = model(z, _t(t, z.shape[0]), c, **({} if branch is None else {"branch": branch}))
    else:
        eps = cfg_predict(z, c, t, model, guidance, branch)
    return eps[:, : z_a.shape[1]], eps[:, z_a.shape[1]:]


# (z_a, z_w, t, branch) -> (eps_a, eps_w); branch is 1 when z_a is the mixture chain
PairPredictor = Callable[[torch.Tensor, torch.Tensor, int, int], tuple[torch.Tensor, torch.Tensor]]


def pair_predictor(model: Denoiser, c: torch.Tensor | None, guidance: float | None = None) -> PairPredictor:
    def predict(z_a, z_w, t, branch):
        return denoise_pair(z_a, z_w, c, t, model, guidance, branch)
    return predict


@dataclass
class InversionStats:
    mixture_updates: int = 0
    clean_updates: int = 0
    evaluations: int = 0


def invert_denoise_multi(zT_m: torch.Tensor, zT_i: torch.Tensor, zT_ws: Sequence[torch.Tensor],
                         keys: Sequence[KeyMask], predict: PairPredictor, nsched: NoiseSchedule,
                         rng: torch.Generator | None = None):
    """Key-driven inverted denoising with one watermark chain per key.

    Each step evaluates the predictor once per watermark chain, pairing it with
    the active image chain.  Returns ``(z0_m, z0_i, [z0_w...], stats)``.
    """
    T = nsched.T
    for key in keys:
        if key.T != T:
            raise DomainError(f"key length {key.T} != schedule length {T}")
    owner: list[int | None] = [None] * (T + 1)
    for k, key in enumerate(keys):
        for t, b in enumerate(key.bits, start=1):
            if b:
                if owner[t] is not None:
                    raise DomainError(f"keys overlap at step {t}")
                owner[t] = k
    z_m, z_i = zT_m.clone(), zT_i.clone()
    ws = [z.clone() for z in zT_ws]
    last_m = last_i = None
    stats = InversionStats()
    for t in range(T, 0, -1):
        o = owner[t]
        mixing = o is not None
        z_a = z_m if mixing else z_i
        preds = [predict(z_a, w, t, int(mixing)) for w in ws]
        stats.evaluations += len(preds)
        eps_a = preds[o if mixing else 0][0]
        if mixing:
            z_m = ddim_step(z_m, eps_a, t, nsched, rng)
            last_m = eps_a
            stats.mixture_updates += 1
            if last_i is not None:
                z_i = ddim_step(z_i, last_i, t, nsched, sigma=0.0)
        else:
            z_i = ddim_step(z_i, eps_a, t, nsched, rng)
            last_i = eps_a
            stats.clean_updates += 1
            z_m = ddim_step(z_m, last_m, t, nsched, sigma=0.0) if last_m is not None else z_i.clone()
        ws = [ddim_step(w, p[1], t, nsched, rng) for w, p in zip(ws, preds)]
    return z_m, z_i, ws, stats


def invert_denoise(zT_m: torch.Tensor, zT_i: torch.Tensor, zT_w: torch.Tensor, m: KeyMask,
                   c: torch.Tensor | None, p: Denoiser | PairPredictor, nsched: NoiseSchedule,
                   guidance: float | None = None, rng: torch.Generator | None = None,
                   return_stats: bool = False):
    """Lambda-encryption inverted denoising; returns ``(z0_m, z0_i, z0_w)``.

    ``p`` is a :class:`Denoiser` (evaluated through :func:`denoise_pair` with
    condition ``c``) or any ``(z_a, z_w, t, branch) -> (eps_a, eps_w)`` callable.
    The watermark chain is updated every step from the active pairing, so its
    final value comes from the mixture pairing when ``m_1 = 1`` and from the
    clean pairing otherwise.
    """
    predict = pair_predictor(p, c, guidance) if isinstance(p, nn.Module) else p
    z_m, z_i, ws, stats = invert_denoise_multi(zT_m, zT_i, [zT_w], [m], predict, nsched, rng)
    if return_stats:
        return z_m, z_i, ws[0], stats
    return z_m, z_i, ws[0]


def plain_denoise(zT: torch.Tensor, zT_w: torch.Tensor, predict: PairPredictor, nsched: NoiseSchedule,
                  rng: torch.Generator | None = None):
    """DDIM on a single image chain paired with one watermark chain, no key."""
    z, w = zT.clone(), zT_w.clone()
    for t in range(nsched.T, 0, -1):
        e_a, e_w = predict(z, w, t, 0)
        z = ddim_step(z, e_a, t, nsched, rng)
        w = ddim_step(w, e_w, t, nsched, rng)
    return z, w


# ---------------------------------------------------------------------------
# training


@dataclass
class Stage2Loss:
    total: torch.Tensor
    mixture_terms: int
    clean_terms: int


def stage2_loss(batch: dict, model: Denoiser | Callable, nsched: NoiseSchedule,
                inj: Injector | None = None, drop: torch.Tensor | None = None) -> Stage2Loss:
    """Stepwise denoising loss over both branches.

    ``batch`` holds ``z_i, z_w`` (B, d, h, w), ``t`` (B,), ``m`` (B,) branch bits,
    ``c`` (B, k) or None, and optionally ``z_m`` (else ``inj`` forms it) and the
    sampled noise ``eps`` (B, 2d, h, w).  Each element contributes exactly one
    branch term; noisy inputs use the cumulative marginal.
    """
    z_i, z_w, t, m = batch["z_i"], batch["z_w"], batch["t"], batch["m"]
    z_m = batch.get("z_m")
    if z_m is None:
        if inj is None:
            raise DomainError("stage2_loss needs z_m or an injector")
        z_m = inj(z_i, z_w)
    mask = m.to(torch.bool)[:, None, None, None]
    z0 = torch.where(mask, z_m, z_i)
    eps = batch.get("eps")
    if eps is None:
        eps = torch.randn(z0.shape[0], 2 * z0.shape[1], *z0.shape[2:], dtype=z0.dtype)
    a = torch.tensor(nsched.a, dtype=z0.dtype)[t][:, None, None, None]
    e_a, e_w = eps.chunk(2, dim=1)
    noisy = torch.cat([a.sqrt() * z0 + (1 - a).sqrt() * e_a, a.sqrt() * z_w + (1 - a).sqrt() * e_w], dim=1)
    if isinstance(model, Denoiser):
        pred = model(noisy, t, batch.get("c"), drop, m)
    else:
        pred = model(noisy, t, batch.get("c"))
    total = (eps - pred).pow(2).mean()
    n_mix = int(m.sum().item())
    return Stage2Loss(total, n_mix, int(m.numel()) - n_mix)


@torch.no_grad()
def latent_scale_of(latents: torch.Tensor) -> float:
    return float(latents.std().clamp_min(1e-6))


def finetune_stage2(z_images: torch.Tensor, z_wms: torch.Tensor, conds: torch.Tensor, inj: Injector,
                    cfg: RunConfig, model: Denoiser, steps: int | None = None,
                    nsched: NoiseSchedule | None = None, pair_cond: bool = True) -> tuple[Denoiser, list[dict]]:
    """Fine-tune the denoiser on pre-encoded latents (diffusion scale).

    ``conds[k]`` is the text embedding paired with watermark ``k`` when
    ``pair_cond``; otherwise conditions are drawn independently.  Branch bits are
    Bernoulli(lambda / T); the condition is dropped to the null embedding with
    probability 0.1.
    """
    from .scheduler import make_noise_schedule

    steps = cfg.stage2_budget if steps is None else steps
    curves: list[dict] = []
    if steps == 0:
        return model, curves
    nsched = nsched or make_noise_schedule(cfg.T, cfg.schedule, 0.0)
    torch.manual_seed(cfg.seed + 11)
    gen = torch.Generator().manual_seed(cfg.seed + 12)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.stage2_lr)
    warm = min(200, steps)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warm) * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * s / steps))))
    p_mix = cfg.lam / cfg.T
    bsz = max(cfg.batch, 16)
    model.train()
    for step in range(steps):
        ii = torch.randint(0, z_images.shape[0], (bsz,), generator=gen)
        wi = torch.randint(0, z_wms.shape[0], (bsz,), generator=gen)
        ci = wi if pair_cond else torch.randint(0, conds.shape[0], (bsz,), generator=gen)
        t = torch.randint(1, cfg.T + 1, (bsz,), generator=gen)
        m = (torch.rand(bsz, generator=gen) < p_mix).long()
        drop = torch.rand(bsz, generator=gen) < CFG_DROP
        eps = torch.randn(bsz, 2 * z_images.shape[1], *z_images.shape[2:], generator=gen)
        z_i, z_w = z_images[ii], z_wms[wi]
        with torch.no_grad():
            z_m = inj(z_i, z_w)
        batch = {"z_i": z_i, "z_w": z_w, "z_m": z_m, "t": t, "m": m, "c": conds[ci], "eps": eps}
        loss = stage2_loss(batch, model, nsched, drop=drop)
        if not torch.isfinite(loss.total):
            raise TrainingDiverged(f"stage-2 loss became {loss.total.item()} at step {step}")
        opt.zero_grad()
        loss.total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        curves.append({"step": step, "loss": loss.total.item()})
        if step % 500 == 0:
            log.info("stage2 step %d loss %.5f", step, loss.total.item())
    model.eval()
    return model, curves


def write_stage2_curves(curves: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for row in curves:
            writer.writerow([row["step"], f"{row['loss']:.8g}"])


def denoiser_from_tensors(tensors: dict[str, torch.Tensor], arch: dict) -> Denoiser:
    model = Denoiser(**arch)
    tensors = dict(tensors)
    # checkpoints written before the separate watermark scale used one scale for both
    tensors.setdefault("wm_scale", tensors["latent_scale"])
    model.load_state_dict(tensors)
    model.eval()
    return model


def require(obj, what: str):
    if obj is None:
        raise StateError(f"missing {what}")
    return obj
