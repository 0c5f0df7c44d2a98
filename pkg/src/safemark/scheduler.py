"""Noise schedules, lambda-sampling and the binary traceability key."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .datamodel import DomainError

TIME_BIASES = ("uniform", "early", "mid", "late")


class ScheduleError(DomainError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``a[0..T]`` (``a[0] == 1``) and DDIM ``sigma[1..T]``.

    ``sigma[0]`` is stored as 0 and never used.
    """

    T: int
    a: tuple[float, ...]
    sigma: tuple[float, ...]
    eta: float = 0.0
    profile: str = "linear-vp"

    def step_coef(self, t: int) -> float:
        """Per-step signal factor ``sqrt(a_t / a_{t-1})`` of the forward chain."""
        self._check(t)
        return math.sqrt(self.a[t] / self.a[t - 1])

    def direction_coef(self, t: int, sigma: float | None = None) -> float:
        """``sqrt(1 - a_{t-1} - sigma_t^2)``; raises if the radicand is negative."""
        self._check(t)
        s = self.sigma[t] if sigma is None else sigma
        rad = 1.0 - self.a[t - 1] - s * s
        if rad < 0:
            if rad > -1e-12:
                return 0.0
            raise ScheduleError(f"1 - a_(t-1) - sigma_t^2 = {rad} < 0 at t={t}")
        return math.sqrt(rad)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise DomainError(f"step {t} outside [1, {self.T}]")


def ddim_sigma(a_prev: float, a_t: float, eta: float) -> float:
    if eta == 0.0:
        return 0.0
    return eta * math.sqrt((1 - a_prev) / (1 - a_t)) * math.sqrt(1 - a_t / a_prev)


def make_noise_schedule(T: int, profile: str = "linear-vp", eta: float = 0.0,
                        beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a variance-preserving schedule with ``T`` steps.

    ``linear-vp`` uses per-step betas spaced linearly in ``[beta_start, beta_end]``
    without rescaling by ``T``, so short chains stay in a low-noise regime
    (``a_50 ~ 0.6``) while ``T=1000`` reaches ``a_T ~ 4e-5``.
    ``cosine`` uses the squared-cosine cumulative profile with betas capped at 0.999.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if not 0.0 <= eta <= 1.0:
        raise DomainError("eta must lie in [0, 1]")
    if profile == "linear-vp":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif profile == "cosine":
        s = 0.008
        grid = np.arange(T + 1, dtype=np.float64) / T
        abar = np.cos((grid + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - abar[1:] / abar[:-1], 1e-8, 0.999)
    else:
        raise DomainError(f"unknown schedule profile {profile!r}")
    a = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    sigma = [0.0] + [ddim_sigma(a[t - 1], a[t], eta) for t in range(1, T + 1)]
    return NoiseSchedule(T=T, a=tuple(float(v) for v in a), sigma=tuple(sigma), eta=eta, profile=profile)


# ---------------------------------------------------------------------------
# lambda-sampling


@dataclass(frozen=True)
class LambdaSchedule:
    T: int
    injected: tuple[int, ...]

    def __post_init__(self):
        inj = tuple(sorted(self.injected))
        if len(set(inj)) != len(inj):
            raise DomainError("duplicate steps in lambda schedule")
        if inj and (inj[0] < 1 or inj[-1] > self.T):
            raise DomainError(f"injected steps must lie in [1, {self.T}]")
        object.__setattr__(self, "injected", inj)

    @property
    def lam(self) -> int:
        return len(self.injected)

    def __contains__(self, t: int) -> bool:
        return t in self.injected

    def flags(self) -> list[int]:
        marked = set(self.injected)
        return [1 if t in marked else 0 for t in range(1, self.T + 1)]


def _window(T: int, lam: int, bias: str) -> range:
    # windows are named in generation order: denoising runs t = T..1, so "early" means large t
    if bias == "uniform":
        return range(1, T + 1)
    size = max(lam, math.ceil(T / 3))
    if bias == "late":
        return range(1, size + 1)
    if bias == "early":
        return range(T - size + 1, T + 1)
    if bias == "mid":
        lo = max(1, (T - size) // 2 + 1)
        return range(lo, lo + size)
    raise DomainError(f"unknown time bias {bias!r}; expected one of {TIME_BIASES}")


def lambda_sample(T: int, lam: int, rng: np.random.Generator | int, bias: str = "uniform") -> LambdaSchedule:
    """Choose ``lam`` distinct steps of ``1..T`` uniformly without replacement.

    ``bias`` restricts the draw to a window of at least ``ceil(T/3)`` steps.
    """
    if T < 1:
        raise DomainError("T must be >= 1")
    if not 0 <= lam <= T:
        raise DomainError(f"lambda={lam} must lie in [0, T={T}]")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    window = np.asarray(_window(T, lam, bias))
    picked = rng.choice(window, size=lam, replace=False) if lam else []
    return LambdaSchedule(T, tuple(int(v) for v in picked))


def lambda_dis(sched: LambdaSchedule, t: int) -> int:
    if not 1 <= t <= sched.T:
        raise DomainError(f"step {t} outside [1, {sched.T}]")
    return t if t in sched.injected else 0


def partition(sched: LambdaSchedule, parts: int, rng: np.random.Generator | int) -> list[LambdaSchedule]:
    """Split the injected steps into ``parts`` disjoint schedules of near-equal size."""
    if parts < 1:
        raise DomainError("parts must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    steps = list(sched.injected)
    order = rng.permutation(len(steps))
    buckets: list[list[int]] = [[] for _ in range(parts)]
    for i, j in enumerate(order):
        buckets[i % parts].append(steps[j])
    return [LambdaSchedule(sched.T, tuple(b)) for b in buckets]


# ---------------------------------------------------------------------------
# key


@dataclass(frozen=True)
class KeyMask:
    """Binary key ``m``; ``bits[0]`` is step t=1 and prints leftmost."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise DomainError("key bits must be 0 or 1")

    @property
    def T(self) -> int:
        return len(self.bits)

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    def bit(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise DomainError(f"step {t} outside [1, {self.T}]")
        return self.bits[t - 1]

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def from_string(cls, text: str) -> "KeyMask":
        if not text or set(text) - {"0", "1"}:
            raise DomainError(f"not a binary key string: {text!r}")
        return cls(tuple(int(c) for c in text))


def key_compose(flags: Sequence[int], T: int | None = None) -> KeyMask:
    """Compose per-step flags ``m_1..m_T`` into a key."""
    flags = tuple(int(b) for b in flags)
    if T is not None and len(flags) != T:
        raise DomainError(f"expected {T} flags, got {len(flags)}")
    return KeyMask(flags)


def key_readout(m: KeyMask) -> LambdaSchedule:
    return LambdaSchedule(m.T, tuple(t for t, b in enumerate(m.bits, start=1) if b))


def keys_disjoint(keys: Iterable[KeyMask]) -> bool:
    seen: set[int] = set()
    for k in keys:
        steps = set(key_readout(k).injected)
        if steps & seen:
            return False
        seen |= steps
    return True


def timesteps_tensor(t: int | Sequence[int], batch: int) -> torch.Tensor:
    if isinstance(t, int):
        return torch.full((batch,), t, dtype=torch.long)
    return torch.as_tensor(t, dtype=torch.long)
