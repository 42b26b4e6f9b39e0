"""Core DDPM mechanics, independent of any network architecture.

Forward process (variance schedule beta_1..beta_T):

    q(I_t | I_{t-1}) = N(sqrt(1 - beta_t) I_{t-1}, beta_t I)
    q(I_t | I_0)     = N(sqrt(gamma_t) I_0, (1 - gamma_t) I),
                       gamma_t = prod_{s<=t} (1 - beta_s), gamma_0 = 1

Gaussian posterior used for ancestral sampling:

    q(I_{t-1} | I_0, I_t) = N(mu, sigma2 I)
    mu     = sqrt(gamma_{t-1}) beta_t / (1 - gamma_t) * I_0
             + sqrt(1 - beta_t) (1 - gamma_{t-1}) / (1 - gamma_t) * I_t
    sigma2 = beta_t (1 - gamma_{t-1}) / (1 - gamma_t)

All operations are pure given an explicit torch.Generator; schedule
coefficients are kept in float64 and cast to the input dtype on use.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

ArrayLike = Union[torch.Tensor, np.ndarray, float, Sequence]


class ScheduleError(ValueError):
    """Invalid noise-schedule construction or out-of-range step index."""


class ShapeMismatchError(ValueError):
    """Operand shapes disagree where elementwise agreement is required."""


def _tensor(x: ArrayLike) -> torch.Tensor:
    """Coerce ImageTensor / ndarray / scalar to a torch tensor."""
    if isinstance(x, ImageTensor):
        return x.data
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class ImageTensor:
    """An (H, W, C) real-valued image in [-1, 1].

    Noise tensors use the same container but are exempt from the range
    check via ``is_noise``. 8-bit pixels map to [-1, 1] by v/127.5 - 1.
    """

    data: torch.Tensor
    is_noise: bool = False

    def __post_init__(self):
        d = self.data
        if d.ndim != 3:
            raise ValueError(f"expected (H, W, C) data, got shape {tuple(d.shape)}")
        if not torch.isfinite(d).all():
            raise ValueError("image data contains non-finite values")
        if not self.is_noise and d.abs().max().item() > 1.0 + 1e-6:
            raise ValueError("image-role tensor outside [-1, 1]; flag noise with is_noise=True")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @staticmethod
    def from_uint8(pixels: np.ndarray) -> "ImageTensor":
        """Map 8-bit pixels to [-1, 1]."""
        arr = np.asarray(pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return ImageTensor(torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0))

    def to_uint8(self) -> np.ndarray:
        """Inverse of :meth:`from_uint8` with rounding and clipping."""
        arr = ((self.data.detach().cpu().numpy() + 1.0) * 127.5).round()
        return np.clip(arr, 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_1..beta_T plus cumulative signal levels.

    ``gammas`` has length T + 1 with gammas[0] = 1 and
    gammas[t] = prod_{s<=t} (1 - beta_s), so gamma lookups are 1-indexed
    by diffusion step like the math above.
    """

    betas: torch.Tensor
    gammas: torch.Tensor
    kind: str = "linear"

    def __post_init__(self):
        if self.betas.ndim != 1 or self.gammas.ndim != 1:
            raise ScheduleError("betas and gammas must be 1-D")
        if len(self.gammas) != len(self.betas) + 1:
            raise ScheduleError("need len(gammas) == len(betas) + 1")
        if self.gammas[0].item() != 1.0:
            raise ScheduleError("gamma_0 must be 1")
        b = self.betas
        if not ((b > 0).all() and (b < 1).all()):
            raise ScheduleError("every beta_t must lie in (0, 1)")
        if not (self.gammas[1:] < self.gammas[:-1]).all():
            raise ScheduleError("gamma must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        """beta_t for 1 <= t <= T."""
        self._check_t(t, lo=1)
        return self.betas[t - 1].item()

    def gamma(self, t: int) -> float:
        """gamma_t for 0 <= t <= T."""
        self._check_t(t, lo=0)
        return self.gammas[t].item()

    def _check_t(self, t: int, lo: int) -> None:
        if not lo <= t <= self.T:
            raise ScheduleError(f"step index t={t} outside [{lo}, {self.T}]")

    def hash(self) -> str:
        """Stable identity of the schedule, recorded in checkpoints."""
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.int64(self.T).tobytes())
        h.update(self.betas.numpy().astype(np.float64).tobytes())
        return h.hexdigest()[:16]


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated betas, endpoints inclusive."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ScheduleError("beta endpoints must lie in (0, 1)")
    if beta_start > beta_end:
        raise ScheduleError("beta_start must not exceed beta_end")
    betas = torch.from_numpy(np.linspace(beta_start, beta_end, T))
    gammas = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(betas=betas, gammas=gammas, kind="linear")


def make_cosine_schedule(T: int, offset: float = 0.008, beta_max: float = 0.999) -> NoiseSchedule:
    """Cosine-shaped signal decay (Nichol & Dhariwal 2021), optional alternative."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + offset) / (1 + offset) * math.pi / 2) ** 2
    gam = f / f[0]
    betas = np.clip(1.0 - gam[1:] / gam[:-1], 1e-8, beta_max)
    gammas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(
        betas=torch.from_numpy(betas), gammas=torch.from_numpy(gammas), kind="cosine"
    )


def make_schedule(kind: str, T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if kind == "linear":
        return make_linear_schedule(T, beta_start, beta_end)
    if kind == "cosine":
        return make_cosine_schedule(T)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class PosteriorParams:
    """Mean image and scalar variance of q(I_{t-1} | I_0, I_t)."""

    mu: torch.Tensor
    sigma2: float

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("posterior variance must be nonnegative")


def q_sample_step(I_prev: ArrayLike, beta_t: float, noise: ArrayLike) -> torch.Tensor:
    """One forward corruption step: sqrt(1-beta) I_prev + sqrt(beta) noise."""
    x, eps = _tensor(I_prev), _tensor(noise)
    if not 0.0 < beta_t < 1.0:
        raise ScheduleError(f"beta_t must lie in (0, 1), got {beta_t}")
    _check_same_shape(x, eps, "q_sample_step")
    return math.sqrt(1.0 - beta_t) * x + math.sqrt(beta_t) * eps


def q_sample(I_0: ArrayLike, t: int, schedule: NoiseSchedule, noise: ArrayLike) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(gamma_t) I_0 + sqrt(1-gamma_t) noise.

    t = 0 is the identity (gamma_0 = 1).
    """
    x, eps = _tensor(I_0), _tensor(noise)
    _check_same_shape(x, eps, "q_sample")
    g = schedule.gamma(t)
    return math.sqrt(g) * x + math.sqrt(1.0 - g) * eps


def posterior_params(
    I_0: ArrayLike, I_t: ArrayLike, t: int, schedule: NoiseSchedule
) -> PosteriorParams:
    """Exact Gaussian posterior q(I_{t-1} | I_0, I_t) for 1 <= t <= T."""
    x0, xt = _tensor(I_0), _tensor(I_t)
    _check_same_shape(x0, xt, "posterior_params")
    beta = schedule.beta(t)
    g_prev = schedule.gamma(t - 1)
    g_t = schedule.gamma(t)
    denom = 1.0 - g_t
    coef0 = math.sqrt(g_prev) * beta / denom
    coeft = math.sqrt(1.0 - beta) * (1.0 - g_prev) / denom
    sigma2 = beta * (1.0 - g_prev) / denom
    return PosteriorParams(mu=coef0 * x0 + coeft * xt, sigma2=sigma2)


def predict_I0_from_eps(
    I_t: ArrayLike,
    eps_hat: ArrayLike,
    t: int,
    schedule: NoiseSchedule,
    clamp: bool = False,
) -> torch.Tensor:
    """Invert the forward marginal: (I_t - sqrt(1-gamma_t) eps) / sqrt(gamma_t)."""
    xt, eps = _tensor(I_t), _tensor(eps_hat)
    _check_same_shape(xt, eps, "predict_I0_from_eps")
    g = schedule.gamma(t)
    if g < 1e-12:
        raise ScheduleError(
            f"gamma_{t} = {g:.3e} underflows; cannot invert the marginal at this step"
        )
    x0 = (xt - math.sqrt(1.0 - g) * eps) / math.sqrt(g)
    return x0.clamp(-1.0, 1.0) if clamp else x0


DenoiseFn = Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]


def p_sample_step(
    denoise_fn: DenoiseFn,
    condition: ArrayLike,
    I_t: ArrayLike,
    t: int,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    clamp: bool = True,
) -> torch.Tensor:
    """One ancestral reverse step; no noise is added at t = 1."""
    xt = _tensor(I_t)
    cond = _tensor(condition)
    eps_hat = _tensor(denoise_fn(cond, xt, t))
    x0_hat = predict_I0_from_eps(xt, eps_hat, t, schedule, clamp=clamp)
    post = posterior_params(x0_hat, xt, t, schedule)
    if t == 1:
        return post.mu
    z = torch.randn(xt.shape, generator=rng, dtype=xt.dtype, device=xt.device)
    return post.mu + math.sqrt(post.sigma2) * z


def ddpm_sample(
    denoise_fn: DenoiseFn,
    condition: ArrayLike,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    shape: Optional[tuple] = None,
    clamp: bool = True,
) -> torch.Tensor:
    """Full ancestral loop from I_T ~ N(0, I) down to I_0.

    ``shape`` defaults to the condition's shape; pass it explicitly when
    the sampled target has a different channel count than the condition.
    """
    cond = _tensor(condition)
    if shape is None:
        shape = tuple(cond.shape)
    x = torch.randn(shape, generator=rng, dtype=cond.dtype, device=cond.device)
    for t in range(schedule.T, 0, -1):
        x = p_sample_step(denoise_fn, cond, x, t, schedule, rng, clamp=clamp)
    return x


def eps_loss(eps: ArrayLike, eps_hat: ArrayLike) -> torch.Tensor:
    """Mean squared error between true and estimated noise (0-dim tensor)."""
    a, b = _tensor(eps), _tensor(eps_hat)
    _check_same_shape(a, b, "eps_loss")
    return ((a - b) ** 2).mean()
