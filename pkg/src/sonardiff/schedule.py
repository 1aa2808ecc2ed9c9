"""Linear beta schedule and the closed-form forward noising process.

Steps are 1-indexed: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1`` is the
boundary value used by the DDIM update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    beta_start: float = field(default=float("nan"))
    beta_end: float = field(default=float("nan"))

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ParameterError("beta must be a 1-D array with at least two steps")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ParameterError("every beta must lie in (0, 1)")
        beta.setflags(write=False)
        alpha = 1.0 - beta
        alpha.setflags(write=False)
        alpha_bar = np.cumprod(alpha)
        alpha_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        ext = np.concatenate([[1.0], alpha_bar])
        ext.setflags(write=False)
        object.__setattr__(self, "_alpha_bar_ext", ext)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def alpha_bar_at(self, t):
        """ᾱ at 1-indexed step ``t`` (``t == 0`` gives 1)."""
        if isinstance(t, torch.Tensor):
            if torch.any(t < 0) or torch.any(t > self.T):
                raise ParameterError(f"step index out of range 0..{self.T}")
            return torch.from_numpy(self._alpha_bar_ext.copy())[t.long()]
        t = int(t)
        if not 0 <= t <= self.T:
            raise ParameterError(f"step index {t} out of range 0..{self.T}")
        return float(self._alpha_bar_ext[t])

    def config(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}

    def forward_noise(self, z0, t, eps):
        return forward_noise(z0, t, eps, self)


def make_linear_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.1) -> NoiseSchedule:
    """Linearly spaced betas, endpoints included.

    The defaults are the common 1000-step range (1e-4 to 0.02) rescaled for a
    100-step chain.  Left unscaled, that range ends at alpha_bar(T) of about
    0.36, so a chain started from unit Gaussian noise begins far from the
    distribution the denoiser was trained on; here alpha_bar(T) is about 0.005.
    """
    if int(T) != T or T < 2:
        raise ParameterError("T must be an integer >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta, beta_start=float(beta_start), beta_end=float(beta_end))


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    return make_linear_schedule(int(cfg["T"]), float(cfg["beta_start"]), float(cfg["beta_end"]))


def _broadcast_coef(coef, like):
    if isinstance(like, torch.Tensor):
        coef = torch.as_tensor(coef, dtype=like.dtype)
        if coef.ndim == 1:
            coef = coef.reshape(-1, *([1] * (like.ndim - 1)))
    return coef


def forward_noise(z0, t, eps, schedule: NoiseSchedule):
    """Return ``sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps``.

    ``t`` may be an int or, for batched tensors, a length-N integer tensor.
    """
    if tuple(np.shape(z0)) != tuple(np.shape(eps)):
        raise ShapeError(f"z0 shape {tuple(np.shape(z0))} != eps shape {tuple(np.shape(eps))}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if torch.any(t < 1):
            raise ParameterError("forward_noise requires t >= 1")
        ab = schedule.alpha_bar_at(t).to(torch.float64)
        a, s = torch.sqrt(ab), torch.sqrt(1.0 - ab)
    else:
        if int(t) < 1:
            raise ParameterError("forward_noise requires t >= 1")
        ab = schedule.alpha_bar_at(int(t))
        a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
    if not isinstance(z0, torch.Tensor):
        z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    return _broadcast_coef(a, z0) * z0 + _broadcast_coef(s, z0) * eps
