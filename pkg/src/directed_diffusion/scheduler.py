"""Linear-multistep scheduler over a discrete beta schedule.

Sigma-space formulation: a latent at step i carries noise level sigmas[i],
the model consumes z / sqrt(sigma^2 + 1), and a step integrates the noise
prediction with Adams-Bashforth coefficients. Order 1 reduces to an Euler
step and makes `advance` a pure function of (z, noise, step_index), which
the toy backend relies on for bit-exact replays.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy import integrate

from .errors import ValidationError


def make_beta_schedule(
    num_train_timesteps: int,
    beta_start: float,
    beta_end: float,
    kind: str = "linear",
) -> np.ndarray:
    if kind == "linear":
        return np.linspace(beta_start, beta_end, num_train_timesteps, dtype=np.float64)
    if kind == "scaled_linear":
        return (
            np.linspace(
                beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=np.float64
            )
            ** 2
        )
    raise ValidationError(f"unknown beta schedule kind {kind!r}")


class LMSScheduler:
    """Discrete-beta linear multistep scheduler.

    Parameters are fixed at construction; per-run state is the noise-prediction
    history used by orders above 1, reset via :meth:`reset`.
    """

    def __init__(
        self,
        num_steps: int,
        num_train_timesteps: int = 1000,
        beta_start: float = 1e-4,
        beta_end: float = 2e-3,
        schedule: str = "linear",
        order: int = 1,
    ):
        if num_steps < 1:
            raise ValidationError(f"num_steps must be >= 1, got {num_steps}")
        if order < 1:
            raise ValidationError(f"order must be >= 1, got {order}")
        self.num_steps = int(num_steps)
        self.order = int(order)

        betas = make_beta_schedule(num_train_timesteps, beta_start, beta_end, schedule)
        alphas_cumprod = np.cumprod(1.0 - betas)
        full_sigmas = np.sqrt((1.0 - alphas_cumprod) / alphas_cumprod)
        timesteps = np.linspace(0, num_train_timesteps - 1, num_steps, dtype=np.float64)
        sigmas = np.interp(timesteps, np.arange(num_train_timesteps), full_sigmas)
        # descending noise levels, terminal level 0
        self.sigmas = np.concatenate([sigmas[::-1], [0.0]])
        self._history: list[torch.Tensor] = []

    def reset(self) -> None:
        self._history = []

    def sigma(self, step_index: int) -> float:
        if not (0 <= step_index < len(self.sigmas)):
            raise ValidationError(f"step index {step_index} out of range")
        return float(self.sigmas[step_index])

    def scale_model_input(self, z: torch.Tensor, step_index: int) -> torch.Tensor:
        s = self.sigma(step_index)
        return z / math.sqrt(s * s + 1.0)

    def _lms_coefficient(self, order: int, step_index: int, j: int) -> float:
        """Integrated Lagrange basis polynomial over [sigma_i, sigma_{i+1}]."""

        def fn(tau):
            prod = 1.0
            for k in range(order):
                if j == k:
                    continue
                prod *= (tau - self.sigmas[step_index - k]) / (
                    self.sigmas[step_index - j] - self.sigmas[step_index - k]
                )
            return prod

        value, _ = integrate.quad(
            fn, self.sigmas[step_index], self.sigmas[step_index + 1], epsrel=1e-8
        )
        return value

    def advance(
        self, z: torch.Tensor, noise_pred: torch.Tensor, step_index: int, commit: bool = True
    ) -> torch.Tensor:
        """One reverse step from noise level step_index to step_index + 1.

        `commit=False` computes the step without recording the noise prediction,
        used for look-ahead evaluations inside the attention-editing loop.
        """
        if z.shape != noise_pred.shape:
            raise ValidationError(
                f"latent/noise shape mismatch: {tuple(z.shape)} vs {tuple(noise_pred.shape)}"
            )
        if not (0 <= step_index < self.num_steps):
            raise ValidationError(f"step index {step_index} out of range")

        history = self._history + [noise_pred]
        order = min(len(history), self.order, step_index + 1)
        coeffs = [self._lms_coefficient(order, step_index, j) for j in range(order)]
        out = z
        for j, coeff in enumerate(coeffs):
            out = out + coeff * history[-1 - j]
        if commit:
            self._history.append(noise_pred.detach())
            if len(self._history) > self.order:
                self._history.pop(0)
        return out

    def noise_gap(self, step_index: int) -> float:
        """Std of noise lifting a step-`step_index` latent back one step.

        For the first step this is the full level sigma_0 (from clean).
        """
        s_cur = self.sigma(step_index)
        if step_index == 0:
            return s_cur
        s_prev = self.sigma(step_index - 1)
        return math.sqrt(max(s_prev * s_prev - s_cur * s_cur, 0.0))
