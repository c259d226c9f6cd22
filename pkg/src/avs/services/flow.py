"""Latent flow-matching: corruption path, velocity targets, loss and Euler samplers."""

from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import torch

from avs.models.latent import check_same_shape

# denoiser(x_v, x_a, t, conditioning) -> (f_v, f_a)
Denoiser = Callable[[torch.Tensor, torch.Tensor, float, Any], tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class FlowState:
    """Noisy latents of both modalities at one shared time t."""

    x_v: torch.Tensor
    x_a: torch.Tensor
    t: float
    eps_v: torch.Tensor
    eps_a: torch.Tensor


def _check_t(t: float) -> None:
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")


def corrupt(
    z_v: torch.Tensor,
    z_a: torch.Tensor,
    eps_v: torch.Tensor,
    eps_a: torch.Tensor,
    t: float,
) -> FlowState:
    """x = (1 - t) z + t eps for both modalities, same t."""
    _check_t(t)
    check_same_shape(z_v, eps_v, "video latents vs noise")
    check_same_shape(z_a, eps_a, "audio latents vs noise")
    x_v = (1.0 - t) * z_v + t * eps_v
    x_a = (1.0 - t) * z_a + t * eps_a
    return FlowState(x_v=x_v, x_a=x_a, t=float(t), eps_v=eps_v, eps_a=eps_a)


def corrupt_batch(z: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Per-sample t along the leading batch dim."""
    check_same_shape(z, eps, "latents vs noise")
    if torch.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    tt = t.reshape(-1, *([1] * (z.dim() - 1))).to(z.dtype)
    return (1.0 - tt) * z + tt * eps


def velocity_target(z: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """v = eps - z."""
    check_same_shape(z, eps, "latents vs noise")
    return eps - z


def flow_loss(
    pred_v: torch.Tensor,
    pred_a: torch.Tensor,
    z_v: torch.Tensor,
    z_a: torch.Tensor,
    eps_v: torch.Tensor,
    eps_a: torch.Tensor,
) -> torch.Tensor:
    """Per-modality mean squared velocity error, summed over modalities."""
    target_v = velocity_target(z_v, eps_v)
    target_a = velocity_target(z_a, eps_a)
    check_same_shape(pred_v, target_v, "video prediction")
    check_same_shape(pred_a, target_a, "audio prediction")
    return ((pred_v - target_v) ** 2).mean() + ((pred_a - target_a) ** 2).mean()


def uniform_schedule(n_steps: int) -> list[float]:
    """{1, 1 - 1/n, ..., 1/n}; the final step integrates to t = 0."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    return [1.0 - i / n_steps for i in range(n_steps)]


def validate_schedule(schedule: Sequence[float], n_steps: Optional[int] = None) -> list[float]:
    """Check a schedule is non-empty, within (0, 1] and strictly decreasing."""
    ts = [float(t) for t in schedule]
    if not ts:
        raise ValueError("schedule is empty")
    if n_steps is not None and len(ts) != n_steps:
        raise ValueError(f"schedule has {len(ts)} entries, expected {n_steps}")
    if ts[0] > 1.0 or ts[-1] <= 0.0:
        raise ValueError(f"schedule must lie in (0, 1], got {ts}")
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError(f"schedule must be strictly decreasing, got {ts}")
    return ts


def sample(
    denoiser: Denoiser,
    conditioning: Any,
    n_steps: int,
    schedule: Optional[Sequence[float]] = None,
    *,
    noise_v: torch.Tensor,
    noise_a: torch.Tensor,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Euler integration from pure noise: x <- x - dt f(x, t).

    Args:
        denoiser: Velocity field
        conditioning: Passed through to the denoiser unchanged
        n_steps: Number of denoiser evaluations
        schedule: Decreasing t values starting near 1 (uniform if None);
            the last step integrates down to t = 0
        noise_v: Initial video noise (shape of the clean video latents)
        noise_a: Initial audio noise
        on_step: Optional callback(step_index, t)

    Returns:
        (z_v, z_a)
    """
    ts = validate_schedule(schedule if schedule is not None else uniform_schedule(n_steps), n_steps)
    x_v, x_a = noise_v, noise_a
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0.0
        dt = t - t_next
        f_v, f_a = denoiser(x_v, x_a, t, conditioning)
        x_v = x_v - dt * f_v
        x_a = x_a - dt * f_a
        if on_step is not None:
            on_step(i, t)
    return x_v, x_a
