"""Forward noising, the noise-prediction loss and DDPM ancestral sampling."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor
from .schedules import NoiseSchedule

LOSS_NORMS = ("l2sq", "l2", "l1")
VARIANCES = ("posterior", "beta")


def _per_sample(values, batch: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(batch, float(v))
    if v.shape != (batch,):
        raise ShapeError("q_sample", v.shape, (batch,), detail="one timestep per batch element")
    return v


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Draw x_t ~ q(x_t | x_0) as √ᾱ_t·x0 + √(1-ᾱ_t)·eps.

    ``t`` holds one integer timestep per batch element (0 means no noise).
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError("q_sample", x0.shape, eps.shape)
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(x0.shape[0] if x0.ndim else 1, int(t))
    if x0.ndim and t.shape != (x0.shape[0],):
        raise ShapeError("q_sample", x0.shape, t.shape, detail="one timestep per batch element")
    ab = schedule.alpha_bar_table(t)
    bshape = (-1,) + (1,) * max(x0.ndim - 1, 0)
    a = np.sqrt(ab).reshape(bshape) if x0.ndim else np.sqrt(ab[0])
    s = np.sqrt(1.0 - ab).reshape(bshape) if x0.ndim else np.sqrt(1.0 - ab[0])
    return (a * x0 + s * eps).astype(np.result_type(x0, eps), copy=False)


def diffusion_loss(eps_pred, eps, norm: str = "l2sq") -> Tensor:
    """Noise-prediction loss.

    ``l2sq`` is the mean squared error over all elements. ``l2`` averages the
    per-sample root-mean-square error and ``l1`` the mean absolute error.
    """
    eps_pred = nx.as_tensor(eps_pred)
    eps = nx.as_tensor(eps)
    if eps_pred.shape != eps.shape:
        raise ShapeError("diffusion_loss", eps_pred.shape, eps.shape)
    diff = eps_pred - eps.detach()
    if norm == "l2sq":
        return nx.square(diff).mean()
    if norm == "l2":
        per = nx.square(diff).reshape(diff.shape[0], -1).mean(axis=1)
        return nx.sqrt(per + 1e-12).mean()
    if norm == "l1":
        return nx.ops.abs(diff).mean()
    raise ValueError(f"unknown loss norm {norm!r}; expected one of {LOSS_NORMS}")


def posterior_std(schedule: NoiseSchedule, t: int, variance: str = "posterior") -> float:
    """σ_t for the reverse step; posterior uses β̃_t = β_t(1-ᾱ_{t-1})/(1-ᾱ_t)."""
    beta = schedule.beta(t)
    if variance == "beta":
        return float(np.sqrt(beta))
    if variance != "posterior":
        raise ValueError(f"unknown variance {variance!r}; expected one of {VARIANCES}")
    ab = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1) if t > 1 else 1.0
    return float(np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)))


def ddpm_step(x_t, t: int, eps_pred, schedule: NoiseSchedule, noise=None, variance: str = "posterior",
              clip_x0: Optional[float] = None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}.

    x_{t-1} = (x_t - β_t/√(1-ᾱ_t)·eps_pred)/√α_t + σ_t·noise. At t=1 the
    noise term is dropped regardless of ``noise``.

    With ``clip_x0 = c`` the mean is instead the posterior mean given the
    predicted x_0 clamped to [-c, c]; without clamping the two forms agree.
    """
    x_t = np.asarray(x_t)
    eps_pred = np.asarray(eps_pred)
    if eps_pred.shape != x_t.shape:
        raise ShapeError("ddpm_step", x_t.shape, eps_pred.shape)
    beta = schedule.beta(t)
    alpha = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    if clip_x0 is None:
        mean = (x_t - (beta / np.sqrt(1.0 - ab)) * eps_pred) / np.sqrt(alpha)
    else:
        ab_prev = schedule.alpha_bar(t - 1) if t > 1 else 1.0
        x0 = np.clip((x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab), -clip_x0, clip_x0)
        mean = (np.sqrt(ab_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * x_t) / (1.0 - ab)
    if t > 1 and noise is not None:
        noise = np.asarray(noise)
        if noise.shape != x_t.shape:
            raise ShapeError("ddpm_step", x_t.shape, noise.shape)
        mean = mean + posterior_std(schedule, t, variance) * noise
    return mean.astype(x_t.dtype, copy=False)


def chain_rngs(seed: int, n: int, offset: int = 0) -> list:
    """Independent generators keyed on (seed, chain index)."""
    return [np.random.default_rng([int(seed), offset + i]) for i in range(n)]


def sample(
    eps_model: Callable,
    condition,
    schedule: NoiseSchedule,
    shape: Sequence[int],
    seed: int,
    variance: str = "posterior",
    dtype=np.float32,
    chain_offset: int = 0,
    x_T: Optional[np.ndarray] = None,
    clip_x0: Optional[float] = None,
) -> np.ndarray:
    """Run the reverse chain from x_T ~ N(0, I) down to x_0.

    ``eps_model(x_t, t, condition)`` receives the batch and an integer array of
    timesteps. Chain ``b`` draws all of its noise from its own generator seeded
    by (seed, chain_offset + b), so the result for one chain does not depend on
    how many others run alongside it. ``clip_x0`` is passed to every step.
    """
    shape = tuple(int(s) for s in shape)
    B = shape[0]
    rngs = chain_rngs(seed, B, chain_offset)
    if x_T is None:
        x = np.stack([r.standard_normal(shape[1:]) for r in rngs]).astype(dtype)
    else:
        x = np.array(x_T, dtype=dtype)
    with nx.no_grad():
        for t in range(schedule.T, 0, -1):
            out = eps_model(x, np.full(B, t, dtype=np.int64), condition)
            eps_pred = out.data if isinstance(out, Tensor) else np.asarray(out)
            if eps_pred.shape != x.shape:
                raise ShapeError("sample", x.shape, eps_pred.shape, detail="model output must match x_t")
            noise = np.stack([r.standard_normal(shape[1:]) for r in rngs]).astype(dtype) if t > 1 else None
            x = ddpm_step(x, t, eps_pred.astype(dtype, copy=False), schedule, noise, variance, clip_x0)
    return x


def forward_chain(x0: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> list:
    """Iterate q(x_t | x_{t-1}) from x0; returns [x_1, ..., x_T]."""
    xs = []
    x = np.asarray(x0, dtype=np.float64)
    for t in range(1, schedule.T + 1):
        beta = schedule.beta(t)
        x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * rng.standard_normal(x.shape)
        xs.append(x)
    return xs
