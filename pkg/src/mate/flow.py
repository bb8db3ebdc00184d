"""Rectified flow: straight-path forward process, flow-matching loss and Euler sampling.

x_t = (1 - t) x0 + t eps, so the path velocity is eps - x0 everywhere along
it. Sampling integrates x <- x - dt * v from t_start down to 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .numerics import NonFiniteError, Tensor

WEIGHTINGS = ("uniform",)


class FlowError(Exception):
    pass


class DivergedSamplingError(FlowError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"sampling diverged at step {step}" + (f": {detail}" if detail else ""))


class VelocityFn(Protocol):
    def __call__(self, x_t: Tensor, t: float, conditions) -> Tensor: ...


StepHook = Callable[[Tensor, float, int], Tensor]


@dataclass(frozen=True)
class FlowConfig:
    num_steps: int = 8
    cfg_scale: float = 30.0
    t_start: float = 0.9
    weighting: str = "uniform"

    def __post_init__(self):
        if self.num_steps < 1:
            raise FlowError(f"num_steps must be >= 1, got {self.num_steps}")
        if not 0.0 < self.t_start <= 1.0:
            raise FlowError(f"t_start must lie in (0, 1], got {self.t_start}")
        if self.cfg_scale < 0:
            raise FlowError(f"cfg_scale must be non-negative, got {self.cfg_scale}")
        if self.weighting not in WEIGHTINGS:
            raise FlowError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTINGS}")


@dataclass(frozen=True, eq=False)
class FlowState:
    x_t: Tensor
    t: float
    rng_seed: int


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise FlowError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise FlowError(f"t must lie in [0, 1], got {t}")
    return t


def forward_process(x0: Tensor, eps: Tensor, t: float) -> Tensor:
    _same_shape("forward_process", x0, eps)
    t = _check_t(t)
    return nx.add(nx.scale(x0, 1.0 - t), nx.scale(eps, t))


def velocity_target(x0: Tensor, eps: Tensor) -> Tensor:
    _same_shape("velocity_target", x0, eps)
    return nx.sub(eps, x0)


def cfm_loss(model: VelocityFn, batch: Sequence[tuple[Tensor, object]], seed: int) -> Tensor:
    """Uniform-weight velocity regression, averaged over samples and tokens.

    Each sample draws its own t ~ U(0, 1) and eps ~ N(0, I) from (seed, index).
    The per-token error is summed over features, so a zero predictor on
    x0 = 0 scores the token dimension in expectation.
    """
    if not batch:
        raise FlowError("cfm_loss: empty batch")
    total = None
    for index, (x0, conditions) in enumerate(batch):
        t = float(nx.generator(seed, "cfm-t", index).uniform())
        eps = nx.standard_normal(x0.shape, seed, "cfm-eps", index, dtype=x0.dtype)
        x_t = forward_process(x0, eps, t)
        residual = nx.sub(model(x_t, t, conditions), velocity_target(x0, eps))
        rows = x0.shape[0] if x0.ndim > 1 else 1
        term = nx.scale(nx.sum(nx.mul(residual, residual)), 1.0 / rows)
        total = term if total is None else nx.add(total, term)
    return nx.scale(total, 1.0 / len(batch))


def cfg_combine(v_cond: Tensor, v_uncond: Tensor, s: float) -> Tensor:
    _same_shape("cfg_combine", v_cond, v_uncond)
    if s == 1:
        return v_cond
    if s == 0:
        return v_uncond
    return nx.add(v_uncond, nx.scale(nx.sub(v_cond, v_uncond), s))


def guided_velocity(model: VelocityFn, x: Tensor, t: float, conditions, s: float) -> Tensor:
    if conditions is None:
        return model(x, t, None)
    if s == 0:
        return model(x, t, conditions.as_null())
    v_cond = model(x, t, conditions)
    if s == 1:
        return v_cond
    return cfg_combine(v_cond, model(x, t, conditions.as_null()), s)


def init_from_illumination(z_illum: Tensor, t_start: float, seed: int) -> FlowState:
    """Noise the illumination latent to t_start with eps drawn from `seed`."""
    if not 0.0 < t_start <= 1.0:
        raise FlowError(f"t_start must lie in (0, 1], got {t_start}")
    eps = nx.standard_normal(z_illum.shape, seed, "init", dtype=z_illum.dtype)
    return FlowState(x_t=forward_process(z_illum, eps, t_start), t=float(t_start), rng_seed=seed)


def init_pure_noise(shape: tuple[int, ...], seed: int, dtype=None) -> FlowState:
    return FlowState(x_t=nx.standard_normal(shape, seed, "init", dtype=dtype), t=1.0, rng_seed=seed)


def timesteps(num_steps: int, t_start: float) -> np.ndarray:
    """Uniform schedule t_start, ..., 0 (num_steps + 1 points)."""
    return np.linspace(float(t_start), 0.0, num_steps + 1)


def sample(
    model: VelocityFn,
    state: FlowState,
    config: FlowConfig,
    conditions=None,
    on_step: Optional[StepHook] = None,
) -> Tensor:
    """Euler-integrate from state.t to 0 with classifier-free guidance.

    `on_step(x, t_next, step)` runs after every update and may replace x.
    """
    ts = timesteps(config.num_steps, state.t)
    x = state.x_t
    for step in range(config.num_steps):
        t, t_next = float(ts[step]), float(ts[step + 1])
        try:
            v = guided_velocity(model, x, t, conditions, config.cfg_scale)
            x = nx.sub(x, nx.scale(v, t - t_next))
            if on_step is not None:
                x = on_step(x, t_next, step)
        except NonFiniteError as e:
            raise DivergedSamplingError(step, str(e)) from e
    return x


__all__ = [
    "DivergedSamplingError",
    "FlowConfig",
    "FlowError",
    "FlowState",
    "cfg_combine",
    "cfm_loss",
    "forward_process",
    "guided_velocity",
    "init_from_illumination",
    "init_pure_noise",
    "sample",
    "timesteps",
    "velocity_target",
]
