"""Model predictive path integral control with time-correlated sampling noise.

Each step perturbs the nominal control sequence with AR(1)-correlated Gaussian
noise, rolls every candidate out through the bicycle dynamics (Euler at the
control rate), scores terminal progress minus a per-step collision penalty,
and recombines candidates with exponential weights on their rewards. Rollouts
run inside a numba kernel; all sampling stays outside it so results are
reproducible from the caller's generator alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .vehicle import (
    A_MAX,
    PSI_MAX,
    PSIDOT_MAX,
    V_MAX,
    WHEELBASE,
    ControlInput,
    VehicleState,
    World,
)


@dataclass
class MppiConfig:
    horizon_s: float = 2.0
    ctrl_hz: float = 50.0
    n_rollouts: int = 1024
    sigma_a: float = 2.0
    sigma_psidot: float = 16.0 * math.pi / 5.0
    beta: float = 0.25
    gamma: float = 1.0
    penalty: float = 1e3
    wheelbase: float = WHEELBASE

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s * self.ctrl_hz))

    @property
    def dt(self) -> float:
        return 1.0 / self.ctrl_hz

    def validate(self) -> None:
        if not (
            self.horizon_s > 0
            and self.ctrl_hz > 0
            and self.n_rollouts > 0
            and 0.0 < self.beta <= 1.0
            and self.gamma > 0
            and self.sigma_a >= 0
            and self.sigma_psidot >= 0
        ):
            raise ValueError("mppi config values out of range")


@dataclass
class MppiState:
    """Nominal control sequence carried between steps; starts at all zeros."""

    nominal: np.ndarray

    @classmethod
    def initial(cls, cfg: MppiConfig) -> "MppiState":
        return cls(nominal=np.zeros((cfg.n_steps, 2)))


def correlated_noise(
    cfg: MppiConfig, rng: np.random.Generator, n_rollouts: int | None = None, n_steps: int | None = None
) -> np.ndarray:
    """AR(1)-filtered Gaussian perturbations, shape (rollouts, steps, 2)."""
    k = cfg.n_rollouts if n_rollouts is None else n_rollouts
    h = cfg.n_steps if n_steps is None else n_steps
    sigma = np.array([cfg.sigma_a, cfg.sigma_psidot])
    delta = rng.standard_normal((k, h, 2)) * sigma
    eps = np.empty_like(delta)
    eps[:, 0] = delta[:, 0]
    for t in range(1, h):
        eps[:, t] = cfg.beta * delta[:, t] + (1.0 - cfg.beta) * eps[:, t - 1]
    return eps


@njit(cache=True)
def _rollout_rewards(
    x0, y0, v0, phi0, psi0, candidates, obstacles, dt, wheelbase, penalty
):
    n_roll, n_steps, _ = candidates.shape
    n_obs = obstacles.shape[0]
    rewards = np.empty(n_roll)
    for k in range(n_roll):
        x, y, v, phi, psi = x0, y0, v0, phi0, psi0
        colliding = 0
        for t in range(n_steps):
            u_a = candidates[k, t, 0]
            u_p = candidates[k, t, 1]
            x += dt * v * math.cos(phi)
            y += dt * v * math.sin(phi)
            phi += dt * v * math.tan(psi) / wheelbase
            v += dt * u_a
            psi += dt * u_p
            if v < 0.0:
                v = 0.0
            elif v > V_MAX:
                v = V_MAX
            if psi > PSI_MAX:
                psi = PSI_MAX
            elif psi < -PSI_MAX:
                psi = -PSI_MAX
            for j in range(n_obs):
                ddx = x - obstacles[j, 0]
                ddy = y - obstacles[j, 1]
                if ddx * ddx + ddy * ddy < obstacles[j, 2] * obstacles[j, 2]:
                    colliding += 1
                    break
        rewards[k] = x - penalty * colliding
    return rewards


def rollout_reward(states_xy: np.ndarray, world: World, penalty: float = 1e3) -> float:
    """Terminal x minus the collision penalty accumulated over rollout states."""
    obs = world.obstacles
    colliding = 0
    if obs.shape[0] > 0 and states_xy.shape[0] > 0:
        d2 = (states_xy[:, 0:1] - obs[:, 0]) ** 2 + (states_xy[:, 1:2] - obs[:, 1]) ** 2
        colliding = int(np.any(d2 < obs[:, 2] ** 2, axis=1).sum())
    return float(states_xy[-1, 0]) - penalty * colliding


def _clamp_controls(seq: np.ndarray) -> np.ndarray:
    out = np.empty_like(seq)
    out[..., 0] = np.clip(seq[..., 0], -A_MAX, A_MAX)
    out[..., 1] = np.clip(seq[..., 1], -PSIDOT_MAX, PSIDOT_MAX)
    return out


def mppi_step(
    state: VehicleState,
    world: World,
    ms: MppiState,
    cfg: MppiConfig,
    rng: np.random.Generator,
) -> tuple[ControlInput, MppiState]:
    """One control update; returns the control to execute and the shifted state."""
    cfg.validate()
    eps = correlated_noise(cfg, rng)
    candidates = _clamp_controls(ms.nominal[None, :, :] + eps)
    rewards = _rollout_rewards(
        state.x,
        state.y,
        state.v,
        state.phi,
        state.psi,
        candidates,
        world.obstacles,
        cfg.dt,
        cfg.wheelbase,
        cfg.penalty,
    )
    weights = np.exp(cfg.gamma * (rewards - rewards.max()))
    weights /= weights.sum()
    new_nominal = np.einsum("k,ktc->tc", weights, candidates)

    control = ControlInput(float(new_nominal[0, 0]), float(new_nominal[0, 1])).clamped()
    shifted = np.empty_like(new_nominal)
    shifted[:-1] = new_nominal[1:]
    shifted[-1] = new_nominal[-1]
    return control, MppiState(nominal=shifted)
