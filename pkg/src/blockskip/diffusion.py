"""Noise schedules and samplers for iterative denoising at desk scale.

A schedule holds the per-step noise retention rates ``alpha`` and their
running product ``alpha_bar``; the forward map corrupts data in closed form
and the reverse steps undo it, either ancestrally (ddpm) or deterministically
(ddim). Schedules are kept in float64 so their invariants are tight; every
factor is rounded to float32 at the point it touches state arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Schedule parameters violate their preconditions."""


class SamplerError(ValueError):
    """A reverse step was requested outside its valid index range."""


@dataclass
class NoiseSchedule:
    kind: str
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.beta)

    @property
    def schedule_id(self) -> str:
        return f"{self.kind}-T{self.timesteps}-b{self.beta_min:g}-{self.beta_max:g}"

    def validate(self) -> None:
        if np.any(self.alpha_bar <= 0.0) or np.any(self.alpha_bar >= 1.0):
            raise ScheduleError("alpha_bar must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if np.max(np.abs(self.alpha_bar - np.cumprod(self.alpha))) > 1e-6:
            raise ScheduleError("alpha_bar must equal the running product of alpha")


def make_schedule(timesteps: int, beta_min: float, beta_max: float,
                  kind: str = "linear") -> NoiseSchedule:
    """Build a noise schedule.

    ``linear`` spaces beta evenly between the bounds. ``cosine`` follows the
    offset squared-cosine cumulative curve abar(u) = cos((u/T + s)/(1 + s)
    * pi/2)^2 with s = 0.008, converts it to per-step betas, and clips them
    into [beta_min, beta_max]; pass beta_max close to 1 for the canonical
    curve.
    """
    if timesteps < 2:
        raise ScheduleError(f"timesteps must be >= 2, got {timesteps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, timesteps, dtype=np.float64)
    elif kind == "cosine":
        offset = 0.008
        u = np.arange(timesteps + 1, dtype=np.float64) / timesteps
        curve = np.cos((u + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        beta = np.clip(1.0 - curve[1:] / curve[:-1], beta_min, beta_max)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    schedule = NoiseSchedule(kind=kind, beta_min=float(beta_min), beta_max=float(beta_max),
                             beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))
    schedule.validate()
    return schedule


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not 0 <= t < schedule.timesteps:
        raise SamplerError(f"timestep {t} out of range [0, {schedule.timesteps})")


def forward_diffuse(x0: np.ndarray, t: int, z: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt ``x0`` to noise level ``t`` in closed form."""
    _check_t(t, schedule)
    if x0.shape != z.shape:
        raise ValueError(f"noise shape {z.shape} must match data shape {x0.shape}")
    ab = schedule.alpha_bar[t]
    a = np.float32(np.sqrt(ab))
    b = np.float32(np.sqrt(1.0 - ab))
    return (a * x0.astype(np.float32) + b * z.astype(np.float32)).astype(np.float32)


def predict_initial(x: np.ndarray, eps: np.ndarray, t: int,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Estimate the clean data implied by the state and a noise prediction."""
    _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    if ab <= 0.0:
        raise SamplerError(f"alpha_bar[{t}] is zero; cannot divide")
    inv = np.float32(1.0 / np.sqrt(ab))
    c = np.float32(np.sqrt(1.0 - ab))
    return (inv * (x - c * eps)).astype(np.float32)


def reverse_step(x: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule,
                 mode: str = "ddim", rng: np.random.Generator | None = None) -> np.ndarray:
    """One reverse update from step ``t`` to ``t - 1``.

    ddpm: posterior mean plus sigma_t * fresh noise (sigma from the ancestral
    posterior variance; sigma_0 = 0 so the final step is noiseless).
    ddim: the deterministic eta = 0 update; ``t = 0`` has no predecessor index
    and raises -- chains finish with ``predict_initial``.
    """
    _check_t(t, schedule)
    if x.shape != eps.shape:
        raise ValueError(f"prediction shape {eps.shape} must match state shape {x.shape}")
    if mode == "ddpm":
        a_t = schedule.alpha[t]
        ab_t = schedule.alpha_bar[t]
        ab_prev = schedule.alpha_bar[t - 1] if t > 0 else 1.0
        coeff = np.float32((1.0 - a_t) / np.sqrt(1.0 - ab_t))
        mean = (np.float32(1.0 / np.sqrt(a_t)) * (x - coeff * eps)).astype(np.float32)
        var = (1.0 - ab_prev) / (1.0 - ab_t) * schedule.beta[t]
        if var <= 0.0:
            return mean
        if rng is None:
            raise SamplerError("ddpm mode needs an rng for the ancestral noise")
        noise = rng.standard_normal(x.shape).astype(np.float32)
        return (mean + np.float32(np.sqrt(var)) * noise).astype(np.float32)
    if mode == "ddim":
        if t == 0:
            raise SamplerError("ddim step at t=0 has no predecessor; use predict_initial")
        ab_prev = schedule.alpha_bar[t - 1]
        x0_hat = predict_initial(x, eps, t, schedule)
        a = np.float32(np.sqrt(ab_prev))
        b = np.float32(np.sqrt(1.0 - ab_prev))
        return (a * x0_hat + b * eps).astype(np.float32)
    raise SamplerError(f"unknown sampler mode {mode!r}")


@dataclass
class TrajectoryRecord:
    """States and end-block features of one full chain, in sampling order."""

    schedule_id: str
    states: list[np.ndarray] = field(default_factory=list)
    end_features: list[np.ndarray] = field(default_factory=list)
    sample: np.ndarray | None = None
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.states)

    def _index(self, t: int) -> int:
        return len(self.states) - 1 - t

    def state_at(self, t: int) -> np.ndarray:
        return self.states[self._index(t)]

    def end_feature_at(self, t: int) -> np.ndarray:
        return self.end_features[self._index(t)]


def sample_chain(model, x_start: np.ndarray, schedule: NoiseSchedule,
                 mode: str = "ddim", rng: np.random.Generator | None = None,
                 seed: int | None = None) -> tuple[np.ndarray, TrajectoryRecord]:
    """Run the unmasked reverse chain from pure noise to a sample."""
    record = TrajectoryRecord(schedule_id=schedule.schedule_id, seed=seed)
    x = np.asarray(x_start, dtype=np.float32)
    for t in range(schedule.timesteps - 1, -1, -1):
        record.states.append(x)
        eps, features = model.forward(x, t)
        record.end_features.append(features[-1].data)
        eps_val = eps.data
        if mode == "ddim" and t == 0:
            x = predict_initial(x, eps_val, t, schedule)
        else:
            x = reverse_step(x, eps_val, t, schedule, mode=mode, rng=rng)
    record.sample = x
    return x, record
