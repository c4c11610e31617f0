"""Component motion: the quartic Taylor trajectory and Brownian exploration noise."""
from __future__ import annotations

import numpy as np

from .core import Component, ComponentSet


def mean_at_time(c: Component, t: float) -> np.ndarray:
    """mu + v d + a d^2/2 + j d^3/6 + s d^4/24 with d = t - g."""
    d = t - c.g
    return (np.asarray(c.mu, dtype=float) + c.v * d + c.a * (d * d / 2.0)
            + c.j * (d ** 3 / 6.0) + c.s * (d ** 4 / 24.0))


def mean_at_time_batch(cs: ComponentSet, t: float) -> np.ndarray:
    d = (t - cs.g)[:, None]
    return cs.mu + cs.v * d + cs.a * (d * d / 2.0) + cs.j * (d ** 3 / 6.0) + cs.s * (d ** 4 / 24.0)


def mean_at_time_vjp(cs: ComponentSet, t: float, grad_mean: np.ndarray) -> dict[str, np.ndarray]:
    """Pull a gradient w.r.t. the time-t means back to (mu, v, a, j, s, g)."""
    d = (t - cs.g)[:, None]
    velocity = cs.v + cs.a * d + cs.j * (d * d / 2.0) + cs.s * (d ** 3 / 6.0)
    return {"mu": grad_mean,
            "v": grad_mean * d,
            "a": grad_mean * (d * d / 2.0),
            "j": grad_mean * (d ** 3 / 6.0),
            "s": grad_mean * (d ** 4 / 24.0),
            "g": -np.sum(grad_mean * velocity, axis=1)}


def brownian_perturb(positions: np.ndarray, eps: float, dt: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Add an independent N(0, (eps*dt)^2 I) draw to every position."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    positions = np.asarray(positions, dtype=float)
    noise = rng.standard_normal(positions.shape)
    return positions + noise * (eps * dt)


def brownian_eps_at(base_eps: float, iteration: int, total: int, decay_fraction: float = 0.2) -> float:
    """Noise level with a linear ramp to zero over the final ``decay_fraction`` of training."""
    if total <= 0 or base_eps == 0:
        return float(base_eps)
    start = total * (1.0 - decay_fraction)
    if iteration < start:
        return float(base_eps)
    return float(base_eps * max(0.0, (total - iteration) / (total - start)))
