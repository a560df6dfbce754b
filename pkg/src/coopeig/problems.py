"""Reference problems used by the tests, the CLI configs and the README."""
from __future__ import annotations

import numpy as np

from .model import Box, ProblemSpec, make_problem
from .spectrum import PerturbationSpec


def window(half_width: float, dim: int = 1) -> Box:
    return Box(tuple([-half_width] * dim), tuple([half_width] * dim))


def smooth_indicator(x, radius: float = 1.0, sharpness: float = 10.0) -> np.ndarray:
    """Smoothed indicator of ``|x| < radius``."""
    r = np.linalg.norm(np.atleast_2d(x), axis=1)
    return 0.5 * (1.0 - np.tanh(sharpness * (r - radius)))


def compact_bump(x, radius: float = 1.0) -> np.ndarray:
    """``(1 - |x|^2 / radius^2)^2`` inside the ball, zero outside."""
    r2 = np.sum(np.atleast_2d(x) ** 2, axis=1) / radius**2
    return np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)


def unit_bump(radius: float = 1.0, scales=(-1.0, -0.5, 0.0, 0.5, 1.0)) -> PerturbationSpec:
    return PerturbationSpec(lambda x, k: compact_bump(x, radius), radius, tuple(scales))


def free_coupled(dim: int = 1, half_width: float = 140.0, rate: float = 1.0) -> ProblemSpec:
    """``N = 2``, ``a = I``, ``b = 0``, ``c = 0``, symmetric unit coupling; ``lambda* = 0``."""
    return make_problem(dim, 2, window(half_width, dim), rates=[[0, rate], [rate, 0]],
                        name="free-coupled")


def ou(half_width: float = 40.0, bump: float = 0.0, regimes: int = 1, rate: float = 1.0) -> ProblemSpec:
    """1D Ornstein-Uhlenbeck ``b = -x``, potential ``bump * smooth_indicator``."""
    rates = None if regimes == 1 else (np.ones((regimes, regimes)) - np.eye(regimes)) * rate
    pot = (lambda x, k: bump * smooth_indicator(x)) if bump else 0.0
    return make_problem(1, regimes, window(half_width), drift=lambda x, k: -x[:, 0],
                        potential=pot, rates=rates, name="ou")


def outward(half_width: float = 40.0, regimes: int = 2) -> ProblemSpec:
    """Transient drift ``b = 2 tanh(10 x)``."""
    rates = None if regimes == 1 else (np.ones((regimes, regimes)) - np.eye(regimes))
    return make_problem(1, regimes, window(half_width), drift=lambda x, k: 2 * np.tanh(10 * x[:, 0]),
                        rates=rates, name="outward")


def reducible_example(delta: float = 1.0, half_width: float = 40.0) -> ProblemSpec:
    """Two regimes: ``sign(x)`` drift in regime 0, ``-x`` in regime 1.

    No switching on ``|x| < 2``; outside, regime 0 jumps to regime 1 at rate
    ``delta`` and regime 1 never returns.
    """
    def drift(x, k):
        return np.sign(x[:, 0]) if k == 0 else -x[:, 0]

    def rates(x, i, j):
        far = np.abs(x[:, 0]) >= 2
        return np.where(far, delta, 0.0) if (i, j) == (0, 1) else np.zeros(len(x))

    return make_problem(1, 2, window(half_width), drift=drift, rates=rates, name="reducible")


def bounded_fk(half_width: float = 40.0) -> ProblemSpec:
    """Bounded coefficients: ``b_k = -tanh(x) + shift_k``, smooth ``c``, unequal rates."""
    def drift(x, k):
        return -np.tanh(x[:, 0]) + (0.2 if k == 0 else -0.1)

    def pot(x, k):
        return (0.5 if k == 0 else 0.3) * np.exp(-x[:, 0] ** 2)

    def diff(x, k):
        return np.full(len(x), 1.0 if k == 0 else 0.7)

    return make_problem(1, 2, window(half_width), diffusion=diff, drift=drift, potential=pot,
                        rates=[[0, 1.0], [0.5, 0]], name="bounded-fk")
