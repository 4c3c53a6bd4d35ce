"""Two-state (bias/drift) oscillator model driven by Allan variance parameters."""

from __future__ import annotations

import math

import numpy as np

# Typical TCXO values; there is no published set for the simulated radars.
DEFAULT_H0 = 2e-19
DEFAULT_H_MINUS2 = 2e-20


def spectral_densities(h0: float, h_minus2: float) -> tuple[float, float]:
    """White-frequency and random-walk-frequency noise densities (S_f, S_g)."""
    return h0 / 2.0, 2.0 * math.pi**2 * h_minus2


def process_noise(h0: float, h_minus2: float, dt: float) -> np.ndarray:
    """Discrete process-noise covariance of [bias, drift] over an interval ``dt``."""
    s_f, s_g = spectral_densities(h0, h_minus2)
    return np.array(
        [
            [s_f * dt + s_g * dt**3 / 3.0, s_g * dt**2 / 2.0],
            [s_g * dt**2 / 2.0, s_g * dt],
        ]
    )


class ClockModel:
    """Clock bias (s) and drift (s/s) evolving under the two-state model.

    ``advance(dt)`` moves true time forward by ``dt`` and returns how much
    time the clock perceives over that interval.
    """

    def __init__(
        self,
        h0: float = DEFAULT_H0,
        h_minus2: float = DEFAULT_H_MINUS2,
        bias: float = 0.0,
        drift: float = 0.0,
        rng_seed: int | np.random.SeedSequence | None = None,
    ) -> None:
        if h0 < 0.0 or h_minus2 < 0.0:
            raise ValueError("Allan variance parameters must be non-negative")
        self.h0 = float(h0)
        self.h_minus2 = float(h_minus2)
        self.bias = float(bias)
        self.drift = float(drift)
        self._rng = np.random.default_rng(rng_seed)

    @property
    def state(self) -> tuple[float, float]:
        return self.bias, self.drift

    def advance(self, dt: float) -> float:
        if not dt > 0.0:
            raise ValueError("dt must be positive")
        q = process_noise(self.h0, self.h_minus2, dt)
        if q[0, 0] > 0.0 or q[1, 1] > 0.0:
            # Cholesky of a possibly singular 2x2 PSD matrix, written out by hand
            l11 = math.sqrt(q[0, 0])
            l21 = q[1, 0] / l11 if l11 > 0.0 else 0.0
            l22 = math.sqrt(max(q[1, 1] - l21 * l21, 0.0))
            z1, z2 = self._rng.standard_normal(2)
            w_f = l11 * z1
            w_g = l21 * z1 + l22 * z2
        else:
            w_f = w_g = 0.0
        step = self.drift * dt + w_f
        self.bias += step
        self.drift += w_g
        return dt + step

    def perceived(self, t_true: float) -> float:
        """First-order mapping of a true instant to this clock's reading."""
        return t_true + self.bias
