"""Pilot layouts, LS estimation at pilot subcarriers and linear interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .channel import add_noise_batch

__all__ = [
    "PilotConfig",
    "pilot_count",
    "pilot_indices",
    "pilot_overhead",
    "observe_pilots",
    "ls_estimate",
    "interpolation_matrix",
    "interpolate_pilots",
    "estimate_band",
    "LSBaseline",
]


def _fraction(pd) -> Fraction:
    pd = Fraction(pd).limit_denominator(1 << 16) if not isinstance(pd, Fraction) else pd
    if not 0 < pd <= 1:
        raise ValueError(f"pilot density must lie in (0, 1], got {pd}")
    return pd


def pilot_count(pd, subcarriers: int) -> int:
    """Realized pilot count ``round(pd * K)``, at least one."""
    return max(1, math.floor(_fraction(pd) * subcarriers + Fraction(1, 2)))


def pilot_indices(pd, subcarriers: int) -> np.ndarray:
    """Uniformly spaced pilot subcarriers starting at subcarrier 0."""
    n = pilot_count(pd, subcarriers)
    return (np.arange(n) * subcarriers) // n


def pilot_overhead(pd, ue_antennas: int, subcarriers: int) -> int:
    """Pilot symbols per channel estimate: one per UE antenna per pilot subcarrier."""
    return ue_antennas * pilot_count(pd, subcarriers)


@dataclass
class PilotConfig:
    """Pilot layout of one band.

    ``symbols`` holds the diagonal of ``X_i`` for every pilot subcarrier,
    shape ``(M_U, n_pilots)``; unit symbols when omitted.
    """

    band: str
    density: Fraction
    ue_antennas: int
    subcarriers: int
    symbols: np.ndarray | None = None

    def __post_init__(self):
        if self.band not in ("sub6", "mmwave"):
            raise ValueError(f"unknown band {self.band!r}")
        self.density = _fraction(self.density)
        n = pilot_count(self.density, self.subcarriers)
        if self.symbols is None:
            self.symbols = np.ones((self.ue_antennas, n), dtype=np.complex128)
        self.symbols = np.asarray(self.symbols, dtype=np.complex128)
        if self.symbols.shape != (self.ue_antennas, n):
            raise ValueError(f"pilot symbols must have shape {(self.ue_antennas, n)}")

    @property
    def indices(self) -> np.ndarray:
        return pilot_indices(self.density, self.subcarriers)

    @property
    def overhead(self) -> int:
        return pilot_overhead(self.density, self.ue_antennas, self.subcarriers)


def _pilot_columns(h: np.ndarray, cfg: PilotConfig) -> np.ndarray:
    blocks = np.asarray(h).reshape(np.shape(h)[:-1] + (cfg.ue_antennas, cfg.subcarriers))
    return blocks[..., cfg.indices]


def observe_pilots(h: np.ndarray, cfg: PilotConfig, snr_db: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Received pilots ``Y_i = H_i X_i + N`` at the pilot subcarriers.

    ``h`` is ``(N, M_B, M_U K)``; the result is ``(N, M_B, M_U, n_pilots)``.
    Noise power is set per sample from the mean power of ``H_i X_i``.
    """
    y = _pilot_columns(h, cfg) * cfg.symbols
    return add_noise_batch(y, snr_db, rng)


def ls_estimate(y_pilots: np.ndarray, cfg: PilotConfig) -> np.ndarray:
    """``H_i = Y_i X_i^{-1}`` per pilot subcarrier (diagonal ``X_i``)."""
    if np.any(cfg.symbols == 0):
        raise ValueError("pilot matrix is singular (zero pilot symbol)")
    return y_pilots / cfg.symbols


def interpolation_matrix(indices: np.ndarray, subcarriers: int) -> np.ndarray:
    """``(K, n_pilots)`` linear-interpolation weights.

    Subcarriers outside the pilot span follow the line through the two
    outermost pilots, so channels affine in the subcarrier index are
    reproduced exactly. A single pilot gives a constant estimate.
    """
    indices = np.asarray(indices)
    if indices.size == 0 or np.any(np.diff(indices) <= 0):
        raise ValueError("pilot indices must be nonempty and strictly increasing")
    n = indices.size
    if n == 1:
        return np.ones((subcarriers, 1))
    grid = np.arange(subcarriers)
    left = np.clip(np.searchsorted(indices, grid, side="right") - 1, 0, n - 2)
    t = (grid - indices[left]) / (indices[left + 1] - indices[left])
    w = np.zeros((subcarriers, n))
    w[grid, left] = 1 - t
    w[grid, left + 1] = t
    return w


def interpolate_pilots(h_at_pilots: np.ndarray, pilot_idx: np.ndarray,
                       subcarriers: int) -> np.ndarray:
    """Fill all subcarriers from ``(..., M_B, M_U, n_pilots)`` pilot estimates.

    Real and imaginary parts are interpolated independently (the weights are
    real). Returns the concatenated layout ``(..., M_B, M_U K)``.
    """
    w = interpolation_matrix(pilot_idx, subcarriers)
    full = h_at_pilots @ w.T
    return full.reshape(full.shape[:-2] + (-1,))


def estimate_band(h_true: np.ndarray, pilots: PilotConfig, snr_db,
                  rng: np.random.Generator) -> np.ndarray:
    """Noisy pilot observation, LS at the pilots and linear interpolation.

    ``snr_db`` is a scalar or one SNR per sample. At density 1 with unit
    symbols this reduces to adding AWGN to the full CSI.
    """
    y = observe_pilots(h_true, pilots, snr_db, rng)
    return interpolate_pilots(ls_estimate(y, pilots), pilots.indices, pilots.subcarriers)


@dataclass
class LSBaseline:
    """LS estimation at the mmWave pilots followed by linear interpolation."""

    pilots: PilotConfig

    @property
    def name(self) -> str:
        return f"LS+Linear PD={self.pilots.density}"

    def estimate(self, h_true: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
        return estimate_band(h_true, self.pilots, snr_db, rng)
