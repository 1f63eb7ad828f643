"""Paired sub-6 GHz / mmWave CSI under a shared-geometry multipath model.

A sample draws one set of propagation paths (departure and arrival angles,
delays, complex gains). Both bands are synthesized from the same geometry and
the same per-path complex gains; the mmWave band keeps only its
``num_paths`` strongest paths and is attenuated by ``mmwave_power_db``.

The path model: an optional line-of-sight path with Rician factor
``los_k_factor_db`` plus Rayleigh-faded scattered paths with exponentially
distributed excess delays and an exponential power-delay profile. Delays are
measured from the first arrival (receiver timing is synchronized to it), and
each sample's sub-6 path gains are scaled to unit total power.

CSI matrices follow the concatenated layout ``[H_1, ..., H_K]`` with
shape ``(M_B, M_U * K)`` and column index ``u * K + k`` (UE antenna major,
subcarrier minor).
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "BandConfig",
    "SystemConfig",
    "PathSet",
    "add_noise_batch",
    "DualBandSample",
    "DatasetFormatError",
    "steering_vector",
    "draw_paths",
    "band_channel",
    "generate_sample",
    "generate_dataset",
    "apply_awgn",
    "freq_to_time",
    "time_to_freq",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class BandConfig:
    bs_antennas: int
    ue_antennas: int
    subcarriers: int
    carrier_freq_hz: float
    bandwidth_hz: float
    num_paths: int
    antenna_spacing_wavelengths: float = 0.5

    def __post_init__(self):
        for name in ("bs_antennas", "ue_antennas", "subcarriers", "num_paths"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.bandwidth_hz <= 0 or self.carrier_freq_hz <= 0:
            raise ValueError("bandwidth and carrier frequency must be positive")

    @property
    def symbol_duration_s(self) -> float:
        return self.subcarriers / self.bandwidth_hz

    @property
    def subcarrier_offsets_hz(self) -> np.ndarray:
        """Subcarrier offsets from the carrier on a centered grid."""
        k = np.arange(self.subcarriers)
        return (k - self.subcarriers / 2) * self.bandwidth_hz / self.subcarriers

    @property
    def csi_shape(self) -> tuple[int, int]:
        return self.bs_antennas, self.ue_antennas * self.subcarriers


def _sub6_default() -> BandConfig:
    return BandConfig(bs_antennas=16, ue_antennas=2, subcarriers=128,
                      carrier_freq_hz=3.5e9, bandwidth_hz=40e6, num_paths=15)


def _mmwave_default() -> BandConfig:
    return BandConfig(bs_antennas=32, ue_antennas=2, subcarriers=256,
                      carrier_freq_hz=28e9, bandwidth_hz=123e6, num_paths=5)


@dataclass(frozen=True)
class SystemConfig:
    """Both bands plus the knobs of the surrogate path model.

    Attributes:
        delay_decay_s: scale of the exponential power-delay profile. Excess
            delays are drawn from it and per-path power decays as
            ``exp(-tau / delay_decay_s)``. ``None`` means a quarter of the
            shorter OFDM symbol duration.
        los_k_factor_db: power ratio of the line-of-sight path to all
            scattered paths; ``None`` makes every path Rayleigh-faded.
        normalize_power: scale each sample's sub-6 gains to unit total power.
        mmwave_power_db: per-path power offset of the mmWave band.
    """

    sub6: BandConfig = field(default_factory=_sub6_default)
    mmwave: BandConfig = field(default_factory=_mmwave_default)
    delay_decay_s: float | None = 50e-9
    los_k_factor_db: float | None = 10.0
    normalize_power: bool = True
    mmwave_power_db: float = -20.0

    def __post_init__(self):
        if self.mmwave.num_paths > self.sub6.num_paths:
            raise ValueError("mmWave band cannot use more paths than the sub-6 band draws")
        if self.delay_decay_s is not None and self.delay_decay_s <= 0:
            raise ValueError("delay_decay_s must be positive")

    @property
    def max_delay_s(self) -> float:
        return min(self.sub6.symbol_duration_s, self.mmwave.symbol_duration_s)

    @property
    def decay_s(self) -> float:
        return self.delay_decay_s if self.delay_decay_s is not None else self.max_delay_s / 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        d = dict(d)
        return cls(sub6=BandConfig(**d.pop("sub6")), mmwave=BandConfig(**d.pop("mmwave")), **d)


@dataclass
class PathSet:
    """Shared geometry of one sample, sorted by descending sub-6 gain magnitude."""

    aod: np.ndarray
    aoa: np.ndarray
    delay: np.ndarray
    gain_sub6: np.ndarray
    gain_mmwave: np.ndarray

    def __len__(self) -> int:
        return len(self.aod)


@dataclass
class DualBandSample:
    h_sub6: np.ndarray
    h_mmwave: np.ndarray
    seed: int


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte where reading failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def steering_vector(n_antennas: int, angle: float, spacing: float = 0.5) -> np.ndarray:
    """ULA response ``exp(j 2 pi spacing t sin(angle))`` for ``t = 0..n-1``."""
    if n_antennas < 1:
        raise ValueError("n_antennas must be >= 1")
    t = np.arange(n_antennas)
    return np.exp(1j * 2 * np.pi * spacing * t * np.sin(angle))


def _steering_matrix(n: int, angles: np.ndarray, spacing: float) -> np.ndarray:
    t = np.arange(n)[:, None]
    return np.exp(1j * 2 * np.pi * spacing * t * np.sin(angles)[None, :])


def draw_paths(cfg: SystemConfig, rng: np.random.Generator) -> PathSet:
    n = cfg.sub6.num_paths
    aod = rng.uniform(-np.pi / 2, np.pi / 2, n)
    aoa = rng.uniform(-np.pi / 2, np.pi / 2, n)
    # truncated exponential by inverse CDF, support [0, max_delay)
    scale, tmax = cfg.decay_s, cfg.max_delay_s
    u = rng.uniform(0.0, 1.0, n)
    delay = -scale * np.log1p(-u * (1.0 - math.exp(-tmax / scale)))
    power = np.exp(-delay / scale)
    g = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    los_phase = rng.uniform(0.0, 2 * np.pi)
    if cfg.los_k_factor_db is not None:
        power[0] = 0.0
        if n > 1:
            power /= power.sum()
        power[0] = 10 ** (cfg.los_k_factor_db / 10)
        delay[0] = 0.0
        g[0] = np.exp(1j * los_phase)
    delay = np.minimum(delay - delay.min(), np.nextafter(tmax, 0.0))
    gain = np.sqrt(power / power.sum()) * g
    if cfg.normalize_power:
        gain /= np.linalg.norm(gain)
    order = np.argsort(-np.abs(gain), kind="stable")
    aod, aoa, delay, gain = aod[order], aoa[order], delay[order], gain[order]
    n_mm = cfg.mmwave.num_paths
    gain_mm = gain[:n_mm] * 10 ** (cfg.mmwave_power_db / 20)
    return PathSet(aod=aod, aoa=aoa, delay=delay, gain_sub6=gain, gain_mmwave=gain_mm)


def band_channel(band: BandConfig, aod, aoa, delay, gain) -> np.ndarray:
    """Synthesize ``H = [H_1..H_K]`` from path parameters for one band.

    ``H_k = sum_p gain_p a_BS(aod_p) a_UE(aoa_p)^H exp(-j 2 pi f_k delay_p)``
    with ``f_k`` the subcarrier offset from the carrier.
    """
    aod, aoa, delay, gain = map(np.atleast_1d, (aod, aoa, delay, gain))
    a_bs = _steering_matrix(band.bs_antennas, aod, band.antenna_spacing_wavelengths)
    a_ue = _steering_matrix(band.ue_antennas, aoa, band.antenna_spacing_wavelengths)
    phase = np.exp(-2j * np.pi * np.outer(delay, band.subcarrier_offsets_hz))
    h = np.einsum("p,bp,up,pk->buk", gain, a_bs, a_ue.conj(), phase)
    return h.reshape(band.bs_antennas, band.ue_antennas * band.subcarriers)


def generate_sample(cfg: SystemConfig, seed: int) -> DualBandSample:
    """One dual-band sample; identical ``(cfg, seed)`` gives identical output."""
    rng = np.random.default_rng(seed)
    paths = draw_paths(cfg, rng)
    n_mm = cfg.mmwave.num_paths
    h_s = band_channel(cfg.sub6, paths.aod, paths.aoa, paths.delay, paths.gain_sub6)
    h_m = band_channel(cfg.mmwave, paths.aod[:n_mm], paths.aoa[:n_mm], paths.delay[:n_mm],
                       paths.gain_mmwave)
    return DualBandSample(h_sub6=h_s, h_mmwave=h_m, seed=int(seed))


def generate_dataset(cfg: SystemConfig, count: int, seed: int = 0) -> list[DualBandSample]:
    """Samples with seeds ``seed .. seed + count - 1``."""
    return [generate_sample(cfg, seed + i) for i in range(count)]


def apply_awgn(h: np.ndarray, snr_db: float, seed: int | np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise at ``snr_db`` relative to ``mean(|h|^2)``.

    ``snr_db = inf`` returns an unchanged copy.
    """
    h = np.asarray(h)
    power = float(np.mean(np.abs(h) ** 2))
    if power == 0.0:
        raise ValueError("SNR is undefined for an all-zero channel")
    if math.isinf(snr_db) and snr_db > 0:
        return h.astype(np.complex128, copy=True)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    var = power / 10 ** (snr_db / 10)
    noise = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
    return h + np.sqrt(var / 2) * noise


def add_noise_batch(h: np.ndarray, snr_db, rng: np.random.Generator) -> np.ndarray:
    """Per-sample AWGN: sample ``i`` gets noise at ``snr_db[i]`` relative to its
    own mean power (the batched counterpart of ``apply_awgn``)."""
    snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), (h.shape[0],))
    power = np.mean(np.abs(h) ** 2, axis=tuple(range(1, h.ndim)))
    var = np.where(np.isinf(snr), 0.0, power / 10 ** (np.where(np.isinf(snr), 0, snr) / 10))
    noise = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
    scale = np.sqrt(var / 2).reshape((-1,) + (1,) * (h.ndim - 1))
    return h + scale * noise


def _split_blocks(h: np.ndarray, k: int) -> np.ndarray:
    h = np.asarray(h)
    if h.shape[-1] % k:
        raise ValueError(f"column count {h.shape[-1]} is not divisible by K={k}")
    return h.reshape(h.shape[:-1] + (h.shape[-1] // k, k))


def freq_to_time(h_f: np.ndarray, k: int) -> np.ndarray:
    """Unitary inverse DFT over each length-``k`` subcarrier block.

    Works on ``(..., M_B, M_U * K)`` arrays; the output has the same layout
    with the subcarrier index replaced by the delay-tap index.
    """
    blocks = _split_blocks(h_f, k)
    return np.fft.ifft(blocks, axis=-1, norm="ortho").reshape(np.shape(h_f))


def time_to_freq(h_t: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`freq_to_time`."""
    blocks = _split_blocks(h_t, k)
    return np.fft.fft(blocks, axis=-1, norm="ortho").reshape(np.shape(h_t))


# -- dataset file ----------------------------------------------------------------

MAGIC = b"MDFC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def write_dataset(samples: Sequence[DualBandSample], path, cfg: SystemConfig) -> None:
    """Write samples as ``MDFC`` | u16 version | u32 header length | header JSON |
    u64 count | u64 seeds[count] | float32 payload.

    The payload is sample-major; each sample holds the sub-6 then the mmWave
    matrix in row-major order with interleaved real/imaginary parts.
    """
    if len(samples) == 0:
        raise ValueError("cannot write an empty dataset")
    s_shape, m_shape = cfg.sub6.csi_shape, cfg.mmwave.csi_shape
    for s in samples:
        if s.h_sub6.shape != s_shape or s.h_mmwave.shape != m_shape:
            raise ValueError(f"sample {s.seed} has shapes {s.h_sub6.shape}/{s.h_mmwave.shape}, "
                             f"expected {s_shape}/{m_shape}")
    header = json.dumps({"system": cfg.to_dict()}, sort_keys=True).encode()
    seeds = np.array([s.seed for s in samples], dtype="<u8")
    payload = np.empty((len(samples), 2 * (math.prod(s_shape) + math.prod(m_shape))), dtype="<f4")
    for i, s in enumerate(samples):
        both = np.concatenate([s.h_sub6.ravel(), s.h_mmwave.ravel()]).astype(np.complex64)
        payload[i] = both.view(np.float32)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(samples)))
        fh.write(seeds.tobytes())
        fh.write(payload.tobytes())


def read_dataset(path) -> tuple[SystemConfig, list[DualBandSample]]:
    """Read a file written by :func:`write_dataset`.

    Raises:
        DatasetFormatError: bad magic, unknown version, or truncation.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise DatasetFormatError("file too short for header", len(raw))
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}", 4)
    pos = _PREFIX.size
    if len(raw) < pos + hlen + 8:
        raise DatasetFormatError("truncated header", len(raw))
    try:
        cfg = SystemConfig.from_dict(json.loads(raw[pos:pos + hlen])["system"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"invalid header record: {exc}", pos) from None
    pos += hlen
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    s_shape, m_shape = cfg.sub6.csi_shape, cfg.mmwave.csi_shape
    n_s, n_m = math.prod(s_shape), math.prod(m_shape)
    expected = pos + 8 * count + 8 * (n_s + n_m) * count
    if len(raw) != expected:
        raise DatasetFormatError(f"payload size mismatch: expected {expected} bytes, "
                                 f"found {len(raw)}", min(len(raw), expected))
    seeds = np.frombuffer(raw, dtype="<u8", count=count, offset=pos)
    pos += 8 * count
    data = np.frombuffer(raw, dtype="<f4", offset=pos).view(np.complex64)
    data = data.reshape(count, n_s + n_m)
    samples = [
        DualBandSample(h_sub6=row[:n_s].reshape(s_shape).astype(np.complex128),
                       h_mmwave=row[n_s:].reshape(m_shape).astype(np.complex128),
                       seed=int(sd))
        for row, sd in zip(data, seeds)
    ]
    return cfg, samples
