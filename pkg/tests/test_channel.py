import math
import struct

import numpy as np
import pytest

from mdfce.channel import (
    BandConfig,
    DatasetFormatError,
    DualBandSample,
    SystemConfig,
    add_noise_batch,
    apply_awgn,
    band_channel,
    draw_paths,
    freq_to_time,
    generate_dataset,
    generate_sample,
    read_dataset,
    steering_vector,
    time_to_freq,
    write_dataset,
)


def small_system(**kw) -> SystemConfig:
    return SystemConfig(sub6=BandConfig(4, 2, 32, 3.5e9, 40e6, 15),
                        mmwave=BandConfig(8, 2, 64, 28e9, 123e6, 5), **kw)


def test_steering_vector_examples():
    np.testing.assert_allclose(steering_vector(2, 0.0), [1, 1])
    np.testing.assert_allclose(steering_vector(2, np.pi / 2, 0.5), [1, -1], atol=1e-15)
    np.testing.assert_allclose(steering_vector(1, 0.7), [1])


def test_subcarrier_grid_is_centered():
    band = BandConfig(2, 1, 4, 1e9, 4e6, 1)
    np.testing.assert_allclose(band.subcarrier_offsets_hz, [-2e6, -1e6, 0, 1e6])


def test_single_path_zero_delay_is_flat_and_rank_one():
    band = BandConfig(4, 2, 8, 3.5e9, 40e6, 1)
    h = band_channel(band, 0.3, -0.2, 0.0, 1.0).reshape(4, 2, 8)
    for k in range(8):
        np.testing.assert_allclose(h[:, :, k], h[:, :, 0], atol=1e-14)
        assert np.linalg.matrix_rank(h[:, :, k], tol=1e-10) == 1


def test_default_path_counts():
    cfg = SystemConfig()
    paths = draw_paths(cfg, np.random.default_rng(0))
    assert len(paths.gain_sub6) == 15 and len(paths.gain_mmwave) == 5
    s = generate_sample(cfg, 3)
    assert s.h_sub6.shape == (16, 256) and s.h_mmwave.shape == (32, 512)


def test_generate_sample_is_deterministic():
    cfg = small_system()
    a, b = generate_sample(cfg, 42), generate_sample(cfg, 42)
    assert np.array_equal(a.h_sub6, b.h_sub6) and np.array_equal(a.h_mmwave, b.h_mmwave)
    assert not np.array_equal(a.h_sub6, generate_sample(cfg, 43).h_sub6)


def test_samples_finite_over_many_seeds():
    cfg = small_system()
    for s in generate_dataset(cfg, 2000, seed=10):
        assert np.all(np.isfinite(s.h_sub6)) and np.all(np.isfinite(s.h_mmwave))


def test_bands_share_geometry():
    # the strongest path drives both bands, so its angles coincide exactly
    cfg = small_system()
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p = draw_paths(cfg, rng)
        j_s = int(np.argmax(np.abs(p.gain_sub6)))
        j_m = int(np.argmax(np.abs(p.gain_mmwave)))
        assert j_s == j_m == 0


def test_sub6_power_normalized_and_mmwave_offset():
    cfg = small_system()
    p = draw_paths(cfg, np.random.default_rng(2))
    assert np.linalg.norm(p.gain_sub6) == pytest.approx(1.0)
    np.testing.assert_allclose(p.gain_mmwave, p.gain_sub6[:5] * 0.1)


def test_delays_within_symbol():
    cfg = small_system(delay_decay_s=None)
    assert cfg.decay_s == pytest.approx(cfg.max_delay_s / 4)
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = draw_paths(cfg, rng).delay
        assert d.min() == 0.0 and d.max() < cfg.max_delay_s


def test_rayleigh_variant_has_no_los():
    cfg = small_system(los_k_factor_db=None, normalize_power=False)
    p = draw_paths(cfg, np.random.default_rng(4))
    assert np.all(np.isfinite(p.gain_sub6))


def test_awgn_inf_returns_copy():
    h = generate_sample(small_system(), 0).h_sub6
    out = apply_awgn(h, math.inf, 0)
    assert np.array_equal(out, h) and out is not h


def test_awgn_empirical_snr():
    h = np.ones(100_000, dtype=complex) * (1 + 1j)
    noisy = apply_awgn(h, 10.0, 5)
    snr = 10 * np.log10(np.mean(np.abs(h) ** 2) / np.mean(np.abs(noisy - h) ** 2))
    assert abs(snr - 10.0) < 0.1


def test_awgn_seeding_and_averaging():
    h = generate_sample(small_system(), 1).h_sub6
    np.testing.assert_array_equal(apply_awgn(h, 5.0, 9), apply_awgn(h, 5.0, 9))
    assert not np.array_equal(apply_awgn(h, 5.0, 9), apply_awgn(h, 10.0, 9))
    mean = np.mean([apply_awgn(h, 0.0, s) for s in range(2000)], axis=0)
    assert np.mean(np.abs(mean - h) ** 2) / np.mean(np.abs(h) ** 2) < 2e-3


def test_awgn_zero_channel_raises():
    with pytest.raises(ValueError):
        apply_awgn(np.zeros((2, 2), complex), 10.0, 0)


def test_add_noise_batch_matches_per_sample_power():
    rng = np.random.default_rng(0)
    h = np.stack([np.full((4, 8), 1.0 + 0j), np.full((4, 8), 10.0 + 0j)])
    h = np.repeat(h, 5000, axis=0)
    noisy = add_noise_batch(h, 0.0, rng)
    err = np.mean(np.abs(noisy - h) ** 2, axis=(1, 2))
    assert abs(err[:5000].mean() - 1.0) < 0.05 and abs(err[5000:].mean() - 100.0) < 5


def test_dft_round_trip_and_parseval():
    h = generate_sample(small_system(), 7).h_sub6
    t = freq_to_time(h, 32)
    assert np.max(np.abs(time_to_freq(t, 32) - h)) < 1e-10
    assert abs(np.sum(np.abs(t) ** 2) / np.sum(np.abs(h) ** 2) - 1) < 1e-10


def test_dft_constant_row_is_impulse():
    h = np.full((1, 8), 2.0 + 1j)
    t = freq_to_time(h, 8)
    np.testing.assert_allclose(t[0, 0], (2 + 1j) * np.sqrt(8))
    np.testing.assert_allclose(t[0, 1:], 0, atol=1e-14)


def test_dft_is_linear():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 16)) + 1j * rng.standard_normal((3, 16))
    y = rng.standard_normal((3, 16)) + 1j * rng.standard_normal((3, 16))
    a, b = 2.5 - 1j, -0.3
    lhs = freq_to_time(a * x + b * y, 8)
    rhs = a * freq_to_time(x, 8) + b * freq_to_time(y, 8)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_dft_rejects_bad_block_size():
    with pytest.raises(ValueError):
        freq_to_time(np.zeros((2, 10)), 4)


def test_dataset_round_trip(tmp_path):
    cfg = small_system()
    samples = generate_dataset(cfg, 5, seed=100)
    path = tmp_path / "d.mdfc"
    write_dataset(samples, path, cfg)
    cfg2, back = read_dataset(path)
    assert cfg2 == cfg
    assert [s.seed for s in back] == list(range(100, 105))
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(b.h_sub6, a.h_sub6.astype(np.complex64))
        np.testing.assert_array_equal(b.h_mmwave, a.h_mmwave.astype(np.complex64))


def test_dataset_header_layout(tmp_path):
    cfg = small_system()
    path = tmp_path / "d.mdfc"
    write_dataset(generate_dataset(cfg, 2), path, cfg)
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<4sHI", raw)
    assert magic == b"MDFC" and version == 1
    count = struct.unpack_from("<Q", raw, 10 + hlen)[0]
    assert count == 2
    payload = 2 * (4 * 64 + 8 * 128) * 2 * 4
    assert len(raw) == 10 + hlen + 8 + 2 * 8 + payload


def test_dataset_same_seed_is_byte_identical(tmp_path):
    cfg = small_system()
    write_dataset(generate_dataset(cfg, 3, 5), tmp_path / "a", cfg)
    write_dataset(generate_dataset(cfg, 3, 5), tmp_path / "b", cfg)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_dataset_empty_raises(tmp_path):
    with pytest.raises(ValueError):
        write_dataset([], tmp_path / "x", small_system())


def test_dataset_bad_magic_and_truncation(tmp_path):
    cfg = small_system()
    path = tmp_path / "d.mdfc"
    write_dataset(generate_dataset(cfg, 2), path, cfg)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError) as err:
        read_dataset(tmp_path / "bad")
    assert err.value.offset == 0
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "short")


def test_dataset_rejects_shape_mismatch(tmp_path):
    cfg = small_system()
    bad = DualBandSample(np.zeros((2, 2), complex), np.zeros((2, 2), complex), 0)
    with pytest.raises(ValueError):
        write_dataset([bad], tmp_path / "x", cfg)
