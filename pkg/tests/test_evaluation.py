import csv
import math
from fractions import Fraction

import numpy as np
import pytest

from mdfce.channel import BandConfig, SystemConfig, generate_dataset
from mdfce.evaluation import REPORT_FIELDS, EvalReport, evaluate, flops_per_sample
from mdfce.model import MdfceModel, ModelConfig
from mdfce.pilots import (
    LSBaseline,
    PilotConfig,
    estimate_band,
    interpolate_pilots,
    interpolation_matrix,
    ls_estimate,
    observe_pilots,
    pilot_count,
    pilot_indices,
    pilot_overhead,
)
from mdfce.training import nmse_db, nmse_loss

SYSTEM = SystemConfig(sub6=BandConfig(4, 2, 32, 3.5e9, 40e6, 15),
                      mmwave=BandConfig(8, 2, 64, 28e9, 123e6, 5))


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(SYSTEM, 64, seed=11)


def mm_true(samples):
    return np.stack([s.h_mmwave for s in samples])


# -- pilot layout ------------------------------------------------------------------


@pytest.mark.parametrize("pd, ue, k, expected", [
    (1, 2, 128, 256),
    (Fraction(1, 4), 2, 128, 64),
    (Fraction(1, 4), 2, 256, 128),
    (Fraction(1, 2), 2, 256, 256),
])
def test_pilot_overhead_table(pd, ue, k, expected):
    assert pilot_overhead(pd, ue, k) == expected


def test_pilot_indices_uniform_from_zero():
    np.testing.assert_array_equal(pilot_indices(Fraction(1, 4), 16), [0, 4, 8, 12])
    np.testing.assert_array_equal(pilot_indices(1, 5), np.arange(5))
    assert pilot_count(Fraction(1, 1000), 64) == 1


def test_pilot_density_out_of_range():
    with pytest.raises(ValueError):
        pilot_count(0, 8)
    with pytest.raises(ValueError):
        pilot_count(Fraction(3, 2), 8)


def test_pilot_config_rejects_bad_band_and_symbol_shape():
    with pytest.raises(ValueError):
        PilotConfig("lte", 1, 2, 8)
    with pytest.raises(ValueError):
        PilotConfig("mmwave", 1, 2, 8, symbols=np.ones((2, 3)))


# -- LS and interpolation ------------------------------------------------------------


def test_ls_noiseless_unit_pilots_exact():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((3, 4, 16)) + 1j * rng.standard_normal((3, 4, 16))
    cfg = PilotConfig("mmwave", 1, 2, 8)
    y = observe_pilots(h, cfg, math.inf, rng)
    np.testing.assert_array_equal(ls_estimate(y, cfg).reshape(3, 4, 16), h)


def test_ls_scaled_pilots_still_exact():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((2, 4, 16)) + 1j * rng.standard_normal((2, 4, 16))
    cfg = PilotConfig("mmwave", Fraction(1, 2), 2, 8, symbols=np.full((2, 4), 2.0))
    est = ls_estimate(observe_pilots(h, cfg, math.inf, rng), cfg)
    np.testing.assert_allclose(est, h.reshape(2, 4, 2, 8)[..., cfg.indices], rtol=0,
                               atol=1e-15)


def test_ls_singular_pilot_raises():
    cfg = PilotConfig("sub6", 1, 1, 4, symbols=np.array([[1, 0, 1, 1]]))
    with pytest.raises(ValueError):
        ls_estimate(np.ones((1, 1, 1, 4)), cfg)


def test_ls_error_variance_scales_with_snr():
    h = np.ones((10_000, 1, 4), dtype=complex)
    cfg = PilotConfig("mmwave", 1, 1, 4)
    var = []
    for snr in (0.0, 10.0, 20.0):
        est = ls_estimate(observe_pilots(h, cfg, snr, np.random.default_rng(3)), cfg)
        var.append(np.mean(np.abs(est.reshape(h.shape) - h) ** 2))
    for v, snr in zip(var, (0.0, 10.0, 20.0)):
        assert v == pytest.approx(10 ** (-snr / 10), rel=0.03)


def test_interpolation_identity_at_full_density():
    rng = np.random.default_rng(4)
    h = rng.standard_normal((3, 2, 8)) + 1j * rng.standard_normal((3, 2, 8))
    out = interpolate_pilots(h, np.arange(8), 8)
    np.testing.assert_allclose(out, h.reshape(3, 16), rtol=0, atol=1e-15)


@pytest.mark.parametrize("pd", [Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 32)])
def test_interpolation_exact_on_affine_channel(pd):
    k = np.arange(64)
    h = (0.3 - 0.1j) * k + (2 + 1j)
    idx = pilot_indices(pd, 64)
    out = interpolate_pilots(h[idx][None, None, :], idx, 64)[0]
    np.testing.assert_allclose(out, h, rtol=0, atol=1e-12)


def test_interpolation_weights_rows_sum_to_one():
    w = interpolation_matrix(pilot_indices(Fraction(1, 4), 30), 30)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-15)
    np.testing.assert_array_equal(w[0], np.eye(w.shape[1])[0])


def test_single_pilot_gives_constant_estimate():
    out = interpolate_pilots(np.array([[[3 - 2j]]]), np.array([0]), 16)
    np.testing.assert_array_equal(out, np.full((1, 16), 3 - 2j))


def test_interpolation_rejects_unsorted_indices():
    with pytest.raises(ValueError):
        interpolate_pilots(np.ones((1, 1, 2)), np.array([4, 2]), 8)


def test_estimate_band_at_full_density_is_awgn():
    rng = np.random.default_rng(5)
    h = rng.standard_normal((2000, 4, 16)) + 1j * rng.standard_normal((2000, 4, 16))
    est = estimate_band(h, PilotConfig("sub6", 1, 2, 8), 10.0, np.random.default_rng(6))
    assert nmse_db(nmse_loss(h, est)) == pytest.approx(-10.0, abs=0.1)


def test_ls_perfect_at_full_density_and_infinite_snr(samples):
    ls = LSBaseline(PilotConfig("mmwave", 1, 2, 64))
    row = evaluate(ls, samples, [math.inf]).rows[0]
    assert row.nmse_db < -120.0


def test_ls_nmse_improves_with_density(samples):
    h = mm_true(samples)
    prev = math.inf
    for pd in (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), 1):
        ls = LSBaseline(PilotConfig("mmwave", pd, 2, 64))
        nmse = nmse_loss(h, ls.estimate(h, math.inf, np.random.default_rng(0)))
        assert nmse <= prev
        prev = nmse


def test_ls_baseline_name_and_overhead():
    ls = LSBaseline(PilotConfig("mmwave", Fraction(1, 4), 2, 64))
    assert ls.name == "LS+Linear PD=1/4" and ls.pilots.overhead == 32


# -- FLOPs -------------------------------------------------------------------------


def table_config(**kw) -> ModelConfig:
    base = dict(bs_sub6=16, ue_sub6=2, k_sub6=128, bs_mmwave=32, ue_mmwave=2, k_mmwave=256,
                d_re=512, d_hid=2048, n_experts=8, top_k=2, n_heads=8, n_blocks=6)
    base.update(kw)
    return ModelConfig(**base)


def test_expert_flops_ratio_is_k_over_n_e():
    cfg = table_config()
    sparse = flops_per_sample(cfg).breakdown
    dense = flops_per_sample(cfg, dense_moe=True).breakdown
    for key in sparse:
        if key.endswith("moe.experts"):
            assert Fraction(sparse[key], dense[key]) == Fraction(1, 4)
        else:
            assert sparse[key] == dense[key]


def test_flops_k_equal_n_e_matches_dense():
    cfg = table_config(n_experts=4, top_k=4)
    assert flops_per_sample(cfg).total == flops_per_sample(cfg, dense_moe=True).total


def test_flops_increase_with_depth():
    totals = [flops_per_sample(table_config(n_blocks=n)).total for n in range(1, 7)]
    assert all(b > a for a, b in zip(totals, totals[1:]))


def test_flops_d_re_scaling():
    a = flops_per_sample(table_config(d_re=64, n_heads=4)).breakdown
    b = flops_per_sample(table_config(d_re=128, n_heads=4)).breakdown
    assert b["mdfm.mhsa.scores"] == 2 * a["mdfm.mhsa.scores"]
    assert b["mdfm.mhsa.projections"] == 4 * a["mdfm.mhsa.projections"]


def test_flops_breakdown_sums_to_total():
    r = flops_per_sample(table_config(use_tfem=False))
    assert sum(r.breakdown.values()) == r.total
    assert not any(k.startswith("tfem") for k in r.breakdown)


# -- evaluation harness --------------------------------------------------------------


def test_oracle_hits_reporting_floor(samples):
    def oracle(hs, hm, snr, rng):
        return hm.copy()

    row = evaluate(oracle, samples, [10.0]).rows[0]
    assert row.nmse_linear == 0.0 and row.nmse_db == -150.0
    assert "< -150" in EvalReport([row]).to_text()


def test_rows_satisfy_db_definition(samples):
    ls = LSBaseline(PilotConfig("mmwave", Fraction(1, 4), 2, 64))
    report = evaluate(ls, samples, [0.0, 10.0, 20.0], seed=3)
    assert [r.snr_db for r in report.rows] == [0.0, 10.0, 20.0]
    for r in report.rows:
        assert r.nmse_db == pytest.approx(10 * math.log10(r.nmse_linear), abs=1e-12)
        assert r.pilot_overhead == 32 and r.flops_per_sample == 0


def test_evaluation_is_seeded(samples):
    ls = LSBaseline(PilotConfig("mmwave", Fraction(1, 2), 2, 64))
    a = evaluate(ls, samples, [5.0], seed=1).rows[0].nmse_linear
    assert a == evaluate(ls, samples, [5.0], seed=1).rows[0].nmse_linear
    assert a != evaluate(ls, samples, [5.0], seed=2).rows[0].nmse_linear


def test_model_rows_report_sub6_overhead_and_flops(samples):
    cfg = ModelConfig.for_system(SYSTEM, d_re=16, d_hid=32, n_experts=4, top_k=2, n_heads=2,
                                 n_blocks=1)
    model = MdfceModel(cfg, seed=0)
    report = evaluate(model, samples[:8], [10.0, math.inf], sub6_pilot_density=Fraction(1, 4))
    assert [r.method for r in report.rows] == ["MDFCE", "MDFCE"]
    assert all(r.pilot_overhead == 16 for r in report.rows)
    assert all(r.flops_per_sample == flops_per_sample(cfg).total for r in report.rows)


def test_empty_evaluation_set_raises():
    with pytest.raises(ValueError):
        evaluate(LSBaseline(PilotConfig("mmwave", 1, 2, 64)), [], [0.0])


def test_report_csv_header_and_rows(samples, tmp_path):
    ls = LSBaseline(PilotConfig("mmwave", Fraction(1, 4), 2, 64))
    report = evaluate(ls, samples, [0.0, 5.0])
    report.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == list(REPORT_FIELDS)
    assert rows[0] == ["snr_db", "method", "nmse_linear", "nmse_db", "pilot_overhead",
                       "flops_per_sample"]
    assert len(rows) == 3 and rows[1][1] == "LS+Linear PD=1/4"
    assert float(rows[2][2]) == report.rows[1].nmse_linear
