import dataclasses
import math
from fractions import Fraction

import pytest

from mdfce.channel import BandConfig, SystemConfig
from mdfce.config import ConfigError, RunConfig, parse_float_list, parse_rational
from mdfce.model import ModelConfig
from mdfce.training import TrainConfig


def custom_config() -> RunConfig:
    system = SystemConfig(sub6=BandConfig(2, 2, 8, 3.5e9, 40e6, 15),
                          mmwave=BandConfig(4, 2, 16, 28e9, 123e6, 5), los_k_factor_db=None)
    model = ModelConfig.for_system(system, d_re=8, d_hid=16, n_experts=2, top_k=1, n_heads=2,
                                   n_blocks=1, use_tfem=False)
    train = TrainConfig(target_lr=3e-3, epochs=7, batch_size=4, snr_db_train=(5.0, 30.0),
                        sub6_pilot_density=Fraction(1, 4), grad_clip=1.0)
    return RunConfig(system=system, model=model, train=train,
                     sub6_pilot_density=Fraction(1, 4), mmwave_densities=(Fraction(1, 8),),
                     snr_db=(-5.0, 0.0, math.inf), out_dir="runs/a", seed=12,
                     deterministic=True, threads=2)


@pytest.mark.parametrize("make", [RunConfig, custom_config])
def test_text_round_trip(make):
    cfg = make()
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.to_text() == cfg.to_text()


def test_save_and_load(tmp_path):
    cfg = custom_config()
    cfg.save(tmp_path / "run.ini")
    assert RunConfig.load(tmp_path / "run.ini") == cfg


def test_partial_file_keeps_defaults():
    cfg = RunConfig.from_text("[run]\nseed = 5\n[model]\nd_re = 32\n")
    assert cfg.seed == 5 and cfg.model.d_re == 32
    assert cfg.system == SystemConfig() and cfg.train == TrainConfig()


def test_model_follows_system_dimensions():
    cfg = RunConfig.from_text("[system]\nsub6_bs_antennas = 4\nsub6_subcarriers = 32\n")
    assert cfg.model.matches(cfg.system)
    assert cfg.model.bs_sub6 == 4 and cfg.model.k_sub6 == 32


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[run]\nunknown_key = 1\n",
    "[model]\nd_re = many\n",
    "[run]\ndeterministic = maybe\n",
    "[pilots]\nmmwave_densities = 3/2\n",
    "not an ini file",
])
def test_bad_files_raise_config_error(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_value_parsers():
    assert parse_rational("1/4") == Fraction(1, 4)
    assert parse_rational("0.5") == Fraction(1, 2)
    assert parse_float_list("0, 5,10") == [0.0, 5.0, 10.0]
    assert parse_float_list("") == []
    with pytest.raises(ConfigError):
        parse_rational("x/2")


def test_config_is_plain_dataclass():
    assert dataclasses.is_dataclass(RunConfig)
