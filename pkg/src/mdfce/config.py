"""Run configuration and its INI text form.

Every run is described by one flat key-value file with ``[run]``,
``[system]``, ``[model]``, ``[train]``, ``[pilots]`` and ``[data]`` sections.
Band fields carry a ``sub6_`` or ``mmwave_`` prefix. Absent keys take their
defaults, so a file only needs the values it changes::

    [system]
    sub6_bs_antennas = 4
    sub6_subcarriers = 32

    [train]
    epochs = 20
    snr_db_train = 5.0, 30.0

    [pilots]
    mmwave_densities = 1/4, 1/2
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .channel import BandConfig, SystemConfig
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["RunConfig", "ConfigError", "parse_rational", "parse_density", "parse_float_list",
           "format_float"]

# model fields that are not derived from the system
MODEL_KEYS = ("d_re", "d_hid", "n_experts", "top_k", "n_heads", "n_blocks", "use_tfem", "head",
              "ln_eps")


class ConfigError(ValueError):
    pass


def parse_rational(text: str) -> Fraction:
    """``"1/4"``, ``"0.25"`` or ``"1"`` as an exact fraction."""
    try:
        value = Fraction(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a rational number: {text!r}") from exc
    return value


def parse_density(text: str) -> Fraction:
    """A pilot density in ``(0, 1]``."""
    value = parse_rational(text)
    if not 0 < value <= 1:
        raise ConfigError(f"pilot density must lie in (0, 1], got {text.strip()!r}")
    return value


def parse_float_list(text: str) -> list[float]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [float(t) for t in items]
    except ValueError as exc:
        raise ConfigError(f"not a list of numbers: {text!r}") from exc


def format_float(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse(text: str, like):
    """Parse ``text`` into the type of the default value ``like``."""
    t = text.strip()
    if t.lower() == "none":
        return None
    if isinstance(like, bool):
        if t.lower() in ("true", "yes", "1", "on"):
            return True
        if t.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        try:
            return int(t)
        except ValueError as exc:
            raise ConfigError(f"not an integer: {text!r}") from exc
    if isinstance(like, Fraction):
        return parse_rational(t)
    if isinstance(like, float) or like is None:
        try:
            return float(t)
        except ValueError as exc:
            raise ConfigError(f"not a number: {text!r}") from exc
    return t


@dataclass
class RunConfig:
    """Everything a ``generate`` / ``train`` / ``eval`` run needs."""

    system: SystemConfig = field(default_factory=SystemConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sub6_pilot_density: Fraction = Fraction(1)
    mmwave_densities: tuple[Fraction, ...] = (Fraction(1, 4), Fraction(1, 2))
    snr_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    train_data: str = "train.mdfc"
    val_data: str = "val.mdfc"
    train_count: int = 4096
    val_count: int = 1024
    val_seed: int = 1_000_000
    out_dir: str = "."
    seed: int = 0
    deterministic: bool = False
    threads: int | None = None

    def __post_init__(self):
        # keep the model dimensions tied to the system
        if not self.model.matches(self.system):
            kw = {k: getattr(self.model, k) for k in MODEL_KEYS}
            self.model = ModelConfig.for_system(self.system, **kw)

    # -- text form ---------------------------------------------------------------

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": _fmt(self.seed), "out_dir": self.out_dir,
                     "deterministic": _fmt(self.deterministic), "threads": _fmt(self.threads)}
        sysd = {}
        for band in ("sub6", "mmwave"):
            for f in dataclasses.fields(BandConfig):
                sysd[f"{band}_{f.name}"] = _fmt(getattr(getattr(self.system, band), f.name))
        for f in dataclasses.fields(SystemConfig):
            if f.name not in ("sub6", "mmwave"):
                sysd[f.name] = _fmt(getattr(self.system, f.name))
        cp["system"] = sysd
        cp["model"] = {k: _fmt(getattr(self.model, k)) for k in MODEL_KEYS}
        cp["train"] = {f.name: _fmt(getattr(self.train, f.name))
                       for f in dataclasses.fields(TrainConfig)}
        cp["pilots"] = {"sub6_density": str(self.sub6_pilot_density),
                        "mmwave_densities": ", ".join(str(d) for d in self.mmwave_densities),
                        "snr_db": _fmt(tuple(self.snr_db))}
        cp["data"] = {"train": self.train_data, "val": self.val_data,
                      "train_count": _fmt(self.train_count), "val_count": _fmt(self.val_count),
                      "val_seed": _fmt(self.val_seed)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        known = {"run", "system", "model", "train", "pilots", "data"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        d = cls()

        def section(name: str, allowed) -> dict:
            if not cp.has_section(name):
                return {}
            items = dict(cp[name])
            extra = set(items) - set(allowed)
            if extra:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
            return items

        run = section("run", ("seed", "out_dir", "deterministic", "threads"))
        seed = _parse(run.get("seed", "0"), 0)
        threads = run.get("threads")
        threads = None if threads is None else _parse(threads, 0)

        band_keys = [f.name for f in dataclasses.fields(BandConfig)]
        sys_keys = [f.name for f in dataclasses.fields(SystemConfig)
                    if f.name not in ("sub6", "mmwave")]
        sysd = section("system", [f"{b}_{k}" for b in ("sub6", "mmwave") for k in band_keys]
                       + sys_keys)
        bands = {}
        for band in ("sub6", "mmwave"):
            base = getattr(d.system, band)
            kw = {k: getattr(base, k) for k in band_keys}
            for k in band_keys:
                if f"{band}_{k}" in sysd:
                    kw[k] = _parse(sysd[f"{band}_{k}"], kw[k])
            bands[band] = BandConfig(**kw)
        skw = {k: getattr(d.system, k) for k in sys_keys}
        for k in sys_keys:
            if k in sysd:
                skw[k] = _parse(sysd[k], 0.0 if k != "normalize_power" else True)
        system = SystemConfig(**bands, **skw)

        md = section("model", MODEL_KEYS)
        mkw = {k: getattr(d.model, k) for k in MODEL_KEYS}
        for k in MODEL_KEYS:
            if k in md:
                mkw[k] = _parse(md[k], mkw[k])
        model = ModelConfig.for_system(system, **mkw)

        tkeys = [f.name for f in dataclasses.fields(TrainConfig)]
        td = section("train", tkeys)
        tkw = {}
        for k in tkeys:
            if k not in td:
                continue
            like = getattr(d.train, k)
            if k == "snr_db_train":
                vals = parse_float_list(td[k])
                if len(vals) not in (1, 2):
                    raise ConfigError("snr_db_train takes one value or a low, high pair")
                tkw[k] = vals[0] if len(vals) == 1 else (vals[0], vals[1])
            elif k == "betas":
                vals = parse_float_list(td[k])
                if len(vals) != 2:
                    raise ConfigError("betas takes two values")
                tkw[k] = (vals[0], vals[1])
            elif k == "sub6_pilot_density":
                tkw[k] = parse_density(td[k])
            elif k == "grad_clip":
                tkw[k] = _parse(td[k], 0.0)
            else:
                tkw[k] = _parse(td[k], like)
        train = dataclasses.replace(d.train, **tkw)

        pd = section("pilots", ("sub6_density", "mmwave_densities", "snr_db"))
        sub6_pd = parse_density(pd["sub6_density"]) if "sub6_density" in pd \
            else d.sub6_pilot_density
        mm = tuple(parse_density(t) for t in pd["mmwave_densities"].split(",") if t.strip()) \
            if "mmwave_densities" in pd else d.mmwave_densities
        snr = tuple(parse_float_list(pd["snr_db"])) if "snr_db" in pd else d.snr_db

        dd = section("data", ("train", "val", "train_count", "val_count", "val_seed"))
        return cls(system=system, model=model, train=train, sub6_pilot_density=sub6_pd,
                   mmwave_densities=mm, snr_db=snr,
                   train_data=dd.get("train", d.train_data), val_data=dd.get("val", d.val_data),
                   train_count=_parse(dd.get("train_count", str(d.train_count)), 0),
                   val_count=_parse(dd.get("val_count", str(d.val_count)), 0),
                   val_seed=_parse(dd.get("val_seed", str(d.val_seed)), 0),
                   out_dir=run.get("out_dir", d.out_dir),
                   deterministic=_parse(run.get("deterministic", "false"), False),
                   seed=seed, threads=threads)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())
