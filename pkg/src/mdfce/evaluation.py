"""FLOPs accounting, NMSE evaluation and result reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import DualBandSample
from .model import MdfceModel, ModelConfig, csi_to_real, real_to_csi
from .pilots import LSBaseline, PilotConfig, estimate_band
from .training import NMSE_DB_FLOOR, nmse_db, nmse_loss, predict_real

__all__ = [
    "flops_per_sample",
    "FlopsReport",
    "EvalRow",
    "EvalReport",
    "evaluate",
]


# -- FLOPs -----------------------------------------------------------------------


@dataclass
class FlopsReport:
    total: int
    breakdown: dict[str, int] = field(default_factory=dict)


def flops_per_sample(cfg: ModelConfig, dense_moe: bool = False) -> FlopsReport:
    """Analytic FLOPs (2 per multiply-add) of the matrix products in one forward pass.

    Element-wise work (activations, normalization, softmax) is not counted.
    The experts are counted at ``top_k`` evaluations per token, or at all
    ``n_experts`` when ``dense_moe``.
    """
    m, f, d = cfg.tokens_in, cfg.features_in, cfg.d_re
    active = cfg.n_experts if dense_moe else cfg.top_k
    b: dict[str, int] = {}
    if cfg.use_tfem:
        b["tfem.token_ffn"] = 2 * (f * m * 2 * m + f * 2 * m * m)
        b["tfem.feature_ffn"] = 2 * (m * f * 2 * d + m * 2 * d * d)
    b["embed"] = 2 * m * f * d

    def block(prefix: str) -> None:
        b[f"{prefix}.mhsa.projections"] = 2 * 4 * m * d * d
        b[f"{prefix}.mhsa.scores"] = 2 * m * m * d
        b[f"{prefix}.mhsa.mix"] = 2 * m * m * d
        b[f"{prefix}.moe.gate"] = 2 * m * d * cfg.n_experts
        b[f"{prefix}.moe.experts"] = 2 * m * active * 2 * d * cfg.d_expert

    block("mdfm")
    for i in range(cfg.n_blocks):
        block(f"dfim.{i}")
    if cfg.head == "factorized":
        b["head.token_map"] = 2 * cfg.tokens_out * m * d
        b["head.feature_map"] = 2 * cfg.tokens_out * d * cfg.features_out
    else:
        ratio = -(-cfg.tokens_out // m)
        b["head.feature_map"] = 2 * m * d * ratio * cfg.features_out
        b["head.token_map"] = 2 * cfg.tokens_out * ratio * m * cfg.features_out
    return FlopsReport(total=sum(b.values()), breakdown=b)


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalRow:
    snr_db: float
    method: str
    nmse_linear: float
    nmse_db: float
    pilot_overhead: int
    flops_per_sample: int


REPORT_FIELDS = ("snr_db", "method", "nmse_linear", "nmse_db", "pilot_overhead",
                 "flops_per_sample")


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def for_method(self, method: str) -> list[EvalRow]:
        return [r for r in self.rows if r.method == method]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([_fmt(r.snr_db), r.method, repr(r.nmse_linear), _fmt(r.nmse_db),
                            r.pilot_overhead, r.flops_per_sample])

    def to_text(self) -> str:
        lines = [f"{'method':<28}{'snr_db':>8}{'nmse_db':>10}{'pilots':>8}{'flops':>12}"]
        for r in self.rows:
            nd = f"< {NMSE_DB_FLOOR:.0f}" if r.nmse_db <= NMSE_DB_FLOOR else f"{r.nmse_db:.2f}"
            lines.append(f"{r.method:<28}{_fmt(r.snr_db):>8}{nd:>10}"
                         f"{r.pilot_overhead:>8}{r.flops_per_sample:>12}")
        return "\n".join(lines)


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _row(snr, method, nmse, overhead, flops) -> EvalRow:
    db = nmse_db(nmse)
    return EvalRow(snr_db=float(snr), method=method, nmse_linear=nmse,
                   nmse_db=max(db, NMSE_DB_FLOOR), pilot_overhead=overhead,
                   flops_per_sample=flops)


def evaluate(method, samples: Sequence[DualBandSample], snr_list: Sequence[float],
             seed: int = 0, name: str | None = None, sub6_pilot_density=1) -> EvalReport:
    """NMSE of one method at each SNR.

    ``method`` is an :class:`MdfceModel` (fed sub-6 LS estimates at
    ``sub6_pilot_density``), an
    :class:`LSBaseline` (its mmWave pilot observations are corrupted), or any
    callable ``f(h_sub6_batch, h_mmwave_batch, snr_db, rng) -> estimate``.
    """
    if len(samples) == 0:
        raise ValueError("evaluation set is empty")
    hs = np.stack([s.h_sub6 for s in samples])
    hm = np.stack([s.h_mmwave for s in samples])
    report = EvalReport()
    for snr in snr_list:
        rng = np.random.default_rng([seed, _snr_key(snr)])
        if isinstance(method, MdfceModel):
            mc = method.config
            pilots = PilotConfig("sub6", sub6_pilot_density, mc.ue_sub6, mc.k_sub6)
            noisy = estimate_band(hs, pilots, snr, rng)
            est = real_to_csi(predict_real(method, csi_to_real(noisy, mc.ue_sub6)),
                              mc.bs_mmwave, mc.ue_mmwave)
            label = name or ("MDFCE" if mc.use_tfem else "MDFCE w/o TFEM")
            overhead = pilots.overhead
            flops = flops_per_sample(mc).total
        elif isinstance(method, LSBaseline):
            est = method.estimate(hm, snr, rng)
            label, overhead, flops = name or method.name, method.pilots.overhead, 0
        else:
            est = method(hs, hm, snr, rng)
            label, overhead, flops = name or getattr(method, "__name__", "custom"), 0, 0
        report.rows.append(_row(snr, label, nmse_loss(hm, est), overhead, flops))
    return report


def _snr_key(snr: float) -> int:
    return 1 << 20 if math.isinf(snr) else int(round(1000 * snr)) % (1 << 31)
