"""Losses, AdamW and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .channel import DualBandSample
from .model import GateDecision, MdfceModel, NormStats, csi_to_real, save_checkpoint
from .pilots import PilotConfig, estimate_band
from .tensor import Tensor, backward, grad_check, no_grad

__all__ = [
    "nmse_loss",
    "aux_loss",
    "total_loss",
    "nmse_db",
    "adamw_step",
    "AdamW",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "warmup_lr",
    "samples_to_arrays",
    "train",
    "predict_real",
    "write_history_csv",
    "routing_margin",
    "model_loss",
    "check_model_gradients",
]

log = logging.getLogger(__name__)

NMSE_DB_FLOOR = -150.0


def _sample_norms(true: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, true.ndim))
    norms = np.sum(np.abs(true) ** 2, axis=axes)
    if np.any(norms == 0):
        raise ValueError("NMSE is undefined for a sample with all-zero ground truth")
    return norms


def nmse_loss(h_true: np.ndarray, h_est):
    """Mean over samples (axis 0) of ``||H - H_est||^2 / ||H||^2``.

    ``h_true`` and ``h_est`` may be complex arrays or real-form arrays. When
    ``h_est`` is a :class:`Tensor` the result is a differentiable scalar
    Tensor, otherwise a float.
    """
    h_true = np.asarray(h_true)
    norms = _sample_norms(h_true)
    if isinstance(h_est, Tensor):
        if h_est.shape != h_true.shape:
            raise ValueError(f"shape mismatch: {h_true.shape} vs {h_est.shape}")
        diff = h_est - h_true
        sq = (diff * diff).reshape(h_true.shape[0], -1).sum(axis=1)
        return (sq * (1.0 / norms)).mean()
    h_est = np.asarray(h_est)
    if h_est.shape != h_true.shape:
        raise ValueError(f"shape mismatch: {h_true.shape} vs {h_est.shape}")
    axes = tuple(range(1, h_true.ndim))
    err = np.sum(np.abs(h_true - h_est) ** 2, axis=axes)
    return float(np.mean(err / norms))


def aux_loss(gates: Sequence[GateDecision]) -> Tensor:
    """Load-balancing penalty ``N_e * sum_j m_j p_j``, averaged over samples
    and over MoE layers. Gradient flows through the mean gate values only."""
    if not gates:
        raise ValueError("aux_loss needs at least one gate record")
    total = None
    for g in gates:
        n_e = g.route_fraction.shape[-1]
        per_sample = (g.mean_gate * g.route_fraction).sum(axis=-1) * float(n_e)
        term = per_sample.mean()
        total = term if total is None else total + term
    return total * (1.0 / len(gates))


def total_loss(nmse, aux, kappa: float):
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return nmse * kappa + aux * (1.0 - kappa)


def nmse_db(nmse_linear: float) -> float:
    """``10 log10(nmse)``; zero maps to ``-inf``."""
    if nmse_linear < 0:
        raise ValueError(f"NMSE cannot be negative: {nmse_linear}")
    if nmse_linear == 0:
        return -math.inf
    return 10.0 * math.log10(nmse_linear)


# -- optimizer -------------------------------------------------------------------


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: dict,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``state`` starts as ``{}``; it holds the step count and both moments.
    Parameters whose gradient is ``None`` still decay.
    """
    b1, b2 = betas
    if not state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if weight_decay:
            p -= lr * weight_decay * p
        if g is None:
            g = 0.0
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict = {}

    def step(self, lr: float | None = None) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr if lr is None else lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- training --------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimization settings; defaults mirror the reference run (lr 1e-4,
    1000 epochs, batch 128, kappa 0.99, AdamW).

    ``snr_db_train`` is either a single SNR (``inf`` = clean) or a
    ``(low, high)`` range from which a per-sample SNR is drawn every epoch.
    Noisy sub-6 inputs are LS estimates at ``sub6_pilot_density`` followed by
    linear interpolation, i.e. the same corruption used at evaluation time.
    """

    target_lr: float = 1e-4
    epochs: int = 1000
    batch_size: int = 128
    kappa: float = 0.99
    warmup_fraction: float = 0.05
    seed: int = 0
    snr_db_train: float | tuple[float, float] = math.inf
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    sub6_pilot_density: Fraction | float = 1


@dataclass
class TrainResult:
    model: MdfceModel
    history: list[dict] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. ``model`` holds the last good parameters."""

    def __init__(self, epoch: int, result: TrainResult):
        super().__init__(f"training diverged in epoch {epoch}; restored last good parameters")
        self.epoch = epoch
        self.result = result


def warmup_lr(step: int, total_steps: int, target_lr: float, warmup_fraction: float) -> float:
    """Linear ramp from 0 to ``target_lr`` over the first steps, constant after."""
    warm = max(1, int(round(warmup_fraction * total_steps)))
    if step < warm:
        return target_lr * (step + 1) / warm
    return target_lr


def samples_to_arrays(samples: Sequence[DualBandSample], ue_sub6: int, ue_mmwave: int):
    """Stack samples as complex arrays ``(N, M_B, M_U K)`` for both bands."""
    hs = np.stack([s.h_sub6 for s in samples])
    hm = np.stack([s.h_mmwave for s in samples])
    return hs, hm


def _draw_snr(snr, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(snr, (tuple, list)):
        lo, hi = snr
        return rng.uniform(lo, hi, n)
    return np.full(n, float(snr))


def predict_real(model: MdfceModel, x_real: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Denormalized real-form predictions for a stack of inputs, without graph."""
    outs = []
    with no_grad():
        for i in range(0, len(x_real), batch_size):
            out, _ = model.forward_real(x_real[i:i + batch_size])
            outs.append(out.data)
    return np.concatenate(outs)


def train(model: MdfceModel, samples: Sequence[DualBandSample], cfg: TrainConfig,
          fit_norm: bool = True, checkpoint_path=None, system=None,
          on_epoch=None) -> TrainResult:
    """Minimize ``kappa * NMSE + (1 - kappa) * aux`` with AdamW.

    Args:
        model: network to train in place.
        samples: the training split.
        fit_norm: replace ``model.norm`` by statistics of the clean training split.
        checkpoint_path: if given, the model is checkpointed after every epoch.
        on_epoch: optional callback ``f(epoch_record)``.

    Raises:
        TrainingDiverged: on a non-finite loss; parameters are restored to the
            end of the last completed epoch.
    """
    if len(samples) == 0:
        raise ValueError("training set is empty")
    mc = model.config
    hs, hm = samples_to_arrays(samples, mc.ue_sub6, mc.ue_mmwave)
    x_clean = csi_to_real(hs, mc.ue_sub6)
    y = csi_to_real(hm, mc.ue_mmwave)
    if x_clean.shape[1:] != (mc.tokens_in, mc.features_in) or \
            y.shape[1:] != (mc.tokens_out, mc.features_out):
        raise ValueError(f"dataset shapes {x_clean.shape[1:]}/{y.shape[1:]} do not match the "
                         f"model ({mc.tokens_in}, {mc.features_in})/"
                         f"({mc.tokens_out}, {mc.features_out})")
    if fit_norm:
        model.norm = NormStats.fit(x_clean, y)

    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    opt = AdamW(params.values(), lr=cfg.target_lr, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    result = TrainResult(model=model)
    good = {k: p.data.copy() for k, p in params.items()}
    good_state = copy.deepcopy(opt.state)
    step = 0
    pilots = PilotConfig("sub6", cfg.sub6_pilot_density, mc.ue_sub6, mc.k_sub6)
    noisy_training = not (np.isscalar(cfg.snr_db_train) and math.isinf(cfg.snr_db_train))

    for epoch in range(1, cfg.epochs + 1):
        if noisy_training:
            snr = _draw_snr(cfg.snr_db_train, n, rng)
            x_epoch = csi_to_real(estimate_band(hs, pilots, snr, rng), mc.ue_sub6)
        else:
            x_epoch = x_clean
        order = rng.permutation(n)
        sums = np.zeros(3)
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = warmup_lr(step, total_steps, cfg.target_lr, cfg.warmup_fraction)
            opt.zero_grad()
            pred, gates = model.forward_real(x_epoch[idx])
            l_nmse = nmse_loss(y[idx], pred)
            l_aux = aux_loss(gates)
            loss = total_loss(l_nmse, l_aux, cfg.kappa)
            if not np.isfinite(loss.item()):
                for k, p in params.items():
                    p.data = good[k].copy()
                opt.state = good_state
                raise TrainingDiverged(epoch, result)
            backward(loss)
            if cfg.grad_clip is not None:
                _clip_grads(opt.params, cfg.grad_clip)
            opt.step(lr)
            step += 1
            w = len(idx) / n
            sums += w * np.array([loss.item(), l_nmse.item(), l_aux.item()])
        record = {"epoch": epoch, "total_loss": sums[0], "nmse_loss": sums[1],
                  "aux_loss": sums[2], "lr": lr}
        result.history.append(record)
        good = {k: p.data.copy() for k, p in params.items()}
        good_state = copy.deepcopy(opt.state)
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path, system=system)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d total %.5f nmse %.5f aux %.4f", epoch, *sums)
    return result


def _clip_grads(params: Sequence[Tensor], max_norm: float) -> None:
    sq = sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale


HISTORY_FIELDS = ("epoch", "total_loss", "nmse_loss", "aux_loss", "lr")


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in HISTORY_FIELDS[1:]])


# -- gradient verification -------------------------------------------------------


def routing_margin(gates: Sequence[GateDecision]) -> float:
    """Smallest gap between the K-th and (K+1)-th gate logit over all tokens
    and layers; ``inf`` when every expert is active."""
    margin = math.inf
    for g in gates:
        logits = np.sort(g.logits.data, axis=-1)[..., ::-1]
        k = int(g.mask.sum(axis=-1).flat[0])
        if k < logits.shape[-1]:
            margin = min(margin, float(np.min(logits[..., k - 1] - logits[..., k])))
    return margin


def model_loss(model: MdfceModel, x_real: np.ndarray, y_real: np.ndarray,
               kappa: float = 0.99) -> tuple[Tensor, list[GateDecision]]:
    """The training objective on one batch of real-form inputs and targets."""
    pred, gates = model.forward_real(x_real)
    return total_loss(nmse_loss(y_real, pred), aux_loss(gates), kappa), gates


def check_model_gradients(model: MdfceModel, x_real: np.ndarray, y_real: np.ndarray,
                          kappa: float = 0.99, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every parameter tensor of ``model``.

    The default step keeps round-off in the difference quotient near 1e-11,
    which matters for the small gradients of the temporal encoder.

    Returns the maximum relative error per parameter name.

    Raises:
        ValueError: the routing margin at this point is below ``1e-3``, so a
            finite-difference step could flip an expert selection.
    """
    with no_grad():
        _, gates = model_loss(model, x_real, y_real, kappa)
    margin = routing_margin(gates)
    if margin <= 1e-3:
        raise ValueError(f"routing margin {margin:.3g} is too small for a gradient check")
    errors = {}
    for name, p in model.named_parameters().items():
        def f(_, p=p):
            return model_loss(model, x_real, y_real, kappa)[0]
        model.zero_grad()
        errors[name] = grad_check(f, p, eps)
    model.zero_grad()
    return errors
