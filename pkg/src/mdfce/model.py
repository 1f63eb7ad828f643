"""The multi-domain fusion channel extrapolator network.

Data flow for one sub-6 GHz CSI matrix (``M`` tokens = BS x UE antenna pairs,
``2K`` real features per token)::

    x_f = normalize(csi_to_real(H_sub6))
    x_t = real form of the delay-domain transform of x_f
    latent = TemporalEncoder(x_t)                      # gating input
    z = FusionBlock(x_f, latent)                       # embed + MHSA + gated MoE
    z = InteractionBlock(...)(z) repeated n_blocks times
    H_mmwave = real_to_csi(denormalize(OutputHead(z)))

Every forward works on a single sample ``(M, 2K)`` or a batch ``(B, M, 2K)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import SystemConfig
from .tensor import (
    ShapeError,
    Tensor,
    deserialize_params,
    index_add,
    layer_norm,
    no_grad,
    relu,
    serialize_params,
    softmax_rows,
    take_rows,
)

__all__ = [
    "ModelConfig",
    "NormStats",
    "GateDecision",
    "Module",
    "Linear",
    "FeedForward",
    "LayerNorm",
    "MultiHeadSelfAttention",
    "MoELayer",
    "TemporalEncoder",
    "FusionBlock",
    "InteractionBlock",
    "OutputHead",
    "MdfceModel",
    "csi_to_real",
    "real_to_csi",
    "delay_domain_features",
    "mdfce_forward",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CHECKPOINT_VERSION",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions. Defaults follow the reference hyper-parameters
    (d_re=128, d_hid=256, 8 experts, top-2, 4 heads, 7 interaction blocks) with
    a 16x2 sub-6 array on 128 subcarriers and a 32x2 mmWave array on 256."""

    d_re: int = 128
    d_hid: int = 256
    n_experts: int = 8
    top_k: int = 2
    n_heads: int = 4
    n_blocks: int = 7
    bs_sub6: int = 16
    ue_sub6: int = 2
    k_sub6: int = 128
    bs_mmwave: int = 32
    ue_mmwave: int = 2
    k_mmwave: int = 256
    use_tfem: bool = True
    head: str = "expand"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_re % self.n_heads:
            raise ValueError(f"d_re={self.d_re} is not divisible by n_heads={self.n_heads}")
        if self.d_hid % self.n_experts:
            raise ValueError(f"d_hid={self.d_hid} is not divisible by n_experts={self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k must lie in [1, {self.n_experts}]")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        if self.head not in ("expand", "factorized"):
            raise ValueError(f"unknown output head {self.head!r}")

    @property
    def d_expert(self) -> int:
        return self.d_hid // self.n_experts

    @property
    def tokens_in(self) -> int:
        return self.bs_sub6 * self.ue_sub6

    @property
    def features_in(self) -> int:
        return 2 * self.k_sub6

    @property
    def tokens_out(self) -> int:
        return self.bs_mmwave * self.ue_mmwave

    @property
    def features_out(self) -> int:
        return 2 * self.k_mmwave

    @classmethod
    def for_system(cls, system: SystemConfig, **kwargs) -> "ModelConfig":
        return cls(bs_sub6=system.sub6.bs_antennas, ue_sub6=system.sub6.ue_antennas,
                   k_sub6=system.sub6.subcarriers, bs_mmwave=system.mmwave.bs_antennas,
                   ue_mmwave=system.mmwave.ue_antennas, k_mmwave=system.mmwave.subcarriers,
                   **kwargs)

    def matches(self, system: SystemConfig) -> bool:
        return (self.bs_sub6, self.ue_sub6, self.k_sub6, self.bs_mmwave, self.ue_mmwave,
                self.k_mmwave) == (system.sub6.bs_antennas, system.sub6.ue_antennas,
                                   system.sub6.subcarriers, system.mmwave.bs_antennas,
                                   system.mmwave.ue_antennas, system.mmwave.subcarriers)


# -- layout conversion -----------------------------------------------------------


def csi_to_real(h: np.ndarray, ue_antennas: int = 1) -> np.ndarray:
    """``(..., M_B, M_U*K)`` complex -> ``(..., M_B*M_U, 2K)`` real.

    Token ``b*M_U + u`` holds ``[Re(H[b, u, :]) | Im(H[b, u, :])]``.
    """
    h = np.asarray(h)
    *lead, m_b, cols = h.shape
    k = cols // ue_antennas
    tokens = h.reshape(*lead, m_b * ue_antennas, k)
    return np.concatenate([tokens.real, tokens.imag], axis=-1)


def real_to_csi(x: np.ndarray, bs_antennas: int, ue_antennas: int) -> np.ndarray:
    """Inverse of :func:`csi_to_real`."""
    x = np.asarray(x)
    *lead, tokens, feats = x.shape
    if tokens != bs_antennas * ue_antennas:
        raise ShapeError(f"{tokens} tokens do not match {bs_antennas}x{ue_antennas} antennas")
    k = feats // 2
    h = x[..., :k] + 1j * x[..., k:]
    return h.reshape(*lead, bs_antennas, ue_antennas * k)


def delay_domain_features(x_f: np.ndarray) -> np.ndarray:
    """Unitary inverse DFT of each token's subcarrier vector, in real form."""
    k = x_f.shape[-1] // 2
    z = np.fft.ifft(x_f[..., :k] + 1j * x_f[..., k:], axis=-1, norm="ortho")
    return np.concatenate([z.real, z.imag], axis=-1)


# -- statistics ------------------------------------------------------------------


@dataclass
class NormStats:
    """Per-feature statistics of the real-form training inputs and targets."""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    MIN_STD = 1e-8

    @classmethod
    def fit(cls, x_real: np.ndarray, y_real: np.ndarray) -> "NormStats":
        """Statistics over all samples and tokens of ``(N, M, F)`` arrays."""
        xf = x_real.reshape(-1, x_real.shape[-1])
        yf = y_real.reshape(-1, y_real.shape[-1])
        return cls(xf.mean(0), np.maximum(xf.std(0), cls.MIN_STD),
                   yf.mean(0), np.maximum(yf.std(0), cls.MIN_STD))

    @classmethod
    def identity(cls, features_in: int, features_out: int) -> "NormStats":
        return cls(np.zeros(features_in), np.ones(features_in),
                   np.zeros(features_out), np.ones(features_out))

    def normalize_input(self, x):
        return (x - self.input_mean) / self.input_std

    def denormalize_target(self, y):
        return y * self.target_std + self.target_mean

    def normalize_target(self, y):
        return (y - self.target_mean) / self.target_std

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("input_mean", "input_std", "target_mean", "target_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class GateDecision:
    """Routing record of one MoE layer.

    ``logits``, ``weights`` and ``mask`` have shape ``(..., T, n_experts)``;
    ``mean_gate`` (mean of ``weights``) and ``route_fraction`` (mean of
    ``mask``) average over the token axis, so for a batch they hold one row
    per sample.
    """

    logits: Tensor
    mask: np.ndarray
    weights: Tensor
    mean_gate: Tensor
    route_fraction: np.ndarray


# -- layers ----------------------------------------------------------------------


class Module:
    """Minimal parameter container; parameters are ``Tensor`` attributes
    with ``requires_grad`` set, found recursively through sub-modules and lists."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, d_in, (d_in, d_out))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class FeedForward(Module):
    """``relu(x W1 + b1) W2 + b2``."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention over tokens with ``n_heads`` heads of width
    ``d_model / n_heads``; heads are concatenated and mixed by ``w_o``."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.w_q = _uniform(rng, d_model, (d_model, d_model))
        self.w_k = _uniform(rng, d_model, (d_model, d_model))
        self.w_v = _uniform(rng, d_model, (d_model, d_model))
        self.w_o = _uniform(rng, d_model, (d_model, d_model))
        self.last_attention: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        return x.reshape(*lead, t, self.n_heads, d // self.n_heads).permute(
            *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)

    def forward(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        dk = d // self.n_heads
        q, k, v = (self._heads(x @ w) for w in (self.w_q, self.w_k, self.w_v))
        attn = softmax_rows((q @ k.T) * (1.0 / np.sqrt(dk)))
        self.last_attention = attn.data
        o = attn @ v  # (..., H, T, dk)
        n = len(lead)
        o = o.permute(*range(n), n + 1, n, n + 2).reshape(*lead, t, d)
        return o @ self.w_o


class MoELayer(Module):
    """Top-K gated mixture of feed-forward experts.

    Gate logits ``G = gate_input W_G + b_G``; each token keeps its ``top_k``
    largest logits (ties go to the lower expert index), the kept logits are
    softmax-normalized and the rest get weight exactly zero. Experts run only
    on the tokens routed to them; ``expert_evals`` counts those evaluations.
    """

    def __init__(self, d_model: int, d_hid: int, n_experts: int, top_k: int,
                 rng: np.random.Generator, d_gate: int | None = None):
        self.top_k = top_k
        self.n_experts = n_experts
        self.gate = Linear(d_gate or d_model, n_experts, rng)
        d_e = d_hid // n_experts
        self.experts = [FeedForward(d_model, d_e, d_model, rng) for _ in range(n_experts)]
        self.expert_evals = 0

    def route(self, gate_input: Tensor) -> tuple[Tensor, np.ndarray, Tensor]:
        logits = self.gate(gate_input)
        order = np.argsort(-logits.data, axis=-1, kind="stable")[..., : self.top_k]
        mask = np.zeros(logits.shape, dtype=bool)
        np.put_along_axis(mask, order, True, axis=-1)
        return logits, mask, softmax_rows(logits, mask)

    def forward(self, x: Tensor, gate_input: Tensor) -> tuple[Tensor, GateDecision]:
        if x.shape[:-1] != gate_input.shape[:-1]:
            raise ShapeError(f"gate input {gate_input.shape} does not match tokens {x.shape}")
        logits, mask, weights = self.route(gate_input)
        d = x.shape[-1]
        xf = x.reshape(-1, d)
        n = xf.shape[0]
        wf = weights.reshape(-1, self.n_experts)
        mf = mask.reshape(-1, self.n_experts)
        y = None
        for j, expert in enumerate(self.experts):
            idx = np.flatnonzero(mf[:, j])
            if idx.size == 0:
                continue
            self.expert_evals += idx.size
            out = expert(take_rows(xf, idx)) * wf[idx, j].reshape(-1, 1)
            part = index_add(n, idx, out)
            y = part if y is None else y + part
        y = y.reshape(x.shape)
        decision = GateDecision(logits=logits, mask=mask, weights=weights,
                                mean_gate=weights.mean(axis=-2),
                                route_fraction=mask.mean(axis=-2))
        return y, decision


class TemporalEncoder(Module):
    """Two feed-forward maps on the delay-domain CSI: first across tokens
    (on the transpose), then across features down to ``d_re``."""

    def __init__(self, tokens: int, features: int, d_re: int, rng: np.random.Generator):
        self.token_ffn = FeedForward(tokens, 2 * tokens, tokens, rng)
        self.feature_ffn = FeedForward(features, 2 * d_re, d_re, rng)
        self.tokens, self.features = tokens, features

    def forward(self, x_t: Tensor) -> Tensor:
        if x_t.shape[-2:] != (self.tokens, self.features):
            raise ShapeError(f"temporal encoder expects (..., {self.tokens}, {self.features}), "
                             f"got {x_t.shape}")
        return self.feature_ffn(self.token_ffn(x_t.T).T)


class FusionBlock(Module):
    """Projection + positional embedding, self-attention, then an MoE layer
    gated by the temporal latent (or by its own input when ``gate_self``)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.w_re = _uniform(rng, cfg.features_in, (cfg.features_in, cfg.d_re))
        self.pos = Tensor(rng.standard_normal((cfg.tokens_in, cfg.d_re)), requires_grad=True)
        self.mhsa = MultiHeadSelfAttention(cfg.d_re, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_re, cfg.ln_eps)
        self.moe = MoELayer(cfg.d_re, cfg.d_hid, cfg.n_experts, cfg.top_k, rng)
        self.norm2 = LayerNorm(cfg.d_re, cfg.ln_eps)

    def embed(self, x_f: Tensor) -> Tensor:
        return x_f @ self.w_re + self.pos

    def forward(self, x_f: Tensor, gate_latent: Tensor | None) -> tuple[Tensor, GateDecision]:
        x = self.embed(x_f)
        u = self.norm1(x + self.mhsa(x))
        y, gate = self.moe(u, u if gate_latent is None else gate_latent)
        return self.norm2(u + y), gate


class InteractionBlock(Module):
    """Pre-norm block: ``u = x + mhsa(norm(x))``; ``x' = u + moe(norm(u))`` with
    the MoE gated by its own input."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.d_re, cfg.ln_eps)
        self.mhsa = MultiHeadSelfAttention(cfg.d_re, cfg.n_heads, rng)
        self.norm2 = LayerNorm(cfg.d_re, cfg.ln_eps)
        self.moe = MoELayer(cfg.d_re, cfg.d_hid, cfg.n_experts, cfg.top_k, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, GateDecision]:
        u = x + self.mhsa(self.norm1(x))
        v = self.norm2(u)
        y, gate = self.moe(v, v)
        return u + y, gate


class OutputHead(Module):
    """Linear read-out from the latent ``(M^s, d_re)`` to ``(M^m, 2K^m)``.

    ``"expand"`` (default): every latent token emits ``r = ceil(M^m / M^s)``
    output rows through ``feature_map`` (``d_re -> r * 2K^m``), then a
    square-or-tall ``token_map`` (``r M^s -> M^m``) mixes them. The output
    column space therefore varies per sample.

    ``"factorized"``: ``token_map^T @ z @ feature_map`` with
    ``token_map: (M^s, M^m)`` and ``feature_map: (d_re, 2K^m)``. Its outputs
    lie in a fixed ``M^s``-dimensional token subspace for every sample.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.mode = cfg.head
        m_in, m_out, f_out = cfg.tokens_in, cfg.tokens_out, cfg.features_out
        if self.mode == "factorized":
            self.token_map = _uniform(rng, m_in, (m_in, m_out))
            self.feature_map = _uniform(rng, cfg.d_re, (cfg.d_re, f_out))
        else:
            self.ratio = -(-m_out // m_in)
            rows = self.ratio * m_in
            self.feature_map = _uniform(rng, cfg.d_re, (cfg.d_re, self.ratio * f_out))
            init = np.eye(rows, m_out) + rng.uniform(-1, 1, (rows, m_out)) / np.sqrt(rows) * 0.1
            self.token_map = Tensor(init, requires_grad=True)
        self.f_out = f_out

    def forward(self, z: Tensor) -> Tensor:
        if self.mode == "factorized":
            return (self.token_map.T @ z) @ self.feature_map
        *lead, m, _ = z.shape
        y = (z @ self.feature_map).reshape(*lead, m * self.ratio, self.f_out)
        return self.token_map.T @ y


class MdfceModel(Module):
    """The full extrapolator. ``norm`` must be set (see :meth:`NormStats.fit`)
    before the model sees real data; it defaults to the identity."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, norm: NormStats | None = None):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.tfem = (TemporalEncoder(cfg.tokens_in, cfg.features_in, cfg.d_re, rng)
                     if cfg.use_tfem else None)
        self.mdfm = FusionBlock(cfg, rng)
        self.dfim = [InteractionBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.head = OutputHead(cfg, rng)
        self.norm = norm or NormStats.identity(cfg.features_in, cfg.features_out)

    @property
    def moe_layers(self) -> list[MoELayer]:
        return [self.mdfm.moe] + [b.moe for b in self.dfim]

    def expert_evals(self) -> int:
        return sum(m.expert_evals for m in self.moe_layers)

    def reset_counters(self) -> None:
        for m in self.moe_layers:
            m.expert_evals = 0

    def encode(self, x_norm: np.ndarray) -> tuple[Tensor, list[GateDecision]]:
        """Latent ``(..., M, d_re)`` from normalized real input."""
        x_f = Tensor(x_norm)
        latent = self.tfem(Tensor(delay_domain_features(x_norm))) if self.tfem else None
        z, gate = self.mdfm(x_f, latent)
        gates = [gate]
        for block in self.dfim:
            z, gate = block(z)
            gates.append(gate)
        return z, gates

    def forward_real(self, x_real: np.ndarray) -> tuple[Tensor, list[GateDecision]]:
        """Raw real-form sub-6 input ``(..., M^s, 2K^s)`` -> denormalized
        real-form mmWave estimate ``(..., M^m, 2K^m)`` and the gate records."""
        cfg = self.config
        if x_real.shape[-2:] != (cfg.tokens_in, cfg.features_in):
            raise ShapeError(f"expected input (..., {cfg.tokens_in}, {cfg.features_in}), "
                             f"got {x_real.shape}")
        z, gates = self.encode(self.norm.normalize_input(x_real))
        out = self.head(z) * self.norm.target_std + self.norm.target_mean
        return out, gates

    def forward(self, h_sub6: np.ndarray) -> np.ndarray:
        return mdfce_forward(h_sub6, self)


def mdfce_forward(h_sub6: np.ndarray, model: MdfceModel) -> np.ndarray:
    """Extrapolate complex sub-6 CSI ``(..., M_B^s, M_U^s K^s)`` to mmWave CSI
    ``(..., M_B^m, M_U^m K^m)``."""
    cfg = model.config
    expected = (cfg.bs_sub6, cfg.ue_sub6 * cfg.k_sub6)
    if np.shape(h_sub6)[-2:] != expected:
        raise ShapeError(f"sub-6 CSI shape {np.shape(h_sub6)[-2:]} does not match the "
                         f"model's expected {expected}")
    with no_grad():
        out, _ = model.forward_real(csi_to_real(h_sub6, cfg.ue_sub6))
    return real_to_csi(out.data, cfg.bs_mmwave, cfg.ue_mmwave)


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"MDFCECKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def system_fingerprint(system: SystemConfig | None) -> str:
    if system is None:
        return "none"
    blob = json.dumps(system.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(model: MdfceModel, path, system: SystemConfig | None = None,
                    extra: dict | None = None) -> None:
    """Atomically write parameters plus a JSON manifest of all configs."""
    param_manifest, payload = serialize_params(model.named_parameters())
    manifest = {
        "version": CHECKPOINT_VERSION,
        "variant": "full" if model.config.use_tfem else "no-tfem",
        "model": dataclasses.asdict(model.config),
        "system": system.to_dict() if system is not None else None,
        "system_fingerprint": system_fingerprint(system),
        "norm": model.norm.to_dict(),
        "params": param_manifest,
        "extra": extra or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(payload)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[MdfceModel, dict]:
    """Returns the model and the decoded manifest.

    Raises:
        CheckpointError: bad magic, version mismatch or inconsistent parameters.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<HI", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, "
                              f"this build reads version {CHECKPOINT_VERSION}")
    start = 8 + struct.calcsize("<HI")
    manifest = json.loads(raw[start:start + mlen])
    cfg = ModelConfig(**manifest["model"])
    model = MdfceModel(cfg, norm=NormStats.from_dict(manifest["norm"]))
    values = deserialize_params(manifest["params"], raw[start + mlen:])
    params = model.named_parameters()
    if set(values) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the model layout")
    for name, p in params.items():
        if values[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {values[name].shape}, "
                                  f"expected {p.shape}")
        p.data = values[name].copy()
    return model, manifest
