"""
FLOPs per sample
================

Sparse routing evaluates K of N_e experts per token, so the expert layers
cost K/N_e of a dense mixture while every other layer is unchanged.
"""

from mdfce.evaluation import flops_per_sample
from mdfce.model import ModelConfig

cfg = ModelConfig()
sparse = flops_per_sample(cfg)
dense = flops_per_sample(cfg, dense_moe=True)
print(f"default config: d_re={cfg.d_re}, N_e={cfg.n_experts}, K={cfg.top_k}, "
      f"blocks={cfg.n_blocks}")
print(f"sparse total {sparse.total:,}  dense total {dense.total:,}  "
      f"saving {dense.total / sparse.total:.2f}x")

expert = sum(v for k, v in sparse.breakdown.items() if k.endswith("moe.experts"))
expert_dense = sum(v for k, v in dense.breakdown.items() if k.endswith("moe.experts"))
print(f"expert layers: {expert:,} of {expert_dense:,} ({expert / expert_dense:.2f})")

# largest contributors
for name, v in sorted(sparse.breakdown.items(), key=lambda kv: -kv[1])[:5]:
    print(f"  {name:<28}{v:>16,}")

# depth scales the encoder cost linearly
for n in (1, 3, 7):
    print(f"N_s = {n}: {flops_per_sample(ModelConfig(n_blocks=n)).total:,}")
