"""
Top-K expert routing and the balance loss
=========================================

The mixture-of-experts layer sends each token to K of N_e experts. The
auxiliary loss N_e * sum(m_j p_j) equals K for balanced routing and N_e
when every token lands on the same K experts.
"""

import numpy as np

from mdfce.model import MoELayer
from mdfce.tensor import Tensor
from mdfce.training import aux_loss

rng = np.random.default_rng(0)
moe = MoELayer(d_model=16, d_hid=64, n_experts=8, top_k=2, rng=rng)
tokens = Tensor(rng.standard_normal((10_000, 16)))

out, gate = moe(tokens, tokens)
w = gate.weights.data
print("nonzeros per row:", np.unique((w != 0).sum(1)))
print("row sums within 1e-12 of 1:", bool(np.max(np.abs(w.sum(1) - 1)) < 1e-12))
print("route fractions p_j:", np.round(gate.route_fraction, 3))
print("expert evaluations:", moe.expert_evals, "for", len(w), "tokens")
print("aux loss at initialization:", round(aux_loss([gate]).item(), 4), "(balanced = 2)")

# force a collapse: a large bias on experts 0 and 1 wins every token
moe.gate.bias.data[:] = 0.0
moe.gate.bias.data[:2] = 50.0
_, collapsed = moe(tokens, tokens)
print("route fractions after collapse:", np.round(collapsed.route_fraction, 3))
print("aux loss after collapse:", round(aux_loss([collapsed]).item(), 4), "(N_e = 8)")
