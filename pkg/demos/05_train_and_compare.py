"""
Training a small extrapolator
=============================

A scaled-down model learns to map sub-6 CSI to mmWave CSI. It trains on
noisy sub-6 pilot estimates over a range of SNRs. We then compare its NMSE
with the LS baseline at a quarter pilot density.
Use ``mdfce.experiment.run_desk_experiment`` for the full desk-scale run.
"""

import math
from fractions import Fraction

from mdfce.channel import BandConfig, SystemConfig, generate_dataset
from mdfce.evaluation import evaluate, flops_per_sample
from mdfce.model import MdfceModel, ModelConfig
from mdfce.pilots import LSBaseline, PilotConfig
from mdfce.training import TrainConfig, nmse_db, train

system = SystemConfig(sub6=BandConfig(4, 2, 32, 3.5e9, 40e6, 15),
                      mmwave=BandConfig(8, 2, 64, 28e9, 123e6, 5))
train_set = generate_dataset(system, 2048, seed=0)
val_set = generate_dataset(system, 256, seed=1_000_000)

cfg = ModelConfig.for_system(system, d_re=32, d_hid=64, n_experts=4, top_k=2, n_heads=4,
                             n_blocks=1)
model = MdfceModel(cfg, seed=0)
print("parameters:", sum(p.data.size for p in model.parameters()),
      "| FLOPs per sample:", flops_per_sample(cfg).total)


def show(rec):
    print(f"epoch {rec['epoch']:2d}  nmse {nmse_db(rec['nmse_loss']):6.2f} dB  "
          f"aux {rec['aux_loss']:.3f}")


tcfg = TrainConfig(target_lr=1e-3, epochs=12, batch_size=32, snr_db_train=(5.0, 30.0),
                   sub6_pilot_density=Fraction(1, 4))
train(model, train_set, tcfg, on_epoch=show)

# the model sees sub-6 CSI estimated from pilots at density 1/4
ours = evaluate(model, val_set, [10.0, math.inf], sub6_pilot_density=Fraction(1, 4)).rows
ls = evaluate(LSBaseline(PilotConfig("mmwave", Fraction(1, 4), 2, 64)), val_set,
              [10.0, math.inf]).rows
for a, b in zip(ours, ls):
    print(f"SNR {a.snr_db:>5}: MDFCE {a.nmse_db:6.2f} dB ({a.pilot_overhead} pilots)   "
          f"{b.method} {b.nmse_db:6.2f} dB ({b.pilot_overhead} pilots)")
