"""
The command-line pipeline
=========================

``mdfce generate``, ``mdfce train`` and ``mdfce eval`` drive the same
library calls from an INI file. Here we run them in-process on a tiny
system inside a temporary directory.
"""

import tempfile
from pathlib import Path

from mdfce.channel import BandConfig, SystemConfig
from mdfce.cli import main
from mdfce.config import RunConfig
from mdfce.model import ModelConfig
from mdfce.training import TrainConfig

system = SystemConfig(sub6=BandConfig(2, 2, 8, 3.5e9, 40e6, 15),
                      mmwave=BandConfig(4, 2, 16, 28e9, 123e6, 5))
run = RunConfig(system=system,
                model=ModelConfig.for_system(system, d_re=8, d_hid=16, n_experts=2, top_k=1,
                                             n_heads=2, n_blocks=1),
                train=TrainConfig(target_lr=1e-3, epochs=3, batch_size=16),
                train_count=128, val_count=64)

with tempfile.TemporaryDirectory() as tmp:
    ini = Path(tmp) / "run.ini"
    run.save(ini)
    print(ini.read_text().split("[model]")[0])
    common = ["--config", str(ini), "--out", tmp, "--deterministic"]
    main(["generate", *common])
    main(["generate", *common, "--split", "val"])
    main(["train", *common])
    main(["eval", *common, "--checkpoint", str(Path(tmp) / "checkpoint-full.ckpt"),
          "--snr", "0,10,20"])
    print(sorted(p.name for p in Path(tmp).iterdir()))
