"""Walk through one training step of each strategy and show where the bytes go.

Run: python3 demos/memory_tour.py
"""

import numpy as np

from mesp import model as M
from mesp.bench import SHORT
from mesp.ledger import MemoryLedger, block_terms, modeled_complexity, reduction_report
from mesp.mezo import MezoConfig, mezo_step
from mesp.strategies import KINDS, STEP_FNS, register_params

cfg = M.ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ff=256, vocab=257, lora_rank=8, max_seq=128,
                    dtype="float32")
params = M.init_params(cfg, 0)
rng = np.random.default_rng(0)
batch = (rng.integers(0, 256, (1, 128)), rng.integers(0, 256, (1, 128)))

bt = block_terms(cfg, 1, 128)
print("per-block sizes in elements:")
print(f"  checkpoint O = {bt['O']}, everything a block creates I = {bt['I']}, one LoRA h set = {7 * 128 * 8}")
print()

peaks = {}
for kind in KINDS + ("mezo",):
    p = params.copy()
    led = MemoryLedger()
    register_params(led, p)
    if kind == "mezo":
        mezo_step(batch, p, MezoConfig(seed=0), 0, led)
    else:
        STEP_FNS[kind](batch, p, None, led)
    rep = led.report()
    peaks[SHORT[kind]] = rep.peak_bytes
    model = modeled_complexity(cfg, kind, 1, 128)
    print(f"{SHORT[kind]:>9}: peak {rep.peak_bytes / 2**20:7.3f} MiB, activations {rep.activation_peak / 2**20:6.3f} MiB,"
          f" closed form {model.peak_bytes / 2**20:7.3f} MiB")

print()
print(f"mesp vs reference: {reduction_report(peaks['mesp'], peaks['reference'])}% less")
print(f"mesp vs mebp:      {reduction_report(peaks['mesp'], peaks['mebp'])}% less"
      f" ({peaks['mebp'] - peaks['mesp']} bytes, all of it retained h)")
print("mezo never builds a backward working set, so on a model this small it sits lowest of all.")
