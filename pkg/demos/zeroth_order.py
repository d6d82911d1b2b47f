"""How good is a single two-point MeZO probe compared with the exact gradient?

Run: python3 demos/zeroth_order.py
"""

import numpy as np

from mesp import model as M
from mesp.grad_quality import layer_report
from mesp.mezo import MezoConfig
from mesp.trainer import Corpus, TrainConfig, sample_batch, train

cfg = M.ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ff=256, vocab=257, lora_rank=8, max_seq=64)
corpus = Corpus.bundled()
params = M.init_params(cfg, 0)
# a few exact steps first so B is no longer zero and every layer has a real gradient
train(TrainConfig("mesp", steps=20, lr=1e-4, eval_interval=20), corpus, params=params)
batch = sample_batch(corpus, 64, 1, np.random.default_rng([0, 3]))

for probes in (1, 16):
    rep = layer_report(params, batch, MezoConfig(probes=probes, seed=0), [0, 1, 2, 3])
    print(f"\n{probes} probe(s) per estimate")
    print(" layer   cosine   sign agree   rel. error")
    for r in rep.rows + [rep.average]:
        print(f"{str(r.layer):>6} {r.cosine:8.4f} {100 * r.sign_agreement:10.1f}% {r.relative_error:12.1f}")

print("\nEach probe projects the exact gradient on one random direction over all adapter entries,")
print("so the expected cosine is only about sqrt(probes / trainable entries), a few hundredths at best here.")
