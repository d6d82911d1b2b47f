"""Three strategies, one set of gradients.

The strategies differ only in what they keep alive, so a short training run
produces identical loss curves under each of them.

Run: python3 demos/same_gradients.py
"""

from mesp import model as M
from mesp.gradcheck import run_suite, strategy_equivalence
from mesp.trainer import Corpus, TrainConfig, train

print("finite-difference check, worst relative error per kernel:")
for name, err in run_suite(instances=5, seed=0).items():
    print(f"  {name:>13}: {err:.2e}")

cfg = M.ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=128, vocab=257, lora_rank=4, max_seq=32)
diffs = strategy_equivalence(cfg, seed=0, seq=32)
print(f"\nmax relative gradient difference vs store-all: mebp {diffs['mebp']}, mesp {diffs['mesp']}")

corpus = Corpus.bundled()
curves = {k: train(TrainConfig(k, steps=30, seq=32, lr=1e-2, eval_interval=10), corpus, cfg)
          for k in ("reference", "mebp", "mesp")}
print("\nstep  " + "  ".join(f"{k:>10}" for k in curves))
for i in range(0, 30, 5):
    print(f"{i + 1:>4}  " + "  ".join(f"{c.step_losses[i]:10.6f}" for c in curves.values()))
same = curves["reference"].step_losses == curves["mesp"].step_losses == curves["mebp"].step_losses
print(f"\nall 30 step losses bit-identical: {same}")
