"""Pick one of K predicted futures per agent by its uncertainty.

Scenes contain a leader and followers that often copy the leader's
manoeuvre. The model predicts K=3 futures per agent with a scalar
uncertainty phi for each; the auxiliary loss ties phi to the displacement
error, so the lowest-phi mode should be a good guess. We compare that choice
with picking a mode at random and with the oracle best mode, and check that
phi grows with the spread of the predicted futures.

    python demos/scene_selection.py [steps]
"""
import sys

from cu_lab.harness import load_config, train

steps = sys.argv[1] if len(sys.argv) > 1 else "3000"
cfg = load_config("scenes", seed=0).override("optim", "steps", steps)
_, record = train(cfg, log=print)
test = record.reports[1].values

print(f"FDE of the lowest-phi mode   {test['fde1']:.3f}")
print(f"FDE of a random mode         {test['fde']:.3f}")
print(f"FDE of the best mode (oracle) {test['fdek']:.3f}")
print(f"mean |phi - DE| of the chosen mode {test['phi_de_gap']:.3f}")
print(f"Spearman(stochasticity, phi) {test['spearman']:.3f}")
