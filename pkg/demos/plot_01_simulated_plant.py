"""
A simulated three-tank plant under attack
=========================================

Generates the synthetic water-treatment series, prints the attack plan and
shows how the normalised channels look around the first attack.
"""
import numpy as np

from tfdpm.dataset import simulate_raw, synth_cps

train_raw, test_raw, labels, attacks = simulate_raw("easy", 5000, 2000, seed=1)
for a in attacks:
    print(f"{a.kind:6s} on {a.target:6s} steps {a.start}-{a.stop}  magnitude {a.magnitude:+.2f}")
print("anomaly ratio", labels.mean())

# the same data, normalised with training statistics and one-hot pumps
train, test = synth_cps("easy", 5000, 2000, seed=1)
print(train.D, "channels:", test.columns)

first = attacks[0]
sl = slice(first.start - 5, first.start + 5)
print(np.round(test.values[sl, :4], 3))
print(test.labels[sl])
