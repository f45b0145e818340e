"""
Train, tune and benchmark a tiny network end to end
===================================================

Everything here is the desk-scale pipeline shrunk so it runs in seconds:
a few hundred synthetic images, a small CNN, a generous accuracy budget.
The full-size run is ``dyve train-fixture`` / ``dyve tune`` / ``dyve bench``.
"""
import numpy as np

from dyve.data import generate_synthetic, holdout_split
from dyve.metrics import benchmark, saturation_profile
from dyve.model import Conv, FullyConnected, MaxPool, ReLU, Softmax, build_network
from dyve.trainer import evaluate, train
from dyve.tuner import TuningSet, tune_network

shape = (3, 16, 16)
train_set = generate_synthetic(4, 150, shape, seed=0, soften=1)
pool = holdout_split(generate_synthetic(4, 100, shape, seed=1, soften=1), 0.25, seed=2)

layers = [Conv(3, 8, 5, 1, 2), ReLU(), MaxPool(2),
          Conv(8, 16, 3, 1, 1), ReLU(), MaxPool(2),
          FullyConnected(16 * 4 * 4, 4), Softmax()]
net = train(build_network(layers, shape, 4, seed=0), train_set, epochs=20, lr=0.03, seed=0)
print("heldout accuracy:", evaluate(net, pool.split("heldout")))

# how many conv outputs are zero after the ReLU: the room SPET has to work with
print("saturation:", {i: round(f, 3) for i, f in saturation_profile(net, pool.split("tune").inputs).items()})

cfg, rep = tune_network(net, TuningSet.from_dataset(pool.split("tune")), budget_pp=2.0, steps=32)
for i in sorted(rep.layers):
    print(f"layer {i}:", {k: round(v, 4) if isinstance(v, float) else v for k, v in cfg[i].to_json().items()})

held = pool.split("heldout")
b = benchmark(net, held.inputs, held.labels, cfg)
print(f"op reduction {b['reduction_ratio']:.2f}x, accuracy {b['accuracy_baseline']:.3f} -> {b['accuracy_dyve']:.3f}")
print("saved by knob:", b["per_knob"])
