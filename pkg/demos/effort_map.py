"""
Where does the network spend its effort?
========================================

Knobs skip work on flat background and keep it near edges and texture. An
effort map shows this per neuron: spent ops over the knob-free ops. We print
one as ASCII and also write it as a PGM (darker = more work).
"""
import sys

import numpy as np

from dyve.data import generate_synthetic
from dyve.engine import dyve_forward
from dyve.knobs import KnobConfig, LayerKnobs
from dyve.metrics import effort_maps, export_effort_map
from dyve.model import Conv, FullyConnected, MaxPool, ReLU, Softmax, build_network
from dyve.trainer import train

shape = (3, 16, 16)
layers = [Conv(3, 8, 5, 1, 2), ReLU(), MaxPool(2),
          Conv(8, 16, 3, 1, 1), ReLU(), MaxPool(2),
          FullyConnected(16 * 4 * 4, 3), Softmax()]
data = generate_synthetic(3, 80, shape, seed=0, soften=1)
net = train(build_network(layers, shape, 3, seed=1), data, epochs=10, lr=0.03, seed=1)

cfg = KnobConfig.inert(len(layers))
cfg[0] = LayerKnobs(spet_enabled=True, spet_l_thresh=0.05,
                    sdss_enabled=True, sp=2, max_act_thresh=0.6, del_act_thresh=0.08,
                    sfma_enabled=True, wsig_thresh=2.0, fea_var_thresh=0.002)

x = data.inputs[0]
maps = effort_maps(dyve_forward(net, x, cfg), 0)
mean_map = np.mean([m.grid for m in maps], axis=0)

shades = " .:-=+*#%@"
print("input (channel mean)            effort, averaged over channels")
img = x.mean(0)
img = (img - img.min()) / (np.ptp(img) or 1)
for a, b in zip(img, mean_map):
    left = "".join(shades[int(v * 9)] * 2 for v in a)
    right = "".join(shades[int(v * 9)] * 2 for v in b)
    print(left, " ", right)

out = sys.argv[1] if len(sys.argv) > 1 else "effort_layer0_ch0.pgm"
export_effort_map(maps[0], out)
print("mean effort per channel:", np.round([m.grid.mean() for m in maps], 3))
print("wrote", out)
