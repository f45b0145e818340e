"""
What each effort knob does to one convolution
=============================================

A single 3x3 conv over a smooth, partly dark image. We switch the knobs on one
at a time and look at ops spent, ops saved and the output error.
"""
import numpy as np

from dyve.counters import LayerTally
from dyve.engine import dyve_conv_forward
from dyve.knobs import LayerKnobs
from dyve.model import Conv, LayerParams
from dyve.reference import conv_forward_exact

rng = np.random.default_rng(0)
spec = Conv(8, 8, 3, 1, 1)
params = LayerParams.build(rng.normal(0, 0.2, (8, 8, 3, 3)).astype(np.float32),
                           rng.normal(-0.1, 0.05, 8).astype(np.float32))

# a smooth ramp in the top half, flat in the bottom half
yy, xx = np.mgrid[0:24, 0:24]
img = np.where(yy < 12, np.sin(xx / 3.0) * 0.5 + 0.5, 0.2)
x = np.stack([img * (1 + 0.1 * c) for c in range(8)]).astype(np.float32)

base = LayerTally()
exact = conv_forward_exact(x, spec, params, base)
print("baseline ops:", base.spent_ops)

settings = {
    "SPET, l=0": LayerKnobs(spet_enabled=True, spet_l_thresh=0.0),
    "SDSS, sp=2": LayerKnobs(sdss_enabled=True, sp=2, max_act_thresh=1.0, del_act_thresh=0.05),
    "SFMA": LayerKnobs(sfma_enabled=True, wsig_thresh=1.2, fea_var_thresh=0.01),
}
settings["all three"] = LayerKnobs(spet_enabled=True, spet_l_thresh=0.0,
                                   sdss_enabled=True, sp=2, max_act_thresh=1.0, del_act_thresh=0.05,
                                   sfma_enabled=True, wsig_thresh=1.2, fea_var_thresh=0.01)

for name, cfg in settings.items():
    tally = LayerTally()
    out = dyve_conv_forward(x, spec, params, cfg, tally)
    err = np.abs(np.maximum(out, 0) - np.maximum(exact, 0)).max()
    print(f"{name:>10}: spent {tally.spent_ops:7d}  overhead {tally.overhead_ops:6d}  "
          f"saved {tally.saved}  max post-ReLU error {err:.4f}")
