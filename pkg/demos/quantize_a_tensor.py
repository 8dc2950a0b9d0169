"""Why asymmetric ranges help on ReLU outputs.

A symmetric quantizer spends half its grid on negative values that a ReLU
never produces.  We quantize the same nonnegative tensor both ways and
compare the error, then compute how many bits the asymmetric range saves.
"""

import numpy as np

from quantbench import numcore as nc
from quantbench.quantize import QuantizerSpec, bits_saved_asymmetric, fake_quantize, minmax_state, quantization_mse

rng = np.random.default_rng(0)
acts = np.maximum(rng.normal(size=10_000), 0.0)

print("bits  asymmetric MSE  symmetric MSE")
for bits in range(2, 9):
    asym, sym = QuantizerSpec(bits, symmetric=False), QuantizerSpec(bits, symmetric=True)
    a = quantization_mse(acts, asym, minmax_state(acts, asym))
    s = quantization_mse(acts, sym, minmax_state(acts, sym))
    print(f"{bits:4d}  {a:14.3e}  {s:13.3e}")

# look at a few values on a coarse grid
spec = QuantizerSpec(3)
state = minmax_state(acts, spec)
q = fake_quantize(nc.const(acts[:6]), state, spec).value
print("\n3-bit asymmetric grid step", float(state.delta))
print("values   ", np.round(acts[:6], 3))
print("quantized", np.round(q, 3))

# the saving is the log ratio of the two ranges
print("\nbits saved for a range of [-1, 0.5]:", round(bits_saved_asymmetric(-1.0, 0.5), 4))
print("bits saved for a ReLU range [0, 3]:  ", round(bits_saved_asymmetric(0.0, 3.0), 4))
