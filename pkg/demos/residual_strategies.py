"""How the residual connection is quantized matters at low bitwidths.

Train a small residual network, calibrate it once, then compare three ways
of handling the skip/residual path while sweeping activation bits.
"""

from quantbench.data import make_pattern_images, split_holdout
from quantbench.network import Mode, ResidualStrategy, build_toy_resnet
from quantbench.pipeline import calibrate_model, evaluate, train_fp_baseline

data = make_pattern_images(4, 300, seed=0, noise=0.4)
train, hold = split_holdout(data, seed=0)
model = build_toy_resnet(8, 2, 4, seed=0)
train_fp_baseline(model, train, epochs=8, lr=0.01, seed=0, holdout=hold)
print(f"float accuracy {model.baseline_accuracy:.3f}")

calibrate_model(model, train.inputs, "percentile", max_samples=320)

print("\nact bits  " + "  ".join(f"{s.value:>18}" for s in ResidualStrategy))
for bits in (2, 3, 4, 8):
    model.set_bits(act_bits=bits)
    accs = []
    for strategy in ResidualStrategy:
        model.residual_strategy = strategy
        accs.append(evaluate(model, hold, Mode.QUANTIZED))
    print(f"{bits:8d}  " + "  ".join(f"{a:18.3f}" for a in accs))

# a high precision stream kept beside the quantized one is what helps at 2-3 bits
