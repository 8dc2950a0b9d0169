"""Learn per-layer bitwidths under an average-bit budget, then write a card.

A 4-layer MLP on Gaussian blobs starts at 8 bits everywhere.  Gradient
descent on continuous bitwidths (rounded on the forward pass) pushes the
weighted average down to the 4-bit targets while keeping accuracy.
"""

from quantbench.data import make_blobs, split_holdout
from quantbench.mpq import MPQConfig, constraint_report, learn_bitwidths, prepare_mpq
from quantbench.network import Mode, build_toy_mlp
from quantbench.pipeline import calibrate_model, evaluate, train_fp_baseline
from quantbench.quantcard import build_card, render_card

data = make_blobs(4, 8, 400, seed=0, separation=5.0)
train, hold = split_holdout(data, seed=0)
model = build_toy_mlp(8, 32, 4, 4, seed=0)
train_fp_baseline(model, train, epochs=10, lr=0.01, seed=0, holdout=hold)
print(f"float accuracy {model.baseline_accuracy:.3f}")

cfg = MPQConfig(target_w=4.0, target_a=4.0)
calibrate_model(model, train.inputs, max_samples=cfg.samples)
prepare_mpq(model, cfg)
result = learn_bitwidths(model, train, cfg, seed=0)
acc = evaluate(model, hold, Mode.QUANTIZED)

alloc = result.allocation
print(f"budget met: {result.met} (best step {result.best_step})")
print("weight bits    ", alloc.bits_w)
print("activation bits", alloc.bits_a)
w, a = alloc.achieved
print(f"average bits: weights {w:.2f}, activations {a:.2f}; quantized accuracy {acc:.3f}")

report = constraint_report(alloc, model)
for key, value in report.table_row(acc).items():
    print(f"  {key:30s} {value:.4f}")

card = build_card(model, {"mpq": cfg, "examples": min(cfg.samples, len(train)), "fp_train_examples": len(train)},
                  {"quantized_accuracy": acc})
print()
print(render_card(card, "markdown"))
