"""Fake-quantization benchmark for small numpy networks.

Uniform quantizers with calibration observers, a define-by-run autodiff
core, toy residual networks, learned mixed precision and quantization cards.
"""

from .data import LabeledSet, load_idx, make_blobs, make_pattern_images, make_spirals, split_holdout
from .mpq import (AnyInteger, BitSet, BitwidthAllocation, MPQConfig, constraint_report, learn_bitwidths,
                  max_featuremap_allocation, prepare_mpq)
from .network import (FirstLastPolicy, Mode, ModelGraph, PoolStrategy, ResidualStrategy, build_toy_mlp,
                      build_toy_resnet, load_model, save_model)
from .pipeline import calibrate_model, evaluate, pseudolabel, train_fp_baseline
from .quantcard import QuantizationCard, build_card, parse_card, render_card
from .quantize import PerChannel, PerTensor, Quantizer, QuantizerSpec, QuantizerState, fake_quantize
from .recipes import ExperimentSpec, ResultTable, run_observation

__version__ = "0.1.0"
