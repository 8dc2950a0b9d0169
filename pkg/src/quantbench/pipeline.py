"""Training, calibration, pseudolabelling and evaluation of toy models."""

from __future__ import annotations

import hashlib
import logging

import numpy as np

from . import numcore as nc
from .data import LabeledSet, stream_rng
from .errors import CalibrationError, StateError, TrainingError
from .mpq import Adam
from .network import Mode, ModelGraph

logger = logging.getLogger(__name__)

PERCENTILE = 99.99
PERCENTILE_SAMPLES = 320
MINMAX_SAMPLES = 1024


def predict_logits(model: ModelGraph, inputs, mode=Mode.FLOAT, batch_size: int = 256) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    out = []
    with nc.no_grad():
        for i in range(0, len(inputs), batch_size):
            out.append(model.forward(inputs[i:i + batch_size], mode).value)
    return np.concatenate(out)


def evaluate(model: ModelGraph, data: LabeledSet, mode=Mode.FLOAT, batch_size: int = 256) -> float:
    """Top-1 accuracy in [0, 1]."""
    pred = predict_logits(model, data.inputs, mode, batch_size).argmax(axis=1)
    return float(np.mean(pred == data.labels))


def train_fp_baseline(model: ModelGraph, data: LabeledSet, epochs: int, lr: float = 0.01, seed: int = 0,
                      *, batch_size: int = 32, holdout: LabeledSet | None = None) -> ModelGraph:
    """Floating-point Adam training on cross-entropy.

    ``baseline_accuracy`` is set to the holdout accuracy when a holdout set
    is given, otherwise to the final training accuracy.
    """
    params = list(model.parameters().values())
    model.freeze(False)
    opt = Adam(params, lr=lr)
    rng = stream_rng(seed, "batches")
    for epoch in range(epochs):
        for batch in data.batches(batch_size, rng):
            opt.zero_grad()
            loss = nc.cross_entropy(model.forward(batch.inputs, Mode.FLOAT), batch.labels)
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            nc.backward(loss)
            opt.step()
    model.baseline_accuracy = evaluate(model, holdout if holdout is not None else data)
    return model


def calibrate_model(model: ModelGraph, inputs, observer: str = "minmax", *, percentile: float = PERCENTILE,
                    max_samples: int | None = None, batch_size: int = 256) -> ModelGraph:
    """Set every quantizer range from floating-point activations on ``inputs``.

    Activations use ``observer`` ("minmax" or "percentile"); weights always
    use min/max at their spec's granularity.  At most ``max_samples`` rows of
    ``inputs`` are read.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if max_samples is not None:
        inputs = inputs[:max_samples]
    if len(inputs) == 0:
        raise CalibrationError("no calibration inputs")
    acts = model.activation_quantizers(active_only=False)
    for q in acts:
        q.begin_calibration(observer, percentile)
    for q in model.weight_quantizers():
        q.begin_calibration("minmax")

    def hook(quantizer, value):
        quantizer.observe(value)

    with nc.no_grad():
        for i in range(0, len(inputs), batch_size):
            model.forward(inputs[i:i + batch_size], Mode.FLOAT, hook=hook)
            hook = _act_only_hook(model)
    for q in acts + model.weight_quantizers():
        q.finish_calibration()
    missing = model.uncalibrated()
    if missing:
        raise StateError(f"calibration left quantizers unset: {', '.join(missing)}")
    model.calibration_info = {"observer": observer, "percentile": percentile if observer == "percentile" else None,
                              "samples": int(len(inputs))}
    return model


def _act_only_hook(model: ModelGraph):
    weights = {q.name for q in model.weight_quantizers()}

    def hook(quantizer, value):
        if quantizer.name not in weights:
            quantizer.observe(value)
    return hook


def model_hash(model: ModelGraph) -> str:
    h = hashlib.sha256()
    for name, p in model.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return h.hexdigest()[:12]


def pseudolabel(fp_model: ModelGraph, inputs, classes: int | None = None) -> LabeledSet:
    """Label ``inputs`` with the argmax of the floating-point model."""
    logits = predict_logits(fp_model, inputs, Mode.FLOAT)
    return LabeledSet(inputs, logits.argmax(axis=1), classes or logits.shape[1],
                      provenance=f"pseudolabel:{model_hash(fp_model)}")


def mpq_training_data(fp_model: ModelGraph, data: LabeledSet, label_source: str) -> LabeledSet:
    """The labelled set a bitwidth search trains on: ground truth or baseline pseudolabels."""
    if label_source == "pseudolabels":
        return pseudolabel(fp_model, data.inputs, data.classes)
    return data
