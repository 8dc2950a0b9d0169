"""Quantization cards: a five-row disclosure of how a quantized model was made.

A card is built mechanically from a model, a run description and results.
Anything the run description does not supply is written as "undisclosed"
rather than guessed.  The canonical form is JSON text; Markdown is a view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

from .errors import ManifestError
from .network import FirstLastPolicy, PoolStrategy, ResidualStrategy
from .quantize import LEARNED

UNDISCLOSED = "undisclosed"
CARD_FORMAT = "quantbench-card"
CARD_VERSION = 1

ROW_LABELS = {
    "quantization_method": "Quantization Method",
    "quantized_operations": "Quantized Operations",
    "mixed_precision": "Mixed Precision",
    "resource_complexity": "Resource Complexity",
    "pretrained_model": "Pretrained Model",
}

DATA_TYPES = {
    "labeled": "Labeled training data",
    "unlabeled": "Unlabeled calibration data",
    "pseudolabels": "pseudolabels from baseline",
    "synthetic": "Synthetic data",
}


@dataclass
class QuantizationCard:
    quantization_method: dict
    quantized_operations: dict
    mixed_precision: dict
    resource_complexity: dict
    pretrained_model: dict

    def __post_init__(self):
        for f in fields(self):
            section = getattr(self, f.name)
            setattr(self, f.name, {k: UNDISCLOSED if v is None else str(v) for k, v in section.items()})

    def sections(self) -> dict[str, dict]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _pct(x) -> str | None:
    return None if x is None else f"{100 * float(x):.1f}%"


def _symmetry(w_sym: set, a_sym: set) -> str:
    if w_sym == a_sym and len(w_sym) == 1:
        return "Symmetric" if w_sym.pop() else "Asymmetric"
    name = lambda s: "/".join(sorted("symmetric" if v else "asymmetric" for v in s)) or "none"
    return f"{name(w_sym).capitalize()} weights, {name(a_sym)} activations"


def _granularity(specs) -> str:
    kinds = sorted({"Per-channel" if s.per_channel else "Per-tensor" for s in specs})
    return "/".join(kinds) if kinds else "none"


def _method(model, run: dict) -> dict:
    wq = model.weight_quantizers()
    aq = model.activation_quantizers()
    mpq = run.get("mpq")
    observer = run.get("observer")
    if mpq is not None and mpq.learn_activations and mpq.learn_act_range:
        act_range = "Learned activation quantizer min/max"
    elif observer == "percentile":
        act_range = f"Percentile ({run.get('percentile', 99.99):g}) clipped activation range"
    elif observer == "minmax":
        act_range = "Min/max calibrated activation range"
    else:
        act_range = None
    return {
        "uniformity": "Uniform",
        "symmetry": _symmetry({q.spec.symmetric for q in wq}, {q.spec.symmetric for q in aq}),
        "granularity": f"{_granularity(q.spec for q in wq)} weights, "
                       f"{_granularity(q.spec for q in aq).lower()} activations",
        "parameters": "Static quantizer parameters",
        "range": act_range,
    }


def _operations(model) -> dict:
    from .network import ResidualBlock

    blocks = [layer for layer in model.layers if isinstance(layer, ResidualBlock)]
    has_skip = any(b.downsample is not None for b in blocks)
    strategy = model.residual_strategy
    if not blocks:
        residual = "No residual connections"
    elif strategy is ResidualStrategy.QUANTIZE_ALL:
        residual = "Quantized residual connections"
    elif strategy is ResidualStrategy.HIGH_PRECISION_ADD:
        residual = "High precision residual add, sum requantized"
    else:
        residual = "Unquantized residual stream"
    if not has_skip:
        skip = "No skip connections"
    else:
        skip = "Quantized skip connections" if model.skip_quantized() else "High precision skip connections"
    if model.first_last_policy is FirstLastPolicy.PIN_8BIT:
        first_last = "First/last layer at 8 bits"
    else:
        first_last = "First/last layer quantized like the rest"
    has_pool = any(layer.kind == "AvgPool" for layer in model.layers)
    if not has_pool:
        pool = "No pooling"
    elif model.pool_strategy is PoolStrategy.INTEGER_ARITHMETIC:
        pool = "Average pooling in integer arithmetic"
    else:
        pool = "Average pooling at high precision, requantized"
    return {"skip": skip, "residual": residual, "first_last": first_last, "pooling": pool}


def _bits_text(bits: list[int]) -> str:
    values = sorted(set(bits))
    if len(values) == 1:
        return f"Uniform {values[0]}-bit"
    return "Mixed precision (" + ", ".join(str(b) for b in values) + " bits)"


def _mixed(model, run: dict) -> dict:
    mpq = run.get("mpq")
    pinned = [q.name for q in model.all_quantizers() if q.pinned]
    wbits = [q.current_bits() for q in model.weight_quantizers() if q.spec.bits != LEARNED and not q.pinned]
    abits = [q.current_bits() for q in model.activation_quantizers() if q.spec.bits != LEARNED and not q.pinned]
    sweep = run.get("bit_sweep")
    constraint = run.get("constraint")
    if mpq is not None:
        allowed = mpq.allowed_bits.describe()
        targets = []
        if mpq.learn_weights and mpq.target_w is not None and mpq.lambda1 > 0:
            targets.append(f"weights <= {mpq.target_w:g}")
        if mpq.learn_activations and mpq.target_a is not None and mpq.lambda2 > 0:
            targets.append(f"activations <= {mpq.target_a:g}")
        where = "all layers" if mpq.include_first_last_in_avg else "excluding first/last layers"
        constraint_text = (f"Average bitwidth ({', '.join(targets)}; {where})" if targets
                           else "None (unconstrained)")
    elif constraint == "max_featuremap":
        allowed = "Any integer bitwidth in [2, 32]"
        constraint_text = f"Maximum feature map size ({run.get('cap_bytes', UNDISCLOSED)} bytes)"
    else:
        allowed = "Single fixed bitwidth"
        if sweep:
            allowed += " (swept over " + ", ".join(str(b) for b in sweep) + ")"
        constraint_text = "None (uniform precision)"
    return {
        "allowed_bitwidths": allowed,
        "constraint": constraint_text,
        "weights": _bits_text(wbits) if wbits and not sweep else ("Swept" if sweep else None),
        "activations": _bits_text(abits) if abits and not sweep else ("Swept" if sweep else None),
        "pinned_layers": f"{len(pinned)} quantizers pinned at 8 bits" if pinned else "None",
    }


def _resources(run: dict) -> dict:
    mpq = run.get("mpq")
    n_train = run.get("fp_train_examples")
    if mpq is not None:
        examples = run.get("examples", mpq.samples)
        data_type = "pseudolabels" if mpq.label_source == "pseudolabels" else "labeled"
        passes = mpq.steps * mpq.batch_size
        time = (f"{_pct(passes / n_train)} of one epoch train time" if n_train else None)
    else:
        examples = run.get("examples", run.get("calibration_samples"))
        data_type = run.get("data_type", "unlabeled" if examples is not None else None)
        time = (f"{_pct(examples / n_train)} of one epoch (forward passes only)"
                if n_train and examples is not None else None)
    return {
        "examples": None if examples is None else f"{int(examples)} examples",
        "data_type": DATA_TYPES.get(data_type, data_type),
        "time": time,
    }


def _pretrained(model, results: dict) -> dict:
    baseline = results.get("baseline_accuracy", model.baseline_accuracy)
    quantized = results.get("quantized_accuracy")
    table = results.get("result_table")
    return {
        "baseline_accuracy": None if baseline is None else f"Baseline accuracy {_pct(baseline)}",
        "quantized_accuracy": (f"Quantized accuracy {_pct(quantized)}" if quantized is not None
                               else (f"See {table}" if table else None)),
    }


def build_card(model, run: dict | None = None, results: dict | None = None) -> QuantizationCard:
    """Derive a card from a model's quantizers and a run description.

    ``run`` keys: ``observer``, ``percentile``, ``calibration_samples``,
    ``mpq`` (an ``MPQConfig``), ``constraint`` ("max_featuremap"),
    ``cap_bytes``, ``bit_sweep``, ``examples``, ``data_type``
    (labeled/unlabeled/pseudolabels/synthetic) and ``fp_train_examples``.
    ``results`` keys: ``baseline_accuracy``, ``quantized_accuracy`` and
    ``result_table``.  Absent keys become "undisclosed".
    """
    run = dict(run or {})
    results = dict(results or {})
    return QuantizationCard(_method(model, run), _operations(model), _mixed(model, run),
                            _resources(run), _pretrained(model, results))


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("|", "\\|")


def render_card(card: QuantizationCard, fmt: str = "markdown") -> str:
    if fmt in ("markdown", "md"):
        lines = ["| Design Tradeoff | Disclosure |", "| --- | --- |"]
        for key, label in ROW_LABELS.items():
            cell = " \\| ".join(_escape(v) for v in getattr(card, key).values())
            lines.append(f"| {label} | {cell} |")
        return "\n".join(lines) + "\n"
    if fmt in ("structured", "txt", "json"):
        doc = {"format": CARD_FORMAT, "version": CARD_VERSION, **card.sections()}
        return json.dumps(doc, indent=2) + "\n"
    raise ValueError(f"unknown card format {fmt!r}")


def parse_card(text: str) -> QuantizationCard:
    """Inverse of ``render_card(card, "structured")``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"card is not valid structured text: {e}") from None
    if doc.get("format") != CARD_FORMAT or doc.get("version") != CARD_VERSION:
        raise ManifestError(f"not a version-{CARD_VERSION} quantization card")
    missing = [k for k in ROW_LABELS if k not in doc]
    if missing:
        raise ManifestError(f"card lacks sections: {', '.join(missing)}")
    return QuantizationCard(**{k: doc[k] for k in ROW_LABELS})


def write_card(card: QuantizationCard, out_dir, stem: str) -> tuple:
    """Write ``<stem>.card.md`` and ``<stem>.card.txt`` under ``out_dir``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    md, txt = out / f"{stem}.card.md", out / f"{stem}.card.txt"
    md.write_text(render_card(card, "markdown"))
    txt.write_text(render_card(card, "structured"))
    return md, txt
