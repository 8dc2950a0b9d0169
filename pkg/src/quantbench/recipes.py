"""The eight observation experiments at desk scale.

Each recipe runs one seed at a time and returns plain rows; ``run_observation``
fans the seeds out (optionally over processes), aggregates mean and standard
deviation per configuration and writes result tables plus one card per
configuration.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import make_blobs, make_pattern_images, split_holdout
from .errors import ConfigError
from .mpq import (AnyInteger, BitSet, MPQConfig, constraint_report, learn_bitwidths, prepare_mpq,
                  featuremap_bits)
from .network import (FirstLastPolicy, Mode, ResidualStrategy, build_toy_mlp, build_toy_resnet)
from .pipeline import (MINMAX_SAMPLES, PERCENTILE, PERCENTILE_SAMPLES, calibrate_model, evaluate,
                       mpq_training_data, train_fp_baseline)
from .quantcard import QuantizationCard, build_card, write_card
from .quantize import PerChannel, PerTensor, QuantizerSpec

IMAGE_TASK = {"classes": 4, "n_per_class": 300, "noise": 0.4, "size": 8, "width": 8, "depth_blocks": 2,
              "epochs": 8, "lr": 0.01}
BLOB_TASK = {"classes": 4, "dims": 8, "n_per_class": 400, "separation": 5.0, "hidden": 32, "depth": 4,
             "epochs": 10, "lr": 0.01}


@dataclass
class ExperimentSpec:
    """What to run.  ``sweep`` replaces the recipe's default sweep values;
    ``task`` overrides entries of the recipe's dataset/model settings;
    ``mpq`` overrides ``MPQConfig`` fields for the learning recipes."""

    recipe: str
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    sweep: list | None = None
    task: dict = field(default_factory=dict)
    mpq: dict = field(default_factory=dict)
    calibration_samples: int | None = None
    baseline_epochs: tuple[int, int] = (2, 8)
    parallel: bool = False

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; expected one of {', '.join(RECIPES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]


# -- shared setups ------------------------------------------------------------

def _image_setup(seed: int, spec: ExperimentSpec, epochs: int | None = None):
    t = {**IMAGE_TASK, **spec.task}
    data = make_pattern_images(t["classes"], t["n_per_class"], seed, size=t["size"], noise=t["noise"])
    train, hold = split_holdout(data, seed)
    model = build_toy_resnet(t["width"], t["depth_blocks"], t["classes"], input_size=t["size"], seed=seed)
    train_fp_baseline(model, train, t["epochs"] if epochs is None else epochs, t["lr"], seed, holdout=hold)
    return model, train, hold


def _blob_setup(seed: int, spec: ExperimentSpec):
    t = {**BLOB_TASK, **spec.task}
    data = make_blobs(t["classes"], t["dims"], t["n_per_class"], seed, separation=t["separation"])
    train, hold = split_holdout(data, seed)
    model = build_toy_mlp(t["dims"], t["hidden"], t["classes"], t["depth"], seed=seed)
    train_fp_baseline(model, train, t["epochs"], t["lr"], seed, holdout=hold)
    return model, train, hold


def _budget(spec: ExperimentSpec, observer: str) -> int:
    if spec.calibration_samples is not None:
        return spec.calibration_samples
    return PERCENTILE_SAMPLES if observer == "percentile" else MINMAX_SAMPLES


def _calibrate(model, train, spec, observer):
    calibrate_model(model, train.inputs, observer, percentile=PERCENTILE, max_samples=_budget(spec, observer))
    return model.calibration_info["samples"]


def _calib_run(model, train, spec, observer, sweep):
    n = _calibrate(model, train, spec, observer)
    return {"observer": observer, "percentile": PERCENTILE, "calibration_samples": n, "examples": n,
            "data_type": "unlabeled", "fp_train_examples": len(train), "bit_sweep": list(sweep)}


def _row(seed, config, sweep_name, value, accuracy, baseline, **extra):
    return {"seed": seed, "config": config, "sweep": sweep_name, "value": value, "accuracy": accuracy,
            "baseline_accuracy": baseline, **extra}


# -- recipes --------------------------------------------------------------------

def _obs1(seed, spec):
    """Symmetric vs asymmetric activations over activation bits (percentile calibration)."""
    sweep = spec.sweep or [2, 3, 4, 5, 6, 8]
    model, train, hold = _image_setup(seed, spec)
    # quantize the downsample skip, keep the residual add at high precision
    model.residual_strategy = ResidualStrategy.HIGH_PRECISION_ADD
    model.quantize_skip = True
    run = _calib_run(model, train, spec, "percentile", sweep)
    rows, cards = [], {}
    for config, symmetric in (("asymmetric", False), ("symmetric", True)):
        model.set_specs(act_spec=QuantizerSpec(8, symmetric, PerTensor()))
        for b in sweep:
            model.set_bits(act_bits=b)
            rows.append(_row(seed, config, "act_bits", b, evaluate(model, hold, Mode.QUANTIZED),
                             model.baseline_accuracy))
        cards[config] = build_card(model, run)
    return rows, cards


def _obs2(seed, spec):
    """Per-channel vs per-tensor weights over weight bits (min/max calibration)."""
    sweep = spec.sweep or [2, 3, 4, 6, 8]
    model, train, hold = _image_setup(seed, spec)
    rows, cards = [], {}
    for config, gran in (("per_channel", PerChannel(0)), ("per_tensor", PerTensor())):
        model.set_specs(weight_spec=QuantizerSpec(8, False, gran))
        run = _calib_run(model, train, spec, "minmax", sweep)
        for b in sweep:
            model.set_bits(weight_bits=b)
            rows.append(_row(seed, config, "weight_bits", b, evaluate(model, hold, Mode.QUANTIZED),
                             model.baseline_accuracy))
        cards[config] = build_card(model, run)
    return rows, cards


def _obs3(seed, spec):
    """The three residual/skip strategies over activation bits."""
    sweep = spec.sweep or [2, 3, 4, 8]
    model, train, hold = _image_setup(seed, spec)
    run = _calib_run(model, train, spec, "percentile", sweep)
    rows, cards = [], {}
    for strategy in ResidualStrategy:
        model.residual_strategy = strategy
        for b in sweep:
            model.set_bits(act_bits=b)
            rows.append(_row(seed, strategy.value, "act_bits", b, evaluate(model, hold, Mode.QUANTIZED),
                             model.baseline_accuracy))
        cards[strategy.value] = build_card(model, run)
    return rows, cards


def _mpq_run(seed, spec, model, train, hold, cfg: MPQConfig):
    """Calibrate, learn bitwidths and evaluate; returns (accuracy, result, run description)."""
    data = mpq_training_data(model, train, cfg.label_source)
    calibrate_model(model, train.inputs, "minmax", max_samples=cfg.samples)
    prepare_mpq(model, cfg)
    result = learn_bitwidths(model, data, cfg, seed)
    run = {"mpq": cfg, "examples": min(cfg.samples, len(train)), "fp_train_examples": len(train)}
    return evaluate(model, hold, Mode.QUANTIZED), result, run


def _mpq_cfg(spec: ExperimentSpec, **kw) -> MPQConfig:
    return MPQConfig(**{**kw, **spec.mpq})


def _obs4(seed, spec):
    """Average-bit constraints counted with and without the first/last layers."""
    sweep = spec.sweep or [4.0]
    rows, cards = [], {}
    configs = (("all_layers_in_average", {"pin_first_last": False, "include_first_last_in_avg": True}),
               ("first_last_8bit_excluded", {"pin_first_last": True, "include_first_last_in_avg": False}))
    for config, kw in configs:
        for target in sweep:
            model, train, hold = _blob_setup(seed, spec)
            cfg = _mpq_cfg(spec, target_w=float(target), target_a=float(target), **kw)
            acc, result, run = _mpq_run(seed, spec, model, train, hold, cfg)
            report = constraint_report(result.allocation, model)
            rows.append(_row(seed, config, "target_bits", target, acc, model.baseline_accuracy,
                             **report.table_row(), met_constraints=int(result.met)))
            cards[config] = build_card(model, run)
    return rows, cards


def _obs5(seed, spec):
    """Any-integer vs {2, 4, 8} weight bitwidths under tight and loose budgets."""
    sweep = spec.sweep or [3.0, 6.0]
    rows, cards = [], {}
    for config, allowed in (("any_integer", AnyInteger(2, 8)), ("set_2_4_8", BitSet((2, 4, 8)))):
        for budget in sweep:
            model, train, hold = _blob_setup(seed, spec)
            cfg = _mpq_cfg(spec, target_w=float(budget), target_a=None, learn_activations=False,
                           allowed_bits=allowed, pin_first_last=False, include_first_last_in_avg=True)
            acc, result, run = _mpq_run(seed, spec, model, train, hold, cfg)
            rows.append(_row(seed, config, "budget", budget, acc, model.baseline_accuracy,
                             achieved_w=result.allocation.achieved[0], met_constraints=int(result.met)))
            cards[config] = build_card(model, run)
    return rows, cards


def _fixed_act_quantizers(model):
    """Input quantizer and the activation feeding the classifier stay at 8 bits."""
    acts = model.activation_quantizers()
    return [acts[0], acts[-1]]


def _obs6(seed, spec):
    """Max-feature-map mixed precision vs uniform activations with the same max feature map."""
    sweep = spec.sweep or [3, 4]
    model, train, hold = _image_setup(seed, spec)
    model.apply_first_last_policy(FirstLastPolicy.QUANTIZE)
    run = _calib_run(model, train, spec, "percentile", sweep)
    sizes = model.feature_map_sizes()
    fixed = {q.name for q in _fixed_act_quantizers(model)}
    acts = model.activation_quantizers()
    rows, cards = [], {}
    for b in sweep:
        uniform = {q.name: (8 if q.name in fixed else b) for q in acts}
        cap = max(math.ceil(sizes[n] * uniform[n] / 8) for n in uniform)
        mixed = featuremap_bits({n: sizes[n] for n in uniform if n not in fixed}, cap)
        mixed.update({n: 8 for n in fixed})
        for config, bits in (("uniform", uniform), ("max_featuremap", mixed)):
            for q in acts:
                q.set_spec(q.spec.with_(bits=bits[q.name]))
            fm = [math.ceil(sizes[n] * bits[n] / 8) for n in bits]
            rows.append(_row(seed, config, "act_bits", b, evaluate(model, hold, Mode.QUANTIZED),
                             model.baseline_accuracy, max_featuremap_bytes=max(fm),
                             total_featuremap_bytes=sum(fm)))
            card_run = dict(run, constraint="max_featuremap", cap_bytes=cap) if config == "max_featuremap" else run
            cards[config] = build_card(model, card_run)
    return rows, cards


def _obs7(seed, spec):
    """Bitwidth learning on ground-truth labels vs baseline pseudolabels."""
    sweep = spec.sweep or [4.0]
    rows, cards = [], {}
    for config in ("ground_truth", "pseudolabels"):
        for target in sweep:
            model, train, hold = _blob_setup(seed, spec)
            cfg = _mpq_cfg(spec, target_w=float(target), target_a=float(target), label_source=config)
            acc, result, run = _mpq_run(seed, spec, model, train, hold, cfg)
            rows.append(_row(seed, config, "target_bits", target, acc, model.baseline_accuracy,
                             met_constraints=int(result.met)))
            cards[config] = build_card(model, run)
    return rows, cards


def _obs8(seed, spec):
    """Two baselines of different quality quantized over weight bits."""
    sweep = spec.sweep or [2, 3, 4, 8]
    rows, cards = [], {}
    for epochs in spec.baseline_epochs:
        config = f"baseline_{epochs}_epochs"
        model, train, hold = _image_setup(seed, spec, epochs=epochs)
        run = _calib_run(model, train, spec, "minmax", sweep)
        for b in sweep:
            model.set_bits(weight_bits=b)
            rows.append(_row(seed, config, "weight_bits", b, evaluate(model, hold, Mode.QUANTIZED),
                             model.baseline_accuracy))
        cards[config] = build_card(model, run)
    return rows, cards


RECIPES = {"obs1": _obs1, "obs2": _obs2, "obs3": _obs3, "obs4": _obs4,
           "obs5": _obs5, "obs6": _obs6, "obs7": _obs7, "obs8": _obs8}


# -- result tables ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ResultTable:
    recipe: str
    rows: list[dict]

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            cols += [k for k in r if k not in cols]
        return cols

    def for_seed(self, seed: int) -> "ResultTable":
        return ResultTable(self.recipe, [r for r in self.rows if r.get("seed") == seed])

    def summary(self) -> "ResultTable":
        """Mean and sample standard deviation of every numeric column per (config, value)."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["config"], r["sweep"], r["value"]), []).append(r)
        numeric = [c for c in self.columns if c not in ("seed", "config", "sweep", "value")
                   and all(isinstance(r.get(c), (int, float)) for r in self.rows)]
        out = []
        for (config, sweep, value), rows in groups.items():
            row = {"config": config, "sweep": sweep, "value": value, "seeds": len(rows)}
            for c in numeric:
                v = np.array([r[c] for r in rows], dtype=np.float64)
                row[f"{c}_mean"] = float(v.mean())
                row[f"{c}_std"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            out.append(row)
        return ResultTable(self.recipe, out)

    def lookup(self, config: str, value, column: str = "accuracy_mean"):
        for r in self.rows:
            if r["config"] == config and r["value"] == value:
                return r[column]
        raise KeyError((config, value))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = self.columns
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([_fmt(r.get(c, "")) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"recipe": self.recipe, "columns": self.columns, "rows": self.rows}, indent=2) + "\n"


@dataclass
class ObservationResult:
    table: ResultTable
    summary: ResultTable
    cards: dict[str, QuantizationCard]

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        recipe = self.table.recipe
        seeds = sorted({r["seed"] for r in self.table.rows})
        for seed in seeds:
            t = self.table.for_seed(seed)
            written += [out / f"{recipe}_{seed}.csv", out / f"{recipe}_{seed}.json"]
            written[-2].write_text(t.to_csv())
            written[-1].write_text(t.to_json())
        written += [out / f"{recipe}_summary.csv", out / f"{recipe}_summary.json"]
        written[-2].write_text(self.summary.to_csv())
        written[-1].write_text(self.summary.to_json())
        for config, card in self.cards.items():
            written += list(write_card(card, out, f"{recipe}_{config}"))
        return written


def _run_seed(args):
    spec, seed = args
    return RECIPES[spec.recipe](seed, spec)


def run_observation(spec: ExperimentSpec, out_dir=None) -> ObservationResult:
    """Run every seed of a recipe and aggregate; optionally write all outputs."""
    jobs = [(spec, s) for s in spec.seeds]
    if spec.parallel and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(len(jobs), 8)) as pool:
            per_seed = list(pool.map(_run_seed, jobs))
    else:
        per_seed = [_run_seed(j) for j in jobs]
    rows = [r for seed_rows, _ in per_seed for r in seed_rows]
    table = ResultTable(spec.recipe, rows)
    summary = table.summary()
    cards = {}
    # the first seed's model describes the configuration; results come from the summary
    for config, card in per_seed[0][1].items():
        baseline = float(np.mean([r["baseline_accuracy"] for r in rows if r["config"] == config]))
        card.pretrained_model = {
            "baseline_accuracy": f"Baseline accuracy {100 * baseline:.1f}% (mean over {len(spec.seeds)} seeds)",
            "quantized_accuracy": f"See {spec.recipe}_summary.csv",
        }
        cards[config] = card
    result = ObservationResult(table, summary, cards)
    if out_dir is not None:
        result.write(out_dir)
    return result
