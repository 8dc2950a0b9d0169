"""Command-line driver: pretrain -> calibrate -> quantize / learn bits -> evaluate -> card.

Every command reads one flat configuration built from, in increasing
priority: built-in defaults, ``<out>/config.json`` left by an earlier command,
a ``--config`` JSON file, and ``--key value`` flags.  Unknown keys are
rejected.  The resolved configuration is written next to the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .data import load_idx, make_blobs, make_pattern_images, make_spirals, split_holdout
from .errors import ConfigError, QuantBenchError
from .mpq import (AnyInteger, BitSet, MPQConfig, constraint_report, current_allocation, learn_bitwidths,
                  prepare_mpq)
from .network import (FirstLastPolicy, Mode, PoolStrategy, ResidualStrategy, build_toy_mlp, build_toy_resnet,
                      load_model, save_model)
from .pipeline import (MINMAX_SAMPLES, PERCENTILE_SAMPLES, calibrate_model, evaluate, mpq_training_data,
                       train_fp_baseline)
from .quantcard import build_card, write_card
from .quantize import PerChannel, PerTensor, QuantizerSpec
from .recipes import RECIPES, ExperimentSpec, run_observation

logger = logging.getLogger("quantbench")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_UNMET = 0, 1, 2, 3

# key: (default, type, help)
KEYS: dict[str, tuple] = {
    "seed": (0, int, "master seed (falls back to $QUANTBENCH_SEED)"),
    "out": ("runs/default", str, "output directory"),
    "model_path": (None, str, "model manifest to read (default <out>/model.json)"),
    # data
    "task": ("images", str, "images | blobs | spirals | idx"),
    "idx_images": (None, str, "IDX image file for task=idx"),
    "idx_labels": (None, str, "IDX label file for task=idx"),
    "classes": (4, int, "number of classes for synthetic tasks"),
    "n_per_class": (300, int, "examples per class for synthetic tasks"),
    "dims": (8, int, "input dimension of blobs"),
    "separation": (5.0, float, "blob center radius"),
    "noise": (0.4, float, "image / spiral noise level"),
    "image_size": (8, int, "side of synthetic images"),
    # model
    "arch": ("auto", str, "resnet | mlp | auto (resnet for images)"),
    "width": (8, int, "toy resnet stem width"),
    "depth_blocks": (2, int, "toy resnet residual blocks"),
    "hidden": (32, int, "toy MLP hidden width"),
    "depth": (4, int, "toy MLP layer count"),
    # floating-point training
    "epochs": (8, int, "baseline training epochs"),
    "lr": (0.01, float, "baseline Adam learning rate"),
    "batch_size": (32, int, "baseline batch size"),
    # quantizers
    "observer": ("minmax", str, "activation calibration: minmax | percentile"),
    "percentile": (99.99, float, "clipping percentile for observer=percentile"),
    "calibration_samples": (None, int, "calibration budget (default 320 percentile / 1024 minmax)"),
    "weight_bits": (8, int, "uniform weight bits"),
    "act_bits": (8, int, "uniform activation bits"),
    "weight_symmetric": (False, bool, "symmetric weight quantizers"),
    "act_symmetric": (False, bool, "symmetric activation quantizers"),
    "weight_granularity": ("per_channel", str, "per_channel | per_tensor"),
    "residual_strategy": ("quantize_all", str, " | ".join(s.value for s in ResidualStrategy)),
    "quantize_skip": (None, bool, "override skip (downsample) quantization"),
    "pool_strategy": ("high_precision_requant", str, " | ".join(s.value for s in PoolStrategy)),
    "first_last_policy": ("pin_8bit", str, " | ".join(s.value for s in FirstLastPolicy)),
    "mode": ("quantized", str, "eval mode: float | quantized"),
    # bitwidth learning
    "lambda1": (1.0, float, "weight budget penalty (0 disables the weight budget)"),
    "lambda2": (1.0, float, "activation budget penalty (0 disables the activation budget)"),
    "target_w": (4.0, float, "average weight bits budget"),
    "target_a": (4.0, float, "average activation bits budget"),
    "mpq_steps": (1500, int, "bitwidth learning steps"),
    "mpq_batch_size": (32, int, "bitwidth learning batch size"),
    "mpq_lr": (0.01, float, "bitwidth learning rate"),
    "mpq_samples": (1024, int, "labelled examples available to bitwidth learning"),
    "allowed_bits": ("any:2-8", str, "any:MIN-MAX or a comma list such as 2,4,8"),
    "include_first_last_in_avg": (True, bool, "count first/last layers in the averages"),
    "pin_first_last": (False, bool, "pin first/last layers at 8 bits while learning"),
    "label_source": ("ground_truth", str, "ground_truth | pseudolabels"),
    "ema_decay": (0.9, float, "decay of the accuracy average used for selection"),
    "learn_weights": (True, bool, "learn weight bitwidths"),
    "learn_activations": (True, bool, "learn activation bitwidths and ranges"),
    # observe
    "seeds": (None, str, "observe: a count (5) or a comma list (0,3,7)"),
    "sweep": (None, str, "observe: comma list replacing the recipe's sweep"),
    "parallel": (False, bool, "observe: run seeds in separate processes"),
}

COMMANDS = {
    "train_fp": "train a floating-point baseline and save it",
    "calibrate": "set quantizer ranges from unlabeled examples",
    "quantize": "apply uniform bitwidths / quantizer options to a calibrated model",
    "learn_bits": "learn per-layer bitwidths under average-bit budgets",
    "eval": "holdout accuracy of a saved model",
    "card": "write the quantization card of a saved model",
    "observe": "run an observation recipe (obs1..obs8) over seeds",
}


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, value):
    default, kind, _ = KEYS[key]
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
        return None
    try:
        if kind is bool:
            return value if isinstance(value, bool) else _parse_bool(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def _check_keys(d: dict, source: str) -> None:
    unknown = sorted(set(d) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {', '.join(unknown)}")


def resolve_config(flags: dict, config_file: str | None = None, env=None) -> dict:
    """Merge defaults, a previous run's config, a config file and flags."""
    env = os.environ if env is None else env
    layers = []
    file_cfg = {}
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        _check_keys(file_cfg, str(path))
    _check_keys(flags, "flags")
    out = flags.get("out") or file_cfg.get("out") or KEYS["out"][0]
    previous = Path(out) / "config.json"
    if previous.exists():
        prev = json.loads(previous.read_text())
        _check_keys(prev, str(previous))
        layers.append(prev)
    layers += [file_cfg, flags]
    cfg = {k: v[0] for k, v in KEYS.items()}
    seed_given = False
    for layer in layers:
        for k, v in layer.items():
            cfg[k] = _coerce(k, v)
            seed_given |= k == "seed"
    if not seed_given and "QUANTBENCH_SEED" in env:
        cfg["seed"] = _coerce("seed", env["QUANTBENCH_SEED"])
    return cfg


# -- building blocks ------------------------------------------------------------

def _dataset(cfg):
    task, seed = cfg["task"], cfg["seed"]
    if task == "images":
        data = make_pattern_images(cfg["classes"], cfg["n_per_class"], seed, size=cfg["image_size"],
                                   noise=cfg["noise"])
    elif task == "blobs":
        data = make_blobs(cfg["classes"], cfg["dims"], cfg["n_per_class"], seed, separation=cfg["separation"])
    elif task == "spirals":
        data = make_spirals(cfg["classes"], cfg["n_per_class"], seed, noise=cfg["noise"])
    elif task == "idx":
        if not cfg["idx_images"] or not cfg["idx_labels"]:
            raise ConfigError("task=idx needs idx_images and idx_labels")
        for key in ("idx_images", "idx_labels"):
            if not Path(cfg[key]).exists():
                raise FileNotFoundError(f"{key}: no such file {cfg[key]}")
        data = load_idx(cfg["idx_images"], cfg["idx_labels"])
    else:
        raise ConfigError(f"unknown task {task!r}")
    return split_holdout(data, seed)


def _build_model(cfg, train):
    arch = cfg["arch"]
    if arch == "auto":
        arch = "resnet" if train.inputs.ndim == 4 else "mlp"
    if arch == "resnet":
        if train.inputs.ndim != 4:
            raise ConfigError("arch=resnet needs image inputs")
        _, c, h, _ = train.inputs.shape
        return build_toy_resnet(cfg["width"], cfg["depth_blocks"], train.classes, in_channels=c,
                                input_size=h, seed=cfg["seed"])
    if arch == "mlp":
        flat = train.inputs.reshape(len(train), -1)
        return build_toy_mlp(flat.shape[1], cfg["hidden"], train.classes, cfg["depth"], seed=cfg["seed"])
    raise ConfigError(f"unknown arch {arch!r}")


def _model_path(cfg) -> Path:
    return Path(cfg["model_path"]) if cfg["model_path"] else Path(cfg["out"]) / "model.json"


def _load(cfg):
    path = _model_path(cfg)
    if not path.with_suffix(".json").exists():
        raise FileNotFoundError(f"model not found: {path} (run train_fp first)")
    return load_model(path)


def _flat_inputs(model, data):
    """MLPs trained on images see flattened inputs."""
    if len(model.input_shape) == 1 and data.inputs.ndim > 2:
        data.inputs = data.inputs.reshape(len(data), -1)
    return data


def _apply_quant_options(model, cfg) -> None:
    gran = PerChannel(0) if cfg["weight_granularity"] == "per_channel" else PerTensor()
    if cfg["weight_granularity"] not in ("per_channel", "per_tensor"):
        raise ConfigError(f"unknown weight_granularity {cfg['weight_granularity']!r}")
    model.residual_strategy = ResidualStrategy(cfg["residual_strategy"])
    model.pool_strategy = PoolStrategy(cfg["pool_strategy"])
    model.quantize_skip = cfg["quantize_skip"]
    model.apply_first_last_policy(FirstLastPolicy(cfg["first_last_policy"]))
    model.set_specs(QuantizerSpec(cfg["weight_bits"], cfg["weight_symmetric"], gran),
                    QuantizerSpec(cfg["act_bits"], cfg["act_symmetric"], PerTensor()))


def _allowed(text: str):
    text = text.strip()
    try:
        if text.startswith("any:"):
            lo, hi = text[4:].split("-")
            return AnyInteger(int(lo), int(hi))
        return BitSet(tuple(int(v) for v in text.split(",")))
    except ValueError as e:
        raise ConfigError(f"allowed_bits {text!r}: {e}") from None


def _mpq_config(cfg) -> MPQConfig:
    return MPQConfig(lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], target_w=cfg["target_w"],
                     target_a=cfg["target_a"], steps=cfg["mpq_steps"], batch_size=cfg["mpq_batch_size"],
                     lr=cfg["mpq_lr"], samples=cfg["mpq_samples"], allowed_bits=_allowed(cfg["allowed_bits"]),
                     include_first_last_in_avg=cfg["include_first_last_in_avg"],
                     pin_first_last=cfg["pin_first_last"], label_source=cfg["label_source"],
                     ema_decay=cfg["ema_decay"], learn_weights=cfg["learn_weights"],
                     learn_activations=cfg["learn_activations"])


def _calibration_budget(cfg) -> int:
    if cfg["calibration_samples"] is not None:
        return cfg["calibration_samples"]
    return PERCENTILE_SAMPLES if cfg["observer"] == "percentile" else MINMAX_SAMPLES


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


# -- commands --------------------------------------------------------------------

def cmd_train_fp(cfg, out: Path) -> int:
    train, hold = _dataset(cfg)
    model = _build_model(cfg, train)
    train, hold = _flat_inputs(model, train), _flat_inputs(model, hold)
    train_fp_baseline(model, train, cfg["epochs"], cfg["lr"], cfg["seed"], batch_size=cfg["batch_size"],
                      holdout=hold)
    save_model(model, _model_path(cfg))
    _write_json(out / "train_fp.json", {"baseline_accuracy": model.baseline_accuracy, "epochs": cfg["epochs"],
                                        "train_examples": len(train), "parameters": model.num_parameters()})
    print(f"baseline accuracy {model.baseline_accuracy:.4f}")
    return EXIT_OK


def cmd_calibrate(cfg, out: Path) -> int:
    model = _load(cfg)
    train, _ = _dataset(cfg)
    train = _flat_inputs(model, train)
    _apply_quant_options(model, cfg)
    calibrate_model(model, train.inputs, cfg["observer"], percentile=cfg["percentile"],
                    max_samples=_calibration_budget(cfg))
    save_model(model, _model_path(cfg))
    _write_json(out / "calibrate.json", {**model.calibration_info, "fp_train_examples": len(train)})
    print(f"calibrated on {model.calibration_info['samples']} examples ({cfg['observer']})")
    return EXIT_OK


def cmd_quantize(cfg, out: Path) -> int:
    model = _load(cfg)
    _apply_quant_options(model, cfg)
    missing = model.uncalibrated()
    if missing:
        raise QuantBenchError(f"model is not calibrated ({len(missing)} quantizers); run calibrate first")
    save_model(model, _model_path(cfg))
    _write_json(out / "quantize.json", {"weight_bits": cfg["weight_bits"], "act_bits": cfg["act_bits"]})
    print(f"quantized: {cfg['weight_bits']}-bit weights, {cfg['act_bits']}-bit activations")
    return EXIT_OK


def cmd_learn_bits(cfg, out: Path) -> int:
    model = _load(cfg)
    train, hold = _dataset(cfg)
    train, hold = _flat_inputs(model, train), _flat_inputs(model, hold)
    mpq = _mpq_config(cfg)
    data = mpq_training_data(model, train, mpq.label_source)
    if model.uncalibrated():
        calibrate_model(model, train.inputs, "minmax", max_samples=mpq.samples)
    prepare_mpq(model, mpq)
    result = learn_bitwidths(model, data, mpq, cfg["seed"])
    save_model(model, _model_path(cfg))
    acc = evaluate(model, hold, Mode.QUANTIZED)
    alloc = result.allocation
    _write_json(out / "allocation.json", alloc.to_dict())
    (out / "history.jsonl").write_text(result.history_jsonl())
    report = constraint_report(alloc, model).table_row(acc)
    _write_json(out / "learn_bits.json", {"met_constraints": result.met, "best_step": result.best_step,
                                          "achieved": list(alloc.achieved), "quantized_accuracy": acc,
                                          "report": report, "mpq": mpq.to_dict(),
                                          "fp_train_examples": len(train)})
    card = build_card(model, {"mpq": mpq, "examples": min(mpq.samples, len(train)),
                              "fp_train_examples": len(train)},
                      {"quantized_accuracy": acc})
    write_card(card, out, f"learn_bits_{_model_path(cfg).stem}")
    w, a = alloc.achieved
    print(f"avg weight bits {w:.3f}, avg activation bits {a:.3f}, quantized accuracy {acc:.4f}")
    if not result.met:
        print("error: no step met the bit budgets; the final allocation was written and flagged",
              file=sys.stderr)
        return EXIT_UNMET
    return EXIT_OK


def cmd_eval(cfg, out: Path) -> int:
    model = _load(cfg)
    _, hold = _dataset(cfg)
    hold = _flat_inputs(model, hold)
    mode = Mode(cfg["mode"])
    acc = evaluate(model, hold, mode)
    _write_json(out / "eval.json", {"accuracy": acc, "mode": mode.value, "examples": len(hold)})
    (out / "eval.csv").write_text(f"mode,examples,accuracy\n{mode.value},{len(hold)},{acc!r}\n")
    print(f"{mode.value} accuracy {acc:.6f}")
    return EXIT_OK


def cmd_card(cfg, out: Path) -> int:
    model = _load(cfg)
    run, results = {}, {}
    calib = _read_json(out / "calibrate.json")
    if calib:
        run.update(observer=calib["observer"], percentile=calib.get("percentile") or 99.99,
                   calibration_samples=calib["samples"], examples=calib["samples"], data_type="unlabeled",
                   fp_train_examples=calib.get("fp_train_examples"))
    learned = _read_json(out / "learn_bits.json")
    if learned:
        mpq = _mpq_config(cfg)
        run.update(mpq=mpq, examples=min(mpq.samples, learned["fp_train_examples"]),
                   fp_train_examples=learned["fp_train_examples"])
        results["quantized_accuracy"] = learned["quantized_accuracy"]
    evaluated = _read_json(out / "eval.json")
    if evaluated and evaluated["mode"] == "quantized":
        results["quantized_accuracy"] = evaluated["accuracy"]
    card = build_card(model, run, results)
    md, txt = write_card(card, out, f"run_{_model_path(cfg).stem}")
    print(md.read_text(), end="")
    return EXIT_OK


def _seed_list(cfg) -> list[int]:
    text = cfg["seeds"]
    if text is None:
        return [cfg["seed"]]
    text = text.strip()
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise ConfigError("seeds must be a positive count or a list")
    return list(range(cfg["seed"], cfg["seed"] + n))


def cmd_observe(cfg, out: Path, recipe: str) -> int:
    sweep = None
    if cfg["sweep"]:
        sweep = [float(v) if "." in v else int(v) for v in cfg["sweep"].split(",")]
    spec = ExperimentSpec(recipe, _seed_list(cfg), sweep=sweep, parallel=cfg["parallel"])
    result = run_observation(spec, out)
    print(result.summary.to_csv(), end="")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        if name == "observe":
            p.add_argument("recipe", choices=sorted(RECIPES))
        p.add_argument("--config", help="JSON file of config keys")
        p.add_argument("-v", "--verbose", action="store_true")
        keys = p.add_argument_group("config keys")
        for key, (default, kind, help_text) in KEYS.items():
            keys.add_argument(f"--{key}", dest=f"key_{key}", default=argparse.SUPPRESS,
                              metavar=kind.__name__.upper(), help=f"{help_text} [default: {default}]")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_")}
    try:
        cfg = resolve_config(flags, args.config)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", cfg)
        _write_json(out / f"{args.command}.config.json", cfg)
        started = time.perf_counter()
        if args.command == "observe":
            code = cmd_observe(cfg, out, args.recipe)
        else:
            code = globals()[f"cmd_{args.command}"](cfg, out)
        # wall-clock time lives outside the cards and tables so those stay byte-identical
        _write_json(out / f"{args.command}.timing.json", {"seconds": round(time.perf_counter() - started, 3)})
        return code
    except (QuantBenchError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
