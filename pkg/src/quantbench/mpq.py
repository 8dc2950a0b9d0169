"""Learned mixed-precision bitwidth allocation for post-training quantization.

Each learnable quantizer owns a continuous bitwidth ``B_cont``.  The forward
pass uses the projected integer ``B`` (straight-through backward), and the
scale ``(x_max - x_min) / (2**B - 1)`` carries the task-loss gradient back
to ``B_cont``.  The objective is

    NLL + lambda1 * max(avg_w - target_w, 0) + lambda2 * max(avg_a - target_a, 0)

with size-weighted average bitwidths.  Network weights stay frozen; only the
bitwidths and the per-tensor activation clipping ranges are trained.  The
returned allocation is the one with the best exponential moving average of
training-batch accuracy among the steps that met the budget.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, InfeasibleCapError
from .numcore import Node, Parameter
from .quantize import LEARNED, PerTensor, Quantizer, QuantizerState

DEFAULT_STEPS = 1500
DEFAULT_BATCH = 32
DEFAULT_LR = 0.01
DEFAULT_SAMPLES = 1024
BITS_FLOOR, BITS_CEIL = 2.0, 32.0


# -- allowed bitwidths ------------------------------------------------------

@dataclass(frozen=True)
class AnyInteger:
    min: int = 2
    max: int = 8

    def __post_init__(self):
        if not 2 <= self.min <= self.max:
            raise ValueError(f"need 2 <= min <= max, got [{self.min}, {self.max}]")

    @property
    def top(self) -> int:
        return self.max

    def contains(self, b: int) -> bool:
        return self.min <= b <= self.max

    def project(self, b):
        return np.clip(nc.round_half_away(b), self.min, self.max)

    def describe(self) -> str:
        return f"Any integer bitwidth in [{self.min}, {self.max}]"

    def to_dict(self):
        return {"kind": "any_integer", "min": self.min, "max": self.max}


@dataclass(frozen=True)
class BitSet:
    values: tuple = (2, 4, 8)

    def __post_init__(self):
        vals = tuple(sorted(int(v) for v in self.values))
        if not vals or vals[0] < 2 or len(set(vals)) != len(vals):
            raise ValueError(f"bit set must be nonempty, distinct and >= 2, got {self.values}")
        object.__setattr__(self, "values", vals)

    @property
    def top(self) -> int:
        return self.values[-1]

    def contains(self, b: int) -> bool:
        return int(b) in self.values

    def project(self, b):
        b = np.asarray(b, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        # argmin returns the first (smallest) member on ties
        idx = np.argmin(np.abs(b[..., None] - v), axis=-1)
        return v[idx]

    def describe(self) -> str:
        return "Bitwidths {" + ", ".join(map(str, self.values)) + "}"

    def to_dict(self):
        return {"kind": "set", "values": list(self.values)}


AllowedBits = Union[AnyInteger, BitSet]


def allowed_from_dict(d: dict) -> AllowedBits:
    if d["kind"] == "any_integer":
        return AnyInteger(int(d["min"]), int(d["max"]))
    return BitSet(tuple(d["values"]))


def project_bits(b_cont: float, allowed: AllowedBits) -> int:
    return int(allowed.project(float(b_cont)))


# -- objective pieces -------------------------------------------------------

def avg_bits(bits: Sequence, sizes: Sequence) -> Node:
    """Size-weighted mean bitwidth, differentiable in ``bits``."""
    if len(bits) != len(sizes):
        raise DimensionError(f"avg_bits: {len(bits)} bitwidths but {len(sizes)} sizes")
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(sizes) == 0 or np.any(sizes <= 0):
        raise ValueError("avg_bits: sizes must be positive")
    b = nc.stack([nc.const(x).reshape(()) for x in bits])
    return nc.sum_(b * (sizes / sizes.sum()))


def hinge_penalty(avg, target: float, lam: float) -> Node:
    """``lam * max(avg - target, 0)``; the subgradient at the kink is 0."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return nc.relu(nc.const(avg) - float(target)) * float(lam)


# -- Adam -------------------------------------------------------------------

def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: dict | None,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    t = state["t"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        g = np.zeros_like(p) if g is None else g
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = DEFAULT_LR, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = None

    def zero_grad(self):
        nc.zero_grad(self.params)

    def step(self):
        values, self.state = adam_step([p.value for p in self.params], [p.grad for p in self.params],
                                       self.state, self.lr, self.betas[0], self.betas[1], self.eps)
        for p, v in zip(self.params, values):
            p.value = v


# -- allocation records -----------------------------------------------------

@dataclass
class BitwidthAllocation:
    """Per-quantizer integer bitwidths with the sizes used to average them.

    ``excluded`` names are left out of the constrained averages (first/last
    layers when they are not counted).
    """

    bits_w: dict[str, int]
    bits_a: dict[str, int]
    sizes_w: dict[str, int]
    sizes_a: dict[str, int]
    targets: tuple[float | None, float | None] = (None, None)
    excluded: tuple[str, ...] = ()
    first_last: tuple[str, ...] = ()

    @staticmethod
    def _avg(bits: dict, sizes: dict, skip=()) -> float:
        names = [n for n in bits if n not in skip]
        if not names:
            return float("nan")
        s = np.array([sizes[n] for n in names], dtype=np.float64)
        b = np.array([bits[n] for n in names], dtype=np.float64)
        return float((b * s).sum() / s.sum())

    @property
    def achieved(self) -> tuple[float, float]:
        return (self._avg(self.bits_w, self.sizes_w, self.excluded),
                self._avg(self.bits_a, self.sizes_a, self.excluded))

    def meets_constraints(self) -> bool:
        for got, target in zip(self.achieved, self.targets):
            if target is not None and not math.isnan(got) and got > target + 1e-12:
                return False
        return True

    def to_dict(self) -> dict:
        return {"bits_w": self.bits_w, "bits_a": self.bits_a, "sizes_w": self.sizes_w,
                "sizes_a": self.sizes_a, "targets": list(self.targets), "excluded": list(self.excluded),
                "first_last": list(self.first_last), "achieved": list(self.achieved),
                "meets_constraints": self.meets_constraints()}

    @classmethod
    def from_dict(cls, d: dict) -> "BitwidthAllocation":
        return cls({k: int(v) for k, v in d["bits_w"].items()}, {k: int(v) for k, v in d["bits_a"].items()},
                   dict(d["sizes_w"]), dict(d["sizes_a"]), tuple(d["targets"]), tuple(d["excluded"]),
                   tuple(d.get("first_last", ())))


def current_allocation(model, targets=(None, None), include_first_last: bool = True) -> BitwidthAllocation:
    """Read the bitwidths a model's quantizers use right now."""
    sizes = model.feature_map_sizes()
    wq = model.weight_quantizers()
    aq = model.activation_quantizers()
    fw, fa = model.first_last_quantizers()
    first_last = tuple(q.name for q in fw + fa)
    return BitwidthAllocation(
        {q.name: q.current_bits() for q in wq}, {q.name: q.current_bits() for q in aq},
        {q.name: sizes[q.name] for q in wq}, {q.name: sizes[q.name] for q in aq},
        tuple(targets), () if include_first_last else first_last, first_last)


@dataclass
class MPQConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    target_w: float | None = 4.0
    target_a: float | None = 4.0
    steps: int = DEFAULT_STEPS
    batch_size: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    samples: int = DEFAULT_SAMPLES
    allowed_bits: AllowedBits = field(default_factory=AnyInteger)
    include_first_last_in_avg: bool = True
    pin_first_last: bool = False
    label_source: str = "ground_truth"
    ema_decay: float = 0.9
    init_bits: float = 8.0
    learn_weights: bool = True
    learn_activations: bool = True
    learn_act_range: bool = True
    act_bits: int = 8

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambdas must be >= 0")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in (0, 1)")
        if self.label_source not in ("ground_truth", "pseudolabels"):
            raise ConfigError(f"unknown label_source {self.label_source!r}")
        if self.steps < 0 or self.batch_size < 1 or self.samples < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and samples >= 1 required")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["allowed_bits"] = self.allowed_bits.to_dict()
        return d


@dataclass
class MPQResult:
    allocation: BitwidthAllocation
    clip_params: dict[str, tuple[float, float]]
    history: list[dict]
    met: bool
    best_step: int | None

    def history_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.history)


def prepare_mpq(model, cfg: MPQConfig) -> None:
    """Mark quantizers as learnable according to ``cfg`` (model must be calibrated)."""
    from .network import FirstLastPolicy

    model.apply_first_last_policy(FirstLastPolicy.PIN_8BIT if cfg.pin_first_last else FirstLastPolicy.QUANTIZE)
    for q in model.weight_quantizers():
        if not q.pinned:
            q.set_spec(q.spec.with_(bits=LEARNED if cfg.learn_weights else q.spec.bits, range_mode="static"))
    for q in model.activation_quantizers():
        if q.pinned:
            continue
        if cfg.learn_activations:
            mode = "learned" if cfg.learn_act_range else "static"
            q.set_spec(q.spec.with_(bits=LEARNED, granularity=PerTensor(), range_mode=mode))
        else:
            q.set_spec(q.spec.with_(bits=cfg.act_bits, range_mode="static"))


def _bits_node(q: Quantizer) -> Node:
    if q.bits_param is not None:
        return nc.ste(q.bits_param, q.project, "project_bits")
    return nc.const(float(q.current_bits()))


def _learnable(q: Quantizer) -> bool:
    return q.spec.bits == LEARNED or q.spec.range_mode == LEARNED


def learn_bitwidths(model, data, cfg: MPQConfig, seed: int = 0) -> MPQResult:
    """Optimise bitwidths (and activation clipping ranges) of a calibrated model."""
    from .data import stream_rng
    from .network import Mode

    pseudo = getattr(data, "is_pseudolabeled", False)
    if pseudo != (cfg.label_source == "pseudolabels"):
        raise ConfigError(f"label_source is {cfg.label_source!r} but the data provenance is {data.provenance!r}")
    wq = model.weight_quantizers()
    aq = model.activation_quantizers()
    if not any(q.spec.bits == LEARNED for q in wq + aq):
        raise ConfigError("no quantizer has learnable bits; call prepare_mpq first")
    sizes = model.feature_map_sizes()
    fw, fa = model.first_last_quantizers()
    first_last = {q.name for q in fw + fa}
    excluded = set() if cfg.include_first_last_in_avg else first_last
    counted_w = [q for q in wq if q.name not in excluded]
    counted_a = [q for q in aq if q.name not in excluded]

    # a zero multiplier switches its budget off: no penalty and no selection filter
    target_w = cfg.target_w if cfg.lambda1 > 0 else None
    target_a = cfg.target_a if cfg.lambda2 > 0 else None
    top = cfg.allowed_bits.top
    init = float(cfg.allowed_bits.project(min(cfg.init_bits, top)))
    learnable = [q for q in wq + aq if _learnable(q)]
    params: list[Parameter] = []
    for q in learnable:
        params += q.make_learnable(init, cfg.allowed_bits.project)
    bit_params = [q.bits_param for q in learnable if q.bits_param is not None]
    range_quants = [q for q in learnable if q.max_param is not None]

    model.freeze(True)
    opt = Adam(params, lr=cfg.lr)
    data = data.take(cfg.samples)
    rng = stream_rng(seed, "mpq_batches")
    order, cursor = rng.permutation(len(data)), 0

    def snapshot():
        bits = {q.name: q.current_bits() for q in wq + aq}
        ranges = {q.name: tuple(np.asarray(v, dtype=np.float64).copy() for v in q.current_range())
                  for q in range_quants}
        return bits, ranges

    history, best, best_ema, ema = [], None, -math.inf, None
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(data):
            order, cursor = rng.permutation(len(data)), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x, y = data.inputs[idx], data.labels[idx]

        state_before = snapshot()
        opt.zero_grad()
        logits = model.forward(x, Mode.QUANTIZED)
        nll = nc.cross_entropy(logits, y)
        loss = nll
        avg_w = avg_bits([_bits_node(q) for q in counted_w], [sizes[q.name] for q in counted_w]) if counted_w else None
        avg_a = avg_bits([_bits_node(q) for q in counted_a], [sizes[q.name] for q in counted_a]) if counted_a else None
        pen_w = pen_a = 0.0
        if target_w is not None and avg_w is not None:
            p = hinge_penalty(avg_w, target_w, cfg.lambda1)
            loss, pen_w = loss + p, float(p.value)
        if target_a is not None and avg_a is not None:
            p = hinge_penalty(avg_a, target_a, cfg.lambda2)
            loss, pen_a = loss + p, float(p.value)
        nc.backward(loss)
        opt.step()
        for p in bit_params:
            p.value = np.clip(p.value, BITS_FLOOR, BITS_CEIL)
        for q in range_quants:
            _sanitize_range(q)

        acc = float(np.mean(logits.value.argmax(axis=1) == y))
        ema = acc if ema is None else cfg.ema_decay * ema + (1 - cfg.ema_decay) * acc
        aw = float(avg_w.value) if avg_w is not None else float("nan")
        aa = float(avg_a.value) if avg_a is not None else float("nan")
        met = ((target_w is None or avg_w is None or aw <= target_w)
               and (target_a is None or avg_a is None or aa <= target_a))
        if met and ema > best_ema:
            best_ema, best = ema, (step, state_before)
        history.append({"step": step, "loss": float(loss.value), "nll": float(nll.value), "penalty_w": pen_w,
                        "penalty_a": pen_a, "avg_w": aw, "avg_a": aa, "accuracy": acc, "ema_accuracy": ema,
                        "met_constraints": bool(met)})

    if best is not None:
        best_step, (bits, ranges) = best
    else:
        best_step, (bits, ranges) = None, snapshot()
    for q in learnable:
        lo, hi = ranges.get(q.name, (q.raw_min, q.raw_max))
        q.set_state(QuantizerState(lo, hi, bits[q.name], q.spec.symmetric))
    model.freeze(False)

    alloc = BitwidthAllocation(
        {q.name: bits[q.name] for q in wq}, {q.name: bits[q.name] for q in aq},
        {q.name: sizes[q.name] for q in wq}, {q.name: sizes[q.name] for q in aq},
        (target_w, target_a), tuple(sorted(excluded)), tuple(sorted(first_last)))
    clip = {name: (float(np.min(lo)), float(np.max(hi))) for name, (lo, hi) in ranges.items()}
    return MPQResult(alloc, clip, history, best is not None, best_step)


def _sanitize_range(q: Quantizer) -> None:
    """Keep a learned range valid: x_min <= 0 <= x_max with positive width."""
    q.max_param.value = np.maximum(q.max_param.value, 1e-6)
    if q.min_param is not None:
        q.min_param.value = np.minimum(q.min_param.value, 0.0)


# -- feature-map and size accounting ---------------------------------------

def max_featuremap_allocation(model, cap_bytes: int, names: Sequence[str] | None = None) -> dict[str, int]:
    """Activation bits that fill every feature map up to ``cap_bytes`` (max 32 bits)."""
    sizes = model.feature_map_sizes()
    names = names if names is not None else [q.name for q in model.activation_quantizers()]
    return featuremap_bits({n: sizes[n] for n in names}, cap_bytes)


def featuremap_bits(elements: dict[str, int], cap_bytes: int) -> dict[str, int]:
    out = {}
    for name, n in elements.items():
        b = min(32, (int(cap_bytes) * 8) // int(n))
        if b < 2:
            raise InfeasibleCapError(f"cap of {cap_bytes} bytes leaves {name!r} ({n} elements) below 2 bits")
        out[name] = b
    return out


def uniform_max_featuremap_bytes(elements: Iterable[int], bits: int) -> int:
    return max(math.ceil(n * bits / 8) for n in elements)


@dataclass
class ConstraintReport:
    weight_bits_all: float
    weight_bits_excl_first_last: float
    act_bits_all: float
    act_bits_excl_first_last: float
    model_size_bytes: int
    total_feature_map_bytes: int
    max_feature_map_bytes: int

    def table_row(self, accuracy: float | None = None) -> dict:
        row = {"Model Size (MB)": self.model_size_bytes / 1e6, "Weight Bits": self.weight_bits_all,
               "Weight Bits excl. first/last": self.weight_bits_excl_first_last,
               "Total Feat Map (MB)": self.total_feature_map_bytes / 1e6, "Act Bits": self.act_bits_all,
               "Act Bits excl. first/last": self.act_bits_excl_first_last,
               "Max Feat Map (MB)": self.max_feature_map_bytes / 1e6}
        if accuracy is not None:
            row["Accuracy"] = accuracy
        return row


def constraint_report(alloc: BitwidthAllocation, model=None) -> ConstraintReport:
    """Averages with and without first/last layers plus size totals.

    Sizes are ``sum(ceil(elements * bits / 8))`` bytes per tensor.
    """
    first_last = set(alloc.first_last)
    if not first_last and model is not None:
        fw, fa = model.first_last_quantizers()
        first_last = {q.name for q in fw + fa}
    avg = BitwidthAllocation._avg
    size = lambda bits, sizes: [math.ceil(sizes[n] * bits[n] / 8) for n in bits]
    fm = size(alloc.bits_a, alloc.sizes_a) or [0]
    return ConstraintReport(
        avg(alloc.bits_w, alloc.sizes_w), avg(alloc.bits_w, alloc.sizes_w, first_last),
        avg(alloc.bits_a, alloc.sizes_a), avg(alloc.bits_a, alloc.sizes_a, first_last),
        int(sum(size(alloc.bits_w, alloc.sizes_w))), int(sum(fm)), int(max(fm)))
