"""Toy networks with quantizer attachment points and their serialization.

Activation quantizers sit on op outputs (after the ReLU when there is one).
The classifier output is never quantized; the network input is quantized
by ``input_quant`` only under the ``QUANTIZE`` first/last policy.

Residual blocks carry two streams: ``q`` (what the quantized hardware would
hold) and ``hp`` (the same signal before requantization).  Only the
``UNQUANTIZED_SKIP`` strategy routes the skip path through ``hp``.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import numcore as nc
from .errors import CorruptModelError, ManifestError, StateError
from .numcore import Node, Parameter
from .quantize import PerChannel, PerTensor, Quantizer, QuantizerSpec, QuantizerState

FORMAT_NAME = "quantbench-model"
FORMAT_VERSION = 1


class Mode(str, Enum):
    FLOAT = "float"
    QUANTIZED = "quantized"


class ResidualStrategy(str, Enum):
    QUANTIZE_ALL = "quantize_all"
    HIGH_PRECISION_ADD = "high_precision_add"
    UNQUANTIZED_SKIP = "unquantized_skip"


class PoolStrategy(str, Enum):
    HIGH_PRECISION_REQUANT = "high_precision_requant"
    INTEGER_ARITHMETIC = "integer_arithmetic"


class FirstLastPolicy(str, Enum):
    QUANTIZE = "quantize"
    PIN_8BIT = "pin_8bit"


DEFAULT_WEIGHT_SPEC = QuantizerSpec(bits=8, symmetric=False, granularity=PerChannel(0))
DEFAULT_ACT_SPEC = QuantizerSpec(bits=8, symmetric=False, granularity=PerTensor())


class _Context:
    def __init__(self, model: "ModelGraph", mode: Mode, hook: Callable | None):
        self.mode = Mode(mode)
        self.hook = hook
        self.residual = model.residual_strategy
        self.pool = model.pool_strategy
        self.quantize_skip = model.skip_quantized()
        self.active = {q.name for q in model.activation_quantizers()}
        self.last_quantizer: Quantizer | None = None

    @property
    def quantized(self) -> bool:
        return self.mode is Mode.QUANTIZED

    def act(self, quantizer: Quantizer | None, x: Node) -> Node:
        if quantizer is None:
            return x
        if self.hook is not None:
            self.hook(quantizer, x.value)
        if not self.quantized or quantizer.name not in self.active:
            return x
        self.last_quantizer = quantizer
        return quantizer(x)

    def weight(self, quantizer: Quantizer, w: Node) -> Node:
        if self.hook is not None:
            self.hook(quantizer, w.value)
        return quantizer(w) if self.quantized else w


def _he_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Layer:
    kind = "Layer"

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> list[Parameter]:
        return []

    def quantizers(self) -> list[Quantizer]:
        return []

    def compute_layers(self) -> list["Layer"]:
        return []

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def forward(self, q: Node, hp: Node, ctx: _Context) -> tuple[Node, Node]:
        raise NotImplementedError


class _Compute(Layer):
    """Shared plumbing of Linear and Conv2d: weight, bias and two quantizers."""

    weight_axis = 0

    def __init__(self, name, weight_shape, fan_in, out_features, activation, quantize_output, rng):
        super().__init__(name)
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_he_init(rng, weight_shape, fan_in), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias")
        self.weight_quant = Quantizer(f"{name}.weight_quant", DEFAULT_WEIGHT_SPEC)
        self.act_quant = Quantizer(f"{name}.act_quant", DEFAULT_ACT_SPEC) if quantize_output else None

    def parameters(self):
        return [self.weight, self.bias]

    def quantizers(self):
        return [self.weight_quant] + ([self.act_quant] if self.act_quant else [])

    def compute_layers(self):
        return [self]

    def _linear_op(self, x: Node, w: Node) -> Node:
        raise NotImplementedError

    def pre_activation(self, x: Node, ctx: _Context) -> Node:
        w = ctx.weight(self.weight_quant, self.weight)
        y = self._linear_op(x, w)
        if self.activation == "relu":
            y = nc.relu(y)
        return y

    def forward(self, q, hp, ctx):
        y = self.pre_activation(q, ctx)
        return ctx.act(self.act_quant, y), y


class Linear(_Compute):
    kind = "Linear"

    def __init__(self, name, in_features, out_features, activation=None, quantize_output=True, rng=None):
        self.in_features, self.out_features = in_features, out_features
        super().__init__(name, (out_features, in_features), in_features, out_features,
                         activation, quantize_output, rng)

    def _linear_op(self, x, w):
        return nc.matmul(x, nc.transpose(w)) + nc.reshape(self.bias, (1, self.out_features))

    def describe(self):
        return {"kind": self.kind, "name": self.name, "in_features": self.in_features,
                "out_features": self.out_features, "activation": self.activation,
                "quantize_output": self.act_quant is not None}


class Conv2d(_Compute):
    kind = "Conv2d"

    def __init__(self, name, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 activation=None, quantize_output=True, rng=None):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        k = kernel_size
        super().__init__(name, (out_channels, in_channels, k, k), in_channels * k * k, out_channels,
                         activation, quantize_output, rng)

    def _linear_op(self, x, w):
        y = nc.conv2d(x, w, self.stride, self.padding)
        return y + nc.reshape(self.bias, (1, self.out_channels, 1, 1))

    def describe(self):
        return {"kind": self.kind, "name": self.name, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "stride": self.stride, "padding": self.padding, "activation": self.activation,
                "quantize_output": self.act_quant is not None}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, q, hp, ctx):
        return nc.relu(q), nc.relu(hp)


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, q, hp, ctx):
        n = q.shape[0]
        return nc.reshape(q, (n, -1)), nc.reshape(hp, (n, -1))


class AvgPool(Layer):
    """Global average pooling over the spatial axes, followed by requantization."""

    kind = "AvgPool"

    def __init__(self, name):
        super().__init__(name)
        self.act_quant = Quantizer(f"{name}.act_quant", DEFAULT_ACT_SPEC)

    def quantizers(self):
        return [self.act_quant]

    def forward(self, q, hp, ctx):
        hp_pooled = nc.mean(hp, axis=(2, 3))
        if ctx.residual is ResidualStrategy.UNQUANTIZED_SKIP:
            # the full-precision stream runs until the pool's own requantizer
            return ctx.act(self.act_quant, hp_pooled), hp_pooled
        source = ctx.last_quantizer if ctx.quantized else None
        if ctx.pool is PoolStrategy.INTEGER_ARITHMETIC and source is not None:
            pooled = _integer_mean(q, source.current_state())
        else:
            pooled = nc.mean(q, axis=(2, 3))
        return ctx.act(self.act_quant, pooled), hp_pooled


def _integer_mean(x: Node, state: QuantizerState) -> Node:
    """Spatial mean computed on integer levels with truncating division."""
    delta, zero = state.delta, state.zero_point
    levels = nc.round_ste(x / float(delta) + float(zero))
    count = x.shape[2] * x.shape[3]
    total = nc.sum_(levels, axis=(2, 3))
    avg = nc.floor_ste(total / float(count))
    return (avg - float(zero)) * float(delta)


class ResidualBlock(Layer):
    """Two 3x3 convolutions plus a skip path.

    The skip is the identity when shapes agree, otherwise a strided 1x1
    ``downsample`` convolution.  ``conv2.act_quant`` requantizes the residual
    branch before the add and ``downsample.act_quant`` requantizes the skip
    branch; ``out_quant`` requantizes the (post-ReLU) sum.
    """

    kind = "ResidualBlock"

    def __init__(self, name, in_channels, out_channels, stride=1, rng=None):
        super().__init__(name)
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, out_channels, 3, stride, 1, "relu", rng=rng)
        self.conv2 = Conv2d(f"{name}.conv2", out_channels, out_channels, 3, 1, 1, None, rng=rng)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = Conv2d(f"{name}.downsample", in_channels, out_channels, 1, stride, 0, None, rng=rng)
        self.out_quant = Quantizer(f"{name}.out_quant", DEFAULT_ACT_SPEC)

    def _children(self):
        return [c for c in (self.conv1, self.conv2, self.downsample) if c is not None]

    def parameters(self):
        return [p for c in self._children() for p in c.parameters()]

    def quantizers(self):
        return [q for c in self._children() for q in c.quantizers()] + [self.out_quant]

    def compute_layers(self):
        return self._children()

    def describe(self):
        return {"kind": self.kind, "name": self.name, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "stride": self.stride}

    def forward(self, q, hp, ctx):
        h, _ = self.conv1.forward(q, q, ctx)
        r_hp = self.conv2.pre_activation(h, ctx)
        r_q = ctx.act(self.conv2.act_quant, r_hp)
        source = hp if ctx.residual is ResidualStrategy.UNQUANTIZED_SKIP else q
        if self.downsample is not None:
            s_hp = self.downsample.pre_activation(source, ctx)
            s_q = ctx.act(self.downsample.act_quant, s_hp)
        else:
            s_hp = s_q = source
        branch = r_q if ctx.residual is ResidualStrategy.QUANTIZE_ALL else r_hp
        skip = s_q if ctx.quantize_skip else s_hp
        out_hp = nc.relu(branch + skip)
        return ctx.act(self.out_quant, out_hp), out_hp


LAYER_KINDS: dict[str, Callable[[dict], Layer]] = {
    "Linear": lambda d: Linear(d["name"], d["in_features"], d["out_features"], d["activation"],
                               d.get("quantize_output", True)),
    "Conv2d": lambda d: Conv2d(d["name"], d["in_channels"], d["out_channels"], d["kernel_size"],
                               d["stride"], d["padding"], d["activation"], d.get("quantize_output", True)),
    "ReLU": lambda d: ReLU(d["name"]),
    "Flatten": lambda d: Flatten(d["name"]),
    "AvgPool": lambda d: AvgPool(d["name"]),
    "ResidualBlock": lambda d: ResidualBlock(d["name"], d["in_channels"], d["out_channels"], d["stride"]),
}


class ModelGraph:
    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], *,
                 residual_strategy=ResidualStrategy.QUANTIZE_ALL,
                 pool_strategy=PoolStrategy.HIGH_PRECISION_REQUANT,
                 first_last_policy=FirstLastPolicy.PIN_8BIT,
                 quantize_skip: bool | None = None,
                 baseline_accuracy: float | None = None,
                 name: str = "model"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.residual_strategy = ResidualStrategy(residual_strategy)
        self.pool_strategy = PoolStrategy(pool_strategy)
        self.quantize_skip = quantize_skip
        self.baseline_accuracy = baseline_accuracy
        self.name = name
        self.calibration_info: dict = {}
        self.input_quant = Quantizer("input_quant", DEFAULT_ACT_SPEC)
        names = [p.name for p in self._param_iter()]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique")
        self.first_last_policy = FirstLastPolicy(first_last_policy)
        self.apply_first_last_policy()

    def _param_iter(self) -> Iterator[Parameter]:
        for layer in self.layers:
            yield from layer.parameters()

    def parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self._param_iter()}

    def compute_layers(self) -> list[_Compute]:
        return [c for layer in self.layers for c in layer.compute_layers()]

    def all_quantizers(self) -> list[Quantizer]:
        return [self.input_quant] + [q for layer in self.layers for q in layer.quantizers()]

    def quantizer(self, name: str) -> Quantizer:
        for q in self.all_quantizers():
            if q.name == name:
                return q
        raise KeyError(name)

    def weight_quantizers(self) -> list[Quantizer]:
        return [c.weight_quant for c in self.compute_layers()]

    def skip_quantized(self) -> bool:
        if self.quantize_skip is not None:
            return self.quantize_skip
        return self.residual_strategy is ResidualStrategy.QUANTIZE_ALL

    def activation_quantizers(self, active_only: bool = True) -> list[Quantizer]:
        """Activation quantizers in forward order; inactive ones dropped by default."""
        out = []
        if not active_only or self.first_last_policy is FirstLastPolicy.QUANTIZE:
            out.append(self.input_quant)
        for layer in self.layers:
            if isinstance(layer, ResidualBlock):
                out.append(layer.conv1.act_quant)
                if not active_only or self.residual_strategy is ResidualStrategy.QUANTIZE_ALL:
                    out.append(layer.conv2.act_quant)
                if layer.downsample is not None and (not active_only or self.skip_quantized()):
                    out.append(layer.downsample.act_quant)
                out.append(layer.out_quant)
            else:
                out.extend(q for q in layer.quantizers() if q.name.endswith("act_quant"))
        return out

    def first_last_quantizers(self) -> tuple[list[Quantizer], list[Quantizer]]:
        """(weight, activation) quantizers of the first and last layers.

        The first layer's activation quantizer is the input quantizer; the
        last layer's is the one feeding the classifier.
        """
        comp = self.compute_layers()
        acts = self.activation_quantizers(active_only=False)
        inner = [q for q in acts if q is not self.input_quant]
        # a single-layer model's classifier is fed by the input quantizer itself
        feeding_last = inner[-1] if inner else self.input_quant
        return [comp[0].weight_quant, comp[-1].weight_quant], [self.input_quant, feeding_last]

    def apply_first_last_policy(self, policy: FirstLastPolicy | None = None) -> None:
        if policy is not None:
            self.first_last_policy = FirstLastPolicy(policy)
        w, a = self.first_last_quantizers()
        pin = self.first_last_policy is FirstLastPolicy.PIN_8BIT
        for q in self.all_quantizers():
            q.pinned = False
        if pin:
            for q in w + a:
                q.pinned = True
                if q.spec.bits != 8:
                    q.set_spec(q.spec.with_(bits=8))

    def set_bits(self, weight_bits: int | None = None, act_bits: int | None = None,
                 include_pinned: bool = False) -> None:
        """Uniform bitwidths for weights and/or activations; pinned quantizers stay at 8."""
        if weight_bits is not None:
            for q in self.weight_quantizers():
                if include_pinned or not q.pinned:
                    q.set_spec(q.spec.with_(bits=int(weight_bits)))
        if act_bits is not None:
            for q in self.activation_quantizers(active_only=False):
                if include_pinned or not q.pinned:
                    q.set_spec(q.spec.with_(bits=int(act_bits)))

    def set_specs(self, weight_spec: QuantizerSpec | None = None, act_spec: QuantizerSpec | None = None) -> None:
        """Replace the spec of every weight/activation quantizer, keeping pins at 8 bits."""
        if weight_spec is not None:
            for q in self.weight_quantizers():
                q.set_spec(weight_spec.with_(bits=8) if q.pinned else weight_spec)
        if act_spec is not None:
            for q in self.activation_quantizers(active_only=False):
                q.set_spec(act_spec.with_(bits=8) if q.pinned else act_spec)

    def uncalibrated(self) -> list[str]:
        need = self.weight_quantizers() + self.activation_quantizers()
        return [q.name for q in need if not q.calibrated]

    def forward(self, x, mode: Mode | str = Mode.FLOAT, hook: Callable | None = None) -> Node:
        mode = Mode(mode)
        if mode is Mode.QUANTIZED:
            missing = self.uncalibrated()
            if missing:
                raise StateError(f"uncalibrated quantizers: {', '.join(missing)}")
        ctx = _Context(self, mode, hook)
        x = nc.const(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input shape (n, {self.input_shape}), got {x.shape}")
        q = ctx.act(self.input_quant, x)
        hp = x
        for layer in self.layers:
            q, hp = layer.forward(q, hp, ctx)
        return q

    __call__ = forward

    def feature_map_sizes(self) -> dict[str, int]:
        """Per-example element count seen by every quantizer (weights: tensor size)."""
        sizes: dict[str, int] = {}

        def hook(quantizer, value):
            sizes[quantizer.name] = int(value.size if quantizer.name.endswith("weight_quant")
                                        else value[0].size)

        with nc.no_grad():
            self.forward(np.zeros((1,) + self.input_shape), Mode.FLOAT, hook=hook)
        return sizes

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self._param_iter())

    def freeze(self, frozen: bool = True) -> None:
        for p in self._param_iter():
            p.requires_grad = not frozen

    def describe(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "residual_strategy": self.residual_strategy.value,
            "pool_strategy": self.pool_strategy.value,
            "first_last_policy": self.first_last_policy.value,
            "quantize_skip": self.quantize_skip,
            "baseline_accuracy": self.baseline_accuracy,
            "calibration": self.calibration_info,
            "layers": [layer.describe() for layer in self.layers],
        }

    def copy(self) -> "ModelGraph":
        return _rebuild(*_pack(self))


def build_toy_resnet(width: int = 8, depth_blocks: int = 2, classes: int = 4, *,
                     in_channels: int = 1, input_size: int = 8, seed: int = 0, **kw) -> ModelGraph:
    """Conv stem, ``depth_blocks`` residual blocks, global average pool, linear head.

    Block 0 keeps the stem width with an identity skip; every later block
    doubles the channels at stride 2 through a 1x1 downsample skip.
    """
    if width < 4 or depth_blocks < 1:
        raise ValueError("need width >= 4 and depth_blocks >= 1")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [Conv2d("stem", in_channels, width, 3, 1, 1, "relu", rng=rng)]
    c = width
    for i in range(depth_blocks):
        out_c = c if i == 0 else 2 * c
        layers.append(ResidualBlock(f"block{i}", c, out_c, 1 if i == 0 else 2, rng=rng))
        c = out_c
    layers.append(AvgPool("pool"))
    layers.append(Linear("fc", c, classes, None, quantize_output=False, rng=rng))
    return ModelGraph(layers, (in_channels, input_size, input_size), name="toy_resnet", **kw)


def build_toy_mlp(in_features: int, hidden: int = 32, classes: int = 2, depth: int = 4, *,
                  seed: int = 0, **kw) -> ModelGraph:
    """``depth`` linear layers with ReLU between them; the last is the classifier."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [in_features] + [hidden] * (depth - 1) + [classes]
    layers: list[Layer] = []
    for i in range(depth):
        last = i == depth - 1
        layers.append(Linear(f"fc{i + 1}", dims[i], dims[i + 1], None if last else "relu",
                             quantize_output=not last, rng=rng))
    return ModelGraph(layers, (in_features,), name="toy_mlp", **kw)


# -- serialization ----------------------------------------------------------

def _pack(model: ModelGraph):
    manifest = {"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "model": model.describe(),
                "quantizers": {}, "entries": []}
    arrays: list[tuple[str, np.ndarray]] = [(p.name, p.value) for p in model._param_iter()]
    for q in model.all_quantizers():
        info = {"spec": q.spec.to_dict(), "pinned": q.pinned, "state": None, "raw": q.raw_min is not None}
        if q.raw_min is not None:
            arrays += [(f"{q.name}.raw_min", q.raw_min), (f"{q.name}.raw_max", q.raw_max)]
        state = None
        if q.calibrated:
            try:
                state = q.current_state()
            except StateError:
                state = None
        if state is not None:
            info["state"] = {"bits": state.bits, "symmetric": state.symmetric}
            info["spec"]["bits"] = state.bits
            info["spec"]["range_mode"] = "static"
            arrays += [(f"{q.name}.x_min", state.x_min), (f"{q.name}.x_max", state.x_max)]
        manifest["quantizers"][q.name] = info
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest["entries"].append({"name": name, "shape": list(arr.shape), "offset": offset,
                                    "count": int(arr.size), "crc32": zlib.crc32(arr.tobytes())})
        offset += arr.size
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    manifest["blob_bytes"] = len(blob)
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    return manifest, blob


def _build_layer(d: dict, version) -> Layer:
    kind = d.get("kind")
    if kind not in LAYER_KINDS:
        raise ManifestError(f"{FORMAT_NAME} format version {version}: unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](d)


def _rebuild(manifest: dict, blob: bytes) -> ModelGraph:
    version = manifest.get("format_version")
    if manifest.get("format") != FORMAT_NAME or version != FORMAT_VERSION:
        raise ManifestError(f"unsupported model format {manifest.get('format')!r} version {version!r}")
    m = manifest["model"]
    layers = [_build_layer(d, version) for d in m["layers"]]
    model = ModelGraph(layers, tuple(m["input_shape"]), residual_strategy=m["residual_strategy"],
                       pool_strategy=m["pool_strategy"], first_last_policy=m["first_last_policy"],
                       quantize_skip=m["quantize_skip"], baseline_accuracy=m["baseline_accuracy"],
                       name=m["name"])
    model.calibration_info = dict(m.get("calibration") or {})
    if len(blob) != manifest["blob_bytes"]:
        raise CorruptModelError(f"blob has {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    data = np.frombuffer(blob, dtype="<f8")
    values = {}
    for e in manifest["entries"]:
        chunk = data[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"] or math.prod(e["shape"]) != e["count"]:
            raise CorruptModelError(f"entry {e['name']!r}: shape/size mismatch")
        if zlib.crc32(chunk.tobytes()) != e["crc32"]:
            raise CorruptModelError(f"entry {e['name']!r}: checksum mismatch")
        values[e["name"]] = chunk.reshape(e["shape"]).astype(np.float64)
    if "blob_sha256" in manifest and hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CorruptModelError("blob sha256 does not match the manifest")
    for name, p in model.parameters().items():
        if name not in values:
            raise CorruptModelError(f"entry {name!r}: missing from blob")
        if values[name].shape != p.shape:
            raise CorruptModelError(f"entry {name!r}: shape {values[name].shape} != expected {p.shape}")
        p.value = values[name].copy()
    by_name = {q.name: q for q in model.all_quantizers()}
    for name, info in manifest["quantizers"].items():
        if name not in by_name:
            raise ManifestError(f"format version {version}: unknown quantizer {name!r}")
        q = by_name[name]
        q.spec = QuantizerSpec.from_dict(info["spec"])
        q.pinned = bool(info["pinned"])
        if info["raw"]:
            q.raw_min, q.raw_max = values[f"{name}.raw_min"], values[f"{name}.raw_max"]
        if info["state"] is not None:
            q.state = QuantizerState(values[f"{name}.x_min"], values[f"{name}.x_max"],
                                     info["state"]["bits"], info["state"]["symmetric"])
    return model


def save_model(model: ModelGraph, path) -> tuple[Path, Path]:
    """Write ``<path>`` (JSON manifest) and ``<path stem>.bin`` (little-endian float64)."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    manifest, blob = _pack(model)
    blob_path = path.with_suffix(".bin")
    manifest["blob"] = blob_path.name
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path, blob_path


def load_model(path) -> ModelGraph:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not a valid manifest ({e})") from None
    blob_path = path.parent / manifest.get("blob", path.with_suffix(".bin").name)
    return _rebuild(manifest, blob_path.read_bytes())
