"""Uniform quantizers: specification, calibration observers and fake quantization.

A value ``x`` in ``[x_min, x_max]`` is mapped to integer level
``round(x / delta + zero_point)`` with ``delta = (x_max - x_min) / (2**B - 1)``
and dequantized back to ``delta * (level - zero_point)``.  Asymmetric
quantizers use unsigned levels ``0 .. 2**B - 1``; symmetric quantizers force
``x_min == -x_max`` and use the restricted signed levels
``-(2**(B-1) - 1) .. 2**(B-1) - 1`` so that the scale formula holds for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Union

import numpy as np

from . import numcore as nc
from .errors import CalibrationError, ContractError, InvalidRangeError, StateError
from .numcore import Node, Parameter, Tensor

STATIC = "static"
LEARNED = "learned"


@dataclass(frozen=True)
class PerTensor:
    def to_dict(self):
        return {"kind": "per_tensor"}


@dataclass(frozen=True)
class PerChannel:
    axis: int = 0

    def to_dict(self):
        return {"kind": "per_channel", "axis": self.axis}


Granularity = Union[PerTensor, PerChannel]


def granularity_from_dict(d: dict) -> Granularity:
    if d["kind"] == "per_tensor":
        return PerTensor()
    if d["kind"] == "per_channel":
        return PerChannel(int(d["axis"]))
    raise ValueError(f"unknown granularity {d['kind']!r}")


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int | str = 8
    symmetric: bool = False
    granularity: Granularity = field(default_factory=PerTensor)
    range_mode: str = STATIC

    def __post_init__(self):
        if self.bits != LEARNED:
            if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 32:
                raise ValueError(f"bits must be an integer in [2, 32] or 'learned', got {self.bits!r}")
            object.__setattr__(self, "bits", int(self.bits))
        if self.range_mode not in (STATIC, LEARNED):
            raise ValueError(f"unknown range_mode {self.range_mode!r}")
        if self.range_mode == LEARNED and not isinstance(self.granularity, PerTensor):
            raise ValueError("learned min/max ranges are only supported per tensor")

    @property
    def signed(self) -> bool:
        return self.symmetric

    @property
    def per_channel(self) -> bool:
        return isinstance(self.granularity, PerChannel)

    def with_(self, **kw) -> "QuantizerSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "symmetric": self.symmetric,
            "granularity": self.granularity.to_dict(),
            "range_mode": self.range_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerSpec":
        return cls(bits=d["bits"], symmetric=bool(d["symmetric"]),
                   granularity=granularity_from_dict(d["granularity"]), range_mode=d["range_mode"])


@dataclass
class QuantizerState:
    """Finalized range of a quantizer.

    ``x_min``/``x_max`` are scalars or keepdims per-channel arrays in data
    units.  ``delta`` and ``zero_point`` are derived.
    """

    x_min: Tensor
    x_max: Tensor
    bits: int
    symmetric: bool = False

    def __post_init__(self):
        self.x_min = nc.as_tensor(self.x_min)
        self.x_max = nc.as_tensor(self.x_max)
        self.bits = int(self.bits)

    @property
    def levels(self) -> int:
        return 2 ** self.bits - 1

    @property
    def delta(self) -> Tensor:
        return (self.x_max - self.x_min) / self.levels

    @property
    def zero_point(self) -> Tensor:
        if self.symmetric:
            return np.zeros_like(self.x_min)
        return np.clip(nc.round_half_away(-self.x_min / self.delta), 0, self.levels)

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else self.levels


# -- observers --------------------------------------------------------------

def _channel_view(x: Tensor, axis: int | None) -> Tensor:
    x = nc.as_tensor(x)
    if axis is None:
        return x.reshape(1, -1)
    return np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)


def _keepdims_shape(ndim: int, axis: int | None, channels: int) -> tuple:
    if axis is None:
        return ()
    shape = [1] * ndim
    shape[axis] = channels
    return tuple(shape)


def nearest_rank(sorted_values: Tensor, percent: float) -> Tensor:
    """Nearest-rank percentile along the last axis of pre-sorted data.

    The rank is ``ceil(percent/100 * N)`` computed in exact rational
    arithmetic, clipped to ``[1, N]``.
    """
    n = sorted_values.shape[-1]
    k = math.ceil(Fraction(repr(float(percent))) * n / 100)
    k = min(max(k, 1), n)
    return sorted_values[..., k - 1]


class MinMaxObserver:
    kind = "minmax"

    def __init__(self, axis: int | None = None):
        self.axis = axis
        self._lo = self._hi = None
        self._ndim = None

    def update(self, x) -> None:
        x = nc.as_tensor(x)
        if x.size == 0:
            return
        v = _channel_view(x, self.axis)
        lo, hi = v.min(axis=1), v.max(axis=1)
        if self._lo is None:
            self._lo, self._hi, self._ndim = lo, hi, x.ndim
        else:
            self._lo, self._hi = np.minimum(self._lo, lo), np.maximum(self._hi, hi)

    def range(self) -> tuple[Tensor, Tensor]:
        if self._lo is None:
            raise CalibrationError("observer saw no data")
        shape = _keepdims_shape(self._ndim, self.axis, self._lo.size)
        return self._lo.reshape(shape), self._hi.reshape(shape)


class PercentileObserver:
    """Pools every observed sample and clips at a nearest-rank percentile.

    The upper bound is the ``p``-th percentile.  The lower bound is the
    ``(100 - p)``-th percentile for signed data and the minimum for data that
    is entirely nonnegative (post-ReLU activations).
    """

    kind = "percentile"

    def __init__(self, percentile: float = 99.99, axis: int | None = None):
        if not 0 < percentile <= 100:
            raise ValueError(f"percentile must be in (0, 100], got {percentile}")
        self.percentile = float(percentile)
        self.axis = axis
        self._chunks: list[Tensor] = []
        self._ndim = None

    def update(self, x) -> None:
        x = nc.as_tensor(x)
        if x.size == 0:
            return
        self._ndim = x.ndim
        self._chunks.append(_channel_view(x, self.axis))

    def range(self) -> tuple[Tensor, Tensor]:
        if not self._chunks:
            raise CalibrationError("observer saw no data")
        pooled = np.sort(np.concatenate(self._chunks, axis=1), axis=1)
        hi = nearest_rank(pooled, self.percentile)
        lo = np.where(pooled[:, 0] >= 0, pooled[:, 0], nearest_rank(pooled, 100.0 - self.percentile))
        shape = _keepdims_shape(self._ndim, self.axis, pooled.shape[0])
        return lo.reshape(shape), hi.reshape(shape)


def make_observer(kind: str, percentile: float = 99.99, axis: int | None = None):
    if kind == "minmax":
        return MinMaxObserver(axis)
    if kind == "percentile":
        return PercentileObserver(percentile, axis)
    raise ValueError(f"unknown observer kind {kind!r}")


def calibrate(observer, batches: Iterable) -> tuple[Tensor, Tensor]:
    """Feed ``batches`` to ``observer`` and return its range widened to contain 0."""
    seen = False
    for b in batches:
        b = nc.as_tensor(b)
        if b.size:
            observer.update(b)
            seen = True
    if not seen:
        raise CalibrationError("calibration needs at least one non-empty batch")
    lo, hi = observer.range()
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


# -- range finalization -----------------------------------------------------

def finalize_range(x_min_raw, x_max_raw, spec: QuantizerSpec, bits: int | None = None) -> QuantizerState:
    """Turn a raw range into a quantizer state whose grid contains zero exactly.

    Symmetric ranges become ``[-m, m]`` with ``m`` the larger magnitude.
    Asymmetric ranges are widened outward by the smallest scale that puts
    zero on a grid point, so no calibrated value is clipped by the nudge.
    """
    bits = spec.bits if bits is None else int(bits)
    if bits == LEARNED:
        raise ContractError("finalize_range needs a concrete bitwidth")
    lo = np.array(x_min_raw, dtype=np.float64)
    hi = np.array(x_max_raw, dtype=np.float64)
    if np.any(lo > hi):
        raise InvalidRangeError(f"x_min {lo} exceeds x_max {hi}")
    # empty ranges and ranges below float resolution (or near underflow) count as degenerate
    flat = (hi - lo) <= np.maximum(np.maximum(np.abs(lo), np.abs(hi)) * 4 * np.finfo(np.float64).eps, 1e-290)
    if np.any(flat):
        eps = np.maximum(np.abs(lo), 1.0) * 1e-8
        lo = np.where(flat, lo - eps, lo)
        hi = np.where(flat, hi + eps, hi)
    lo, hi = np.minimum(lo, 0.0), np.maximum(hi, 0.0)

    if spec.symmetric:
        m = np.maximum(-lo, hi)
        return QuantizerState(-m, m, bits, symmetric=True)

    n = 2.0 ** bits - 1
    z_real = -lo / ((hi - lo) / n)
    best_delta = np.full(lo.shape, np.inf)
    best_z = np.zeros(lo.shape)
    # a side with nonzero extent needs at least one level on that side of zero
    z_lo = np.where(lo < 0, 1.0, 0.0)
    z_hi = np.where(hi > 0, n - 1, n)
    for z in (np.floor(z_real), np.ceil(z_real)):
        z = np.clip(z, z_lo, z_hi)
        ok = ((z > 0) | (lo == 0)) & ((z < n) | (hi == 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            d_lo = np.where(z > 0, -lo / z, 0.0)
            d_hi = np.where(z < n, hi / (n - z), 0.0)
        d = np.where(ok, np.maximum(d_lo, d_hi), np.inf)
        better = d < best_delta
        best_delta = np.where(better, d, best_delta)
        best_z = np.where(better, z, best_z)
    return QuantizerState(-best_z * best_delta, (n - best_z) * best_delta, bits, symmetric=False)


# -- fake quantization ------------------------------------------------------

def quantize_graph(x: Node, lo: Node, hi: Node, bits: Node, symmetric: bool) -> Node:
    """Differentiable fake quantization of ``x`` on the grid spanned by ``[lo, hi]``.

    The scale is built from detached range values so range parameters only
    receive the clamp-boundary gradient; the bitwidth receives gradient
    through ``pow2`` in the scale.
    """
    levels = nc.pow2(bits) - 1.0
    delta = (nc.detach(hi) - nc.detach(lo)) / levels
    if symmetric:
        zero = nc.const(0.0)
        qmax = (levels - 1.0) * 0.5
        qmin = -qmax
    else:
        zero = nc.round_ste(-nc.detach(lo) / delta)
        qmin, qmax = nc.const(0.0), levels
    xc = nc.clamp(x, lo, hi)
    q = nc.clamp(nc.round_ste(xc / delta + zero), qmin, qmax)
    return delta * (q - zero)


def fake_quantize(x, state: QuantizerState | None, spec: QuantizerSpec) -> Node:
    if state is None:
        raise ContractError("fake_quantize: quantizer state has not been finalized")
    return quantize_graph(nc.const(x), nc.const(state.x_min), nc.const(state.x_max),
                          nc.const(float(state.bits)), spec.symmetric)


def quantization_mse(x, spec: QuantizerSpec, state: QuantizerState) -> float:
    x = nc.as_tensor(x)
    with nc.no_grad():
        xq = fake_quantize(x, state, spec).value
    return float(np.mean((xq - x) ** 2))


def minmax_state(x, spec: QuantizerSpec, bits: int | None = None) -> QuantizerState:
    """Calibrate with min/max over ``x`` itself and finalize."""
    axis = spec.granularity.axis if spec.per_channel else None
    lo, hi = calibrate(MinMaxObserver(axis), [x])
    return finalize_range(lo, hi, spec, bits)


def bits_saved_asymmetric(w_min: float, w_max: float) -> float:
    """Bits an asymmetric range saves over a symmetric one for the same bin width."""
    if not w_min < w_max:
        raise InvalidRangeError(f"need w_min < w_max, got ({w_min}, {w_max})")
    return math.log2(2.0 * max(w_max, -w_min) / (w_max - w_min))


def model_bits_saved(ranges: Iterable[tuple[float, float]], sizes: Iterable[int]) -> float:
    """Size-weighted mean of :func:`bits_saved_asymmetric` over layers."""
    ranges, sizes = list(ranges), np.asarray(list(sizes), dtype=np.float64)
    saved = np.array([bits_saved_asymmetric(lo, hi) for lo, hi in ranges])
    return float((saved * sizes).sum() / sizes.sum())


# -- stateful quantizer attached to a model ---------------------------------

def _default_projection(b: Tensor) -> Tensor:
    return np.clip(nc.round_half_away(b), 2, 32)


class Quantizer:
    """A named attachment point holding spec, calibrated range and learnables.

    ``raw_min``/``raw_max`` keep the calibrated range so the state can be
    re-finalized when the bitwidth changes.  When the spec asks for learned
    bits or a learned range, :meth:`make_learnable` creates the parameters.
    """

    def __init__(self, name: str, spec: QuantizerSpec | None = None):
        self.name = name
        self.spec = spec or QuantizerSpec()
        self.raw_min: Tensor | None = None
        self.raw_max: Tensor | None = None
        self.state: QuantizerState | None = None
        self.observer = None
        self.bits_param: Parameter | None = None
        self.min_param: Parameter | None = None
        self.max_param: Parameter | None = None
        self.project: Callable[[Tensor], Tensor] = _default_projection
        self.pinned = False

    def __repr__(self):
        return f"Quantizer({self.name!r}, bits={self.spec.bits})"

    @property
    def calibrated(self) -> bool:
        return self.raw_min is not None

    # calibration
    def begin_calibration(self, kind: str = "minmax", percentile: float = 99.99):
        axis = self.spec.granularity.axis if self.spec.per_channel else None
        self.observer = make_observer(kind, percentile, axis)

    def observe(self, values) -> None:
        if self.observer is not None:
            self.observer.update(values)

    def finish_calibration(self) -> None:
        if self.observer is None:
            raise CalibrationError(f"{self.name}: calibration was never started")
        lo, hi = self._observer_range()
        self.observer = None
        self.set_range(lo, hi)

    def _observer_range(self):
        try:
            lo, hi = self.observer.range()
        except CalibrationError as e:
            raise CalibrationError(f"{self.name}: {e}") from None
        return np.minimum(lo, 0.0), np.maximum(hi, 0.0)

    def set_range(self, lo, hi) -> None:
        self.raw_min, self.raw_max = nc.as_tensor(lo), nc.as_tensor(hi)
        self.refresh()

    def refresh(self) -> None:
        """Recompute the state from the raw range and the current spec."""
        if self.raw_min is not None and self.spec.per_channel and np.ndim(self.raw_min) == 0:
            # a per-tensor range cannot be split into channels
            self.raw_min = self.raw_max = self.state = None
        if self.raw_min is None or self.spec.bits == LEARNED:
            return
        lo, hi = self.raw_min, self.raw_max
        if not self.spec.per_channel and np.ndim(lo) > 0:
            lo, hi = np.min(lo), np.max(hi)
        self.state = finalize_range(lo, hi, self.spec)

    def set_spec(self, spec: QuantizerSpec) -> None:
        self.spec = spec
        self.bits_param = self.min_param = self.max_param = None
        self.refresh()

    def set_state(self, state: QuantizerState) -> None:
        """Install a state verbatim (no re-nudging), e.g. after learning."""
        self.spec = self.spec.with_(bits=state.bits, range_mode=STATIC)
        self.bits_param = self.min_param = self.max_param = None
        self.raw_min, self.raw_max = state.x_min.copy(), state.x_max.copy()
        self.state = state

    # learning
    def make_learnable(self, init_bits: float = 8.0, project: Callable | None = None) -> list[Parameter]:
        if not self.calibrated:
            raise StateError(f"{self.name}: calibrate before making it learnable")
        params = []
        if project is not None:
            self.project = project
        if self.spec.bits == LEARNED:
            self.bits_param = Parameter(float(init_bits), f"{self.name}.bits")
            params.append(self.bits_param)
        if self.spec.range_mode == LEARNED:
            self.max_param = Parameter(float(np.max(self.raw_max)), f"{self.name}.x_max")
            params.append(self.max_param)
            if not self.spec.symmetric:
                self.min_param = Parameter(float(np.min(self.raw_min)), f"{self.name}.x_min")
                params.append(self.min_param)
        return params

    def current_bits(self) -> int:
        if self.bits_param is not None:
            return int(self.project(self.bits_param.value))
        if self.state is not None:
            return self.state.bits
        if self.spec.bits == LEARNED:
            raise StateError(f"{self.name}: learned bits without a parameter")
        return int(self.spec.bits)

    def current_range(self) -> tuple[Tensor, Tensor]:
        if self.max_param is not None:
            hi = self.max_param.value.copy()
            lo = -hi if self.min_param is None else self.min_param.value.copy()
            return lo, hi
        if self.state is not None:
            return self.state.x_min, self.state.x_max
        return self.raw_min, self.raw_max

    def current_state(self) -> QuantizerState:
        """Snapshot of what the forward pass would use right now."""
        lo, hi = self.current_range()
        bits = self.current_bits()
        if self.bits_param is None and self.max_param is None:
            return self.state
        return QuantizerState(lo, hi, bits, self.spec.symmetric)

    def __call__(self, x: Node) -> Node:
        if self.bits_param is None and self.max_param is None:
            if self.state is None:
                raise StateError(f"quantizer {self.name!r} is not calibrated")
            return fake_quantize(x, self.state, self.spec)
        if self.bits_param is not None:
            bits = nc.ste(self.bits_param, self.project, "project_bits")
        else:
            bits = nc.const(float(self.current_bits()))
        if self.max_param is not None:
            hi = self.max_param
            lo = -hi if self.min_param is None else self.min_param
        else:
            lo, hi = nc.const(self.raw_min), nc.const(self.raw_max)
        return quantize_graph(x, lo, hi, bits, self.spec.symmetric)
