"""Independent reference implementations used by the tests.

Nothing here calls into the package's quantization or autodiff code: the
oracles are brute force (exhaustive grid search, full sorts, explicit loops,
central differences) so a shared bug cannot hide on both sides.
"""

import math
from fractions import Fraction

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-6, idx=None) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps the array to a float.

    ``idx`` restricts the estimate to a list of flat indices (others are 0).
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in (range(flat.size) if idx is None else idx):
        old = flat[i]
        flat[i] = old + h
        hi = f(x)
        flat[i] = old - h
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def brute_quantize(x, x_min: float, x_max: float, bits: int, symmetric: bool) -> np.ndarray:
    """Nearest representable value by searching every grid point.

    The grid is ``delta * (k - z)`` over the integer levels ``k``; a tie
    between two grid points goes to the level of larger magnitude.
    """
    x = np.asarray(x, dtype=np.float64)
    n = 2 ** bits - 1
    delta = (x_max - x_min) / n
    if symmetric:
        levels = np.arange(-(2 ** (bits - 1) - 1), 2 ** (bits - 1))
        z = 0
    else:
        levels = np.arange(0, n + 1)
        zr = -x_min / delta
        z = min(max(math.floor(zr + 0.5) if zr >= 0 else -math.floor(-zr + 0.5), 0), n)
    grid = delta * (levels - z)
    d = np.abs(x[..., None] - grid)
    best = d.min(axis=-1, keepdims=True)
    tied = np.isclose(d, best, rtol=0, atol=1e-12 * max(delta, 1e-300))
    # ties go to the level farther from zero in level space
    choice = np.where(tied, np.abs(levels), -np.inf).argmax(axis=-1)
    return grid[choice]


def nearest_rank_oracle(values, percent: float) -> float:
    """Nearest-rank percentile from a full sort with exact rank arithmetic."""
    v = sorted(float(a) for a in np.asarray(values).ravel())
    n = len(v)
    k = math.ceil(Fraction(repr(float(percent))) * n / 100)
    return v[min(max(k, 1), n) - 1]


def weighted_mean_bits(bits: dict, sizes: dict, skip=()) -> float:
    num = den = 0
    for name in bits:
        if name in skip:
            continue
        num += bits[name] * sizes[name]
        den += sizes[name]
    return num / den


def minmax_mse_per_tensor(w, bits: int) -> float:
    """MSE of asymmetric min/max quantization with one range for the tensor."""
    lo, hi = min(w.min(), 0.0), max(w.max(), 0.0)
    q = brute_quantize(w, lo, hi, bits, False)
    return float(np.mean((q - w) ** 2))


def minmax_mse_per_channel(w, bits: int) -> float:
    """Same, with one range per slice along axis 0."""
    err = 0.0
    for c in range(w.shape[0]):
        ch = w[c]
        lo, hi = min(ch.min(), 0.0), max(ch.max(), 0.0)
        err += float(np.sum((brute_quantize(ch, lo, hi, bits, False) - ch) ** 2))
    return err / w.size


def adam_reference(grads_seq, x0, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam with bias correction, one scalar parameter, explicit loop."""
    x, m, v = float(x0), 0.0, 0.0
    out = []
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x -= lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def conv2d_loops(x, w, stride=1, padding=0):
    """Direct nested-loop convolution (cross-correlation), NCHW / OIHW."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, k, i, j] = np.sum(patch * w[k])
    return out
