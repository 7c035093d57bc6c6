"""Differentiable primitives on dense 5-D volumes.

Every activation and gradient is a plain ``numpy.ndarray`` laid out as
``(batch, channels, depth, height, width)``.  Forward functions are pure; each
has a matching ``*_backward`` returning gradients for its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Sequence

import numpy as np

PRELU_INIT = 0.25

# Upper bound on elements of the stacked per-tap GEMM result; larger inputs are
# processed in depth slabs.
_GEMM_BUDGET = 1 << 24


@dataclass
class ConvKernelBank:
    """Weights, bias and PReLU slopes for one convolutional layer.

    ``slopes`` is ``None`` for layers without an activation (the classifier).
    """

    weights: np.ndarray
    bias: np.ndarray
    slopes: np.ndarray | None = None

    def __post_init__(self):
        if self.weights.ndim != 5:
            raise ValueError(f"weights must be 5-D, got shape {self.weights.shape}")
        co, _, kd, kh, kw = self.weights.shape
        if not (kd == kh == kw) or kd not in (1, 3):
            raise ValueError(f"kernel must be 1^3 or 3^3, got {self.weights.shape[2:]}")
        if self.bias.shape != (co,):
            raise ValueError(f"bias shape {self.bias.shape} != ({co},)")
        if self.slopes is not None and self.slopes.shape != (co,):
            raise ValueError(f"slopes shape {self.slopes.shape} != ({co},)")

    @classmethod
    def zeros(cls, c_out, c_in, k, activation=True, dtype=np.float64):
        return cls(
            np.zeros((c_out, c_in, k, k, k), dtype=dtype),
            np.zeros(c_out, dtype=dtype),
            np.full(c_out, PRELU_INIT, dtype=dtype) if activation else None,
        )

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"weights": self.weights, "bias": self.bias}
        if self.slopes is not None:
            out["slopes"] = self.slopes
        return out


@dataclass
class GradientBundle:
    """Gradients mirroring a :class:`ConvKernelBank`, plus the input gradient."""

    weights: np.ndarray
    bias: np.ndarray
    slopes: np.ndarray | None = None
    input: np.ndarray | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"weights": self.weights, "bias": self.bias}
        if self.slopes is not None:
            out["slopes"] = self.slopes
        return out


def _check_volume(x, name="input"):
    if x.ndim != 5:
        raise ValueError(f"{name} must be 5-D (N, C, D, H, W), got shape {x.shape}")


def _check_conv_args(x, weights):
    _check_volume(x)
    if x.shape[1] != weights.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, kernels expect {weights.shape[1]}"
        )
    k = weights.shape[2]
    if min(x.shape[2:]) < k:
        raise ValueError(f"spatial dims {x.shape[2:]} smaller than kernel size {k}")


def _taps(k):
    return list(product(range(k), repeat=3))


def _stack_taps(weights):
    """(Co, C, k, k, k) -> (k^3 * Co, C), tap-major."""
    co, c, k = weights.shape[:3]
    return weights.reshape(co, c, k ** 3).transpose(2, 0, 1).reshape(k ** 3 * co, c)


def conv3d_valid(x, weights, bias=None, method="gemm"):
    """Stride-1, unpadded 3-D convolution (cross-correlation) plus bias.

    ``method="direct"`` selects the tap-by-tap reference implementation.
    """
    _check_conv_args(x, weights)
    if method == "direct":
        out = _conv_direct(x, weights)
    elif method == "gemm":
        out = _conv_gemm(x, weights)
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


def _conv_direct(x, weights):
    n, c, d, h, w = x.shape
    co, _, k = weights.shape[:3]
    od, oh, ow = d - k + 1, h - k + 1, w - k + 1
    out = np.zeros((n, co, od, oh, ow), dtype=np.result_type(x, weights))
    for a, b, e in _taps(k):
        window = x[:, :, a:a + od, b:b + oh, e:e + ow]
        for o in range(co):
            for ci in range(c):
                out[:, o] += weights[o, ci, a, b, e] * window[:, ci]
    return out


def _conv_gemm(x, weights):
    # One GEMM against all taps stacked along the output axis, then k^3 shifted
    # adds over Co-channel arrays.  Cheaper than im2col whenever Co < C.
    n, c, d, h, w = x.shape
    co, _, k = weights.shape[:3]
    od, oh, ow = d - k + 1, h - k + 1, w - k + 1
    dtype = np.result_type(x, weights)
    if k == 1:
        flat = np.matmul(weights.reshape(co, c), x.reshape(n, c, -1))
        return flat.reshape(n, co, d, h, w)
    k3 = k ** 3
    stacked = _stack_taps(weights)
    out = np.empty((n, co, od, oh, ow), dtype=dtype)
    per_plane = n * k3 * co * h * w
    slab = max(1, _GEMM_BUDGET // per_plane - (k - 1))
    taps = _taps(k)
    for z0 in range(0, od, slab):
        z1 = min(od, z0 + slab)
        depth = z1 - z0 + k - 1
        xs = np.ascontiguousarray(x[:, :, z0:z0 + depth]).reshape(n, c, -1)
        y = np.matmul(stacked, xs).reshape(n, k3, co, depth, h, w)
        acc = out[:, :, z0:z1]
        acc[...] = y[:, 0, :, :z1 - z0, :oh, :ow]
        for t, (a, b, e) in enumerate(taps[1:], start=1):
            acc += y[:, t, :, a:a + z1 - z0, b:b + oh, e:e + ow]
    return out


def conv3d_backward(x, weights, grad_out):
    """Adjoint of :func:`conv3d_valid`: returns ``(d_input, d_weights, d_bias)``."""
    _check_conv_args(x, weights)
    n, c, d, h, w = x.shape
    co, _, k = weights.shape[:3]
    od, oh, ow = d - k + 1, h - k + 1, w - k + 1
    if grad_out.shape != (n, co, od, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(n, co, od, oh, ow)}")
    db = grad_out.sum(axis=(0, 2, 3, 4))
    xf = x.reshape(n, c, -1)
    if k == 1:
        g = grad_out.reshape(n, co, -1)
        dw = sum(g[i] @ xf[i].T for i in range(n)).reshape(weights.shape)
        dx = np.matmul(weights.reshape(co, c).T, g).reshape(x.shape)
        return dx, dw, db
    k3 = k ** 3
    dy = np.zeros((n, k3, co, d, h, w), dtype=grad_out.dtype)
    for t, (a, b, e) in enumerate(_taps(k)):
        dy[:, t, :, a:a + od, b:b + oh, e:e + ow] = grad_out
    dy = dy.reshape(n, k3 * co, -1)
    dstack = sum(dy[i] @ xf[i].T for i in range(n))
    dw = dstack.reshape(k3, co, c).transpose(1, 2, 0).reshape(weights.shape)
    dx = np.matmul(_stack_taps(weights).T, dy).reshape(x.shape)
    return dx, dw, db


def prelu(x, slopes):
    if slopes.shape != (x.shape[1],):
        raise ValueError(f"{slopes.shape[0]} slopes for {x.shape[1]} channels")
    a = slopes.reshape((1, -1) + (1,) * (x.ndim - 2))
    return np.where(x >= 0, x, a * x)


def prelu_backward(x, slopes, grad_out):
    """Returns ``(d_input, d_slopes)``."""
    neg = x < 0
    a = slopes.reshape((1, -1) + (1,) * (x.ndim - 2))
    dx = np.where(neg, a * grad_out, grad_out)
    axes = (0,) + tuple(range(2, x.ndim))
    dslopes = np.where(neg, x * grad_out, 0).sum(axis=axes)
    return dx, dslopes


def dropout_mask(shape, rate, seed, dtype=np.float64):
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    dtype = np.dtype(dtype)
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    rng = np.random.default_rng(seed)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * dtype.type(1.0 / (1.0 - rate))


def dropout(x, rate, mode="train", seed=0):
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "inference" or rate == 0:
        return x.copy()
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    return x * dropout_mask(x.shape, rate, seed, x.dtype)


def channel_concat(parts: Sequence[np.ndarray], order: Sequence[int] | None = None):
    """Concatenate along channels, taking ``parts`` in ``order`` (default: as given)."""
    if not parts:
        raise ValueError("nothing to concatenate")
    order = list(range(len(parts))) if order is None else list(order)
    if sorted(order) != list(range(len(parts))):
        raise ValueError(f"order {order} is not a permutation of {len(parts)} parts")
    ref = parts[order[0]]
    for i in order:
        p = parts[i]
        if p.shape[0] != ref.shape[0] or p.shape[2:] != ref.shape[2:]:
            raise ValueError(f"part {i} shape {p.shape} incompatible with {ref.shape}")
    return np.concatenate([parts[i] for i in order], axis=1)


def channel_split(grad, sizes: Sequence[int], order: Sequence[int] | None = None):
    """Adjoint of :func:`channel_concat`; returns gradients indexed like ``parts``."""
    order = list(range(len(sizes))) if order is None else list(order)
    if grad.shape[1] != sum(sizes):
        raise ValueError(f"gradient has {grad.shape[1]} channels, parts total {sum(sizes)}")
    out: list = [None] * len(sizes)
    start = 0
    for i in order:
        out[i] = grad[:, start:start + sizes[i]]
        start += sizes[i]
    return out


def center_crop(x, size: Sequence[int]):
    """Crop spatial dims of a 5-D volume to ``size`` around the center."""
    sl = [slice(None), slice(None)]
    for have, want in zip(x.shape[2:], size):
        m = have - want
        if m < 0 or m % 2:
            raise ValueError(f"cannot center-crop {x.shape[2:]} to {tuple(size)}")
        sl.append(slice(m // 2, m // 2 + want))
    return x[tuple(sl)]


def center_crop_backward(grad, full_shape):
    out = np.zeros(full_shape, dtype=grad.dtype)
    sl = [slice(None), slice(None)]
    for have, want in zip(full_shape[2:], grad.shape[2:]):
        m = (have - want) // 2
        sl.append(slice(m, m + want))
    out[tuple(sl)] = grad
    return out


def voxel_softmax(logits):
    _check_volume(logits, "logits")
    if logits.shape[1] < 2:
        raise ValueError("softmax needs at least 2 channels")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(probs, labels):
    """Mean negative log-likelihood of the true class over all segments and voxels.

    ``labels`` has shape ``(N, D, H, W)``.  Returns ``(loss, d_logits)`` where
    ``d_logits`` is the gradient with respect to the pre-softmax logits.
    """
    _check_volume(probs, "probs")
    n, c = probs.shape[:2]
    labels = np.asarray(labels)
    if labels.shape != (n,) + probs.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    lab = labels.astype(np.intp)[:, None]
    p_true = np.take_along_axis(probs, lab, axis=1)
    tiny = np.finfo(probs.dtype).tiny
    count = labels.size
    loss = float(-np.log(np.maximum(p_true, tiny)).sum() / count)
    grad = probs.copy()
    np.put_along_axis(grad, lab, p_true - 1, axis=1)
    grad /= count
    return loss, grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    per_array: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    loss_fn: Callable[[], float],
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    tolerance=1e-5,
    step=1e-5,
    floor=1e-6,
    wide_step=1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` is re-evaluated after perturbing each element of each array in
    place.  The relative error of an entry is ``|num - ana| / max(|num|, |ana|, floor)``.
    Each entry is first checked with a 3-point stencil at ``step``.  Small steps
    lose tiny gradients to round-off while large steps can straddle a PReLU kink,
    so an entry that misses ``tolerance`` is re-estimated with a 5-point stencil
    at ``wide_step`` and the closer of the two estimates is kept.
    """
    def diff(flat, i, old, h):
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        return up - down

    def rel(num, ana):
        return abs(num - ana) / max(abs(num), abs(ana), floor)

    worst = 0.0
    per_array = {}
    checked = 0
    for name, arr in arrays.items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {arr.shape}")
        local = 0.0
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            ana = float(gflat[i])
            num = diff(flat, i, old, step) / (2 * step)
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise FloatingPointError(f"non-finite gradient at {name}[{i}]")
            err = rel(num, ana)
            if err > tolerance and wide_step:
                wide = (8 * diff(flat, i, old, wide_step)
                        - diff(flat, i, old, 2 * wide_step)) / (12 * wide_step)
                err = min(err, rel(wide, ana))
            checked += 1
            local = max(local, err)
        per_array[name] = local
        worst = max(worst, local)
    return GradCheckReport(worst, tolerance, checked, per_array)
