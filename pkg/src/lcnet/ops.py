"""Forward kernels for every layer type in the network.

Convolution comes in two flavours.  :func:`conv2d_naive` sums each output
element directly over its receptive field and serves as the oracle;
:func:`conv2d_fast` lowers to GEMM (standard and pointwise) or to a
tap-by-tap shifted multiply-add (depthwise).  The fast path splits work into
chunks whose boundaries depend only on tensor shapes, never on the worker
count, so results are bit-identical for any number of workers.

All kernels preserve the floating dtype of their inputs, which lets the
gradient checker run the same code in float64.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from .errors import DegenerateBatchError, ShapeMismatchError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
SE_REDUCTION = 4

# Output columns per GEMM task.  Fixed so chunking is worker-count-invariant.
GEMM_CHUNK_COLS = 4096
# Channels per depthwise task.
DW_CHUNK_CHANNELS = 32


@dataclass(frozen=True)
class ConvDesc:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    depthwise: bool = False
    has_bias: bool = False
    padding: Optional[int] = None

    def __post_init__(self):
        if self.padding is None:
            object.__setattr__(self, "padding", (self.kernel - 1) // 2)
        if self.kernel not in (1, 3, 5):
            raise ShapeMismatchError(f"kernel must be 1, 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ShapeMismatchError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding != (self.kernel - 1) // 2:
            raise ShapeMismatchError(f"padding must be {(self.kernel - 1) // 2} for kernel {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatchError("channel counts must be positive")
        if self.depthwise and self.in_channels != self.out_channels:
            raise ShapeMismatchError("depthwise conv needs in_channels == out_channels")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        cin = 1 if self.depthwise else self.in_channels
        return (self.out_channels, cin, self.kernel, self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        c = len(self.gamma)
        for field in ("beta", "running_mean", "running_var"):
            if len(getattr(self, field)) != c:
                raise ShapeMismatchError(f"BN {field} has length {len(getattr(self, field))}, expected {c}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @property
    def channels(self) -> int:
        return len(self.gamma)


@dataclass
class SEParams:
    """Squeeze-and-excitation weights.

    ``w1`` is ``[channels // reduction, channels]`` and ``w2`` is
    ``[channels, channels // reduction]``; both transforms carry biases.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        hidden, c = self.w1.shape
        if self.w2.shape != (c, hidden) or self.b1.shape != (hidden,) or self.b2.shape != (c,):
            raise ShapeMismatchError(
                f"inconsistent SE shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def reduction(self) -> int:
        return self.w1.shape[1] // self.w1.shape[0]


# -- worker pool -------------------------------------------------------------

_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _run(tasks: Iterable[Callable[[], None]], workers: int) -> None:
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        for task in tasks:
            task()
        return
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = _pools[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="lcnet")
    for fut in [pool.submit(t) for t in tasks]:
        fut.result()


# -- convolution -------------------------------------------------------------

def _check_conv(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], desc: ConvDesc) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv input must be 4-D NCHW, got shape {x.shape}")
    if x.shape[1] != desc.in_channels:
        raise ShapeMismatchError(f"conv input has {x.shape[1]} channels, desc expects {desc.in_channels}")
    if tuple(w.shape) != desc.weight_shape:
        raise ShapeMismatchError(f"conv weight shape {tuple(w.shape)} != expected {desc.weight_shape}")
    if desc.has_bias:
        if b is None or tuple(b.shape) != (desc.out_channels,):
            raise ShapeMismatchError(f"conv bias must have shape ({desc.out_channels},)")
    elif b is not None:
        raise ShapeMismatchError("bias given for a conv without bias")
    ho, wo = desc.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"input spatial size {x.shape[2:]} too small for kernel {desc.kernel}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_naive(x, w, b, desc: ConvDesc) -> np.ndarray:
    """Direct-summation reference convolution (slow; use as an oracle)."""
    x = np.asarray(x)
    w = np.asarray(w)
    _check_conv(x, w, b, desc)
    n, _, h, wd = x.shape
    k, s = desc.kernel, desc.stride
    ho, wo = desc.output_hw(h, wd)
    xp = _pad(x.astype(np.float64), desc.padding)
    w64 = w.astype(np.float64)
    out = np.zeros((n, desc.out_channels, ho, wo), dtype=np.float64)
    for i in range(n):
        for co in range(desc.out_channels):
            if desc.depthwise:
                src, kern = xp[i, co:co + 1], w64[co]
            else:
                src, kern = xp[i], w64[co]
            for oh in range(ho):
                for ow in range(wo):
                    field = src[:, oh * s:oh * s + k, ow * s:ow * s + k]
                    out[i, co, oh, ow] = np.sum(field * kern)
    if b is not None:
        out += np.asarray(b, dtype=np.float64)[None, :, None, None]
    return out.astype(np.result_type(x, w))


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x`` into ``[N, C*k*k, Ho*Wo]`` columns ordered (c, kh, kw)."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    xp = _pad(x, padding)
    cols = np.empty((n, c, kernel, kernel, ho, wo), dtype=x.dtype)
    for kh in range(kernel):
        for kw in range(kernel):
            cols[:, :, kh, kw] = xp[:, :, kh:kh + stride * (ho - 1) + 1:stride, kw:kw + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kernel * kernel, ho * wo)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kernel: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an NCHW tensor."""
    n, c, h, w = shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    cols = cols.reshape(n, c, kernel, kernel, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for kh in range(kernel):
        for kw in range(kernel):
            xp[:, :, kh:kh + stride * (ho - 1) + 1:stride, kw:kw + stride * (wo - 1) + 1:stride] += cols[:, :, kh, kw]
    if padding:
        xp = xp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(xp)


def _gemm_conv(cols: np.ndarray, wmat: np.ndarray, out: np.ndarray, workers: int) -> None:
    # cols [N, K, P], wmat [Cout, K], out [N, Cout, P]
    n, _, p = cols.shape
    tasks = []
    for i in range(n):
        for start in range(0, p, GEMM_CHUNK_COLS):
            stop = min(start + GEMM_CHUNK_COLS, p)

            def task(i=i, start=start, stop=stop):
                np.matmul(wmat, cols[i, :, start:stop], out=out[i, :, start:stop])

            tasks.append(task)
    _run(tasks, workers)


def _depthwise(x: np.ndarray, w: np.ndarray, desc: ConvDesc, out: np.ndarray, workers: int) -> None:
    k, s = desc.kernel, desc.stride
    ho, wo = out.shape[2:]
    xp = _pad(x, desc.padding)
    c = x.shape[1]

    def task(c0, c1):
        acc = out[:, c0:c1]
        for kh in range(k):
            for kw in range(k):
                tap = w[c0:c1, 0, kh, kw][None, :, None, None]
                acc += tap * xp[:, c0:c1, kh:kh + s * (ho - 1) + 1:s, kw:kw + s * (wo - 1) + 1:s]

    _run([lambda c0=c0: task(c0, min(c0 + DW_CHUNK_CHANNELS, c)) for c0 in range(0, c, DW_CHUNK_CHANNELS)], workers)


def conv2d_fast(x, w, b, desc: ConvDesc, workers: int = 1) -> np.ndarray:
    """Optimised convolution, equivalent to :func:`conv2d_naive` within float tolerance."""
    x = np.asarray(x)
    w = np.asarray(w)
    _check_conv(x, w, b, desc)
    dtype = np.result_type(x, w)
    x = x.astype(dtype, copy=False)
    w = w.astype(dtype, copy=False)
    n, _, h, wd = x.shape
    ho, wo = desc.output_hw(h, wd)
    if desc.depthwise:
        out = np.zeros((n, desc.out_channels, ho, wo), dtype=dtype)
        _depthwise(x, w, desc, out, workers)
    else:
        if desc.kernel == 1 and desc.stride == 1:
            cols = x.reshape(n, desc.in_channels, h * wd)
        else:
            cols = im2col(x, desc.kernel, desc.stride, desc.padding)
        out = np.empty((n, desc.out_channels, ho * wo), dtype=dtype)
        _gemm_conv(cols, w.reshape(desc.out_channels, -1), out, workers)
        out = out.reshape(n, desc.out_channels, ho, wo)
    if b is not None:
        out += np.asarray(b, dtype=dtype)[None, :, None, None]
    return out


# -- batch norm --------------------------------------------------------------

def _check_channels(x: np.ndarray, c: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeMismatchError(f"{what}: input shape {x.shape} does not have {c} channels")


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None]


def batchnorm_infer(x, bn: BatchNormParams) -> np.ndarray:
    x = np.asarray(x)
    _check_channels(x, bn.channels, "batchnorm")
    dt = x.dtype
    scale = np.asarray(bn.gamma, dtype=dt) / np.sqrt(np.asarray(bn.running_var, dtype=dt) + dt.type(bn.eps))
    return (x - _per_channel(np.asarray(bn.running_mean, dtype=dt))) * _per_channel(scale) + _per_channel(
        np.asarray(bn.beta, dtype=dt)
    )


class BatchNormTrainResult(NamedTuple):
    out: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


def batchnorm_train(
    x,
    gamma,
    beta,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
    running_mean=None,
    running_var=None,
) -> BatchNormTrainResult:
    """Normalise with per-channel batch statistics (biased variance).

    Missing running statistics default to mean 0, variance 1.
    """
    x = np.asarray(x)
    c = len(gamma)
    _check_channels(x, c, "batchnorm")
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise DegenerateBatchError(f"batch norm needs >= 2 values per channel, got {n * h * w}")
    dt = x.dtype
    mean = x.mean(axis=(0, 2, 3))
    centered = x - _per_channel(mean)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1 / np.sqrt(var + dt.type(eps))
    out = centered * _per_channel(np.asarray(gamma, dtype=dt) * inv_std) + _per_channel(np.asarray(beta, dtype=dt))
    rm = np.zeros(c, dt) if running_mean is None else np.asarray(running_mean, dtype=dt)
    rv = np.ones(c, dt) if running_var is None else np.asarray(running_var, dtype=dt)
    m = dt.type(momentum)
    new_rm = (1 - m) * rm + m * mean
    new_rv = (1 - m) * rv + m * var
    return BatchNormTrainResult(out, mean, var, new_rm, new_rv)


def bn_fold(w, b, bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    """Absorb an inference-mode batch norm into the preceding conv's weights and bias."""
    w = np.asarray(w)
    if w.shape[0] != bn.channels:
        raise ShapeMismatchError(f"conv has {w.shape[0]} output channels, BN has {bn.channels}")
    dt = w.dtype
    scale = np.asarray(bn.gamma, dtype=dt) / np.sqrt(np.asarray(bn.running_var, dtype=dt) + dt.type(bn.eps))
    bias = np.zeros(bn.channels, dt) if b is None else np.asarray(b, dtype=dt)
    folded_w = w * scale[:, None, None, None]
    folded_b = (bias - np.asarray(bn.running_mean, dtype=dt)) * scale + np.asarray(bn.beta, dtype=dt)
    return folded_w, folded_b


# -- activations -------------------------------------------------------------

def hsigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    return np.clip(x + 3, 0, 6) / 6


def hswish(x) -> np.ndarray:
    x = np.asarray(x)
    return x * hsigmoid(x)


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0)


# -- squeeze-and-excitation --------------------------------------------------

class SEIntermediates(NamedTuple):
    squeezed: np.ndarray  # [N, C]
    hidden_pre: np.ndarray  # [N, C/r]
    hidden: np.ndarray
    gate_pre: np.ndarray  # [N, C]
    gate: np.ndarray
    out: np.ndarray


def se_forward(x, se: SEParams) -> SEIntermediates:
    x = np.asarray(x)
    _check_channels(x, se.channels, "SE")
    dt = x.dtype
    s = x.mean(axis=(2, 3))
    z1 = s @ se.w1.astype(dt, copy=False).T + se.b1.astype(dt, copy=False)
    a1 = relu(z1)
    z2 = a1 @ se.w2.astype(dt, copy=False).T + se.b2.astype(dt, copy=False)
    e = hsigmoid(z2)
    return SEIntermediates(s, z1, a1, z2, e, x * e[:, :, None, None])


def se_apply(x, se: SEParams) -> np.ndarray:
    return se_forward(x, se).out


# -- pooling, classifier head ------------------------------------------------

def global_avg_pool(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def fully_connected(x, w, b) -> np.ndarray:
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError(f"fully_connected: input {x.shape} incompatible with weights {w.shape}")
    if b is not None and np.shape(b) != (w.shape[0],):
        raise ShapeMismatchError(f"fully_connected: bias shape {np.shape(b)} != ({w.shape[0]},)")
    dt = np.result_type(x, w)
    out = x.astype(dt, copy=False) @ w.astype(dt, copy=False).T
    if b is not None:
        out += np.asarray(b, dtype=dt)
    return out


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- dropout -----------------------------------------------------------------

def dropout_mask(shape, rate: float, seed, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped elements, ``1/(1-rate)`` for kept ones."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep.astype(dtype) * np.asarray(1 / (1 - rate), dtype=dtype)


def dropout(x, rate: float, mode: str = "infer", seed=0) -> np.ndarray:
    x = np.asarray(x)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x.copy()
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return x * dropout_mask(x.shape, rate, seed, x.dtype)
