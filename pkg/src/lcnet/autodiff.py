"""Reverse-mode gradients for the fixed layer vocabulary.

The network is a straight chain, so backward is a walk over the forward
trace in reverse, with one hand-written rule per layer kind (``BACKWARD``).
:func:`grad_check` validates every rule against central finite differences
on a float64 copy of a tiny model.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import ops
from .arch import LCNetConfig, Model, Trace, build_model, run_layers
from .ops import im2col, col2im

log = logging.getLogger(__name__)


def _conv_backward(layer, g, cache, P, grads):
    x = cache["x"]
    d = layer.desc
    w = P[f"{layer.name}.weight"]
    k, s, p = d.kernel, d.stride, d.padding
    if d.has_bias:
        grads[f"{layer.name}.bias"] = g.sum(axis=(0, 2, 3))
    n, c, h, wd = x.shape
    ho, wo = g.shape[2:]
    if d.depthwise:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for kh in range(k):
            for kw in range(k):
                win = (slice(None), slice(None), slice(kh, kh + s * (ho - 1) + 1, s), slice(kw, kw + s * (wo - 1) + 1, s))
                gw[:, 0, kh, kw] = (g * xp[win]).sum(axis=(0, 2, 3))
                gxp[win] += w[:, 0, kh, kw][None, :, None, None] * g
        grads[f"{layer.name}.weight"] = gw
        return gxp[:, :, p:p + h, p:p + wd] if p else gxp
    gmat = g.reshape(n, d.out_channels, ho * wo)
    wmat = w.reshape(d.out_channels, -1)
    pointwise = k == 1 and s == 1
    cols = x.reshape(n, c, h * wd) if pointwise else im2col(x, k, s, p)
    grads[f"{layer.name}.weight"] = np.einsum("nop,nkp->ok", gmat, cols).reshape(w.shape)
    gcols = np.matmul(wmat.T, gmat)
    return gcols.reshape(x.shape) if pointwise else col2im(gcols, x.shape, k, s, p)


def _bn_backward(layer, g, cache, P, grads):
    n = layer.name
    gamma = P[f"{n}.gamma"]
    x = cache["x"]
    axes = (0, 2, 3)
    if "mean" not in cache:  # inference-mode statistics are constants
        inv_std = 1 / np.sqrt(P[f"{n}.running_var"] + ops.BN_EPS)
        xhat = (x - P[f"{n}.running_mean"][None, :, None, None]) * inv_std[None, :, None, None]
        grads[f"{n}.gamma"] = (g * xhat).sum(axis=axes)
        grads[f"{n}.beta"] = g.sum(axis=axes)
        return g * (gamma * inv_std)[None, :, None, None]
    inv_std = (1 / np.sqrt(cache["var"] + ops.BN_EPS))[None, :, None, None]
    xhat = (x - cache["mean"][None, :, None, None]) * inv_std
    grads[f"{n}.gamma"] = (g * xhat).sum(axis=axes)
    grads[f"{n}.beta"] = g.sum(axis=axes)
    dxhat = g * gamma[None, :, None, None]
    mean_dxhat = dxhat.mean(axis=axes, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)


def hswish_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of H-Swish; at the kinks the right-hand piece is used."""
    x = np.asarray(x)
    return np.where(x < -3, 0, np.where(x < 3, (2 * x + 3) / 6, 1)).astype(x.dtype)


def hsigmoid_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.where((x >= -3) & (x < 3), 1 / 6, 0).astype(x.dtype)


def relu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return (x > 0).astype(x.dtype)


def _act_backward(layer, g, cache, P, grads):
    x = cache["x"]
    return g * (hswish_grad(x) if layer.fn == "hswish" else relu_grad(x))


def _se_backward(layer, g, cache, P, grads):
    x, parts = cache["x"], cache["parts"]
    n = layer.name
    w1, w2 = P[f"{n}.fc1.weight"], P[f"{n}.fc2.weight"]
    gx = g * parts.gate[:, :, None, None]
    dgate = (g * x).sum(axis=(2, 3))
    dz2 = dgate * hsigmoid_grad(parts.gate_pre)
    grads[f"{n}.fc2.weight"] = dz2.T @ parts.hidden
    grads[f"{n}.fc2.bias"] = dz2.sum(axis=0)
    dz1 = (dz2 @ w2) * relu_grad(parts.hidden_pre)
    grads[f"{n}.fc1.weight"] = dz1.T @ parts.squeezed
    grads[f"{n}.fc1.bias"] = dz1.sum(axis=0)
    ds = dz1 @ w1
    hw = x.shape[2] * x.shape[3]
    return gx + (ds / hw)[:, :, None, None]


def _gap_backward(layer, g, cache, P, grads):
    n, c, h, w = cache["shape"]
    return np.broadcast_to(g / (h * w), (n, c, h, w)).copy()


def _flatten_backward(layer, g, cache, P, grads):
    return g.reshape(cache["shape"])


def _dropout_backward(layer, g, cache, P, grads):
    mask = cache["mask"]
    return g if mask is None else g * mask


def _linear_backward(layer, g, cache, P, grads):
    grads[f"{layer.name}.weight"] = g.T @ cache["x"]
    grads[f"{layer.name}.bias"] = g.sum(axis=0)
    return g @ P[f"{layer.name}.weight"]


BACKWARD = {
    "conv": _conv_backward,
    "bn": _bn_backward,
    "act": _act_backward,
    "se": _se_backward,
    "gap": _gap_backward,
    "flatten": _flatten_backward,
    "dropout": _dropout_backward,
    "linear": _linear_backward,
}


def backward_trace(trace: Trace, grad_out: np.ndarray, P: dict) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Propagate ``grad_out`` back through a recorded forward pass.

    Returns the gradient w.r.t. the network input and a name -> gradient map.
    """
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    for layer, cache in reversed(trace.caches):
        g = BACKWARD[layer.kind](layer, g, cache, P, grads)
    return g, grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = ops.log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1
    return float(loss), dlogits / n


@dataclass
class GradTape:
    loss: float
    logits: np.ndarray
    grads: dict[str, np.ndarray]
    input_grad: np.ndarray
    trace: Trace

    @property
    def stat_updates(self) -> dict[str, np.ndarray]:
        return self.trace.stat_updates


def check_labels(labels, num_classes: int, batch: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be an integer vector of length {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"invalid label: values must lie in [0, {num_classes})")
    return labels


def model_backward(
    model: Model,
    x,
    labels,
    *,
    params: Optional[dict] = None,
    seed: Any = 0,
    workers: int = 1,
) -> tuple[float, GradTape]:
    """Train-mode forward + backward with mean softmax cross-entropy loss.

    Running BN statistics are not modified; the updated values are returned
    in ``tape.stat_updates`` for the caller to commit.
    """
    P = model.params if params is None else params
    dtype = next(iter(P.values())).dtype
    x = np.ascontiguousarray(x, dtype=dtype)
    labels = check_labels(labels, model.config.num_classes, x.shape[0])
    trace = Trace()
    logits = run_layers(model, x, "train", P, seed, workers, trace)
    loss, dlogits = cross_entropy(logits, labels)
    gx, grads = backward_trace(trace, dlogits, P)
    return loss, GradTape(loss, logits, grads, gx, trace)


# -- gradient checking -------------------------------------------------------

TINY_CONFIG = LCNetConfig(scale=0.25, num_classes=3)
TINY_INPUT_HW = (64, 64)
TINY_BATCH = 4
# check point settings; see grad_check_report
CHECK_GAMMA_RANGE = (0.5, 1.5)
# gains on tensors that feed straight into a train-mode BN (loss unchanged up to eps)
CHECK_BN_CONV_GAIN = 100.0
CHECK_INPUT_GAIN = 10.0


def kink_regions(trace: Trace) -> list[np.ndarray]:
    """Which linear/quadratic piece every piecewise activation input falls in."""
    regions = []
    for layer, cache in trace.caches:
        if layer.kind == "act":
            x = cache["x"]
            regions.append(np.digitize(x, (-3.0, 3.0)) if layer.fn == "hswish" else x > 0)
        elif layer.kind == "se":
            parts = cache["parts"]
            regions.append(parts.hidden_pre > 0)
            regions.append(np.digitize(parts.gate_pre, (-3.0, 3.0)))
    return regions


def _near_kink(trace: Trace, tol: float) -> bool:
    for layer, cache in trace.caches:
        if layer.kind == "act" and layer.fn == "hswish":
            if np.any(np.abs(np.abs(cache["x"]) - 3) < tol):
                return True
        elif layer.kind == "se" and np.any(np.abs(np.abs(cache["parts"].gate_pre) - 3) < tol):
            return True
    return False


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    resampled: int
    worst_by_kind: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""


def _kind_of(name: str) -> str:
    if name == "input":
        return "input"
    if name.startswith("stem.conv"):
        return "conv"
    for part in ("dw.conv", "pw.conv", "se.fc1", "se.fc2", "bn"):
        if f".{part}." in f".{name}":
            return {"dw.conv": "depthwise_conv", "pw.conv": "pointwise_conv", "bn": "batchnorm"}.get(part, "se")
    return name.split(".")[0]


def grad_check_report(
    config: LCNetConfig = TINY_CONFIG,
    seed: int = 0,
    h: float = 1e-3,
    num_samples: int = 256,
    input_hw: tuple[int, int] = TINY_INPUT_HW,
    batch: int = TINY_BATCH,
    max_tries: int = 25,
) -> GradCheckReport:
    """Compare analytic gradients against central differences in float64.

    Samples at least ``num_samples`` scalars spread over every trainable
    tensor plus the network input.  A sample whose perturbation would move any
    activation input across an H-Swish/H-Sigmoid/ReLU kink is redrawn, which
    also covers inputs within 1e-4 of +-3.

    The check point moves BN scales to U(0.5, 1.5) and shifts/biases to
    N(0, 0.1).  Train-mode BN makes the loss nearly invariant to some
    parameters (a per-channel rescale before a depthwise conv + BN cancels
    except through the activation's curvature), so their gradients are tiny
    while the O(h^2) truncation error of the central difference is not.
    Conv weights that feed a BN and the network input are scaled up, which
    leaves the loss unchanged up to BN eps but makes h a relative step for them.  A 64x64
    input lets the deepest BN layers normalise over more values; small BN
    scales keep activations away from the +-3 kinks so few samples are
    redrawn.
    """
    model = build_model(config, seed)
    rng = np.random.default_rng([seed, 1])
    P = {k: v.astype(np.float64) for k, v in model.params.items()}
    # move affine parameters off their trivial init values
    for spec in model.param_specs():
        if spec.role == "bn_gamma":
            P[spec.name] = rng.uniform(*CHECK_GAMMA_RANGE, spec.shape)
        elif spec.role in ("bn_beta", "bias"):
            P[spec.name] = rng.normal(0.0, 0.1, spec.shape)
        elif spec.name.endswith(".conv.weight"):
            P[spec.name] = P[spec.name] * CHECK_BN_CONV_GAIN
    x = rng.standard_normal((batch, 3, *input_hw)) * CHECK_INPUT_GAIN
    labels = rng.integers(0, config.num_classes, batch)
    drop_seed = seed

    def loss_and_regions(P_, x_):
        trace = Trace()
        logits = run_layers(model, x_, "train", P_, drop_seed, 1, trace)
        return cross_entropy(logits, labels)[0], trace

    _, tape = model_backward(model, x, labels, params=P, seed=drop_seed)
    analytic = dict(tape.grads, input=tape.input_grad)
    _, base_trace = loss_and_regions(P, x)
    base_regions = kink_regions(base_trace)
    if _near_kink(base_trace, 1e-4):
        log.warning("base point has an activation input within 1e-4 of a kink")

    names = model.trainable_names() + ["input"]
    per_tensor = max(1, math.ceil(num_samples / len(names)))
    worst: dict[str, float] = defaultdict(float)
    max_err, worst_name, checked, resampled = 0.0, "", 0, 0
    for name in names:
        target = x if name == "input" else P[name]
        flat = target.reshape(-1)
        candidates = rng.permutation(flat.size)
        used = tries = 0
        for idx in candidates:
            if used >= per_tensor or tries >= max_tries * per_tensor:
                break
            tries += 1
            theta = flat[idx]
            step = h * max(1.0, abs(theta))
            values, ok = [], True
            for sign in (1, -1):
                flat[idx] = theta + sign * step
                loss, trace = loss_and_regions(P, x)
                flat[idx] = theta
                regions = kink_regions(trace)
                if any(not np.array_equal(a, b) for a, b in zip(regions, base_regions)):
                    ok = False
                    break
                values.append(loss)
            if not ok:
                resampled += 1
                continue
            numeric = (values[0] - values[1]) / (2 * step)
            a = float(analytic[name].reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            kind = _kind_of(name)
            worst[kind] = max(worst[kind], err)
            if err > max_err:
                max_err, worst_name = err, f"{name}[{idx}]"
            used += 1
            checked += 1
    return GradCheckReport(max_err, checked, resampled, dict(worst), worst_name)


def grad_check(config: LCNetConfig = TINY_CONFIG, seed: int = 0, h: float = 1e-3, **kwargs) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    return grad_check_report(config, seed, h, **kwargs).max_rel_error
