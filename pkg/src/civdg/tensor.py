"""Small deterministic differentiable-computation kernel.

Dense arrays are plain C-contiguous float64 numpy arrays.  Layers are
written as explicit forward/backward pairs; there is no autodiff graph.
"""

import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .errors import DimensionError, NumericalAbort, StateError, ValidationError

DEBUG = os.environ.get("CIVDG_DEBUG", "") not in ("", "0")
SIGMA_EPS = 1e-12


def as_dense(a, ndim=None, name="array"):
    """Return ``a`` as a finite C-contiguous float64 array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: non-finite values")
    return arr


def _debug_check(name, arr):
    if DEBUG and not np.all(np.isfinite(arr)):
        raise NumericalAbort(f"non-finite output from {name}")
    return arr


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    sn_u: np.ndarray | None = None
    trainable: bool = True
    grad_ready: bool = False


class ParameterStore:
    """Ordered collection of named parameters with gradients.

    Iteration follows insertion order.  Spectrally normalised weight
    matrices carry their persistent power-iteration vector in ``sn_u``.
    """

    def __init__(self):
        self._entries = OrderedDict()

    def add(self, name, value, sn_u=None, trainable=True):
        if name in self._entries:
            raise ValidationError(f"duplicate parameter {name!r}")
        value = as_dense(value, name=name)
        if sn_u is not None:
            if value.ndim != 2 or np.shape(sn_u) != (value.shape[0],):
                raise DimensionError(f"{name}: sn_u must have length {value.shape[0]}")
            sn_u = as_dense(sn_u, ndim=1, name=f"{name}.sn_u")
        self._entries[name] = Param(value, np.zeros_like(value), sn_u, trainable)
        return self._entries[name]

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self, prefix=""):
        return [k for k in self._entries if k.startswith(prefix)]

    def value(self, name):
        return self._entries[name].value

    def set_grad(self, name, grad):
        p = self._entries[name]
        if grad.shape != p.value.shape:
            raise DimensionError(f"{name}: gradient shape {grad.shape} != {p.value.shape}")
        p.grad = np.ascontiguousarray(grad, dtype=np.float64)
        p.grad_ready = True

    def set_grads(self, grads):
        for name, g in grads.items():
            self.set_grad(name, g)

    def zero_grad(self, prefix=""):
        for name in self.names(prefix):
            p = self._entries[name]
            p.grad = np.zeros_like(p.value)
            p.grad_ready = False

    def copy(self):
        out = ParameterStore()
        for name, p in self._entries.items():
            out._entries[name] = Param(
                p.value.copy(),
                p.grad.copy(),
                None if p.sn_u is None else p.sn_u.copy(),
                p.trainable,
                p.grad_ready,
            )
        return out

    def arrays(self, prefix=""):
        """Flat name -> array view of values (and ``<name>.sn_u`` vectors)."""
        out = OrderedDict()
        for name in self.names(prefix):
            p = self._entries[name]
            out[name] = p.value
            if p.sn_u is not None:
                out[name + ".sn_u"] = p.sn_u
        return out

    def equal(self, other, prefix=""):
        """Bitwise equality of values and sn vectors."""
        a, b = self.arrays(prefix), other.arrays(prefix)
        if list(a) != list(b):
            return False
        return all(a[k].tobytes() == b[k].tobytes() for k in a)


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return OptimizerState(
            self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adamw_step(params, opt, maximize=False, names=None):
    """One AdamW update on ``names`` (default: all trainable entries).

    Weight decay is decoupled: ``w <- w * (1 - lr*wd)`` before the adaptive
    step.  ``maximize`` negates gradients (gradient ascent).  Gradients are
    zeroed afterwards.
    """
    if names is None:
        names = [n for n, p in params.items() if p.trainable]
    for name in names:
        if not params[name].grad_ready:
            raise StateError(f"adamw_step: gradient for {name!r} not populated")
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in names:
        p = params[name]
        g = -p.grad if maximize else p.grad
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.value)
            opt.v[name] = np.zeros_like(p.value)
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if opt.weight_decay:
            p.value *= 1.0 - opt.lr * opt.weight_decay
        p.value -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p.grad = np.zeros_like(p.value)
        p.grad_ready = False


# ---------------------------------------------------------------- layers


def affine_forward(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError("affine_forward expects x[B,n], W[m,n], b[m]")
    if x.shape[1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise DimensionError(
            f"affine_forward: x{x.shape} W{W.shape} b{b.shape} do not agree"
        )
    out = kernels.affine_forward(
        np.ascontiguousarray(x), np.ascontiguousarray(W), np.ascontiguousarray(b)
    )
    return _debug_check("affine_forward", out)


def affine_backward(dout, x, W):
    """Returns (dx, dW, db)."""
    return kernels.affine_backward(
        np.ascontiguousarray(dout), np.ascontiguousarray(x), np.ascontiguousarray(W)
    )


def leaky_relu(x, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise ValidationError(f"leaky slope must lie in (0,1), got {slope}")
    x2 = np.atleast_2d(x)
    out = kernels.leaky_relu(np.ascontiguousarray(x2, dtype=np.float64), slope)
    return out.reshape(np.shape(x))


def leaky_relu_backward(dout, x, slope=0.01):
    return kernels.leaky_relu_backward(np.ascontiguousarray(dout), np.ascontiguousarray(x), slope)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def sigmoid(s):
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    ex = np.exp(s[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_one_hot(targets):
    ok = np.all((targets == 0.0) | (targets == 1.0)) and np.all(targets.sum(axis=1) == 1.0)
    if not ok:
        raise ValidationError("softmax_ce: targets must be one-hot rows")


def softmax_ce(logits, targets):
    """Mean softmax cross-entropy; returns (loss, probs)."""
    if logits.shape != targets.shape:
        raise DimensionError(f"softmax_ce: {logits.shape} vs {targets.shape}")
    _check_one_hot(targets)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-(targets * log_p).sum() / logits.shape[0])
    return loss, np.exp(log_p)


def softmax_ce_backward(probs, targets):
    return (probs - targets) / probs.shape[0]


def sigmoid_bce(logits, targets):
    """Mean binary cross-entropy over all B*C entries; returns (loss, probs)."""
    if logits.shape != targets.shape:
        raise DimensionError(f"sigmoid_bce: {logits.shape} vs {targets.shape}")
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ValidationError("sigmoid_bce: targets must be binary")
    terms = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(terms.mean()), sigmoid(logits)


def sigmoid_bce_backward(probs, targets):
    return (probs - targets) / probs.size


# ------------------------------------------------------ spectral norm


def spectral_normalize(W, u, n_power_iters=1):
    """Power-iteration spectral normalisation.

    Returns ``(W / sigma, u_new, sigma, v)``; ``u_new`` should be stored
    back as the parameter's ``sn_u``.  A zero matrix yields sigma clamped
    to 1e-12 and a zero ``W_sn``.
    """
    if n_power_iters < 1:
        raise ValidationError("n_power_iters must be >= 1")
    u_new, v, sigma = kernels.power_iteration(W, np.ascontiguousarray(u), n_power_iters)
    if not sigma > SIGMA_EPS:
        return np.zeros_like(W), u_new, SIGMA_EPS, v
    return W / sigma, u_new, sigma, v


def spectral_sigma_frozen(W, u):
    """Sigma estimate from a stored ``u`` without advancing it (eval mode)."""
    v = W.T @ u
    norm = float(np.sqrt(v @ v))
    if not norm > SIGMA_EPS:
        return SIGMA_EPS, np.zeros(W.shape[1])
    return norm, v / norm


def spectral_norm_backward(dW_sn, W_sn, u, v, sigma):
    """Gradient w.r.t. W of ``W / sigma(W)`` with sigma = u^T W v, u,v held fixed."""
    return (dW_sn - float((dW_sn * W_sn).sum()) * np.outer(u, v)) / sigma


# ---------------------------------------------------- gradient check


def finite_diff_check(loss_fn, params, epsilon=1e-5, names=None, max_coords=None, seed=0):
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` a
    mapping name -> array.  At most ``max_coords`` coordinates per parameter
    are sampled (deterministically from ``seed``); ``None`` checks all.
    Returns the maximum relative error, with denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    _, grads = loss_fn(params)
    grads = {k: np.array(g, copy=True) for k, g in grads.items()}
    if names is None:
        names = list(grads)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names:
        w = params[name].value
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = loss_fn(params)
            flat[i] = orig - epsilon
            lm, _ = loss_fn(params)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
