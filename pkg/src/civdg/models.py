"""Predictor (adapter + head over frozen features) and conditional critic.

Parameters live in a single :class:`ParameterStore`; predictor entries are
prefixed ``pred.`` and critic entries ``critic.``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .tensor import (
    ParameterStore,
    affine_backward,
    affine_forward,
    leaky_relu,
    leaky_relu_backward,
    sigmoid,
    softmax,
    spectral_norm_backward,
    spectral_normalize,
    spectral_sigma_frozen,
)

SINGLE_LABEL = "single_label"
MULTI_LABEL = "multi_label"


@dataclass
class PredictorSpec:
    feature_dim: int
    n_classes: int
    n_strata: int
    hidden_dims: list = field(default_factory=lambda: [32])
    use_demographics: bool = True
    d_embed_dim: int = 8
    task_mode: str = SINGLE_LABEL
    leaky_slope: float = 0.01
    encoder_dim: int = 0  # >0 adds a fixed (never trained) random projection

    def __post_init__(self):
        if not self.hidden_dims:
            raise ValidationError("hidden_dims must be nonempty")
        if self.task_mode not in (SINGLE_LABEL, MULTI_LABEL):
            raise ValidationError(f"unknown task_mode {self.task_mode!r}")
        min_c = 2 if self.task_mode == SINGLE_LABEL else 1
        if self.n_classes < min_c:
            raise ValidationError(f"{self.task_mode} needs n_classes >= {min_c}")
        if self.feature_dim < 1 or self.n_strata < 1:
            raise ValidationError("feature_dim and n_strata must be >= 1")
        self.hidden_dims = [int(h) for h in self.hidden_dims]

    def to_dict(self):
        return asdict(self)


@dataclass
class CriticSpec:
    n_sites: int
    n_strata: int
    z_embed_dim: int = 8
    d_embed_dim: int = 8
    hidden_dim: int = 32
    n_layers: int = 3
    output_dim: int = 8
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.output_dim < 1 or self.n_layers < 1:
            raise ValidationError("critic needs output_dim >= 1 and n_layers >= 1")
        if self.n_sites < 1 or self.n_strata < 1:
            raise ValidationError("critic needs n_sites, n_strata >= 1")

    def layer_dims(self):
        dims = [self.z_embed_dim + self.d_embed_dim]
        dims += [self.hidden_dim] * (self.n_layers - 1)
        dims.append(self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self):
        return asdict(self)


def _uniform_fan_in(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_params(spec, seed, store=None):
    """Seeded initialisation; appends to ``store`` when given.

    Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero, embeddings
    ~ N(0, 0.02^2), power-iteration vectors unit-normalised Gaussians.
    """
    store = ParameterStore() if store is None else store
    rng = np.random.default_rng(seed)
    if isinstance(spec, PredictorSpec):
        in_dim = spec.feature_dim
        if spec.encoder_dim:
            proj = rng.normal(size=(spec.encoder_dim, spec.feature_dim)) / np.sqrt(spec.feature_dim)
            store.add("pred.encoder", proj, trainable=False)
            in_dim = spec.encoder_dim
        if spec.use_demographics:
            store.add("pred.embed_d", rng.normal(0.0, 0.02, size=(spec.n_strata, spec.d_embed_dim)))
            in_dim += spec.d_embed_dim
        for i, h in enumerate(spec.hidden_dims):
            store.add(f"pred.fc{i}.W", _uniform_fan_in(rng, h, in_dim))
            store.add(f"pred.fc{i}.b", np.zeros(h))
            in_dim = h
        store.add("pred.head.W", _uniform_fan_in(rng, spec.n_classes, in_dim))
        store.add("pred.head.b", np.zeros(spec.n_classes))
    elif isinstance(spec, CriticSpec):
        store.add("critic.embed_z", rng.normal(0.0, 0.02, size=(spec.n_sites, spec.z_embed_dim)))
        store.add("critic.embed_d", rng.normal(0.0, 0.02, size=(spec.n_strata, spec.d_embed_dim)))
        for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
            u = rng.normal(size=fan_out)
            u /= np.linalg.norm(u)
            store.add(f"critic.fc{i}.W", _uniform_fan_in(rng, fan_out, fan_in), sn_u=u)
            store.add(f"critic.fc{i}.b", np.zeros(fan_out))
    else:
        raise ValidationError(f"unknown spec type {type(spec).__name__}")
    return store


def _check_ids(ids, n, what):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValidationError(f"{what} ids must be 1-d")
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValidationError(f"{what} id out of range [0, {n})")
    return ids


# ------------------------------------------------------------ predictor


def predictor_forward(params, spec, x, d, return_cache=False):
    """Logits and probabilities; ``cache`` (if requested) feeds the backward pass."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.feature_dim:
        raise ValidationError(f"predictor expects x[B,{spec.feature_dim}], got {x.shape}")
    h = x
    if spec.encoder_dim:
        h = h @ params.value("pred.encoder").T
    d_ids = None
    if spec.use_demographics:
        d_ids = _check_ids(d, spec.n_strata, "stratum")
        h = np.concatenate([h, params.value("pred.embed_d")[d_ids]], axis=1)
    layers = []
    for i in range(len(spec.hidden_dims)):
        pre = affine_forward(h, params.value(f"pred.fc{i}.W"), params.value(f"pred.fc{i}.b"))
        layers.append((h, pre))
        h = leaky_relu(pre, spec.leaky_slope)
    logits = affine_forward(h, params.value("pred.head.W"), params.value("pred.head.b"))
    probs = softmax(logits) if spec.task_mode == SINGLE_LABEL else sigmoid(logits)
    if return_cache:
        return logits, probs, {"layers": layers, "top": h, "d": d_ids}
    return logits, probs


def predictor_backward(params, spec, cache, dlogits):
    """Gradients of the trainable predictor entries given dL/dlogits."""
    grads = {}
    dh, grads["pred.head.W"], grads["pred.head.b"] = affine_backward(
        dlogits, cache["top"], params.value("pred.head.W")
    )
    for i in reversed(range(len(spec.hidden_dims))):
        h_in, pre = cache["layers"][i]
        dpre = leaky_relu_backward(dh, pre, spec.leaky_slope)
        dh, grads[f"pred.fc{i}.W"], grads[f"pred.fc{i}.b"] = affine_backward(
            dpre, h_in, params.value(f"pred.fc{i}.W")
        )
    if spec.use_demographics:
        emb = params.value("pred.embed_d")
        g = np.zeros_like(emb)
        np.add.at(g, cache["d"], dh[:, dh.shape[1] - emb.shape[1]:])
        grads["pred.embed_d"] = g
    return grads


def representation(params, spec, x, d):
    """Adapter output (last hidden layer) for external visualisation."""
    _, _, cache = predictor_forward(params, spec, x, d, return_cache=True)
    return cache["top"]


# --------------------------------------------------------------- critic


def critic_forward(params, spec, z, d, training=False, return_cache=False):
    """Raw instrument vectors c(z, d), shape [B, M].

    With ``training`` each spectrally normalised layer advances its stored
    power-iteration vector by one step; otherwise the store is untouched.
    """
    z_ids = _check_ids(z, spec.n_sites, "site")
    d_ids = _check_ids(d, spec.n_strata, "stratum")
    if z_ids.shape != d_ids.shape:
        raise ValidationError("z and d must have equal length")
    h = np.concatenate(
        [params.value("critic.embed_z")[z_ids], params.value("critic.embed_d")[d_ids]], axis=1
    )
    layers = []
    n = spec.n_layers
    for i in range(n):
        entry = params[f"critic.fc{i}.W"]
        W = entry.value
        if training:
            W_sn, u, sigma, v = spectral_normalize(W, entry.sn_u, 1)
            entry.sn_u = u
        else:
            u = entry.sn_u
            sigma, v = spectral_sigma_frozen(W, u)
            W_sn = W / sigma
        pre = affine_forward(h, W_sn, params.value(f"critic.fc{i}.b"))
        layers.append((h, pre, W_sn, u, v, sigma))
        h = leaky_relu(pre, spec.leaky_slope) if i < n - 1 else pre
    if return_cache:
        return h, {"layers": layers, "z": z_ids, "d": d_ids}
    return h


def critic_backward(params, spec, cache, dout):
    grads = {}
    dh = dout
    n = spec.n_layers
    for i in reversed(range(n)):
        h_in, pre, W_sn, u, v, sigma = cache["layers"][i]
        dpre = leaky_relu_backward(dh, pre, spec.leaky_slope) if i < n - 1 else dh
        dh, dW_sn, grads[f"critic.fc{i}.b"] = affine_backward(dpre, h_in, W_sn)
        grads[f"critic.fc{i}.W"] = spectral_norm_backward(dW_sn, W_sn, u, v, sigma)
    ez = params.value("critic.embed_z")
    ed = params.value("critic.embed_d")
    gz = np.zeros_like(ez)
    gd = np.zeros_like(ed)
    np.add.at(gz, cache["z"], dh[:, : ez.shape[1]])
    np.add.at(gd, cache["d"], dh[:, ez.shape[1]:])
    grads["critic.embed_z"] = gz
    grads["critic.embed_d"] = gd
    return grads


def spectral_sigmas(params, spec):
    """Exact largest singular value of every normalised critic weight (SVD)."""
    out = {}
    for i in range(spec.n_layers):
        entry = params[f"critic.fc{i}.W"]
        sigma, _ = spectral_sigma_frozen(entry.value, entry.sn_u)
        out[f"critic.fc{i}.W"] = float(np.linalg.svd(entry.value / sigma, compute_uv=False)[0])
    return out
