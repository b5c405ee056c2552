"""Alternating minimax training of predictor and conditional critic.

Each iteration draws one minibatch, takes ``n_critic`` ascent steps on the
critic objective ``L_GMM - beta * Omega`` and then one descent step on the
predictor objective ``L_task + lambda * L_GMM``.
"""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .errors import ContractViolation, NumericalAbort, ValidationError
from .models import (
    MULTI_LABEL,
    SINGLE_LABEL,
    CriticSpec,
    PredictorSpec,
    critic_backward,
    critic_forward,
    init_params,
    predictor_backward,
    predictor_forward,
)
from .moments import (
    MomentState,
    center_instruments,
    compute_residuals,
    gmm_loss,
    gmm_loss_grad,
    moment_matrix,
)
from .seeding import mix
from .tensor import (
    OptimizerState,
    ParameterStore,
    adamw_step,
    sigmoid_bce,
    sigmoid_bce_backward,
    softmax_ce,
    softmax_ce_backward,
)

ABLATIONS = ("erm", "no_civ", "random_z", "full_civ")


@dataclass
class TrainConfig:
    lam: float = 1.0
    beta: float = 1.0
    n_critic: int = 5
    batch_size: int = 128
    lr_predictor: float = 1e-3
    lr_critic: float | None = None
    weight_decay: float = 1e-4
    momentum_ema: float = 0.9
    max_steps: int = 2000
    eval_every: int = 50
    patience: int = 10
    seed: int = 0
    ablation: str = "full_civ"
    lambda_grid: tuple = (0.1, 1.0, 10.0)
    lr_schedule: str = "constant"
    warmup_frac: float = 0.05
    hidden_dims: tuple = (32,)
    use_demographics: bool = True
    d_embed_dim: int = 8
    z_embed_dim: int = 8
    critic_hidden: int = 32
    critic_layers: int = 3
    critic_output_dim: int = 8
    leaky_slope: float = 0.01
    critic_enabled: bool = True
    debug_checks: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation {self.ablation!r}; expected {ABLATIONS}")
        if self.ablation == "erm":
            self.lam = 0.0
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.n_critic < 1 or self.patience < 1 or self.eval_every < 1:
            raise ValidationError("n_critic, patience and eval_every must be >= 1")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ValidationError("batch_size and max_steps must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0.0 <= self.momentum_ema < 1.0:
            raise ValidationError("momentum_ema must lie in [0, 1)")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.lambda_grid = tuple(float(v) for v in self.lambda_grid)

    @property
    def critic_lr(self):
        return self.lr_predictor if self.lr_critic is None else self.lr_critic

    @property
    def conditional(self):
        """False for ``no_civ``, which collapses every sample into one stratum."""
        return self.ablation != "no_civ"

    def to_dict(self):
        out = asdict(self)
        out["hidden_dims"] = list(self.hidden_dims)
        out["lambda_grid"] = list(self.lambda_grid)
        return out


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray  # site ids as seen by the critic
    d: np.ndarray  # stratum ids as seen by predictor and centering


@dataclass
class Model:
    pred_spec: PredictorSpec
    critic_spec: CriticSpec | None
    params: ParameterStore
    moment_state: MomentState | None
    ablation: str = "full_civ"
    step: int = 0

    def copy(self):
        return Model(
            self.pred_spec, self.critic_spec, self.params.copy(),
            None if self.moment_state is None else self.moment_state.copy(),
            self.ablation, self.step,
        )

    def model_strata(self, d):
        """Stratum ids the predictor sees (all zero under ``no_civ``)."""
        d = np.asarray(d, dtype=np.int64)
        if self.ablation == "no_civ":
            return np.zeros_like(d)
        return d

    def predict(self, x, d):
        return predictor_forward(self.params, self.pred_spec, x, self.model_strata(d))


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_step: int = -1
    best_metric: float = float("-inf")
    stopped_early: bool = False

    COLUMNS = ("step", "lr", "l_task", "l_gmm", "l_theta", "m_norm", "critic_updates",
               "val_metric", "mu_norm_max", "wall_s")

    def append(self, **rec):
        self.records.append(rec)

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def deterministic_view(self):
        return [{k: v for k, v in r.items() if k != "wall_s"} for r in self.records]

    def to_text(self, sep=","):
        lines = [sep.join(self.COLUMNS)]
        for r in self.records:
            lines.append(sep.join(_fmt(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def build_specs(train, cfg):
    n_strata = _n_strata(train) if cfg.conditional else 1
    pred = PredictorSpec(
        feature_dim=train.x.shape[1],
        n_classes=train.y.shape[1],
        n_strata=n_strata,
        hidden_dims=list(cfg.hidden_dims),
        use_demographics=cfg.use_demographics,
        d_embed_dim=cfg.d_embed_dim,
        task_mode=train.task_mode,
        leaky_slope=cfg.leaky_slope,
    )
    critic = CriticSpec(
        n_sites=_n_sites(train),
        n_strata=n_strata,
        z_embed_dim=cfg.z_embed_dim,
        d_embed_dim=cfg.d_embed_dim,
        hidden_dim=cfg.critic_hidden,
        n_layers=cfg.critic_layers,
        output_dim=cfg.critic_output_dim,
        leaky_slope=cfg.leaky_slope,
    )
    return pred, critic


def _n_strata(split):
    if split.config is not None:
        return split.config.n_strata
    return int(split.d.max()) + 1


def _n_sites(split):
    if split.config is not None:
        return split.config.n_sites
    return int(split.z.max()) + 1


def init_model(train, cfg):
    pred_spec, critic_spec = build_specs(train, cfg)
    params = init_params(pred_spec, mix(cfg.seed, "init", "predictor"))
    moment_state = None
    if cfg.critic_enabled:
        init_params(critic_spec, mix(cfg.seed, "init", "critic"), store=params)
        moment_state = MomentState.create(critic_spec.n_strata, critic_spec.output_dim,
                                          cfg.momentum_ema)
    else:
        critic_spec = None
    return Model(pred_spec, critic_spec, params, moment_state, cfg.ablation)


# ------------------------------------------------------------ losses


def task_loss(spec, logits, y):
    if spec.task_mode == SINGLE_LABEL:
        loss, probs = softmax_ce(logits, y)
        return loss, probs, softmax_ce_backward(probs, y)
    loss, probs = sigmoid_bce(logits, y)
    return loss, probs, sigmoid_bce_backward(probs, y)


def _dlogits_from_dprobs(spec, probs, dprobs):
    if spec.task_mode == SINGLE_LABEL:
        return probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
    return dprobs * probs * (1.0 - probs)


def _abort_if_nonfinite(value, what, model):
    if not math.isfinite(value):
        raise NumericalAbort(f"non-finite {what}", snapshot=model.copy())


def critic_step(batch, model, opt, cfg):
    """One ascent step on the critic; returns (L_GMM before the step, new MomentState).

    The predictor is evaluated without side effects; the critic's power
    iteration and the EMA state advance.  ``model.moment_state`` is replaced.
    """
    params = model.params
    _, probs = predictor_forward(params, model.pred_spec, batch.x, batch.d)
    e = compute_residuals(batch.y, probs)
    c, cache = critic_forward(params, model.critic_spec, batch.z, batch.d,
                              training=True, return_cache=True)
    c_t, new_state = center_instruments(c, batch.d, model.moment_state, training=True)
    m = moment_matrix(e, c_t)
    loss = gmm_loss(m)
    _abort_if_nonfinite(loss, "critic L_GMM", model)
    dc = (e @ gmm_loss_grad(m)) / e.shape[0]
    params.set_grads(critic_backward(params, model.critic_spec, cache, dc))
    adamw_step(params, opt, maximize=True, names=params.names("critic."))
    model.moment_state = new_state
    return loss, new_state


def predictor_objective(model, batch, lam):
    """L_theta and its gradient w.r.t. every trainable predictor entry.

    The centred instruments are constants for the predictor (no gradient
    flows into the critic or the running means).  Returns
    ``(l_theta, l_task, l_gmm, grads)``; ``l_gmm`` is NaN without a critic.
    """
    params = model.params
    logits, probs, cache = predictor_forward(params, model.pred_spec, batch.x, batch.d,
                                             return_cache=True)
    l_task, _, dlogits = task_loss(model.pred_spec, logits, batch.y)
    l_gmm = float("nan")
    if model.critic_spec is not None:
        c = critic_forward(params, model.critic_spec, batch.z, batch.d, training=False)
        c_t, _ = center_instruments(c, batch.d, model.moment_state, training=False)
        e = compute_residuals(batch.y, probs)
        m = moment_matrix(e, c_t)
        l_gmm = gmm_loss(m)
        if lam != 0.0:
            de = (c_t @ gmm_loss_grad(m).T) / e.shape[0]
            dlogits = dlogits + lam * _dlogits_from_dprobs(model.pred_spec, probs, -de)
    l_theta = l_task + (lam * l_gmm if lam != 0.0 else 0.0)
    grads = predictor_backward(params, model.pred_spec, cache, dlogits)
    return l_theta, l_task, l_gmm, grads


def predictor_step(batch, model, opt, cfg):
    """One descent step on L_task + lambda * L_GMM; returns (L_theta, L_task, L_GMM)."""
    l_theta, l_task, l_gmm, grads = predictor_objective(model, batch, cfg.lam)
    _abort_if_nonfinite(l_theta, "predictor L_theta", model)
    model.params.set_grads(grads)
    names = [n for n in model.params.names("pred.") if model.params[n].trainable]
    adamw_step(model.params, opt, maximize=False, names=names)
    return l_theta, l_task, l_gmm


# ------------------------------------------------------------ data views


def permute_sites_within_strata(z, d, seed):
    """Seeded shuffle of site ids among samples of the same stratum."""
    rng = np.random.default_rng(seed)
    out = np.array(z, dtype=np.int64, copy=True)
    for k in np.unique(d):
        idx = np.flatnonzero(d == k)
        out[idx] = out[idx][rng.permutation(idx.size)]
    return out


def training_view(split, cfg):
    """(x, y, critic sites, strata) as the chosen ablation sees them."""
    d = split.d if cfg.conditional else np.zeros_like(split.d)
    z = split.z
    if cfg.ablation == "random_z":
        z = permute_sites_within_strata(split.z, split.d, mix(cfg.seed, "random_z"))
    return split.x, split.y, z, d


def _lr_at(cfg, base, step):
    if cfg.lr_schedule == "constant":
        return base
    warm = max(1, int(round(cfg.warmup_frac * cfg.max_steps)))
    if step < warm:
        return base * (step + 1) / warm
    frac = (step - warm) / max(1, cfg.max_steps - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def validation_metric(model, split):
    """Accuracy (single-label) or macro-AUROC (multi-label) on ``split``."""
    _, probs = model.predict(split.x, split.d)
    if model.pred_spec.task_mode == MULTI_LABEL:
        return metrics.macro_auroc(probs, split.y)[0]
    return float((probs.argmax(axis=1) == split.y.argmax(axis=1)).mean())


def check_roles(train, source_val):
    if train.role == "ood_test" or source_val.role == "ood_test":
        raise ContractViolation("OOD test data must never be used for training or selection")
    if train.role != "train":
        raise ContractViolation(f"fit expects a train split, got role {train.role!r}")


def fit(train, source_val, cfg, on_step=None):
    """Train with alternating updates and source-validation model selection.

    Returns ``(best_model, history)``.  ``on_step(step, model)`` is an
    optional hook called after every predictor update.
    """
    check_roles(train, source_val)
    if len(train) == 0 or len(source_val) == 0:
        raise ValidationError("train and source_val must be nonempty")
    model = init_model(train, cfg)
    x, y, z, d = training_view(train, cfg)
    n = len(train)
    bs = min(cfg.batch_size, n)
    opt_pred = OptimizerState(cfg.lr_predictor, cfg.weight_decay)
    opt_critic = OptimizerState(cfg.critic_lr, cfg.beta * cfg.weight_decay)
    order_rng = np.random.default_rng(mix(cfg.seed, "order"))
    history = TrainHistory()
    best = model.copy()
    stale = 0
    order, cursor = order_rng.permutation(n), 0
    t0 = time.perf_counter()
    for step in range(cfg.max_steps):
        if cursor + bs > n:
            order, cursor = order_rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        batch = Batch(x[idx], y[idx], z[idx], d[idx])
        opt_pred.lr = _lr_at(cfg, cfg.lr_predictor, step)
        opt_critic.lr = _lr_at(cfg, cfg.critic_lr, step)
        critic_updates = 0
        if model.critic_spec is not None:
            for _ in range(cfg.n_critic):
                pred_before = model.params.arrays("pred.") if cfg.debug_checks else None
                pred_before = None if pred_before is None else {k: v.copy() for k, v in pred_before.items()}
                critic_step(batch, model, opt_critic, cfg)
                critic_updates += 1
                if cfg.debug_checks:
                    _assert_unchanged(pred_before, model.params.arrays("pred."), "critic_step")
        if cfg.debug_checks and model.critic_spec is not None:
            crit_before = {k: v.copy() for k, v in model.params.arrays("critic.").items()}
            state_before = model.moment_state.copy()
        l_theta, l_task, l_gmm = predictor_step(batch, model, opt_pred, cfg)
        if cfg.debug_checks and model.critic_spec is not None:
            _assert_unchanged(crit_before, model.params.arrays("critic."), "predictor_step")
            if not state_before.equal(model.moment_state):
                raise ContractViolation("predictor_step modified the moment state")
        model.step = step + 1
        val = float("nan")
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.max_steps:
            val = validation_metric(model, source_val)
            if val > history.best_metric:
                history.best_metric, history.best_step = val, step + 1
                best = model.copy()
                stale = 0
            else:
                stale += 1
        mu_norm = (float(np.abs(model.moment_state.mu).max())
                   if model.moment_state is not None else 0.0)
        history.append(
            step=step + 1, lr=opt_pred.lr, l_task=l_task, l_gmm=l_gmm, l_theta=l_theta,
            m_norm=math.sqrt(l_gmm) if l_gmm == l_gmm else float("nan"),
            critic_updates=critic_updates, val_metric=val, mu_norm_max=mu_norm,
            wall_s=time.perf_counter() - t0,
        )
        if on_step is not None:
            on_step(step + 1, model)
        if stale >= cfg.patience:
            history.stopped_early = True
            break
    return best, history


def _assert_unchanged(before, after, where):
    for k, v in before.items():
        if v.tobytes() != after[k].tobytes():
            raise ContractViolation(f"{where} modified {k}")


def lambda_sweep(train, source_val, ood_test, cfg, grid=None, seeds=None, metric="wg_acc"):
    """One fit per (lambda, seed).  Selection uses the mean validation metric only.

    Returns a list of row dicts with keys lam, seed, run_seed, val, ood,
    selected.  ``ood`` is reported for analysis and never consulted.
    """
    from dataclasses import replace

    grid = tuple(cfg.lambda_grid if grid is None else grid)
    if not grid:
        raise ValidationError("lambda grid must be nonempty")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for gi, lam in enumerate(grid):
        for si, seed in enumerate(seeds):
            run_seed = mix(seed, "sweep", gi)
            run_cfg = replace(cfg, lam=float(lam), seed=run_seed)
            model, hist = fit(train, source_val, run_cfg)
            ood_val = getattr(metrics.evaluate(model, ood_test), metric)
            rows.append({"lam": float(lam), "seed": seed, "run_seed": run_seed,
                         "val": hist.best_metric, "ood": ood_val, "selected": False})
    mean_val = {lam: np.mean([r["val"] for r in rows if r["lam"] == lam]) for lam in grid}
    chosen = max(grid, key=lambda lam: (mean_val[lam], -grid.index(lam)))
    for r in rows:
        r["selected"] = r["lam"] == chosen
    return rows
