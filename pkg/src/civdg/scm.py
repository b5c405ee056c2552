"""Structural causal model simulator for multi-site data with selection bias.

Generative order (each variable draws from its own seeded stream, so an
intervention on one variable leaves the others' noise untouched)::

    D ~ Cat(stratum_probs)
    Z ~ Cat(selection_matrix[D])                       selection bias D -> Z
    U = u_shift[D] + N(0, 1)                           confounder, Z indep. U | D
    Y_r = tanh(stratum_base[D] + conf * U * w + latent_noise * eps)
    A = site_pattern[Z] + site_scale[Z] * eps_A        site artifacts
    X = S @ Y_r + artifact_strength * A + noise_scale * eps_X
    Y = argmax(label_gain * Y_r + conf * U * w) (+ label-noise flips)

``Z`` never enters the label equation (exclusion restriction).
"""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InfeasibleError, ValidationError
from .seeding import mix

ROLES = ("train", "source_val", "id_test", "ood_test")
OOD_MODES = ("independent", "reversed", "held_out_site")


def enrichment_matrix(n_sites=5, n_strata=2, high=0.45, mid=0.05):
    """Selection matrix enriching stratum 0 in the low sites and the last
    stratum in the high sites (middle site, if any, gets ``mid``)."""
    if n_strata != 2:
        raise ValidationError("enrichment_matrix is defined for two strata")
    if n_sites == 4:
        low = round((1.0 - 2 * high) / 2, 12)
        row = np.array([high, high, low, low])
    elif n_sites == 5:
        low = round((1.0 - 2 * high - mid) / 2, 12)
        row = np.array([high, high, mid, low, low])
    else:
        raise ValidationError("enrichment_matrix supports 4 or 5 sites")
    return np.stack([row, row[::-1]])


@dataclass
class ScmConfig:
    n_sites: int = 5
    n_strata: int = 2
    n_classes: int = 2
    feature_dim: int = 16
    artifact_strength: float = 3.0
    confounder_strength: float = 1.0
    selection_matrix: np.ndarray = None
    label_noise: float = 0.0
    seed: int = 0
    task_mode: str = "single_label"
    stratum_probs: np.ndarray = None
    signal_strength: float = 3.0
    noise_scale: float = 0.3
    latent_noise: float = 0.2
    stratum_effect: float = 0.5
    u_shift: float = 0.3
    label_gain: float = 1.0
    artifact_signal_alignment: float = 0.7
    artifact_noise: float = 0.2

    def __post_init__(self):
        for name in ("n_sites", "n_strata", "n_classes", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.selection_matrix is None:
            if (self.n_sites, self.n_strata) in ((5, 2), (4, 2)):
                self.selection_matrix = enrichment_matrix(self.n_sites, self.n_strata)
            else:
                self.selection_matrix = np.full((self.n_strata, self.n_sites), 1.0 / self.n_sites)
        sel = np.asarray(self.selection_matrix, dtype=np.float64)
        if sel.shape != (self.n_strata, self.n_sites):
            raise ValidationError(
                f"selection_matrix must be {self.n_strata}x{self.n_sites}, got {sel.shape}"
            )
        if np.any(sel < 0) or np.any(np.abs(sel.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("selection_matrix rows must be nonnegative and sum to 1")
        self.selection_matrix = sel
        if self.stratum_probs is None:
            self.stratum_probs = np.full(self.n_strata, 1.0 / self.n_strata)
        probs = np.asarray(self.stratum_probs, dtype=np.float64)
        if probs.shape != (self.n_strata,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise ValidationError("stratum_probs must be a probability vector of length n_strata")
        self.stratum_probs = probs
        for name in ("artifact_strength", "confounder_strength", "signal_strength",
                     "noise_scale", "latent_noise", "label_gain", "artifact_noise"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValidationError("label_noise must lie in [0, 1]")
        if not 0.0 <= self.artifact_signal_alignment <= 1.0:
            raise ValidationError("artifact_signal_alignment must lie in [0, 1]")
        if self.task_mode not in ("single_label", "multi_label"):
            raise ValidationError(f"unknown task_mode {self.task_mode!r}")
        if self.task_mode == "single_label" and self.n_classes < 2:
            raise ValidationError("single_label needs n_classes >= 2")

    def to_dict(self):
        out = asdict(self)
        out["selection_matrix"] = self.selection_matrix.tolist()
        out["stratum_probs"] = self.stratum_probs.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def structural_equal(self, other):
        """True when every parameter except the selection matrix agrees."""
        a, b = self.to_dict(), other.to_dict()
        a.pop("selection_matrix")
        b.pop("selection_matrix")
        return a == b


@dataclass
class FeatureRecord:
    x: np.ndarray
    y: np.ndarray
    z: int
    d: int
    latent: dict | None = None


@dataclass
class DatasetSplit:
    """Column-oriented storage of a list of :class:`FeatureRecord`."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    d: np.ndarray
    role: str = "train"
    config: ScmConfig | None = None
    yr: np.ndarray | None = None
    u: np.ndarray | None = None
    a: np.ndarray | None = None
    task_mode: str = "single_label"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown split role {self.role!r}")
        n = self.x.shape[0]
        self.z = np.asarray(self.z, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if self.y.shape[0] != n or self.z.shape != (n,) or self.d.shape != (n,):
            raise ValidationError("split columns have inconsistent lengths")
        if not np.all(np.isfinite(self.x)):
            raise ValidationError("split features must be finite")

    def __len__(self):
        return self.x.shape[0]

    @property
    def has_latent(self):
        return self.yr is not None

    @property
    def n_classes(self):
        return self.y.shape[1]

    @property
    def labels(self):
        """Integer labels (single-label splits)."""
        return self.y.argmax(axis=1)

    def records(self):
        for i in range(len(self)):
            latent = None
            if self.has_latent:
                latent = {"y_r": self.yr[i], "u": self.u[i], "a": self.a[i]}
            yield FeatureRecord(self.x[i], self.y[i], int(self.z[i]), int(self.d[i]), latent)

    def subset(self, idx, role=None):
        idx = np.asarray(idx)
        pick = (lambda a: None if a is None else a[idx])
        return DatasetSplit(
            self.x[idx], self.y[idx], self.z[idx], self.d[idx], role or self.role, self.config,
            pick(self.yr), pick(self.u), pick(self.a), self.task_mode, dict(self.info),
        )

    def with_role(self, role):
        return replace(self, role=role)

    def empirical_selection(self, n_sites=None, n_strata=None):
        """Empirical P(Z | D) as a [K, n_sites] matrix (zero rows for absent strata)."""
        n_sites = n_sites or (self.config.n_sites if self.config else int(self.z.max()) + 1)
        n_strata = n_strata or (self.config.n_strata if self.config else int(self.d.max()) + 1)
        counts = np.zeros((n_strata, n_sites))
        np.add.at(counts, (self.d, self.z), 1.0)
        tot = counts.sum(axis=1, keepdims=True)
        return np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)


def _structure(cfg):
    """Fixed structural constants of g_r, g_A, g_X, g_Y (independent of selection)."""
    rng = np.random.default_rng(mix(cfg.seed, "structure"))
    p, C, K, S = cfg.feature_dim, cfg.n_classes, cfg.n_strata, cfg.n_sites
    q, _ = np.linalg.qr(rng.normal(size=(p, max(p, C))))
    basis = q[:, :min(p, C)]
    load = np.zeros((p, C))
    load[:, : basis.shape[1]] = basis
    signal = cfg.signal_strength * load
    # site patterns: a shared component along the class-contrast direction
    # plus a site-specific orthogonal part
    contrast = signal @ np.linspace(-1.0, 1.0, C) if C > 1 else signal[:, 0]
    cn = np.linalg.norm(contrast)
    contrast = contrast / cn if cn > 0 else contrast
    raw = rng.normal(size=(S, p))
    raw -= np.outer(raw @ contrast, contrast)
    raw /= np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    along = np.linspace(-1.0, 1.0, S) if S > 1 else np.zeros(1)
    rho = cfg.artifact_signal_alignment
    pattern = rho * along[:, None] * contrast[None, :] + np.sqrt(1 - rho**2) * raw
    site_scale = cfg.artifact_noise * rng.uniform(0.5, 1.5, size=S)
    w = np.linspace(-1.0, 1.0, C) if C > 1 else np.ones(1)
    favoured = np.arange(K) % C
    base = cfg.stratum_effect * (np.eye(C)[favoured] - 1.0 / C)
    u_mean = cfg.u_shift * (np.linspace(-1.0, 1.0, K) if K > 1 else np.zeros(1))
    return {
        "signal": signal, "pattern": pattern, "site_scale": site_scale,
        "w": w, "base": base, "u_mean": u_mean,
    }


def _stream(cfg, stream, name):
    return np.random.default_rng(mix(cfg.seed, stream, name))


def sample_dataset(cfg, n, stream=0, role="train", z_override=None):
    """Ancestral sample of ``n`` records.

    ``stream`` selects an independent noise stream (use distinct values for
    distinct splits).  ``z_override`` intervenes on the site assignment;
    every other variable keeps its noise draw, so labels are unchanged.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    st = _structure(cfg)
    C, p = cfg.n_classes, cfg.feature_dim
    d = _stream(cfg, stream, "d").choice(cfg.n_strata, size=n, p=cfg.stratum_probs)
    uz = _stream(cfg, stream, "z").random(n)
    cdf = np.cumsum(cfg.selection_matrix, axis=1)
    z = np.minimum((uz[:, None] >= cdf[d]).sum(axis=1), cfg.n_sites - 1)
    if z_override is not None:
        z = np.asarray(z_override, dtype=np.int64)
        if z.shape != (n,) or z.min() < 0 or z.max() >= cfg.n_sites:
            raise ValidationError("z_override must hold n valid site ids")
    u = st["u_mean"][d][:, None] + _stream(cfg, stream, "u").normal(size=(n, 1))
    conf = cfg.confounder_strength
    eps_r = _stream(cfg, stream, "r").normal(size=(n, C))
    yr = np.tanh(st["base"][d] + conf * u * st["w"] + cfg.latent_noise * eps_r)
    eps_a = _stream(cfg, stream, "a").normal(size=(n, p))
    a = st["pattern"][z] + st["site_scale"][z][:, None] * eps_a
    eps_x = _stream(cfg, stream, "x").normal(size=(n, p))
    x = yr @ st["signal"].T + cfg.artifact_strength * a + cfg.noise_scale * eps_x
    score = cfg.label_gain * yr + conf * u * st["w"]
    ry = _stream(cfg, stream, "y")
    flip = ry.random(n) < cfg.label_noise
    if cfg.task_mode == "single_label":
        lab = score.argmax(axis=1)
        other = (lab + 1 + ry.integers(0, C - 1, size=n)) % C
        lab = np.where(flip, other, lab)
        y = np.eye(C)[lab]
    else:
        y = (score > 0).astype(np.float64)
        bit_flip = ry.random((n, C)) < cfg.label_noise
        y = np.where(bit_flip, 1.0 - y, y)
    return DatasetSplit(x, y, z, d, role, cfg, yr, u, a, cfg.task_mode)


def inject_spurious_correlation(split, target, seed=0, tol=0.02):
    """Subsample ``split`` so that empirical P(Z | D) matches ``target``.

    Records are kept per (d, z) cell in a seeded random order; features and
    labels are untouched.  Raises :class:`InfeasibleError` naming the
    deficient cell when the target cannot be met within ``tol`` total
    variation.
    """
    if len(split) == 0:
        raise ValidationError("cannot subsample an empty split")
    target = np.asarray(target, dtype=np.float64)
    K, S = target.shape
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("target rows must be nonnegative and sum to 1")
    counts = np.zeros((K, S), dtype=np.int64)
    np.add.at(counts, (split.d, split.z), 1)
    keep_counts = np.zeros_like(counts)
    for k in range(K):
        if counts[k].sum() == 0:
            continue
        pos = target[k] > 0
        starved = np.flatnonzero(pos & (counts[k] == 0))
        if starved.size:
            raise InfeasibleError(
                f"cell (d={k}, z={starved[0]}) has no records but target mass "
                f"{target[k, starved[0]]:.3g}", cell=(k, int(starved[0])))
        ratio = counts[k, pos] / target[k, pos]
        n_keep = ratio.min()
        # guard against float round-off when the target equals the empirical rate
        n_keep = np.floor(n_keep + 1e-9)
        keep_counts[k] = np.minimum(np.floor(n_keep * target[k] + 1e-9).astype(np.int64), counts[k])
        got = keep_counts[k] / max(keep_counts[k].sum(), 1)
        tv = 0.5 * np.abs(got - target[k]).sum()
        if keep_counts[k].sum() == 0 or tv > tol:
            worst = int(np.argmin(np.where(pos, counts[k] / np.where(pos, target[k], 1), np.inf)))
            raise InfeasibleError(
                f"stratum {k}: cannot reach target within TV {tol} (got {tv:.4f}); "
                f"deficient cell (d={k}, z={worst}) has {counts[k, worst]} records",
                cell=(k, worst))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(split))
    taken = np.zeros((K, S), dtype=np.int64)
    keep = np.zeros(len(split), dtype=bool)
    for i in order:
        k, s = split.d[i], split.z[i]
        if taken[k, s] < keep_counts[k, s]:
            taken[k, s] += 1
            keep[i] = True
    out = split.subset(np.flatnonzero(keep))
    out.info["subsampled_from"] = len(split)
    out.info["subsampled_to"] = int(keep.sum())
    return out


def make_ood_shift(cfg, mode, site=None):
    """Copy of ``cfg`` with only the selection matrix changed.

    ``independent``: uniform rows.  ``reversed``: each row mirrored
    (site z -> n_sites-1-z).  ``held_out_site``: all mass on ``site``.
    """
    sel = cfg.selection_matrix
    if mode == "independent":
        new = np.full_like(sel, 1.0 / cfg.n_sites)
    elif mode == "reversed":
        new = sel[:, ::-1].copy()
    elif mode == "held_out_site":
        if site is None or not 0 <= int(site) < cfg.n_sites:
            raise ValidationError(f"held-out site {site!r} out of range [0, {cfg.n_sites})")
        new = np.zeros_like(sel)
        new[:, int(site)] = 1.0
    else:
        raise ValidationError(f"unknown OOD mode {mode!r}; expected one of {OOD_MODES}")
    return replace(cfg, selection_matrix=new)


def exclude_site(cfg, site):
    """Training-side counterpart of ``held_out_site``: zero the column and renormalise."""
    if not 0 <= int(site) < cfg.n_sites:
        raise ValidationError(f"held-out site {site!r} out of range [0, {cfg.n_sites})")
    sel = cfg.selection_matrix.copy()
    sel[:, int(site)] = 0.0
    rows = sel.sum(axis=1, keepdims=True)
    if np.any(rows == 0):
        raise ValidationError(f"a stratum places all its mass on site {site}")
    return replace(cfg, selection_matrix=sel / rows)


def parse_ood_mode(text):
    """'reversed' | 'independent' | 'held_out_site=K' -> (mode, site)."""
    if text.startswith("held_out_site"):
        _, _, val = text.partition("=")
        if not val:
            raise ValidationError("held_out_site needs a site index: held_out_site=K")
        return "held_out_site", int(val)
    if text not in OOD_MODES:
        raise ValidationError(f"unknown OOD mode {text!r}")
    return text, None


def check_mechanism_shift(train, ood):
    """Assert an OOD split differs from training only in the selection matrix."""
    if train.config is None or ood.config is None:
        return
    if not train.config.structural_equal(ood.config):
        raise ValidationError("ood split changes structural parameters beyond selection")
