"""Flat ``key = value`` experiment configuration.

Keys carry a section prefix: ``scm.*`` (simulator), ``train.*`` (trainer),
``metric.*`` (evaluation); unprefixed keys are experiment-level.  Lines
starting with ``#`` are comments.  Lists use commas; matrices separate rows
with ``;``.  Example::

    seed = 7
    n_seeds = 5
    scm.artifact_strength = 3.0
    scm.selection_matrix = 0.45,0.45,0.05,0.025,0.025; 0.025,0.025,0.05,0.45,0.45
    train.lam = 1.0
    train.lambda_grid = 0.1, 1.0, 10.0
"""

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .scm import ScmConfig, parse_ood_mode
from .trainer import TrainConfig

_ALIASES = {"train.lambda": "train.lam"}
_ARRAY_KEYS = {"selection_matrix": 2, "stratum_probs": 1}
_OPTIONAL_FLOAT = {"lr_critic"}
_TUPLE_INT = {"hidden_dims"}
_TUPLE_FLOAT = {"lambda_grid"}
_PATH_KEYS = {"out", "data_dir"}


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_field(name, default, text):
    text = text.strip()
    if name in _ARRAY_KEYS:
        rows = [r for r in text.split(";") if r.strip()]
        mat = np.array([[float(v) for v in r.split(",")] for r in rows])
        return mat if _ARRAY_KEYS[name] == 2 else mat.reshape(-1)
    if name in _OPTIONAL_FLOAT:
        return None if text.lower() in ("none", "") else float(text)
    if name in _TUPLE_INT:
        return tuple(int(v) for v in text.split(",") if v.strip())
    if name in _TUPLE_FLOAT:
        return tuple(float(v) for v in text.split(",") if v.strip())
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text, 0)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(v):
    if isinstance(v, np.ndarray):
        if v.ndim == 2:
            return "; ".join(",".join(repr(float(x)) for x in row) for row in v)
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, (tuple, list)):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)


@dataclass
class MetricOptions:
    n_bins: int = 15
    grouping: str = "z_y"
    headline: str = "wg_acc"


@dataclass
class ExperimentConfig:
    scm: ScmConfig = field(default_factory=ScmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metric: MetricOptions = field(default_factory=MetricOptions)
    seed: int = 0
    n_seeds: int = 5
    n_train: int = 4000
    n_val: int = 1000
    n_id_test: int = 4000
    n_ood_test: int = 4000
    ood_mode: str = "reversed"
    out: str = "runs"
    data_dir: str = ""

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        for name in ("n_train", "n_val", "n_id_test", "n_ood_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            parse_ood_mode(self.ood_mode)
        except (ValidationError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def dataset_dir(self):
        return Path(self.data_dir) if self.data_dir else Path(self.out) / "data"

    def items(self):
        """Canonical ``(key, text)`` pairs in a fixed order."""
        out = []
        for f in fields(self):
            if f.name in ("scm", "train", "metric"):
                continue
            out.append((f.name, _format_value(getattr(self, f.name))))
        for section in ("scm", "train", "metric"):
            obj = getattr(self, section)
            for f in fields(obj):
                out.append((f"{section}.{f.name}", _format_value(getattr(obj, f.name))))
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def hash(self):
        """First 16 hex digits of the SHA-256 of the canonical text (paths excluded)."""
        text = "".join(f"{k} = {v}\n" for k, v in self.items() if k not in _PATH_KEYS)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def parse_config_text(text):
    """Parse flat ``key = value`` text into an :class:`ExperimentConfig`."""
    sections = {"scm": {}, "train": {}, "metric": {}}
    top = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        prefix, dot, name = key.partition(".")
        target = sections.get(prefix) if dot else top
        if target is None:
            raise ConfigError(f"line {lineno}: unknown section {prefix!r}")
        target[name if dot else key] = (value, lineno)
    classes = {"scm": ScmConfig, "train": TrainConfig, "metric": MetricOptions}
    built = {}
    try:
        for section, cls in classes.items():
            defaults = cls()
            known = {f.name for f in fields(cls)}
            kwargs = {}
            for name, (value, lineno) in sections[section].items():
                if name not in known:
                    raise ConfigError(f"line {lineno}: unknown key {section}.{name}")
                try:
                    kwargs[name] = _parse_field(name, getattr(defaults, name), value)
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: bad value for {section}.{name}: {exc}") from exc
            built[section] = cls(**kwargs)
        defaults = ExperimentConfig()
        known = {f.name for f in fields(ExperimentConfig)} - set(classes)
        kwargs = {}
        for name, (value, lineno) in top.items():
            if name not in known:
                raise ConfigError(f"line {lineno}: unknown key {name}")
            try:
                kwargs[name] = _parse_field(name, getattr(defaults, name), value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {name}: {exc}") from exc
        return ExperimentConfig(**built, **kwargs)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def reference_config(**overrides):
    """The synthetic benchmark used for the ablation and sweep acceptance runs.

    Simulator defaults, ``lam = 30`` and a large in-distribution test split so the moment-violation statistic is
    not dominated by sampling noise in the rare site cells.
    """
    exp = ExperimentConfig(train=TrainConfig(lam=30.0), n_id_test=20000)
    return replace(exp, **overrides)
