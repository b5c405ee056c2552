"""Accuracy, worst-group accuracy, calibration, AUROC, fairness gaps and
moment-violation diagnostics over a :class:`PredictionLog`."""

import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .errors import ValidationError
from .models import MULTI_LABEL, SINGLE_LABEL

GROUPINGS = ("z_y", "d", "z", "z_d")


def _mean(values):
    """Exactly rounded mean, so reordering the log never changes a metric."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    return math.fsum(values.tolist()) / values.size


def _col_means(values):
    return np.array([_mean(col) for col in np.asarray(values, dtype=np.float64).T])


@dataclass
class PredictionLog:
    scores: np.ndarray  # [N, C] probabilities
    labels: np.ndarray  # [N, C] 0/1
    z: np.ndarray
    d: np.ndarray
    task_mode: str = SINGLE_LABEL

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if self.scores.ndim != 2 or self.scores.shape != self.labels.shape:
            raise ValidationError(f"scores {self.scores.shape} and labels {self.labels.shape} must match")
        n = self.scores.shape[0]
        if self.z.shape != (n,) or self.d.shape != (n,):
            raise ValidationError("z and d must be 1-d and aligned with scores")
        if n and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValidationError("scores must lie in [0, 1]")
        if self.task_mode == SINGLE_LABEL and n:
            if np.abs(self.scores.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValidationError("single-label score rows must sum to 1")

    def __len__(self):
        return self.scores.shape[0]

    @property
    def predictions(self):
        """Hard predictions as a 0/1 matrix (argmax, lowest index wins ties; or 0.5 threshold)."""
        if self.task_mode == SINGLE_LABEL:
            out = np.zeros_like(self.scores)
            out[np.arange(len(self)), self.scores.argmax(axis=1)] = 1.0
            return out
        return (self.scores >= 0.5).astype(np.float64)

    @property
    def correct(self):
        """Per-sample correctness: exact class for single-label, mean over labels for multi-label."""
        hit = self.predictions == self.labels
        if self.task_mode == SINGLE_LABEL:
            return hit.all(axis=1).astype(np.float64)
        return hit.mean(axis=1)

    @property
    def label_ids(self):
        """Class index (single-label) or label bitmask (multi-label)."""
        if self.task_mode == SINGLE_LABEL:
            return self.labels.argmax(axis=1)
        weights = 1 << np.arange(self.labels.shape[1], dtype=np.int64)
        return (self.labels.astype(np.int64) * weights).sum(axis=1)

    @classmethod
    def from_model(cls, model, split):
        _, probs = model.predict(split.x, split.d)
        return cls(probs, split.y, split.z, split.d, model.pred_spec.task_mode)


def _group_keys(log, grouping):
    if grouping == "z_y":
        return list(zip(log.z.tolist(), log.label_ids.tolist()))
    if grouping == "d":
        return log.d.tolist()
    if grouping == "z":
        return log.z.tolist()
    if grouping == "z_d":
        return list(zip(log.z.tolist(), log.d.tolist()))
    raise ValidationError(f"unknown grouping {grouping!r}; expected {GROUPINGS}")


def accuracy_and_wg(log, grouping="z_y"):
    """Return ``(acc, wg_acc, worst_group, table)``.

    ``table`` maps group key to ``(count, accuracy)``; only nonempty groups
    can appear, so no exclusions arise from the log itself.
    """
    if len(log) == 0:
        raise ValidationError("accuracy needs a nonempty log")
    correct = log.correct
    keys = _group_keys(log, grouping)
    table = {}
    for key in sorted(set(keys)):
        mask = np.array([k == key for k in keys])
        table[key] = (int(mask.sum()), _mean(correct[mask]))
    worst = min(table, key=lambda k: (table[k][1], k))
    return _mean(correct), table[worst][1], worst, table


def ece(log, n_bins=15):
    """Expected calibration error with equal-width, right-closed bins.

    Returns ``(ece, bins)`` where ``bins`` lists ``(lo, hi, count, acc, conf)``.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    if log.task_mode != SINGLE_LABEL:
        raise ValidationError("ece is defined for single-label logs")
    if len(log) == 0:
        raise ValidationError("ece needs a nonempty log")
    conf = log.scores.max(axis=1)
    correct = log.correct
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    n = len(log)
    total = 0.0
    bins = []
    for b in range(n_bins):
        mask = idx == b
        cnt = int(mask.sum())
        if cnt == 0:
            bins.append((edges[b], edges[b + 1], 0, float("nan"), float("nan")))
            continue
        acc_b = _mean(correct[mask])
        conf_b = _mean(conf[mask])
        total += cnt / n * abs(acc_b - conf_b)
        bins.append((edges[b], edges[b + 1], cnt, acc_b, conf_b))
    return total, bins


def auroc(scores, labels):
    """Rank-statistic AUROC for one class, ties counted as one half."""
    s = np.ascontiguousarray(scores, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.float64)
    n_pos = int((y > 0.5).sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValidationError("AUROC needs at least one positive and one negative")
    return float(kernels.auroc(s, y))


def macro_auroc(scores, labels):
    """Return ``(macro, per_class, excluded)``; degenerate classes get NaN and are listed."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    per_class = []
    excluded = []
    for c in range(scores.shape[1]):
        n_pos = int((labels[:, c] > 0.5).sum())
        if n_pos == 0 or n_pos == labels.shape[0]:
            per_class.append(float("nan"))
            excluded.append(c)
            continue
        per_class.append(auroc(scores[:, c], labels[:, c]))
    kept = [v for v in per_class if v == v]
    if not kept:
        raise ValidationError("AUROC undefined: every class is degenerate")
    return _mean(kept), per_class, excluded


def _fairness_classes(log):
    if log.task_mode == SINGLE_LABEL and log.scores.shape[1] == 2:
        return [1]
    return list(range(log.scores.shape[1]))


def fairness_gaps(log, groups=None):
    """Equalized-odds and demographic-parity differences across protected groups.

    ``groups`` defaults to the strata ``d``.  Returns ``(eod, dpd, flags)``;
    a pair where either group lacks positives or negatives is skipped for
    EOD and named in ``flags``.  Multiple classes are macro-averaged.
    """
    groups = log.d if groups is None else np.asarray(groups)
    ids = np.unique(groups)
    if ids.size < 2:
        raise ValidationError("fairness gaps need at least two protected groups")
    preds = log.predictions
    eods, dpds, flags = [], [], []
    for c in _fairness_classes(log):
        yhat = preds[:, c] > 0.5
        ytrue = log.labels[:, c] > 0.5
        rate, tpr, fpr = {}, {}, {}
        for g in ids.tolist():
            m = groups == g
            rate[g] = _mean(yhat[m])
            pos, neg = m & ytrue, m & ~ytrue
            tpr[g] = _mean(yhat[pos]) if pos.any() else None
            fpr[g] = _mean(yhat[neg]) if neg.any() else None
        gl = ids.tolist()
        dpd_c, eod_c = 0.0, None
        for i, a in enumerate(gl):
            for b in gl[i + 1:]:
                dpd_c = max(dpd_c, abs(rate[a] - rate[b]))
                if None in (tpr[a], tpr[b], fpr[a], fpr[b]):
                    flags.append((c, a, b))
                    continue
                gap = max(abs(tpr[a] - tpr[b]), abs(fpr[a] - fpr[b]))
                eod_c = gap if eod_c is None else max(eod_c, gap)
        dpds.append(dpd_c)
        if eod_c is not None:
            eods.append(eod_c)
    eod = _mean(eods) if eods else float("nan")
    return eod, _mean(dpds), flags


def moment_violation(residuals, d, z):
    """Max over strata, sites and classes of |mean_e(z, d) - mean_e(d)|.

    Returns ``(overall, per_stratum, flagged)``; strata observed at a single
    site contribute 0 and are listed in ``flagged``.
    """
    e = np.asarray(residuals, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    d = np.asarray(d, dtype=np.int64)
    z = np.asarray(z, dtype=np.int64)
    if e.shape[0] != d.size or d.size != z.size:
        raise ValidationError("residuals, strata and sites must be aligned")
    per_stratum, flagged = {}, []
    for k in np.unique(d).tolist():
        mk = d == k
        base = _col_means(e[mk])
        sites = np.unique(z[mk])
        if sites.size < 2:
            per_stratum[k] = 0.0
            flagged.append(k)
            continue
        per_stratum[k] = max(float(np.abs(_col_means(e[mk & (z == s)]) - base).max())
                             for s in sites.tolist())
    overall = max(per_stratum.values()) if per_stratum else 0.0
    return overall, per_stratum, flagged


@dataclass
class MetricReport:
    accuracy: float
    wg_acc: float
    wg_group: tuple
    wg_acc_d: float
    wg_acc_z: float
    ece: float
    macro_auroc: float
    eod: float
    dpd: float
    moment_violation: float
    n: int
    per_stratum: dict = field(default_factory=dict)  # d -> (count, acc, macro_auroc)
    per_class_auroc: list = field(default_factory=list)
    ece_bins: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    COLUMNS = ("n", "accuracy", "wg_acc", "wg_acc_d", "wg_acc_z", "ece", "macro_auroc",
               "eod", "dpd", "moment_violation")

    def as_dict(self):
        return {c: getattr(self, c) for c in self.COLUMNS}

    def to_delimited(self, sep=","):
        vals = self.as_dict()
        return sep.join(self.COLUMNS) + "\n" + sep.join(_fmt(vals[c]) for c in self.COLUMNS) + "\n"

    def to_table(self):
        vals = self.as_dict()
        width = max(len(c) for c in self.COLUMNS)
        lines = [f"{c.ljust(width)}  {_fmt(vals[c])}" for c in self.COLUMNS]
        lines.append(f"{'wg_group'.ljust(width)}  {self.wg_group}")
        if self.per_stratum:
            lines.append("stratum  n  accuracy  macro_auroc")
            for k, (cnt, acc, auc) in sorted(self.per_stratum.items()):
                lines.append(f"{k}  {cnt}  {_fmt(acc)}  {_fmt(auc)}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.12g}"


def report_from_log(log, n_bins=15):
    warnings = []
    acc, wg, worst, _ = accuracy_and_wg(log, "z_y")
    _, wg_d, _, _ = accuracy_and_wg(log, "d")
    _, wg_z, _, _ = accuracy_and_wg(log, "z")
    cal, bins = (float("nan"), [])
    if log.task_mode == SINGLE_LABEL:
        cal, bins = ece(log, n_bins)
    try:
        auc, per_class, excluded = macro_auroc(log.scores, log.labels)
        if excluded:
            warnings.append(f"AUROC excluded degenerate classes {excluded}")
    except ValidationError:
        auc, per_class = float("nan"), []
        warnings.append("AUROC undefined: every class degenerate")
    if np.unique(log.d).size >= 2:
        eod, dpd, flags = fairness_gaps(log)
        if flags:
            warnings.append(f"EOD skipped (class, group, group) pairs {flags}")
    else:
        eod, dpd = float("nan"), float("nan")
        warnings.append("fairness gaps need two strata")
    mv, _, flagged = moment_violation(log.labels - log.scores, log.d, log.z)
    if flagged:
        warnings.append(f"strata observed at a single site: {flagged}")
    per_stratum = {}
    correct = log.correct
    for k in np.unique(log.d).tolist():
        m = log.d == k
        try:
            auc_k = macro_auroc(log.scores[m], log.labels[m])[0]
        except ValidationError:
            auc_k = float("nan")
        per_stratum[k] = (int(m.sum()), _mean(correct[m]), auc_k)
    return MetricReport(
        accuracy=acc, wg_acc=wg, wg_group=worst, wg_acc_d=wg_d, wg_acc_z=wg_z, ece=cal,
        macro_auroc=auc, eod=eod, dpd=dpd, moment_violation=mv, n=len(log),
        per_stratum=per_stratum, per_class_auroc=per_class, ece_bins=bins, warnings=warnings,
    )


def evaluate(model, split, n_bins=15):
    """Full :class:`MetricReport` for ``model`` on ``split``."""
    return report_from_log(PredictionLog.from_model(model, split), n_bins)


__all__ = [
    "GROUPINGS", "MULTI_LABEL", "MetricReport", "PredictionLog", "accuracy_and_wg", "auroc",
    "ece", "evaluate", "fairness_gaps", "macro_auroc", "moment_violation", "report_from_log",
]
