"""Brute-force reference implementations used by the metric tests.

Each one is written from the metric's definition with explicit loops and
shares no code with ``civdg.metrics``.
"""

import itertools

import numpy as np


def random_log(rng, n, n_classes=2, multi=False, n_sites=3, n_strata=2):
    if multi:
        scores = rng.random((n, n_classes))
        labels = (rng.random((n, n_classes)) < 0.5).astype(float)
    else:
        raw = rng.random((n, n_classes)) ** 3
        scores = raw / raw.sum(axis=1, keepdims=True)
        labels = np.eye(n_classes)[rng.integers(0, n_classes, n)]
    return scores, labels, rng.integers(0, n_sites, n), rng.integers(0, n_strata, n)


def hard(scores, multi):
    if multi:
        return [[1 if s >= 0.5 else 0 for s in row] for row in scores]
    out = []
    for row in scores:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        out.append([1 if j == best else 0 for j in range(len(row))])
    return out


def correctness(scores, labels, multi):
    preds = hard(scores, multi)
    out = []
    for p, y in zip(preds, labels):
        hits = [1.0 if p[j] == int(y[j]) else 0.0 for j in range(len(y))]
        out.append(sum(hits) / len(hits) if multi else float(all(h == 1.0 for h in hits)))
    return out


def accuracy_wg(scores, labels, keys, multi=False):
    corr = correctness(scores, labels, multi)
    groups = {}
    for c, k in zip(corr, keys):
        groups.setdefault(k, []).append(c)
    accs = {k: sum(v) / len(v) for k, v in groups.items()}
    return sum(corr) / len(corr), min(accs.values())


def ece(scores, labels, n_bins):
    corr = correctness(scores, labels, False)
    conf = [max(row) for row in scores]
    total = 0.0
    n = len(conf)
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [i for i in range(n) if (lo < conf[i] <= hi) or (b == 0 and conf[i] == 0.0)]
        if not members:
            continue
        acc = sum(corr[i] for i in members) / len(members)
        cf = sum(conf[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - cf)
    return total


def auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p, q in itertools.product(pos, neg):
        wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def fairness(scores, labels, groups, multi):
    """(eod, dpd) from explicit per-group confusion matrices."""
    preds = hard(scores, multi)
    C = len(labels[0])
    classes = [1] if (not multi and C == 2) else list(range(C))
    ids = sorted(set(groups))
    eods, dpds = [], []
    for c in classes:
        conf = {}
        for g in ids:
            tp = fp = tn = fn = 0
            for p, y, gg in zip(preds, labels, groups):
                if gg != g:
                    continue
                if int(y[c]) == 1:
                    tp, fn = tp + (p[c] == 1), fn + (p[c] == 0)
                else:
                    fp, tn = fp + (p[c] == 1), tn + (p[c] == 0)
            conf[g] = (tp, fp, tn, fn)
        dpd, eod = 0.0, None
        for a, b in itertools.combinations(ids, 2):
            ra = (conf[a][0] + conf[a][1]) / sum(conf[a])
            rb = (conf[b][0] + conf[b][1]) / sum(conf[b])
            dpd = max(dpd, abs(ra - rb))
            pa, pb = conf[a][0] + conf[a][3], conf[b][0] + conf[b][3]
            na, nb = conf[a][1] + conf[a][2], conf[b][1] + conf[b][2]
            if 0 in (pa, pb, na, nb):
                continue
            gap = max(abs(conf[a][0] / pa - conf[b][0] / pb), abs(conf[a][1] / na - conf[b][1] / nb))
            eod = gap if eod is None else max(eod, gap)
        dpds.append(dpd)
        if eod is not None:
            eods.append(eod)
    return (sum(eods) / len(eods) if eods else float("nan")), sum(dpds) / len(dpds)


def moment_violation(residuals, d, z):
    worst = 0.0
    for k in sorted(set(d.tolist())):
        rows = [i for i in range(len(d)) if d[i] == k]
        for c in range(residuals.shape[1]):
            base = sum(residuals[i, c] for i in rows) / len(rows)
            for s in sorted(set(z[rows].tolist())):
                cell = [i for i in rows if z[i] == s]
                worst = max(worst, abs(sum(residuals[i, c] for i in cell) / len(cell) - base))
    return worst
