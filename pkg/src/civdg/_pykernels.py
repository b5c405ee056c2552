"""Pure numpy implementations of the hot numerical kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
signature.  All inputs are C-contiguous float64 arrays (int64 for ids).
"""

import numpy as np

BACKEND = "python"


def affine_forward(x, W, b):
    return x @ W.T + b


def affine_backward(dout, x, W):
    return dout @ W, dout.T @ x, dout.sum(axis=0)


def leaky_relu(x, slope):
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_backward(dout, x, slope):
    return np.where(x > 0.0, dout, slope * dout)


def moment_matrix(e, c):
    return (e.T @ c) / e.shape[0]


def stratum_sums(c, d, n_strata):
    sums = np.zeros((n_strata, c.shape[1]))
    np.add.at(sums, d, c)
    counts = np.bincount(d, minlength=n_strata).astype(np.int64)
    return sums, counts


def power_iteration(W, u, n_iters):
    v = None
    for _ in range(n_iters):
        v = W.T @ u
        v = v / max(np.sqrt(v @ v), 1e-12)
        u = W @ v
        u = u / max(np.sqrt(u @ u), 1e-12)
    sigma = float(u @ (W @ v))
    return u, v, sigma


def auroc(scores, labels):
    """Mann-Whitney AUROC with ties counted one half; labels are 0/1."""
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    lab = labels[order]
    n = s.shape[0]
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = float(lab.sum())
    n_neg = n - n_pos
    rank_sum = float(ranks[lab == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
