"""Residuals, stratum-wise instrument centering and the GMM moment loss."""

from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import ColdStratumError, DimensionError, ValidationError


@dataclass
class MomentState:
    """Per-stratum running means of the critic output."""

    mu: np.ndarray  # [K, M]
    initialized: np.ndarray  # [K] bool
    momentum: float = 0.9

    @classmethod
    def create(cls, n_strata, dim, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValidationError(f"momentum must lie in [0,1), got {momentum}")
        return cls(np.zeros((n_strata, dim)), np.zeros(n_strata, dtype=bool), momentum)

    @property
    def n_strata(self):
        return self.mu.shape[0]

    def copy(self):
        return MomentState(self.mu.copy(), self.initialized.copy(), self.momentum)

    def equal(self, other):
        return (
            self.mu.tobytes() == other.mu.tobytes()
            and self.initialized.tobytes() == other.initialized.tobytes()
            and self.momentum == other.momentum
        )


@dataclass
class MomentBatch:
    residuals: np.ndarray
    centered: np.ndarray
    moment: np.ndarray
    counts: np.ndarray


def compute_residuals(y, p):
    if y.shape != p.shape:
        raise DimensionError(f"residuals: label shape {y.shape} != prob shape {p.shape}")
    return y - p


def _stratum_sums(c, d, n_strata):
    c = np.ascontiguousarray(c, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.int64)
    if d.size and (d.min() < 0 or d.max() >= n_strata):
        raise ValidationError(f"stratum id out of range [0, {n_strata})")
    return kernels.stratum_sums(c, d, n_strata)


def center_instruments(c, d, state, training):
    """Subtract the stratum mean from each critic output row.

    Initialised strata are centred with their pre-update running mean;
    first-seen strata with their own batch mean.  In training mode the
    running means of strata present in the batch are updated (absent
    strata are left untouched); the input ``state`` is never mutated.
    Returns ``(centered, new_state)``.
    """
    d = np.asarray(d, dtype=np.int64)
    sums, counts = _stratum_sums(c, d, state.n_strata)
    present = counts > 0
    if not training:
        cold = present & ~state.initialized
        if cold.any():
            raise ColdStratumError(np.flatnonzero(cold).tolist())
        return c - state.mu[d], state
    batch_mean = np.zeros_like(sums)
    batch_mean[present] = sums[present] / counts[present, None]
    offsets = np.where(state.initialized[:, None], state.mu, batch_mean)
    centered = c - offsets[d]
    new = state.copy()
    m = state.momentum
    warm = present & state.initialized
    first = present & ~state.initialized
    new.mu[warm] = m * state.mu[warm] + (1.0 - m) * batch_mean[warm]
    new.mu[first] = batch_mean[first]
    new.initialized[first] = True
    return centered, new


def exact_center(c, d, n_strata=None):
    """Subtract the exact in-batch stratum mean (eval diagnostics and tests)."""
    d = np.asarray(d, dtype=np.int64)
    if n_strata is None:
        n_strata = int(d.max()) + 1 if d.size else 1
    sums, counts = _stratum_sums(c, d, n_strata)
    means = np.zeros_like(sums)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    return c - means[d]


def moment_matrix(e, c):
    """(1/B) * sum_i e_i c_i^T, shape [C, M]."""
    if e.shape[0] != c.shape[0]:
        raise DimensionError(f"moment_matrix: batch sizes {e.shape[0]} and {c.shape[0]}")
    if e.shape[0] == 0:
        raise ValidationError("moment_matrix: empty batch")
    return kernels.moment_matrix(
        np.ascontiguousarray(e, dtype=np.float64), np.ascontiguousarray(c, dtype=np.float64)
    )


def gmm_loss(m):
    """Squared Frobenius norm of the moment matrix."""
    return float((m * m).sum())


def gmm_loss_grad(m):
    return 2.0 * m


def moment_batch(y, p, c, d, state, training):
    e = compute_residuals(y, p)
    c_t, new_state = center_instruments(c, d, state, training)
    counts = np.bincount(np.asarray(d, dtype=np.int64), minlength=state.n_strata)
    return MomentBatch(e, c_t, moment_matrix(e, c_t), counts), new_state
