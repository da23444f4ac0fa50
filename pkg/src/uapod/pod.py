"""Reduced bases from the posterior second moment, and the snapshot baseline.

The core object is the matrix-free operator sum_t (p_t + mean_t mean_t*):
its leading eigenvectors minimize the expected Frobenius projection cost
over unitary bases, whereas the snapshot method eigendecomposes the Gram
matrix of the state estimates alone and so never sees the covariances.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .hmm import GaussianPosterior
from .krylov import (
    DimensionMismatch,
    LinearOperator,
    SpectralDecomposition,
    fix_column_signs,
    lanczos_topk,
)


class ZeroTruth(ValueError):
    """Reconstruction error is undefined for an all-zero reference."""


class RankDeficient(UserWarning):
    """Fewer nonzero modes than requested; the basis was truncated."""


@dataclass(frozen=True)
class StateTrajectory:
    """Sequence of T state vectors (rows), optionally tied to a 2D grid."""

    states: np.ndarray
    grid: Optional[object] = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim != 2 or s.shape[0] < 1:
            raise DimensionMismatch("states must be a (T, n) array with T >= 1")
        object.__setattr__(self, "states", s)

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """States stacked as columns, shape (n, T)."""
        return self.states.T


class SecondMomentOperator(LinearOperator):
    """Matrix-free sum_t [p_t v + mean_t (mean_t . v)] over the posteriors.

    Symmetric PSD by construction. The reduction runs in ascending t so
    repeated applies are bitwise reproducible.
    """

    def __init__(self, posteriors: Sequence[GaussianPosterior]):
        posteriors = list(posteriors)
        if not posteriors:
            raise ValueError("at least one posterior is required")
        n = posteriors[0].dim
        for p in posteriors:
            if p.dim != n:
                raise DimensionMismatch("posteriors live in different dimensions")
        self.posteriors = posteriors
        super().__init__((n, n), self._apply_sum, symmetric=True, batched=True)

    def _apply_sum(self, v: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(v)
        for post in self.posteriors:
            acc = acc + post.cov_op.apply(v)
            m = post.mean
            coeff = m @ v  # scalar for a vector, (b,) for a column block
            acc = acc + (m[:, None] * coeff if v.ndim == 2 else m * coeff)
        return acc


@dataclass(frozen=True)
class ReducedBasis:
    """Column-orthonormal basis with its eigenvalue spectrum attached.

    trailing_mass estimates the spectrum mass beyond the kept columns
    (trace minus the kept eigenvalues); trailing_mass_stderr is set when
    the trace came from a Hutchinson estimate.
    """

    columns: np.ndarray
    spectrum: np.ndarray
    trailing_mass: Optional[float] = None
    trailing_mass_stderr: Optional[float] = None
    rank_deficient: bool = False

    def __post_init__(self):
        u = np.asarray(self.columns, dtype=float)
        s = np.asarray(self.spectrum, dtype=float)
        if u.ndim != 2 or s.ndim != 1 or u.shape[1] != s.size:
            raise DimensionMismatch("columns (n, k) must match spectrum (k,)")
        if s.size > 1 and np.any(np.diff(s) > 1e-10 * max(abs(s[0]), 1e-300)):
            raise ValueError("spectrum must be non-increasing")
        gram = u.T @ u
        if np.max(np.abs(gram - np.eye(s.size))) > 1e-8:
            raise ValueError("basis columns are not orthonormal to 1e-8")
        object.__setattr__(self, "columns", u)
        object.__setattr__(self, "spectrum", s)

    @property
    def k(self) -> int:
        return self.spectrum.size

    @property
    def n(self) -> int:
        return self.columns.shape[0]

    def truncate(self, k: int) -> "ReducedBasis":
        """First k columns; trailing mass absorbs the dropped eigenvalues."""
        if not 1 <= k <= self.k:
            raise DimensionMismatch(f"cannot truncate to k={k} from {self.k}")
        tm = self.trailing_mass
        if tm is not None:
            tm = tm + float(np.sum(self.spectrum[k:]))
        return ReducedBasis(
            self.columns[:, :k],
            self.spectrum[:k],
            trailing_mass=tm,
            trailing_mass_stderr=self.trailing_mass_stderr,
            rank_deficient=self.rank_deficient,
        )


class TraceEstimate(NamedTuple):
    value: float
    stderr: Optional[float]  # None when the trace is exact
    exact: bool


def trace_estimate(
    s_op: SecondMomentOperator,
    mode: str = "auto",
    probes: int = 64,
    seed: int = 0,
    chunk: int = 256,
) -> TraceEstimate:
    """Trace of the second-moment operator.

    The mean contribution sum_t |mean_t|^2 is always exact. The covariance
    contribution is exact (n solves per posterior, column blocks of size
    `chunk`) for n <= 4096 or mode="exact", and a seeded 64-probe Hutchinson
    estimate with standard error otherwise.
    """
    if mode not in ("auto", "exact", "hutchinson"):
        raise ValueError(f"unknown trace mode {mode!r}")
    n = s_op.dim
    mean_part = float(sum(np.dot(p.mean, p.mean) for p in s_op.posteriors))
    exact = mode == "exact" or (mode == "auto" and n <= 4096)

    if exact:
        cov_part = 0.0
        for post in s_op.posteriors:
            for a in range(0, n, chunk):
                b = min(a + chunk, n)
                block = np.zeros((n, b - a))
                block[np.arange(a, b), np.arange(b - a)] = 1.0
                out = post.cov_op.apply(block)
                cov_part += float(np.sum(out[np.arange(a, b), np.arange(b - a)]))
        return TraceEstimate(mean_part + cov_part, None, True)

    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, size=(n, probes)).astype(float) * 2.0 - 1.0
    samples = np.zeros(probes)
    for post in s_op.posteriors:
        samples += np.einsum("ij,ij->j", z, post.cov_op.apply(z))
    value = mean_part + float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / np.sqrt(probes)) if probes > 1 else np.inf
    return TraceEstimate(value, stderr, False)


def projection_cost(x: StateTrajectory, u: ReducedBasis) -> float:
    """Squared Frobenius distance between the trajectory and its projection."""
    if u.n != x.n:
        raise DimensionMismatch(
            f"basis lives in R^{u.n} but trajectory states have length {x.n}"
        )
    mat = x.matrix
    resid = mat - u.columns @ (u.columns.T @ mat)
    return float(np.sum(resid * resid))


def expected_projection_cost(
    s_op: SecondMomentOperator, u: ReducedBasis, trace: Optional[float] = None
) -> float:
    """Expected projection cost trace(S) - trace(u* S u) under the posterior."""
    if u.n != s_op.dim:
        raise DimensionMismatch("basis dimension does not match the operator")
    tr = trace_estimate(s_op).value if trace is None else float(trace)
    su = s_op.apply(u.columns)
    return tr - float(np.einsum("ij,ij->", u.columns, su))


def uncertainty_aware_basis(
    s_op: SecondMomentOperator,
    k: int,
    krylov_dim: int,
    seed: int = 0,
    tol: float = 1e-8,
    trace_mode: str = "auto",
    trace_seed: int = 0,
) -> ReducedBasis:
    """Leading-k eigenvectors of the posterior second moment.

    This is the uncertainty-aware basis: it minimizes the expected
    projection cost over unitary n x k matrices, up to the Lanczos
    tolerance. trace_mode feeds trailing_mass ("none" skips it, saving
    the trace solves).
    """
    dec = lanczos_topk(s_op, k, krylov_dim, seed=seed, tol=tol)
    tm = stderr = None
    if trace_mode != "none":
        est = trace_estimate(s_op, mode=trace_mode, seed=trace_seed)
        tm = est.value - float(np.sum(dec.eigenvalues))
        stderr = est.stderr
    return ReducedBasis(
        dec.eigenvectors, dec.eigenvalues, trailing_mass=tm, trailing_mass_stderr=stderr
    )


def snapshot_basis(estimates: StateTrajectory, k: int) -> ReducedBasis:
    """Snapshot baseline: top-k left singular subspace of the estimate matrix.

    Computed through the T x T Gram matrix, so the spectrum holds squared
    singular values. If fewer than k Gram eigenvalues clear 1e-12 times the
    largest, the available columns are returned with rank_deficient set and
    a RankDeficient warning.
    """
    mat = estimates.matrix
    n, t_steps = mat.shape
    if not 1 <= k <= min(n, t_steps):
        raise DimensionMismatch(f"need 1 <= k <= min(T, n) = {min(n, t_steps)}, got {k}")
    gram = mat.T @ mat
    w, y = np.linalg.eigh((gram + gram.T) / 2.0)
    order = np.argsort(w)[::-1]
    w = w[order]
    y = y[:, order]
    cutoff = 1e-12 * max(w[0], 0.0)
    rank = int(np.sum(w > cutoff))
    if rank == 0:
        raise ValueError("estimate matrix is identically zero; no basis exists")
    deficient = rank < k
    if deficient:
        warnings.warn(
            f"only {rank} modes above 1e-12 * lambda_1; returning {rank} columns",
            RankDeficient,
        )
    kept = min(k, rank)
    spectrum = w[:kept]
    u = mat @ (y[:, :kept] / np.sqrt(spectrum)[None, :])
    # re-orthonormalize: at large spectral range the Gram route loses the
    # 1e-8 contract; QR preserves every leading span, so truncations nest
    q, r = np.linalg.qr(u)
    q *= np.sign(np.diag(r))[None, :]
    total = float(np.sum(mat * mat))
    return ReducedBasis(
        fix_column_signs(q),
        spectrum,
        trailing_mass=total - float(np.sum(spectrum[:kept])),
        rank_deficient=deficient,
    )


def reconstruction_error(truth: StateTrajectory, u: ReducedBasis) -> float:
    """Normalized squared reconstruction error of the truth, in [0, 1]."""
    total = float(np.sum(truth.matrix * truth.matrix))
    if total == 0.0:
        raise ZeroTruth("reference trajectory has zero Frobenius norm")
    return min(1.0, max(0.0, projection_cost(truth, u) / total))
