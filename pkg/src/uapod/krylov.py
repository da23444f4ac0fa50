"""Matrix-free symmetric linear algebra: Lanczos eigensolver and CG.

Everything downstream funnels through the two iterative routines here, so
they are written against an explicit operator abstraction instead of dense
arrays: a LinearOperator only promises a deterministic apply().
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np


class DimensionMismatch(ValueError):
    """Operator and vector shapes do not compose."""


class NonConvergence(RuntimeError):
    """Iteration budget exhausted before the residual tolerance was met."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class TooLarge(ValueError):
    """Dense routine called beyond its guarded problem size."""


class NotSymmetric(ValueError):
    """Symmetry check failed on an allegedly symmetric matrix/operator."""


class LinearOperator:
    """Matrix-free linear map from R^dim_in to R^dim_out.

    apply() accepts a vector of shape (dim_in,) or a block of columns of
    shape (dim_in, b). Operators constructed by this package handle column
    blocks natively; wrap a vector-only callable with batched=False and the
    block case falls back to a column loop.

    The map must be deterministic: applying it twice to the same input has
    to produce bitwise-identical output.
    """

    def __init__(
        self,
        shape: tuple[int, int],
        matvec: Callable[[np.ndarray], np.ndarray],
        rmatvec: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        symmetric: bool = False,
        batched: bool = True,
    ):
        self.shape = (int(shape[0]), int(shape[1]))
        if self.shape[0] <= 0 or self.shape[1] <= 0:
            raise DimensionMismatch(f"operator shape {self.shape} must be positive")
        if symmetric and self.shape[0] != self.shape[1]:
            raise DimensionMismatch("symmetric operator must be square")
        self._matvec = matvec
        self._rmatvec = rmatvec
        self.symmetric = bool(symmetric)
        self._batched = bool(batched)

    @property
    def dim(self) -> int:
        """Dimension of a square operator."""
        if self.shape[0] != self.shape[1]:
            raise DimensionMismatch(f"operator {self.shape} is not square")
        return self.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.shape[1]:
            raise DimensionMismatch(
                f"operator expects vectors of length {self.shape[1]}, got {v.shape[0]}"
            )
        if v.ndim == 1 or self._batched:
            out = self._matvec(v)
        else:
            out = np.stack([self._matvec(col) for col in v.T], axis=1)
        out = np.asarray(out, dtype=float)
        if out.shape[0] != self.shape[0] or out.shape[1:] != v.shape[1:]:
            raise DimensionMismatch(
                f"operator returned shape {out.shape} for input {v.shape}"
            )
        return out

    def apply_adjoint(self, u: np.ndarray) -> np.ndarray:
        if self.symmetric:
            return self.apply(u)
        if self._rmatvec is None:
            raise DimensionMismatch("operator has no adjoint")
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.shape[0]:
            raise DimensionMismatch(
                f"adjoint expects vectors of length {self.shape[0]}, got {u.shape[0]}"
            )
        if u.ndim > 1 and not self._batched:
            return np.stack([self._rmatvec(col) for col in u.T], axis=1)
        return np.asarray(self._rmatvec(u), dtype=float)

    def scaled(self, alpha: float) -> "LinearOperator":
        """Return alpha * self as a new operator."""
        a = float(alpha)
        rmv = None if self._rmatvec is None else (lambda u: a * self._rmatvec(u))
        return LinearOperator(
            self.shape,
            lambda v: a * self._matvec(v),
            rmatvec=rmv,
            symmetric=self.symmetric,
            batched=self._batched,
        )


def identity_operator(n: int) -> LinearOperator:
    return LinearOperator((n, n), lambda v: v.copy(), symmetric=True)


def zero_operator(n: int) -> LinearOperator:
    return LinearOperator((n, n), lambda v: np.zeros_like(v), symmetric=True)


def diagonal_operator(diag: np.ndarray) -> LinearOperator:
    d = np.asarray(diag, dtype=float)

    def matvec(v):
        return d * v if v.ndim == 1 else d[:, None] * v

    return LinearOperator((d.size, d.size), matvec, symmetric=True)


def matrix_operator(a: np.ndarray, symmetric: Optional[bool] = None) -> LinearOperator:
    """Wrap an explicit dense matrix; symmetry is auto-detected if unspecified."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch("matrix_operator expects a 2-d array")
    if symmetric is None:
        symmetric = a.shape[0] == a.shape[1] and np.allclose(a, a.T, atol=1e-12, rtol=0)
    return LinearOperator(
        a.shape, lambda v: a @ v, rmatvec=lambda u: a.T @ u, symmetric=symmetric
    )


def mc_symmetry_defect(op: LinearOperator, rng=None, trials: int = 8) -> float:
    """Largest normalized symmetry defect |<u,Av> - <Au,v>| / (|u| |Av|) seen."""
    rng = np.random.default_rng(0 if rng is None else rng)
    n = op.dim
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(n)
        v = rng.standard_normal(n)
        av = op.apply(v)
        au = op.apply(u)
        denom = np.linalg.norm(u) * np.linalg.norm(av)
        if denom == 0.0:
            continue
        worst = max(worst, abs(u @ av - au @ v) / denom)
    return worst


def mc_symmetry_check(op: LinearOperator, rng=None, trials: int = 8, tol: float = 1e-10) -> bool:
    return mc_symmetry_defect(op, rng, trials) <= tol


def mc_psd_check(op: LinearOperator, rng=None, trials: int = 8, tol: float = 1e-10) -> bool:
    """Monte-Carlo PSD test: <v, Av> >= -tol * |v|^2 for random v."""
    rng = np.random.default_rng(0 if rng is None else rng)
    n = op.dim
    for _ in range(trials):
        v = rng.standard_normal(n)
        if v @ op.apply(v) < -tol * (v @ v):
            return False
    return True


def hutchinson_trace(
    op: LinearOperator, probes: int = 64, seed: int = 0
) -> tuple[float, float]:
    """Rademacher-probe trace estimate; returns (value, standard error)."""
    rng = np.random.default_rng(seed)
    n = op.dim
    z = rng.integers(0, 2, size=(n, probes)).astype(float) * 2.0 - 1.0
    samples = np.einsum("ij,ij->j", z, op.apply(z))
    stderr = float(np.std(samples, ddof=1) / np.sqrt(probes)) if probes > 1 else np.inf
    return float(np.mean(samples)), stderr


def fix_column_signs(u: np.ndarray) -> np.ndarray:
    """Scale each column so its largest-magnitude entry is positive."""
    u = np.array(u, dtype=float)
    if u.size == 0:
        return u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


@dataclass
class SpectralDecomposition:
    """Top eigenpairs of a symmetric operator, eigenvalues descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        self.eigenvectors = np.asarray(self.eigenvectors, dtype=float)
        k = self.eigenvalues.size
        if self.eigenvectors.ndim != 2 or self.eigenvectors.shape[1] != k:
            raise DimensionMismatch("eigenvector block does not match eigenvalue count")
        if k > 1 and np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be non-increasing")
        gram = self.eigenvectors.T @ self.eigenvectors
        if np.max(np.abs(gram - np.eye(k))) > 1e-8:
            raise ValueError("eigenvector block is not orthonormal to 1e-8")

    @property
    def k(self) -> int:
        return self.eigenvalues.size


def conjugate_gradient(
    op: LinearOperator,
    rhs: np.ndarray,
    tol: float = 1e-8,
    max_iter: Optional[int] = None,
) -> np.ndarray:
    """Solve op(x) = rhs for a symmetric positive definite operator.

    rhs may be a vector or a block of columns; columns are solved in
    lockstep with per-column stopping. The returned x satisfies
    |op(x) - rhs| <= tol * |rhs| columnwise (checked against a recomputed,
    not recurred, residual). Raises NonConvergence after max_iter.
    """
    if not op.symmetric:
        raise NotSymmetric("conjugate_gradient requires a symmetric operator")
    b = np.asarray(rhs, dtype=float)
    single = b.ndim == 1
    if single:
        b = b[:, None]
    n = op.dim
    if b.shape[0] != n:
        raise DimensionMismatch(f"rhs length {b.shape[0]} != operator dim {n}")
    if not np.all(np.isfinite(b)):
        raise ValueError("rhs must be finite")
    if max_iter is None:
        max_iter = max(20, int(np.ceil(10 * np.sqrt(n))))

    b_norm = np.linalg.norm(b, axis=0)
    targets = tol * b_norm
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.einsum("ij,ij->j", r, r)
    active = np.sqrt(rs) > targets  # zero rhs columns are done at x = 0

    iters = 0
    restarts = 0
    while True:
        while np.any(active) and iters < max_iter:
            ap = op.apply(p)
            pap = np.einsum("ij,ij->j", p, ap)
            alpha = np.where(active & (pap > 0), rs / np.where(pap > 0, pap, 1.0), 0.0)
            x += alpha * p
            r -= alpha * ap
            rs_new = np.einsum("ij,ij->j", r, r)
            beta = np.where(active & (rs > 0), rs_new / np.where(rs > 0, rs, 1.0), 0.0)
            p = r + beta * p
            rs = rs_new
            newly_done = active & (np.sqrt(rs) <= targets)
            if np.any(newly_done):
                # freeze finished columns so their recurrences stay silent
                r[:, newly_done] = 0.0
                p[:, newly_done] = 0.0
                rs[newly_done] = 0.0
                active = active & ~newly_done
            iters += 1
        # recurred residuals drift; verify against the true residual
        true_r = b - op.apply(x)
        res = np.linalg.norm(true_r, axis=0)
        unmet = res > targets
        if not np.any(unmet):
            return x[:, 0] if single else x
        if iters >= max_iter or restarts >= 4:
            j = int(np.argmax(unmet))
            worst = res[j] / b_norm[j] if b_norm[j] > 0 else res[j]
            raise NonConvergence(
                f"CG: column {j} at relative residual {worst:.3e} > tol {tol:.3e} "
                f"after {iters} iterations",
                index=j,
            )
        # restart the unconverged columns from the true residual
        r = np.where(unmet, true_r, 0.0)
        p = r.copy()
        rs = np.einsum("ij,ij->j", r, r)
        active = unmet
        restarts += 1


def _extend_lanczos(op, v_basis, tmat, start, stop, coupling, rng, scale):
    """Grow the Lanczos basis in-place from column `start` to `stop`.

    coupling is (vector, row_index) linking column `start` to previously
    locked Ritz vectors after a thick restart, or None for a plain run.
    Returns the count of columns built and the final residual norm.
    """
    n = op.dim
    j = start
    while j < stop:
        w = op.apply(v_basis[:, j])
        alpha = float(v_basis[:, j] @ w)
        tmat[j, j] = alpha
        w -= alpha * v_basis[:, j]
        if coupling is not None and j == coupling[1]:
            s = coupling[0]
            w -= v_basis[:, : s.size] @ s
        elif j > 0:
            w -= tmat[j, j - 1] * v_basis[:, j - 1]
        # full reorthogonalization, twice, against every basis vector
        for _ in range(2):
            w -= v_basis[:, : j + 1] @ (v_basis[:, : j + 1].T @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if j + 1 >= n:
            return j + 1, 0.0, scale
        if beta <= 1e-13 * max(scale, 1e-300):
            # invariant subspace found: continue in a fresh random direction
            w = rng.standard_normal(n)
            for _ in range(2):
                w -= v_basis[:, : j + 1] @ (v_basis[:, : j + 1].T @ w)
            nw = np.linalg.norm(w)
            if nw <= 0:
                return j + 1, 0.0, scale
            v_basis[:, j + 1] = w / nw
            beta = 0.0
        else:
            v_basis[:, j + 1] = w / beta
        if j + 1 < stop:
            tmat[j + 1, j] = beta
            tmat[j, j + 1] = beta
        j += 1
    return j, beta, scale


def lanczos_topk(
    op: LinearOperator,
    k: int,
    krylov_dim: int,
    seed: int = 0,
    tol: float = 1e-8,
    max_restarts: int = 10,
) -> SpectralDecomposition:
    """Top-k eigenpairs of a symmetric operator by thick-restart Lanczos.

    Full reorthogonalization keeps the basis orthonormal to machine
    precision (no ghost eigenvalues at the cost of O(krylov_dim^2 n) work).
    The starting vector is drawn from `seed`, so results are reproducible.

    Returns the k largest eigenpairs once every residual
    |A u_j - sigma_j u_j| <= tol * sigma_1; raises NonConvergence(j) when
    the budget of thick restarts is exhausted, which usually means
    krylov_dim is too small for the spectrum at hand.
    """
    if not op.symmetric:
        raise NotSymmetric("lanczos_topk requires a symmetric operator")
    n = op.dim
    if k < 1:
        raise DimensionMismatch("k must be >= 1")
    if krylov_dim < k:
        raise DimensionMismatch(f"krylov_dim {krylov_dim} < k {k}")
    if krylov_dim > n:
        raise DimensionMismatch(f"krylov_dim {krylov_dim} > operator dim {n}")

    rng = np.random.default_rng(seed)
    m = krylov_dim
    v_basis = np.zeros((n, m + 1))
    tmat = np.zeros((m + 1, m + 1))
    v0 = rng.standard_normal(n)
    v_basis[:, 0] = v0 / np.linalg.norm(v0)

    start = 0
    coupling = None
    scale = 0.0
    for restart in range(max_restarts + 1):
        count, beta, scale = _extend_lanczos(
            op, v_basis, tmat, start, m, coupling, rng, scale
        )
        theta, y = np.linalg.eigh(tmat[:count, :count])
        order = np.argsort(theta)[::-1]
        theta = theta[order]
        y = y[:, order]
        ritz = v_basis[:, :count] @ y[:, :k]
        # explicit residuals on the candidate pairs; the recurrence bound
        # is unreliable after random-direction injections
        resid = op.apply(ritz) - ritz * theta[:k]
        res_norms = np.linalg.norm(resid, axis=0)
        sigma1 = max(abs(theta[0]), 1e-300)
        if np.all(res_norms <= tol * sigma1) or count >= n:
            vecs = fix_column_signs(ritz)
            # re-orthonormalize for safety; a no-op up to rounding
            q, rfac = np.linalg.qr(vecs)
            q *= np.sign(np.diag(rfac))[None, :]
            return SpectralDecomposition(theta[:k].copy(), fix_column_signs(q))
        if restart == max_restarts:
            bad = int(np.argmax(res_norms > tol * sigma1))
            raise NonConvergence(
                f"Lanczos: pair {bad} residual {res_norms[bad]:.3e} > "
                f"{tol:.1e} * sigma_1 after {max_restarts} thick restarts "
                "(krylov_dim too small?)",
                index=bad,
            )
        # thick restart: lock the leading Ritz vectors plus the residual link
        keep = min(max(k + 5, 2 * k), count - 1, m - 1)
        locked = v_basis[:, :count] @ y[:, :keep]
        v_next = v_basis[:, count]
        tmat[:, :] = 0.0
        v_basis[:, :keep] = locked
        v_basis[:, keep] = v_next
        tmat[np.arange(keep), np.arange(keep)] = theta[:keep]
        s = beta * y[count - 1, :keep]
        tmat[keep, :keep] = s
        tmat[:keep, keep] = s
        coupling = (s, keep)
        start = keep
    raise AssertionError("unreachable")


def dense_eig_oracle(matrix: np.ndarray) -> SpectralDecomposition:
    """Full descending eigendecomposition of an explicit symmetric matrix.

    Test oracle and exact small-scale route; guarded at n <= 512.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch("dense_eig_oracle expects a square matrix")
    n = a.shape[0]
    if n > 512:
        raise TooLarge(f"dense_eig_oracle limited to n <= 512, got {n}")
    sym_tol = 1e-12 * max(1.0, float(np.max(np.abs(a))))
    if float(np.max(np.abs(a - a.T))) > sym_tol:
        raise NotSymmetric("matrix is not symmetric within 1e-12")
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    order = np.argsort(w)[::-1]
    return SpectralDecomposition(w[order], fix_column_signs(v[:, order]))
