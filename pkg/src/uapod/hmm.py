"""Gaussian posteriors of hidden states under degenerate priors.

The scaled path is per-time factorized: a zero-mean Gaussian prior given by a
(possibly rank-deficient) precision operator q, observed through a linear map
H with iid Gaussian noise of variance sigma^2. The posterior is

    mean = (H*H + sigma^2 q)^{-1} H*(y - xi)
    cov  = sigma^2 (H*H + sigma^2 q)^{-1}

with the inverse applied matrix-free through conjugate gradients. A dense
Kalman filter + RTS smoother covers the general linear-dynamics case at
oracle scale only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .krylov import (
    DimensionMismatch,
    LinearOperator,
    NonConvergence,
    TooLarge,
    conjugate_gradient,
    hutchinson_trace,
    matrix_operator,
)


class SingularSystem(RuntimeError):
    """Posterior normal equations are singular and regularization is disabled."""


class NotPSD(ValueError):
    """A covariance matrix lost positive semidefiniteness beyond tolerance."""


@dataclass(frozen=True)
class DegenerateGaussianPrior:
    """Zero-mean Gaussian prior specified by a symmetric PSD precision operator.

    The precision may be rank-deficient (improper along its null space).
    When the null space is known, pass it as orthonormal columns so the
    posterior construction can detect unobserved null directions cheaply;
    otherwise detection falls back to CG failure.
    """

    precision_op: LinearOperator
    null_space: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.precision_op.symmetric:
            raise DimensionMismatch("prior precision operator must be symmetric")
        if self.null_space is not None:
            ns = np.asarray(self.null_space, dtype=float)
            if ns.ndim != 2 or ns.shape[0] != self.precision_op.dim:
                raise DimensionMismatch("null_space must be (n, d) columns")
            object.__setattr__(self, "null_space", ns)


@dataclass(frozen=True)
class LinearObservation:
    """One linear observation y = H x + xi + noise with iid variance sigma^2."""

    obs_op: LinearOperator
    offset: np.ndarray
    noise_var: float
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        object.__setattr__(self, "data", np.asarray(self.data, dtype=float))
        m = self.obs_op.shape[0]
        if self.offset.shape != (m,) or self.data.shape != (m,):
            raise DimensionMismatch(
                f"offset/data must have length {m} to match the observation map"
            )
        if not self.noise_var > 0:
            raise ValueError("noise_var must be strictly positive")


@dataclass(frozen=True)
class GaussianPosterior:
    """Posterior mean and implicit covariance operator of one hidden state."""

    mean: np.ndarray
    cov_op: LinearOperator
    regularization: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        if not self.cov_op.symmetric:
            raise DimensionMismatch("posterior covariance operator must be symmetric")
        if self.mean.shape != (self.cov_op.dim,):
            raise DimensionMismatch("posterior mean length does not match cov_op")

    @property
    def dim(self) -> int:
        return self.mean.size


def _normal_equations_operator(
    prior: DegenerateGaussianPrior,
    observations: Sequence[LinearObservation],
    eps: float,
) -> LinearOperator:
    """H*H summed over replicas + sigma^2 q + eps I, as a symmetric operator."""
    n = prior.precision_op.dim
    sigma2 = observations[0].noise_var
    q = prior.precision_op
    ops = [o.obs_op for o in observations]

    def matvec(v):
        acc = sigma2 * q.apply(v)
        if eps > 0.0:
            acc = acc + eps * v
        for h in ops:
            acc = acc + h.apply_adjoint(h.apply(v))
        return acc

    return LinearOperator((n, n), matvec, symmetric=True)


def _unobserved_null_direction(
    prior: DegenerateGaussianPrior,
    observations: Sequence[LinearObservation],
    scale: float,
) -> bool:
    if prior.null_space is None or prior.null_space.shape[1] == 0:
        return False
    for col in prior.null_space.T:
        w = col / np.linalg.norm(col)
        energy = sum(float(np.sum(o.obs_op.apply(w) ** 2)) for o in observations)
        if energy <= 1e-10 * scale:
            return True
    return False


def posterior_factorized(
    prior: DegenerateGaussianPrior,
    obs: Union[LinearObservation, Sequence[LinearObservation]],
    cg_tol: float = 1e-8,
    max_iter: Optional[int] = None,
    regularization: Union[str, float] = "auto",
) -> GaussianPosterior:
    """Closed-form Gaussian posterior for one time step, matrix-free.

    obs may be a single observation or a sequence of replicas of the same
    hidden state; replicas must share noise_var and their contributions
    H*H and H*(y - xi) are summed.

    regularization:
        "auto"  - add eps = 1e-8 * trace(H*H + sigma^2 q)/n to the diagonal
                  when the prior null space is not observed (detected through
                  prior.null_space, or through a failed CG solve);
        float   - use exactly this eps (0.0 disables regularization, and an
                  unobservable null space then raises SingularSystem).
    """
    observations = [obs] if isinstance(obs, LinearObservation) else list(obs)
    if not observations:
        raise ValueError("at least one observation is required")
    n = prior.precision_op.dim
    sigma2 = observations[0].noise_var
    for o in observations:
        if o.obs_op.shape[1] != n:
            raise DimensionMismatch("observation map does not act on the prior space")
        if not np.isclose(o.noise_var, sigma2, rtol=1e-12, atol=0.0):
            raise ValueError("observation replicas must share noise_var")

    if max_iter is None:
        max_iter = max(20, int(np.ceil(10 * np.sqrt(n))))

    base = _normal_equations_operator(prior, observations, 0.0)
    # average diagonal of the unregularized system, for the eps scale
    trace_est, _ = hutchinson_trace(base, probes=min(16, n), seed=0)
    scale = max(abs(trace_est) / n, 1e-300)
    eps_auto = 1e-8 * trace_est / n

    auto = isinstance(regularization, str)
    if auto:
        if regularization != "auto":
            raise ValueError(f"unknown regularization mode {regularization!r}")
        eps = eps_auto if _unobserved_null_direction(prior, observations, scale) else 0.0
    else:
        eps = float(regularization)
        if eps == 0.0 and _unobserved_null_direction(prior, observations, scale):
            raise SingularSystem(
                "prior null space is not observed and regularization is disabled"
            )

    rhs = np.zeros(n)
    for o in observations:
        rhs += o.obs_op.apply_adjoint(o.data - o.offset)

    while True:
        system = _normal_equations_operator(prior, observations, eps)
        try:
            mean = conjugate_gradient(system, rhs, tol=cg_tol, max_iter=max_iter)
            break
        except NonConvergence as exc:
            if auto and eps == 0.0:
                eps = eps_auto
                continue
            raise SingularSystem(
                f"posterior normal equations did not converge (eps={eps:g}): {exc}"
            ) from exc

    cov_op = LinearOperator(
        (n, n),
        lambda v: sigma2 * conjugate_gradient(system, v, tol=cg_tol, max_iter=max_iter),
        symmetric=True,
    )
    return GaussianPosterior(mean=mean, cov_op=cov_op, regularization=eps)


def covariance_column(post: GaussianPosterior, index: int) -> np.ndarray:
    """Column `index` of the posterior covariance, via one CG solve."""
    n = post.dim
    if not 0 <= index < n:
        raise IndexError(f"index {index} out of range for dimension {n}")
    e = np.zeros(n)
    e[index] = 1.0
    return post.cov_op.apply(e)


@dataclass(frozen=True)
class DenseLGSS:
    """Explicit linear-Gaussian state space at oracle scale (n <= 64, T <= 200).

    X_1 ~ N(0, process_covs[0]); X_{t+1} = transitions[t] X_t + noise with
    covariance process_covs[t+1]; Y_t = obs_mats[t] X_t + offsets[t] + noise
    with covariance obs_covs[t]. All matrices dense.
    """

    transitions: Sequence[np.ndarray]
    process_covs: Sequence[np.ndarray]
    obs_mats: Sequence[np.ndarray]
    obs_covs: Sequence[np.ndarray]
    offsets: Optional[Sequence[np.ndarray]] = None

    def __post_init__(self):
        t_steps = len(self.process_covs)
        n = np.asarray(self.process_covs[0]).shape[0]
        if n > 64:
            raise TooLarge(f"DenseLGSS limited to n <= 64, got {n}")
        if t_steps > 200:
            raise TooLarge(f"DenseLGSS limited to T <= 200, got {t_steps}")
        if len(self.transitions) != t_steps - 1:
            raise DimensionMismatch("need T-1 transition matrices for T steps")
        if len(self.obs_mats) != t_steps or len(self.obs_covs) != t_steps:
            raise DimensionMismatch("need one observation model per time step")
        for label, mats in (("process", self.process_covs), ("observation", self.obs_covs)):
            for c in mats:
                c = np.asarray(c, dtype=float)
                if not np.allclose(c, c.T, atol=1e-10):
                    raise NotPSD(f"{label} covariance is not symmetric")
                w = np.linalg.eigvalsh((c + c.T) / 2.0)
                if w.min() < -1e-10 * max(1.0, w.max()):
                    raise NotPSD(f"{label} covariance has eigenvalue {w.min():.3e}")

    @property
    def T(self) -> int:
        return len(self.process_covs)

    @property
    def n(self) -> int:
        return np.asarray(self.process_covs[0]).shape[0]


def _check_psd(p: np.ndarray, what: str) -> None:
    w = np.linalg.eigvalsh((p + p.T) / 2.0)
    if w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise NotPSD(f"{what} lost PSD: min eigenvalue {w.min():.3e}")


def kalman_rts_oracle(
    model: DenseLGSS, observations: Sequence[np.ndarray]
) -> list[GaussianPosterior]:
    """Dense forward Kalman filter + RTS smoother; correctness oracle only.

    Returns per-time smoothed posteriors. With all transitions zero the
    smoothed moments coincide with posterior_factorized applied per step.
    """
    t_steps = model.T
    if len(observations) != t_steps:
        raise DimensionMismatch("need one observation vector per time step")
    n = model.n
    eye = np.eye(n)
    offsets = model.offsets
    if offsets is None:
        offsets = [np.zeros(np.asarray(h).shape[0]) for h in model.obs_mats]

    means_f, covs_f = [], []          # filtered
    means_p, covs_p = [], []          # predicted (prior to update)
    m_pred = np.zeros(n)
    p_pred = np.asarray(model.process_covs[0], dtype=float)
    for t in range(t_steps):
        h = np.asarray(model.obs_mats[t], dtype=float)
        r = np.asarray(model.obs_covs[t], dtype=float)
        y = np.asarray(observations[t], dtype=float)
        means_p.append(m_pred)
        covs_p.append(p_pred)
        s = h @ p_pred @ h.T + r
        gain = np.linalg.solve(s, h @ p_pred).T
        innov = y - h @ m_pred - offsets[t]
        m_filt = m_pred + gain @ innov
        # Joseph form keeps the update PSD regardless of conditioning
        j = eye - gain @ h
        p_filt = j @ p_pred @ j.T + gain @ r @ gain.T
        _check_psd(p_filt, f"filtered covariance at t={t}")
        means_f.append(m_filt)
        covs_f.append(p_filt)
        if t < t_steps - 1:
            a = np.asarray(model.transitions[t], dtype=float)
            m_pred = a @ m_filt
            p_pred = a @ p_filt @ a.T + np.asarray(model.process_covs[t + 1], dtype=float)
            _check_psd(p_pred, f"predicted covariance at t={t + 1}")

    means_s = [None] * t_steps
    covs_s = [None] * t_steps
    means_s[-1] = means_f[-1]
    covs_s[-1] = covs_f[-1]
    for t in range(t_steps - 2, -1, -1):
        a = np.asarray(model.transitions[t], dtype=float)
        # smoother gain; solve against the predicted covariance at t+1
        gain = np.linalg.solve(covs_p[t + 1], a @ covs_f[t]).T
        means_s[t] = means_f[t] + gain @ (means_s[t + 1] - means_p[t + 1])
        covs_s[t] = covs_f[t] + gain @ (covs_s[t + 1] - covs_p[t + 1]) @ gain.T
        _check_psd(covs_s[t], f"smoothed covariance at t={t}")

    return [
        GaussianPosterior(
            mean=means_s[t],
            cov_op=matrix_operator((covs_s[t] + covs_s[t].T) / 2.0, symmetric=True),
            regularization=0.0,
        )
        for t in range(t_steps)
    ]
