"""Uncertainty-aware POD-Galerkin reduced bases from noisy, incomplete observations.

The package builds reduced-order bases for a high-dimensional recursion by
eigendecomposing the posterior second moment of the hidden states (mean outer
products plus posterior covariances) instead of the snapshot Gram matrix, and
ships a 2D turbulence + optic-flow testbed to compare both routes.

Modules
-------
krylov     matrix-free Lanczos eigensolver and conjugate gradients
hmm        Gaussian posteriors under degenerate priors; dense Kalman/RTS oracle
pod        second-moment operator, uncertainty-aware and snapshot bases, errors
fluidsim   2D vorticity-form turbulence, scalar transport, Galerkin recursion
opticflow  brightness-constancy observations, gradient prior, diagnostic maps
cli        experiment harness: config, pipeline, CSV / field-dump outputs
"""

__version__ = "0.1.0"

from . import cli, fluidsim, hmm, krylov, opticflow, pod

__all__ = ["cli", "fluidsim", "hmm", "krylov", "opticflow", "pod", "__version__"]
