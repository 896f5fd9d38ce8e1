"""Classical proximal-gradient baselines for the l2,1-regularized least squares.

    minimize_x  0.5 * ||y - Phi x||^2 + lam * sum_q ||x_q||_2

All solvers accept a single measurement of shape (N,) or a batch (B, N);
batched rows are iterated in lockstep but each row stops on its own
convergence test, so a batched run equals the row-by-row runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import NumericalError, ValidationError, check_complex_array
from .model import Dictionary, _adjoint, _apply, make_rng

LIPSCHITZ_MARGIN = 1.0001
NOISELESS_SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    """Regularization weight and stopping rule for the iterative solvers."""

    lam: float
    max_iter: int = 10_000
    tol: float = 1e-10
    accelerated: bool = False

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise ValidationError(f"lam must be positive and finite, got {self.lam}")
        if int(self.max_iter) < 1:
            raise ValidationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol >= 0:
            raise ValidationError(f"tol must be >= 0, got {self.tol}")


@dataclass
class SolverTrace:
    """Result of a solver run.

    ``objective_per_iter`` has one entry per executed iteration (an array of
    shape (B,) per entry for batched input). ``iterates`` is filled only when
    requested and starts with ``x^(0) = 0``.
    """

    estimate: np.ndarray
    objective_per_iter: list
    iterations_used: int | np.ndarray
    iterates: list | None = None
    metadata: dict = field(default_factory=dict)

    def to_rows(self) -> list[tuple[int, float]]:
        """``(iteration, objective)`` rows for plotting a single-instance run."""
        return [(i + 1, float(np.ravel(v)[0])) for i, v in enumerate(self.objective_per_iter)]


def block_norms(x: np.ndarray, block_size: int) -> np.ndarray:
    xb = x.reshape(x.shape[:-1] + (-1, block_size))
    return np.sqrt(np.sum(xb.real**2 + xb.imag**2, axis=-1))


def objective(d: Dictionary, y, x, lam: float) -> float | np.ndarray:
    """``0.5 * ||y - Phi x||^2 + lam * ||x||_{2,1}``; batched inputs give one value per row."""
    y = check_complex_array(y, "y", d.N)
    x = check_complex_array(x, "x", d.M)
    if y.shape[:-1] != x.shape[:-1]:
        raise ValidationError(f"batch shapes differ: y {y.shape}, x {x.shape}")
    return _objective(d, y, x, lam, d.P)


def _objective(d, y, x, lam, block_size):
    res = y - _apply(d, x)
    fit = 0.5 * np.sum(res.real**2 + res.imag**2, axis=-1)
    out = fit + np.asarray(lam) * np.sum(block_norms(x, block_size), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def block_soft_threshold(z, theta, block_size: int) -> np.ndarray:
    """Proximal map of ``theta * ||.||_{2,1}``: ``z_q * (1 - theta / ||z_q||)_+``.

    Blocks whose norm does not exceed ``theta`` become exactly zero. ``theta``
    may be a scalar or broadcast against the leading (batch) axes of ``z``.
    ``block_size = 1`` is complex soft thresholding (magnitude shrink, phase kept).
    """
    z = np.asarray(z, dtype=np.complex128)
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValidationError("theta must be nonnegative")
    zb = z.reshape(z.shape[:-1] + (-1, block_size))
    nrm = np.sqrt(np.sum(zb.real**2 + zb.imag**2, axis=-1))
    th = theta[..., None] if theta.ndim else theta
    active = nrm > th
    scale = np.where(active, 1.0 - th / np.where(active, nrm, 1.0), 0.0)
    return (zb * scale[..., None]).reshape(z.shape)


def soft_threshold(z, theta) -> np.ndarray:
    """Elementwise complex soft threshold (block size one)."""
    z = np.asarray(z, dtype=np.complex128)
    return block_soft_threshold(z, theta, 1)


def lipschitz_constant(
    d: Dictionary,
    margin: float = LIPSCHITZ_MARGIN,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> float:
    """Largest eigenvalue of ``Phi^H Phi`` by power iteration, times ``margin``.

    The start vector comes from a fixed Philox stream so the value is
    reproducible.
    """
    rng = make_rng(0, (0x11,))
    v = rng.standard_normal(d.M) + 1j * rng.standard_normal(d.M)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = _adjoint(d, _apply(d, v))
        new = float(np.real(np.vdot(v, w)))
        nrm = np.linalg.norm(w)
        if not np.isfinite(nrm):
            raise NumericalError("power iteration produced non-finite values")
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(new - est) <= tol * abs(new):
            return new * margin
        est = new
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")


def default_lambda(d: Dictionary, sigma) -> float | np.ndarray:
    """Noise-scaled weight ``sigma * sqrt(2 log Q) * mean column norm``.

    ``sigma = 0`` is floored at ``NOISELESS_SIGMA_FLOOR`` so the weight stays positive.
    """
    sigma = np.maximum(np.asarray(sigma, dtype=float), NOISELESS_SIGMA_FLOOR)
    out = sigma * math.sqrt(2.0 * math.log(max(d.Q, 2))) * float(np.mean(d.column_norms()))
    return float(out) if out.ndim == 0 else out


def _proximal_gradient(d, y, cfg, L, block_size, record_iterates, accelerated):
    y = check_complex_array(y, "y", d.N)
    single = y.ndim == 1
    Y = y[None] if single else y
    B = Y.shape[0]
    lam = np.broadcast_to(np.asarray(cfg.lam, dtype=float), (B,)).copy()
    if L is None:
        L = lipschitz_constant(d)
    if not L > 0:
        raise NumericalError(f"Lipschitz constant must be positive, got {L}")
    theta = lam / L
    x = np.zeros((B, d.M), dtype=np.complex128)
    mom = x.copy()
    t_k = 1.0
    running = np.ones(B, dtype=bool)
    used = np.zeros(B, dtype=int)
    objectives = []
    iterates = [x[0].copy() if single else x.copy()] if record_iterates else None
    for _ in range(int(cfg.max_iter)):
        base = mom if accelerated else x
        z = base + _adjoint(d, Y - _apply(d, base)) / L
        x_new = block_soft_threshold(z, theta, block_size)
        x_new[~running] = x[~running]
        if accelerated:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k * t_k))
            mom = x_new + ((t_k - 1.0) / t_next) * (x_new - x)
            mom[~running] = x_new[~running]
            t_k = t_next
        change = np.linalg.norm(x_new - x, axis=-1)
        size = np.linalg.norm(x_new, axis=-1)
        used += running
        x = x_new
        obj = _objective(d, Y, x, lam, block_size)
        objectives.append(float(obj[0]) if single else np.asarray(obj))
        if record_iterates:
            iterates.append(x[0].copy() if single else x.copy())
        converged = change <= cfg.tol * size
        running &= ~converged
        if not running.any():
            break
    if not np.all(np.isfinite(x)):
        raise NumericalError("solver iterate became non-finite")
    return SolverTrace(
        estimate=x[0] if single else x,
        objective_per_iter=objectives,
        iterations_used=int(used[0]) if single else used,
        iterates=iterates,
        metadata={
            "lipschitz": float(L),
            "lam": float(lam[0]) if single else lam,
            "threshold_rule": "theta = lam / L",
            "accelerated": accelerated,
            "block_size": block_size,
        },
    )


def block_ista(
    d: Dictionary, y, cfg: SolverConfig, L: float | None = None, record_iterates: bool = False
) -> SolverTrace:
    """Block-ISTA from ``x = 0`` with step ``1/L`` and threshold ``lam/L``.

    Stops after ``cfg.max_iter`` iterations or once
    ``||x_new - x|| <= tol * ||x_new||``.
    """
    return _proximal_gradient(d, y, cfg, L, d.P, record_iterates, accelerated=False)


def block_fista(
    d: Dictionary, y, cfg: SolverConfig, L: float | None = None, record_iterates: bool = False
) -> SolverTrace:
    """Block-ISTA with Nesterov extrapolation (``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2``)."""
    return _proximal_gradient(d, y, cfg, L, d.P, record_iterates, accelerated=True)


def ista(
    d: Dictionary, y, cfg: SolverConfig, L: float | None = None, record_iterates: bool = False
) -> SolverTrace:
    """Elementwise (non-block) ISTA on the l1-regularized problem."""
    return _proximal_gradient(d, y, cfg, L, 1, record_iterates, accelerated=cfg.accelerated)
