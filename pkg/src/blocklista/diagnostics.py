"""Self-checks of the structural identities and of the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    Dictionary,
    _adjoint,
    _apply,
    dft_matrix,
    draw_instance,
    make_rng,
    stack_instances,
)
from .networks import (
    ARCHITECTURES,
    AdaBlistaCpParams,
    AdaBlockListaParams,
    LayerSchedule,
    block_coherence_residual,
    correlation,
    couple_weights,
    identity_params,
    unrolled_forward,
)
from .solvers import (
    SolverConfig,
    _proximal_gradient,
    block_norms,
    block_soft_threshold,
    default_lambda,
    lipschitz_constant,
)
from .training import backward, params_to_vector, vector_to_params, weight_shape

KINK_MARGIN = 1e-3
GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.value:.3e} <= {self.tol:.0e}"


def brute_force_dictionary(d: Dictionary) -> np.ndarray:
    """Rows ``Omega`` of ``F_Q kron F_P`` built densely (times the normalization scale)."""
    full = np.kron(dft_matrix(d.Q), dft_matrix(d.P))
    return d.scale * full[np.asarray(d.pattern.omega) - 1]


def factorization_error(d: Dictionary) -> float:
    """Max entrywise ``|Phi_q - Lambda**(q-1) Phi_1|`` against the dense construction."""
    return float(np.max(np.abs(d.dense() - brute_force_dictionary(d))))


def adjoint_error(d: Dictionary, rng) -> float:
    x = rng.standard_normal(d.M) + 1j * rng.standard_normal(d.M)
    r = rng.standard_normal(d.N) + 1j * rng.standard_normal(d.N)
    lhs = np.vdot(r, _apply(d, x))
    rhs = np.vdot(_adjoint(d, r), x)
    return float(abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(r)))


def random_schedule(depth: int, L: float, rng) -> LayerSchedule:
    return LayerSchedule(rng.uniform(0.005, 0.05, depth), rng.uniform(0.5, 1.5, depth) / L)


def random_weights(shape, rng, spread: float = 0.1) -> np.ndarray:
    n = shape[-1]
    noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return np.broadcast_to(np.eye(n), shape) + spread * noise / np.sqrt(n)


def coupling_error(d: Dictionary, w1, schedule: LayerSchedule, Y) -> float:
    cp = unrolled_forward(AdaBlistaCpParams(w1, schedule), d, Y).estimate
    blk = unrolled_forward(AdaBlockListaParams(couple_weights(w1, d), schedule), d, Y).estimate
    return float(np.max(np.abs(cp - blk)))


def ista_reduction_error(arch: str, d: Dictionary, Y, lam: float, depth: int, L: float | None = None) -> float:
    """Per-layer distance between identity-weight networks and classical ISTA iterates."""
    L = lipschitz_constant(d) if L is None else L
    params = identity_params(arch, d, LayerSchedule.constant(depth, lam / L, 1.0 / L))
    layers = unrolled_forward(params, d, Y, keep_layers=True).per_layer_estimates
    block = 1 if arch == "adalista" else d.P
    ref = _proximal_gradient(
        d, Y, SolverConfig(lam, max_iter=depth, tol=0.0), L, block, True, False
    ).iterates
    return float(max(np.max(np.abs(a - b)) for a, b in zip(layers, ref)))


def coherence_form_error(d: Dictionary, w1) -> float:
    """Coupled residuals computed from explicit ``W_q`` versus the factorized form."""
    a = block_coherence_residual(couple_weights(w1, d), d)
    b = block_coherence_residual(w1, d)
    return max(abs(a["max_intra"] - b["max_intra"]), abs(a["max_cross"] - b["max_cross"]))


def _kink_distance(params, d: Dictionary, Y) -> float:
    """Smallest ``| ||z_q|| - theta | / theta`` over layers, blocks and instances."""
    corr, block_size = correlation(params, d)
    s = params.schedule
    x = np.zeros((Y.shape[0], d.M), dtype=np.complex128)
    closest = np.inf
    for t in range(s.depth):
        z = x + s.step_sizes[t] * corr(Y - _apply(d, x))
        gap = np.abs(block_norms(z, block_size) - s.thresholds[t]) / s.thresholds[t]
        closest = min(closest, float(np.min(gap)))
        x = block_soft_threshold(z, s.thresholds[t], block_size)
    return closest


def gradient_check(
    params,
    d: Dictionary,
    batch,
    n_coords: int = 50,
    eps: float = 1e-5,
    rng=None,
    max_attempts: int = 20,
) -> float:
    """Max relative error of reverse-mode gradients against central differences.

    Relative error is ``|a - b| / max(|a|, |b|, GRAD_FLOOR)``. When a block
    norm lies within a relative ``KINK_MARGIN`` of its threshold, the
    log-thresholds are jittered and the point is retried.
    """
    rng = make_rng(0, (0x6C,)) if rng is None else rng
    Y, X = batch
    arch = params.arch
    shape = weight_shape(arch, d)
    for _ in range(max_attempts):
        if _kink_distance(params, d, Y) >= KINK_MARGIN:
            break
        vec = params_to_vector(params)
        vec[-params.schedule.depth :] += 0.05 * rng.standard_normal(params.schedule.depth)
        params = vector_to_params(arch, vec, shape)
    else:
        raise RuntimeError("could not find a kink-free parameter point")
    _, grads = backward(params, d, (Y, X))
    g = grads.to_vector()
    vec = params_to_vector(params)
    coords = rng.choice(vec.size, size=min(n_coords, vec.size), replace=False)
    worst = 0.0
    for i in coords:
        up, dn = vec.copy(), vec.copy()
        up[i] += eps
        dn[i] -= eps
        fd = (
            backward(vector_to_params(arch, up, shape), d, (Y, X))[0]
            - backward(vector_to_params(arch, dn, shape), d, (Y, X))[0]
        ) / (2 * eps)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), GRAD_FLOOR))
    return worst


def run_checks(d: Dictionary, seed: int = 0, depth: int = 10, trained=None) -> list[CheckResult]:
    """All structural and gradient checks on ``d``.

    ``trained`` optionally maps architecture tags to parameter records that
    replace the random points of the gradient check.
    """
    rng = make_rng(seed, (0xC4,))
    L = lipschitz_constant(d)
    Y, X = stack_instances(draw_instance(d, min(2, d.Q), 20.0, seed, (0xC5, i)) for i in range(4))
    results = [
        CheckResult("factorization", factorization_error(d), 1e-12),
        CheckResult("lambda unit modulus", float(np.max(np.abs(np.abs(d.lambda_diag) - 1))), 1e-14),
        CheckResult("adjoint identity", adjoint_error(d, rng), 1e-10),
    ]
    w1 = random_weights((d.N, d.N), rng)
    results.append(CheckResult("coupling equivalence", coupling_error(d, w1, random_schedule(depth, L, rng), Y), 1e-10))
    lam = float(default_lambda(d, 0.1))
    for arch in ARCHITECTURES:
        results.append(CheckResult(f"ISTA reduction [{arch}]", ista_reduction_error(arch, d, Y, lam, depth, L), 1e-12))
    if d.M <= 4096:
        results.append(CheckResult("coherence residual forms", coherence_form_error(d, w1), 1e-12))
    for arch in ARCHITECTURES:
        if trained and arch in trained:
            params = trained[arch]
        else:
            shape = weight_shape(arch, d)
            params = identity_params(arch, d, random_schedule(min(depth, 4), L, rng))
            params = type(params)(random_weights(shape, rng), params.schedule)
        err = gradient_check(params, d, (Y[:2], X[:2]), rng=rng)
        results.append(CheckResult(f"gradient check [{arch}]", err, 1e-4))
    return results
