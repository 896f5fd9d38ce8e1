"""Unrolled recovery networks: AdaLISTA, Ada-BlockLISTA and AdaBLISTA-CP.

Every layer ``t`` runs

    r = y - Phi x
    z = x + gamma[t] * g(r)
    x = threshold(z, theta[t])

and the architectures differ only in the weighted correlation ``g``:

* AdaLISTA:        ``g = Phi^H W^H r`` with elementwise thresholding,
* Ada-BlockLISTA:  ``g_q = Phi_q^H W_q^H r`` with one ``W_q`` per block,
* AdaBLISTA-CP:    ``g_q = Phi_1^H W_1^H conj(Lambda**(q-1)) r`` with one shared ``W_1``;

the last two use block thresholding. Weights are shared across layers.

Each correlation object also provides the adjoint needed for reverse-mode
differentiation (see :mod:`blocklista.training`). Adjoints use the
real-gradient convention ``dL/dRe(v) + 1j * dL/dIm(v)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import (
    CapabilityError,
    NumericalError,
    ValidationError,
    check_complex_array,
    check_square,
    frozen,
)
from .model import Dictionary, _adjoint, _apply
from .solvers import block_soft_threshold

ARCHITECTURES = ("adalista", "adablock", "adablistacp")
DENSE_GUARD = 4096


@dataclass(frozen=True, eq=False)
class LayerSchedule:
    """One ``(theta, gamma)`` pair per executed layer."""

    thresholds: np.ndarray
    step_sizes: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.thresholds, dtype=float).ravel()
        st = np.asarray(self.step_sizes, dtype=float).ravel()
        if th.shape != st.shape:
            raise ValidationError(
                f"{th.size} thresholds but {st.size} step sizes; lengths must match"
            )
        if np.any(~np.isfinite(th)) or np.any(th <= 0):
            raise ValidationError("thresholds must be positive and finite")
        if np.any(~np.isfinite(st)) or np.any(st <= 0):
            raise ValidationError("step sizes must be positive and finite")
        object.__setattr__(self, "thresholds", frozen(th))
        object.__setattr__(self, "step_sizes", frozen(st))

    @property
    def depth(self) -> int:
        return int(self.thresholds.size)

    @classmethod
    def constant(cls, depth: int, theta: float, gamma: float) -> "LayerSchedule":
        return cls(np.full(depth, float(theta)), np.full(depth, float(gamma)))


@dataclass(frozen=True, eq=False)
class AdaListaParams:
    w: np.ndarray
    schedule: LayerSchedule
    arch = "adalista"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.complex128)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"w must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("w contains non-finite entries")
        object.__setattr__(self, "w", frozen(w))

    @property
    def weights(self) -> np.ndarray:
        return self.w


@dataclass(frozen=True, eq=False)
class AdaBlockListaParams:
    weights: np.ndarray
    schedule: LayerSchedule
    arch = "adablock"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.complex128)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValidationError(f"weights must have shape (Q, N, N), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("weights contain non-finite entries")
        object.__setattr__(self, "weights", frozen(w))


@dataclass(frozen=True, eq=False)
class AdaBlistaCpParams:
    w1: np.ndarray
    schedule: LayerSchedule
    arch = "adablistacp"

    def __post_init__(self):
        w = np.asarray(self.w1, dtype=np.complex128)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(f"w1 must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("w1 contains non-finite entries")
        object.__setattr__(self, "w1", frozen(w))

    @property
    def weights(self) -> np.ndarray:
        return self.w1


PARAM_TYPES = {
    "adalista": AdaListaParams,
    "adablock": AdaBlockListaParams,
    "adablistacp": AdaBlistaCpParams,
}


def make_params(arch: str, weights, schedule: LayerSchedule):
    if arch not in PARAM_TYPES:
        raise ValidationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return PARAM_TYPES[arch](weights, schedule)


def identity_params(arch: str, d: Dictionary, schedule: LayerSchedule):
    """Identity weights (one per block for Ada-BlockLISTA)."""
    eye = np.eye(d.N, dtype=np.complex128)
    if arch == "adablock":
        return make_params(arch, np.broadcast_to(eye, (d.Q, d.N, d.N)), schedule)
    return make_params(arch, eye, schedule)


@dataclass
class ForwardTrace:
    estimate: np.ndarray
    per_layer_estimates: list | None = None


class _DenseCorrelation:
    """``g = Phi^H W^H r`` (AdaLISTA)."""

    def __init__(self, w: np.ndarray, d: Dictionary):
        self.w, self.d = w, d
        self._w_conj = np.conj(w)

    def __call__(self, r):
        return _adjoint(self.d, r @ self._w_conj)

    def backward(self, r, g_bar):
        u = _apply(self.d, g_bar)
        return u @ self.w.T, r.T @ np.conj(u)


class _BlockCorrelation:
    """``g_q = Phi_q^H W_q^H r`` with explicit per-block weights."""

    def __init__(self, weights: np.ndarray, d: Dictionary):
        self.w, self.d = weights, d
        Q, N = d.Q, d.N
        # (N, Q*N) stack of conj(W_q) so W_q^H r for all q is one matmul
        self._wh = np.conj(weights).transpose(1, 0, 2).reshape(N, Q * N)
        self._w_back = weights.transpose(0, 2, 1).reshape(Q * N, N)

    def __call__(self, r):
        d = self.d
        B = r.shape[0]
        v = (r @ self._wh).reshape(B, d.Q, d.N)
        g = (np.conj(d.lambda_powers)[None] * v) @ np.conj(d.phi1)
        return g.reshape(B, d.M)

    def backward(self, r, g_bar):
        d = self.d
        B = r.shape[0]
        gb = g_bar.reshape(B, d.Q, d.P)
        u = d.lambda_powers[None] * (gb @ d.phi1.T)  # (B, Q, N)
        u2 = u.reshape(B, d.Q * d.N)
        r_bar = u2 @ self._w_back
        w_bar = (r.T @ np.conj(u2)).reshape(d.N, d.Q, d.N).transpose(1, 0, 2)
        return r_bar, w_bar


class _CoupledCorrelation:
    """``g_q = Phi_1^H W_1^H conj(Lambda**(q-1)) r`` with a single shared ``W_1``.

    The residual is phase-rotated once per block and all ``Q`` rotations go
    through ``W_1^H`` in one GEMM; no per-block weight matrix is formed.
    """

    def __init__(self, w1: np.ndarray, d: Dictionary):
        self.w, self.d = w1, d
        self._w_conj = np.conj(w1)
        self._lp_conj = np.conj(d.lambda_powers)

    def _rotated(self, r):
        return (self._lp_conj[None] * r[:, None, :]).reshape(-1, self.d.N)  # (B*Q, N)

    def __call__(self, r):
        d = self.d
        v = self._rotated(r) @ self._w_conj
        return (v @ np.conj(d.phi1)).reshape(r.shape[0], d.M)

    def backward(self, r, g_bar):
        d = self.d
        B = r.shape[0]
        u = g_bar.reshape(B * d.Q, d.P) @ d.phi1.T  # Phi_1 g_bar_q, (B*Q, N)
        s_bar = (u @ self.w.T).reshape(B, d.Q, d.N)
        r_bar = np.sum(d.lambda_powers[None] * s_bar, axis=1)
        w_bar = self._rotated(r).T @ np.conj(u)
        return r_bar, w_bar


def correlation(params, d: Dictionary):
    """Correlation operator and threshold block size for ``params``."""
    check_params(params, d)
    if isinstance(params, AdaListaParams):
        return _DenseCorrelation(params.w, d), 1
    if isinstance(params, AdaBlockListaParams):
        return _BlockCorrelation(params.weights, d), d.P
    return _CoupledCorrelation(params.w1, d), d.P


def check_params(params, d: Dictionary) -> None:
    if isinstance(params, AdaBlockListaParams):
        if params.weights.shape != (d.Q, d.N, d.N):
            raise ValidationError(
                f"expected {d.Q} weights of shape ({d.N}, {d.N}), got {params.weights.shape}"
            )
    elif isinstance(params, (AdaListaParams, AdaBlistaCpParams)):
        if params.weights.shape != (d.N, d.N):
            raise ValidationError(
                f"weight shape {params.weights.shape} does not match N={d.N}"
            )
    else:
        raise ValidationError(f"unsupported parameter type {type(params).__name__}")


def unrolled_forward(params, d: Dictionary, y, keep_layers: bool = False) -> ForwardTrace:
    """Run all layers of ``params`` from ``x^(0) = 0``; ``y`` is (N,) or (B, N)."""
    y = check_complex_array(y, "y", d.N)
    corr, block_size = correlation(params, d)
    single = y.ndim == 1
    Y = y[None] if single else y
    sched = params.schedule
    x = np.zeros((Y.shape[0], d.M), dtype=np.complex128)
    layers = [x] if keep_layers else None
    for t in range(sched.depth):
        with np.errstate(over="ignore", invalid="ignore"):
            r = Y - _apply(d, x)
            z = x + sched.step_sizes[t] * corr(r)
            x = block_soft_threshold(z, sched.thresholds[t], block_size)
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(x))):
            raise NumericalError(f"non-finite values at layer {t}")
        if keep_layers:
            layers.append(x)
    if single:
        x = x[0]
        layers = [v[0] for v in layers] if keep_layers else None
    return ForwardTrace(x, layers)


def adalista_forward(params: AdaListaParams, d: Dictionary, y, keep_layers=False) -> ForwardTrace:
    if not isinstance(params, AdaListaParams):
        raise ValidationError("adalista_forward expects AdaListaParams")
    return unrolled_forward(params, d, y, keep_layers)


def ada_blocklista_forward(
    params: AdaBlockListaParams, d: Dictionary, y, keep_layers=False
) -> ForwardTrace:
    if not isinstance(params, AdaBlockListaParams):
        raise ValidationError("ada_blocklista_forward expects AdaBlockListaParams")
    return unrolled_forward(params, d, y, keep_layers)


def ada_blista_cp_forward(
    params: AdaBlistaCpParams, d: Dictionary, y, keep_layers=False
) -> ForwardTrace:
    if not isinstance(params, AdaBlistaCpParams):
        raise ValidationError("ada_blista_cp_forward expects AdaBlistaCpParams")
    return unrolled_forward(params, d, y, keep_layers)


def couple_weights(w1, d: Dictionary) -> np.ndarray:
    """``W_q = Lambda**(q-1) W_1 conj(Lambda**(q-1))`` for q = 1..Q; shape (Q, N, N)."""
    w1 = check_square(w1, "w1", d.N)
    lp = d.lambda_powers
    return lp[:, :, None] * w1[None] * np.conj(lp)[:, None, :]


def _guard(d: Dictionary):
    if d.M > DENSE_GUARD:
        raise CapabilityError(
            f"dense coherence diagnostics need M <= {DENSE_GUARD}, got M={d.M}"
        )


def _col_normalized_phi1(d: Dictionary) -> np.ndarray:
    # all blocks share phi1's column norms because |Lambda| = 1
    return d.phi1 / np.linalg.norm(d.phi1, axis=0)


def mutual_coherence(w, d: Dictionary) -> dict:
    """Max off-diagonal and diagonal deviation of ``Phi^H W^H Phi`` over unit-norm atoms."""
    _guard(d)
    w = check_square(w, "w", d.N)
    phi = d.dense()
    phi = phi / np.linalg.norm(phi, axis=0)
    G = phi.conj().T @ w.conj().T @ phi
    diag = np.diag(G).copy()
    np.fill_diagonal(G, 0.0)
    return {
        "max_off_diag": float(np.max(np.abs(G))),
        "max_diag_deviation": float(np.max(np.abs(diag - 1.0))),
    }


def block_coherence_residual(weights, d: Dictionary) -> dict:
    """Residuals of ``Phi_q^H W_q^H Phi_q ~ I`` and ``Phi_q^H W_q^H Phi_q' ~ 0``.

    ``weights`` is either a (Q, N, N) stack or a single (N, N) matrix, read as
    the shared ``W_1`` of the coupled structure. In the coupled case the
    products depend only on ``q' - q (mod Q)``:
    ``Phi_1^H W_1^H Lambda**(q'-q) Phi_1``.
    """
    _guard(d)
    w = np.asarray(weights, dtype=np.complex128)
    phi1 = _col_normalized_phi1(d)
    eye = np.eye(d.P)
    if w.ndim == 2:
        w = check_square(w, "w1", d.N)
        base = phi1.conj().T @ w.conj().T  # (P, N)
        prods = (base[None] * d.lambda_powers[:, None, :]) @ phi1  # shift s -> (P, P)
        intra = float(np.max(np.abs(prods[0] - eye)))
        cross = float(np.max(np.abs(prods[1:]))) if d.Q > 1 else 0.0
        return {
            "max_intra": intra,
            "max_cross": cross,
            "intra_per_block": np.full(d.Q, intra),
        }
    if w.shape != (d.Q, d.N, d.N):
        raise ValidationError(f"weights must be (Q, N, N) = ({d.Q}, {d.N}, {d.N}), got {w.shape}")
    blocks = d.lambda_powers[:, :, None] * phi1[None]  # (Q, N, P)
    intra = np.empty(d.Q)
    cross = 0.0
    for q in range(d.Q):
        left = blocks[q].conj().T @ w[q].conj().T  # (P, N)
        prods = np.einsum("pn,knr->kpr", left, blocks)
        intra[q] = np.max(np.abs(prods[q] - eye))
        others = np.delete(prods, q, axis=0)
        if others.size:
            cross = max(cross, float(np.max(np.abs(others))))
    return {"max_intra": float(intra.max()), "max_cross": cross, "intra_per_block": intra}


def param_count(params) -> dict:
    """Real scalars: two per complex weight entry, one per threshold and step size."""
    if not isinstance(params, tuple(PARAM_TYPES.values())):
        raise ValidationError(f"unsupported parameter type {type(params).__name__}")
    weights = 2 * int(params.weights.size)
    total = weights + 2 * params.schedule.depth
    return {"real_scalars": total, "weights_real_scalars": weights}
