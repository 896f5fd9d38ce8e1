"""Training of the unrolled networks on synthetic block-sparse data.

Gradients are computed by a hand-written reverse pass through every layer.
Complex parameters are trained as independent real and imaginary parts;
thresholds are parameterized as ``theta = exp(rho)`` and the reported
gradient is with respect to ``rho``. At the threshold kink
``||z_q|| = theta`` the derivative is taken to be zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import NumericalError, ValidationError, check_complex_array
from .model import (
    Dictionary,
    Instance,
    _adjoint,
    _apply,
    make_rng,
    sample_signal,
    snr_to_sigma,
    stack_instances,
    synthesize,
)
from .networks import (
    ARCHITECTURES,
    LayerSchedule,
    correlation,
    identity_params,
    make_params,
    unrolled_forward,
)
from .solvers import default_lambda, lipschitz_constant

logger = logging.getLogger(__name__)

GAMMA_FLOOR = 1e-8
DIVERGENCE_FACTOR = 1e3
# stream tags for make_rng(seed, (tag, ...))
TRAIN_STREAM, VAL_STREAM, SHUFFLE_STREAM = 0, 1, 7


@dataclass(frozen=True)
class TrainConfig:
    """Dataset, optimizer and schedule settings.

    ``init_snr_db`` selects the noise level behind the initial threshold
    ``lam / L``; ``None`` uses the middle of ``snr_range_db``.
    """

    n_train: int = 20_000
    n_val: int = 1_000
    batch_size: int = 64
    epochs: int = 20
    learning_rate: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    snr_range_db: tuple[float, float] = (0.0, 30.0)
    k_range: tuple[int, int] = (1, 5)
    n_layers: int = 10
    seed: int = 0
    loss_kind: str = "final_nmse"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_snr_db: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "snr_range_db", tuple(float(v) for v in self.snr_range_db))
        object.__setattr__(self, "k_range", tuple(int(v) for v in self.k_range))
        for name in ("n_train", "n_val", "batch_size", "epochs"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ValidationError(f"n_layers must be >= 0, got {self.n_layers}")
        lo, hi = self.snr_range_db
        if not lo <= hi:
            raise ValidationError(f"snr_range_db must satisfy lo <= hi, got {self.snr_range_db}")
        k_lo, k_hi = self.k_range
        if not 1 <= k_lo <= k_hi:
            raise ValidationError(f"k_range must satisfy 1 <= lo <= hi, got {self.k_range}")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.loss_kind != "final_nmse":
            raise ValidationError(f"unsupported loss_kind {self.loss_kind!r}")

    def validate_for(self, d: Dictionary) -> None:
        if self.k_range[1] > d.Q:
            raise ValidationError(f"k_range upper bound {self.k_range[1]} exceeds Q={d.Q}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["snr_range_db"] = list(self.snr_range_db)
        out["k_range"] = list(self.k_range)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


def generate_dataset(
    d: Dictionary, cfg: TrainConfig, n: int | None = None, stream: int = TRAIN_STREAM
) -> list[Instance]:
    """``n`` instances with K uniform in ``k_range`` and SNR uniform in ``snr_range_db``.

    Instance ``i`` is drawn from ``make_rng(cfg.seed, (stream, i))``.
    """
    cfg.validate_for(d)
    n = cfg.n_train if n is None else n
    lo, hi = cfg.snr_range_db
    k_lo, k_hi = cfg.k_range
    out = []
    for i in range(n):
        rng = make_rng(cfg.seed, (stream, i))
        k = int(rng.integers(k_lo, k_hi + 1))
        snr = float(rng.uniform(lo, hi)) if hi > lo else lo
        truth = sample_signal(d.grid, k, rng)
        out.append(synthesize(d, truth, snr, rng))
    return out


def loss_nmse(estimate, truth) -> float | np.ndarray:
    """``||estimate - truth||^2 / ||truth||^2`` over the trailing axis."""
    est = np.asarray(estimate, dtype=np.complex128)
    tru = np.asarray(truth, dtype=np.complex128)
    if est.shape != tru.shape:
        raise ValidationError(f"shape mismatch: {est.shape} vs {tru.shape}")
    den = np.sum(np.abs(tru) ** 2, axis=-1)
    if np.any(den == 0):
        raise ValidationError("NMSE is undefined for an all-zero truth")
    out = np.sum(np.abs(est - tru) ** 2, axis=-1) / den
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class GradientBundle:
    """Real gradients mirroring one parameter record.

    ``weights`` has the weight array's shape plus a trailing axis of size 2
    holding the derivative with respect to the real and imaginary parts.
    """

    weights: np.ndarray
    step_sizes: np.ndarray
    log_thresholds: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.weights[..., 0].ravel(),
                self.weights[..., 1].ravel(),
                self.step_sizes,
                self.log_thresholds,
            ]
        )


def params_to_vector(params) -> np.ndarray:
    """Flatten to ``[Re W, Im W, gamma, log theta]``."""
    w = params.weights
    s = params.schedule
    return np.concatenate([w.real.ravel(), w.imag.ravel(), s.step_sizes, np.log(s.thresholds)])


def vector_to_params(arch: str, vec: np.ndarray, weight_shape: tuple[int, ...]):
    n_w = int(np.prod(weight_shape))
    vec = np.asarray(vec, dtype=float)
    T = (vec.size - 2 * n_w) // 2
    if vec.size != 2 * n_w + 2 * T:
        raise ValidationError("parameter vector has inconsistent length")
    w = (vec[:n_w] + 1j * vec[n_w : 2 * n_w]).reshape(weight_shape)
    gamma = vec[2 * n_w : 2 * n_w + T]
    theta = np.exp(vec[2 * n_w + T :])
    return make_params(arch, w, LayerSchedule(theta, gamma))


def _as_batch(batch, d: Dictionary):
    if isinstance(batch, tuple) and len(batch) == 2:
        Y, X = batch
    else:
        Y, X = stack_instances(batch)
    Y = check_complex_array(Y, "Y", d.N, ndim=(2,))
    X = check_complex_array(X, "X", d.M, ndim=(2,))
    if Y.shape[0] != X.shape[0] or Y.shape[0] == 0:
        raise ValidationError("batch must be non-empty with matching Y and X rows")
    return Y, X


def forward_backward(params, d: Dictionary, Y: np.ndarray, X: np.ndarray):
    """Mean final-layer NMSE over the batch and its gradient bundle."""
    corr, block_size = correlation(params, d)
    gammas = params.schedule.step_sizes
    thetas = params.schedule.thresholds
    T = params.schedule.depth
    B = Y.shape[0]
    x = np.zeros((B, d.M), dtype=np.complex128)
    tape = []
    for t in range(T):
        r = Y - _apply(d, x)
        g = corr(r)
        z = x + gammas[t] * g
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite values at layer {t}")
        zb = z.reshape(B, -1, block_size)
        nrm = np.sqrt(np.sum(zb.real**2 + zb.imag**2, axis=-1))
        active = nrm > thetas[t]
        safe = np.where(active, nrm, 1.0)
        scale = np.where(active, 1.0 - thetas[t] / safe, 0.0)
        tape.append((r, g, zb, safe, active))
        x = (zb * scale[..., None]).reshape(B, d.M)

    err = x - X
    den = np.sum(X.real**2 + X.imag**2, axis=-1)
    if np.any(den == 0):
        raise ValidationError("NMSE is undefined for an all-zero truth")
    per = np.sum(err.real**2 + err.imag**2, axis=-1) / den
    loss = float(np.mean(per))

    w_bar = np.zeros(params.weights.shape, dtype=np.complex128)
    g_gamma = np.zeros(T)
    g_rho = np.zeros(T)
    x_bar = 2.0 * err / (den[:, None] * B)
    for t in reversed(range(T)):
        r, g, zb, safe, active = tape[t]
        xb = x_bar.reshape(zb.shape)
        th = thetas[t]
        inner = np.sum((np.conj(zb) * xb).real, axis=-1)  # Re <z_q, x_bar_q>
        coef = np.where(active, 1.0 - th / safe, 0.0)
        corr_t = np.where(active, th * inner / safe**3, 0.0)
        z_bar = (xb * coef[..., None] + zb * corr_t[..., None]).reshape(B, d.M)
        theta_bar = -np.sum(np.where(active, inner / safe, 0.0))
        g_rho[t] = theta_bar * th
        g_gamma[t] = np.sum((np.conj(g) * z_bar).real)
        r_bar, w_part = corr.backward(r, gammas[t] * z_bar)
        w_bar += w_part
        x_bar = z_bar - _adjoint(d, r_bar)
    grads = GradientBundle(np.stack([w_bar.real, w_bar.imag], axis=-1), g_gamma, g_rho)
    if not np.all(np.isfinite(grads.to_vector())):
        raise NumericalError("non-finite gradient")
    return loss, grads


def backward(params, d: Dictionary, batch) -> tuple[float, GradientBundle]:
    """Mean batch NMSE and exact reverse-mode gradients of it.

    ``batch`` is a list of :class:`Instance` or a ``(Y, X)`` pair of arrays.
    """
    Y, X = _as_batch(batch, d)
    return forward_backward(params, d, Y, X)


def evaluate_loss(params, d: Dictionary, Y, X, chunk: int = 1024) -> float:
    """Mean NMSE over a dataset, in fixed-size chunks."""
    total = 0.0
    for i in range(0, Y.shape[0], chunk):
        est = unrolled_forward(params, d, Y[i : i + chunk]).estimate
        total += float(np.sum(loss_nmse(est, X[i : i + chunk])))
    return total / Y.shape[0]


class Adam:
    """Bias-corrected adaptive-moment updates on one flat parameter vector."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(eq=False)
class Checkpoint:
    """Trained parameters plus everything needed to rebuild their dictionary."""

    arch: str
    dictionary: Dictionary
    params: object
    train_config: dict
    epoch: int
    val_loss: float
    lipschitz: float
    lam: float
    format_version: int = 1
    extra: dict = field(default_factory=dict)


class TrainingDiverged(NumericalError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def initial_params(arch: str, d: Dictionary, cfg: TrainConfig, L: float | None = None):
    """Identity weights, ``gamma = 1/L`` and ``theta = lam/L`` in every layer."""
    if arch not in ARCHITECTURES:
        raise ValidationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    L = lipschitz_constant(d) if L is None else L
    lam = init_lambda(d, cfg)
    schedule = LayerSchedule.constant(cfg.n_layers, lam / L, 1.0 / L)
    return identity_params(arch, d, schedule), L, lam


def init_lambda(d: Dictionary, cfg: TrainConfig) -> float:
    snr = cfg.init_snr_db
    if snr is None:
        snr = 0.5 * (cfg.snr_range_db[0] + cfg.snr_range_db[1])
    return float(default_lambda(d, snr_to_sigma(snr)))


def fit_unrolled(
    params,
    d: Dictionary,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    callback=None,
):
    """Adam over shuffled mini-batches; returns best-validation params and history.

    ``history[0]`` holds the losses of ``params`` before any update.
    """
    Ytr, Xtr = train_data
    Yva, Xva = val_data
    arch = params.arch
    shape = params.weights.shape
    n_w = int(np.prod(shape))
    T = params.schedule.depth
    vec = params_to_vector(params)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    init_train = evaluate_loss(params, d, Ytr, Xtr)
    best_val = evaluate_loss(params, d, Yva, Xva)
    best = (params, 0, best_val)
    history = [{"epoch": 0, "train_loss": init_train, "val_loss": best_val, "lr": 0.0}]
    n = Ytr.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)
        opt.lr = lr
        order = make_rng(cfg.seed, (SHUFFLE_STREAM, epoch)).permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                loss, grads = forward_backward(params, d, Ytr[idx], Xtr[idx])
            except NumericalError as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", history) from exc
            if not math.isfinite(loss) or loss > DIVERGENCE_FACTOR * init_train:
                history.append({"epoch": epoch, "train_loss": loss, "val_loss": float("nan"), "lr": lr})
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch}: batch loss {loss:.4g} vs initial {init_train:.4g}",
                    history,
                )
            batch_losses.append(loss)
            if lr > 0:
                vec = opt.step(vec, grads.to_vector())
                vec[2 * n_w : 2 * n_w + T] = np.maximum(vec[2 * n_w : 2 * n_w + T], GAMMA_FLOOR)
                params = vector_to_params(arch, vec, shape)
        val = evaluate_loss(params, d, Yva, Xva)
        train_loss = float(np.mean(batch_losses))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val, "lr": lr})
        logger.info("epoch %d train %.6f val %.6f lr %.2e", epoch, train_loss, val, lr)
        if callback is not None:
            callback(history[-1])
        if val < best[2]:
            best = (params, epoch, val)
    return best, history


def train(
    arch: str,
    d: Dictionary,
    cfg: TrainConfig,
    train_set: list[Instance] | None = None,
    val_set: list[Instance] | None = None,
    callback=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train one architecture from its ISTA-equivalent initialization.

    Datasets are generated from ``cfg`` when not supplied.
    """
    cfg.validate_for(d)
    if train_set is None:
        train_set = generate_dataset(d, cfg, cfg.n_train, TRAIN_STREAM)
    if val_set is None:
        val_set = generate_dataset(d, cfg, cfg.n_val, VAL_STREAM)
    params, L, lam = initial_params(arch, d, cfg)
    (best, epoch, val), history = fit_unrolled(
        params, d, stack_instances(train_set), stack_instances(val_set), cfg, callback
    )
    ckpt = Checkpoint(
        arch=arch,
        dictionary=d,
        params=best,
        train_config=cfg.to_dict(),
        epoch=epoch,
        val_loss=val,
        lipschitz=L,
        lam=lam,
    )
    return ckpt, history


def weight_shape(arch: str, d: Dictionary) -> tuple[int, ...]:
    if arch == "adablock":
        return (d.Q, d.N, d.N)
    return (d.N, d.N)

