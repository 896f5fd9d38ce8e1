"""scikit-learn style estimators for the solvers and unrolled networks.

Estimators map measurements ``Y`` of shape (n_samples, N) to block-sparse
estimates of shape (n_samples, M). The dictionary is a constructor parameter,
so ``get_params``/``set_params``/``clone`` work as usual.

>>> est = AdaBlistaCP(dictionary, n_layers=10).fit(Y_train, X_train)
>>> X_hat = est.predict(Y_test)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError, check_complex_array
from .model import Dictionary
from .networks import param_count, unrolled_forward
from .solvers import SolverConfig, _proximal_gradient, default_lambda, lipschitz_constant
from .training import (
    Checkpoint,
    TrainConfig,
    fit_unrolled,
    initial_params,
    loss_nmse,
)


def _check_Y(Y, d: Dictionary) -> np.ndarray:
    Y = check_complex_array(Y, "Y", d.N, ndim=(1, 2))
    return Y[None] if Y.ndim == 1 else Y


class _RecoveryMixin(RegressorMixin):
    def score(self, Y, X, sample_weight=None):
        """Negative mean NMSE (higher is better)."""
        X = check_complex_array(X, "X", self.dictionary.M, ndim=(1, 2))
        est = self.predict(Y).reshape(X.shape)
        return -float(np.average(np.atleast_1d(loss_nmse(est, X)), weights=sample_weight))


class BlockISTA(_RecoveryMixin, BaseEstimator):
    """Block-ISTA for the l2,1-regularized least squares problem.

    Parameters
    ----------
    dictionary : Dictionary
    alpha : float or "auto"
        Regularization weight. ``"auto"`` uses ``default_lambda`` at ``noise_std``.
    noise_std : float, optional
        Noise standard deviation behind ``alpha="auto"``; required in that case.
    max_iter, tol : stopping rule, see :class:`SolverConfig`.
    accelerated : bool
        Use the FISTA momentum sequence.
    """

    def __init__(
        self,
        dictionary: Dictionary,
        alpha="auto",
        noise_std=None,
        max_iter: int = 10_000,
        tol: float = 1e-10,
        accelerated: bool = False,
    ):
        self.dictionary = dictionary
        self.alpha = alpha
        self.noise_std = noise_std
        self.max_iter = max_iter
        self.tol = tol
        self.accelerated = accelerated

    def _lambda(self):
        if isinstance(self.alpha, str):
            if self.alpha != "auto":
                raise ValidationError(f"alpha must be a positive float or 'auto', got {self.alpha!r}")
            if self.noise_std is None:
                raise ValidationError("alpha='auto' needs noise_std")
            return default_lambda(self.dictionary, self.noise_std)
        return float(self.alpha)

    def fit(self, Y=None, X=None):
        """No-op apart from caching the Lipschitz constant; solvers are not trained."""
        self.lipschitz_ = lipschitz_constant(self.dictionary)
        return self

    def solve(self, Y, record_iterates: bool = False):
        """Full :class:`SolverTrace` for ``Y``."""
        L = getattr(self, "lipschitz_", None)
        cfg = SolverConfig(self._lambda(), self.max_iter, self.tol, self.accelerated)
        return _proximal_gradient(
            self.dictionary, Y, cfg, L, self.dictionary.P, record_iterates, self.accelerated
        )

    def predict(self, Y) -> np.ndarray:
        Y = _check_Y(Y, self.dictionary)
        return self.solve(Y).estimate


class BlockFISTA(BlockISTA):
    """Block-ISTA with Nesterov momentum."""

    def __init__(
        self,
        dictionary: Dictionary,
        alpha="auto",
        noise_std=None,
        max_iter: int = 10_000,
        tol: float = 1e-10,
        accelerated: bool = True,
    ):
        super().__init__(dictionary, alpha, noise_std, max_iter, tol, accelerated)


class _UnrolledNetwork(_RecoveryMixin, BaseEstimator):
    _arch: str = ""

    def __init__(
        self,
        dictionary: Dictionary,
        n_layers: int = 10,
        learning_rate: float = 1e-3,
        lr_decay: float = 0.5,
        lr_decay_every: int = 10,
        batch_size: int = 64,
        epochs: int = 20,
        init_noise_std: float | None = None,
        validation_fraction: float = 0.05,
        random_state: int = 0,
    ):
        self.dictionary = dictionary
        self.n_layers = n_layers
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.batch_size = batch_size
        self.epochs = epochs
        self.init_noise_std = init_noise_std
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        init_snr = None
        if self.init_noise_std is not None:
            init_snr = -20.0 * np.log10(max(self.init_noise_std, 1e-300))
        return TrainConfig(
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            n_layers=self.n_layers,
            seed=self.random_state,
            init_snr_db=init_snr,
        )

    def init_params(self):
        """ISTA-equivalent starting point; also sets the fitted attributes."""
        cfg = self._train_config()
        self.params_, self.lipschitz_, self.lambda_ = initial_params(self._arch, self.dictionary, cfg)
        self.history_ = []
        return self

    def fit(self, Y, X, validation_data=None):
        """Train on measurement/truth pairs.

        ``validation_data=(Y_val, X_val)`` selects the returned best-validation
        parameters; otherwise the last ``validation_fraction`` of rows is held out.
        """
        d = self.dictionary
        Y = _check_Y(Y, d)
        X = check_complex_array(X, "X", d.M, ndim=(2,))
        if X.shape[0] != Y.shape[0]:
            raise ValidationError(f"Y has {Y.shape[0]} rows but X has {X.shape[0]}")
        if validation_data is None:
            n_val = max(1, int(round(self.validation_fraction * Y.shape[0])))
            if n_val >= Y.shape[0]:
                raise ValidationError("not enough samples to hold out a validation split")
            Yv, Xv = Y[-n_val:], X[-n_val:]
            Y, X = Y[:-n_val], X[:-n_val]
        else:
            Yv = _check_Y(validation_data[0], d)
            Xv = check_complex_array(validation_data[1], "X_val", d.M, ndim=(2,))
        self.init_params()
        cfg = self._train_config()
        (best, epoch, val), history = fit_unrolled(self.params_, d, (Y, X), (Yv, Xv), cfg)
        self.params_ = best
        self.best_epoch_ = epoch
        self.best_val_loss_ = val
        self.history_ = history
        return self

    def predict(self, Y) -> np.ndarray:
        check_is_fitted(self, "params_")
        return unrolled_forward(self.params_, self.dictionary, _check_Y(Y, self.dictionary)).estimate

    def predict_layers(self, Y) -> list[np.ndarray]:
        """Estimates after every layer, starting with ``x^(0) = 0``."""
        check_is_fitted(self, "params_")
        Y = _check_Y(Y, self.dictionary)
        return unrolled_forward(self.params_, self.dictionary, Y, keep_layers=True).per_layer_estimates

    def param_count(self) -> dict:
        check_is_fitted(self, "params_")
        return param_count(self.params_)

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "params_")
        return Checkpoint(
            arch=self._arch,
            dictionary=self.dictionary,
            params=self.params_,
            train_config=self._train_config().to_dict(),
            epoch=getattr(self, "best_epoch_", 0),
            val_loss=getattr(self, "best_val_loss_", float("nan")),
            lipschitz=self.lipschitz_,
            lam=self.lambda_,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "_UnrolledNetwork":
        target = NETWORKS.get(ckpt.arch)
        if target is None:
            raise ValidationError(f"unknown architecture {ckpt.arch!r}")
        if cls is not _UnrolledNetwork and target is not cls:
            raise ValidationError(f"checkpoint holds {ckpt.arch!r}, not {cls._arch!r}")
        cfg = ckpt.train_config
        est = target(
            ckpt.dictionary,
            n_layers=ckpt.params.schedule.depth,
            learning_rate=cfg.get("learning_rate", 1e-3),
            batch_size=cfg.get("batch_size", 64),
            epochs=cfg.get("epochs", 20),
            random_state=cfg.get("seed", 0),
        )
        est.params_ = ckpt.params
        est.lipschitz_ = ckpt.lipschitz
        est.lambda_ = ckpt.lam
        est.best_epoch_ = ckpt.epoch
        est.best_val_loss_ = ckpt.val_loss
        est.history_ = []
        return est


class AdaLISTA(_UnrolledNetwork):
    """Unrolled ISTA with one learned ``W`` and elementwise thresholds."""

    _arch = "adalista"


class AdaBlockLISTA(_UnrolledNetwork):
    """Unrolled Block-ISTA with one learned ``W_q`` per block."""

    _arch = "adablock"


class AdaBlistaCP(_UnrolledNetwork):
    """Unrolled Block-ISTA with the coupled weights ``W_q = Lambda**(q-1) W_1 Lambda**-(q-1)``."""

    _arch = "adablistacp"


NETWORKS = {"adalista": AdaLISTA, "adablock": AdaBlockLISTA, "adablistacp": AdaBlistaCP}


def network_from_checkpoint(ckpt: Checkpoint) -> _UnrolledNetwork:
    return _UnrolledNetwork.from_checkpoint(ckpt)
