"""Signal model for on-grid 2D harmonic retrieval.

The full observation matrix is the 2D DFT ``F_Q kron F_P`` and the dictionary
keeps ``N`` of its ``M = P*Q`` rows. Columns are grouped into ``Q`` blocks of
``P`` atoms, and every block is a row-wise phase rotation of the first one::

    Phi_q = diag(lam) ** (q - 1) @ Phi_1,    lam[n] = w_Q ** floor((Omega_n - 1) / P)

so a dictionary is stored as ``phi1`` (N x P) plus the unit-modulus vector
``lam`` (N,). All vector arguments may carry leading batch axes; the trailing
axis is the signal (length M) or measurement (length N) axis.

Block and sample indices are 1-based in every public field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._validation import (
    ValidationError,
    check_complex_array,
    check_positive_int,
    frozen,
)

RNG_ALGORITHM = "numpy.Philox-4x64-10"


def make_rng(seed: int, stream: tuple[int, ...] | int = ()) -> np.random.Generator:
    """Counter-based generator for ``(seed, stream)``.

    Streams are SeedSequence spawn keys, so ``make_rng(s, (0, i))`` gives
    independent, reproducible per-item generators.
    """
    if isinstance(stream, (int, np.integer)):
        stream = (int(stream),)
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def _rng_provenance(rng: np.random.Generator) -> tuple[int | None, tuple[int, ...]]:
    seq = getattr(rng.bit_generator, "seed_seq", None)
    if isinstance(seq, np.random.SeedSequence) and isinstance(seq.entropy, int):
        return seq.entropy, tuple(int(k) for k in seq.spawn_key)
    return None, ()


@dataclass(frozen=True)
class GridSpec:
    """Frequency grid: ``Q`` blocks of ``P`` atoms each."""

    P: int
    Q: int

    def __post_init__(self):
        check_positive_int(self.P, "P")
        check_positive_int(self.Q, "Q")

    @property
    def M(self) -> int:
        return self.P * self.Q


@dataclass(frozen=True)
class SamplingPattern:
    """Sorted, duplicate-free 1-based row indices ``omega`` into ``{1..M}``."""

    omega: tuple[int, ...]
    M: int

    def __post_init__(self):
        omega = tuple(int(i) for i in self.omega)
        object.__setattr__(self, "omega", omega)
        check_positive_int(self.M, "M")
        if not omega:
            raise ValidationError("sampling pattern must contain at least one index (N >= 1)")
        if len(omega) > self.M:
            raise ValidationError(f"pattern has N={len(omega)} > M={self.M} indices")
        prev = 0
        for i in omega:
            if i < 1 or i > self.M:
                raise ValidationError(f"pattern index {i} outside 1..{self.M}")
            if i <= prev:
                raise ValidationError(
                    f"pattern index {i} is duplicated or out of order"
                )
            prev = i

    @property
    def N(self) -> int:
        return len(self.omega)


def dft_matrix(n: int) -> np.ndarray:
    """Unnormalized DFT matrix with entries ``exp(+2j*pi*i*k/n)``, ``i, k = 0..n-1``."""
    n = check_positive_int(n, "n")
    ik = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(2j * np.pi * ik / n)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Factorized sub-sampled 2D DFT dictionary.

    Parameters
    ----------
    grid : GridSpec
    pattern : SamplingPattern
    phi1 : ndarray, shape (N, P)
        First block of the dictionary (already multiplied by ``scale``).
    lambda_diag : ndarray, shape (N,)
        Diagonal of the block-rotation matrix; unit modulus.
    scale : float
        ``1`` for the raw DFT rows, ``1/sqrt(N)`` for unit-norm columns.
    """

    grid: GridSpec
    pattern: SamplingPattern
    phi1: np.ndarray
    lambda_diag: np.ndarray
    scale: float = 1.0

    @property
    def N(self) -> int:
        return self.pattern.N

    @property
    def M(self) -> int:
        return self.grid.M

    @property
    def P(self) -> int:
        return self.grid.P

    @property
    def Q(self) -> int:
        return self.grid.Q

    @property
    def normalized(self) -> bool:
        return self.scale != 1.0

    @cached_property
    def lambda_powers(self) -> np.ndarray:
        """Row ``q`` (0-based) holds ``lambda_diag ** q``; shape (Q, N)."""
        return frozen(self.lambda_diag[None, :] ** np.arange(self.Q)[:, None])

    def block(self, q: int) -> np.ndarray:
        """Dense ``Phi_q`` for 1-based block index ``q``."""
        if not 1 <= q <= self.Q:
            raise ValidationError(f"block index {q} outside 1..{self.Q}")
        return self.lambda_powers[q - 1][:, None] * self.phi1

    def dense(self) -> np.ndarray:
        """Materialize ``Phi`` (N x M) from the factorization."""
        blocks = self.lambda_powers[:, :, None] * self.phi1[None, :, :]  # (Q, N, P)
        return np.ascontiguousarray(blocks.transpose(1, 0, 2).reshape(self.N, self.M))

    def column_norms(self) -> np.ndarray:
        # every block shares the column norms of phi1 since |lam| = 1
        return np.tile(np.linalg.norm(self.phi1, axis=0), self.Q)

    def with_lambda(self, lambda_diag) -> "Dictionary":
        """Copy with a replaced coupling diagonal (used for fault injection)."""
        return Dictionary(
            self.grid, self.pattern, self.phi1, frozen(np.asarray(lambda_diag, complex)),
            self.scale,
        )

    def same_geometry(self, other: "Dictionary") -> bool:
        return (
            self.grid == other.grid
            and self.pattern == other.pattern
            and self.scale == other.scale
        )


def build_dictionary(
    grid: GridSpec, pattern: SamplingPattern, normalize: bool = False
) -> Dictionary:
    """Factorize the rows ``pattern`` of ``F_Q kron F_P``.

    Row ``m = a*P + b`` (0-based) of the Kronecker product and column
    ``q*P + p`` hold ``w_Q**(a*q) * w_P**(b*p)``. Block ``q`` is therefore
    block 0 with row ``m`` multiplied by ``w_Q**(a*q)``.
    """
    if pattern.M != grid.M:
        raise ValidationError(
            f"pattern was drawn for M={pattern.M}, grid has M={grid.M}"
        )
    for i in pattern.omega:
        if not 1 <= i <= grid.M:
            raise ValidationError(f"pattern index {i} outside 1..{grid.M}")
    rows = np.asarray(pattern.omega) - 1
    a, b = np.divmod(rows, grid.P)
    scale = 1.0 / math.sqrt(pattern.N) if normalize else 1.0
    bp = np.outer(b, np.arange(grid.P)) % grid.P
    phi1 = scale * np.exp(2j * np.pi * bp / grid.P)
    lam = np.exp(2j * np.pi * (a % grid.Q) / grid.Q)
    return Dictionary(grid, pattern, frozen(phi1), frozen(lam), scale)


def lambda_power(d: Dictionary, k: int) -> np.ndarray:
    """Entrywise ``k``-th power of the coupling diagonal."""
    k = check_positive_int(k, "k", minimum=0)
    if k < d.Q:
        return d.lambda_powers[k].copy()
    return d.lambda_diag ** k


def apply_dictionary(d: Dictionary, x) -> np.ndarray:
    """``Phi @ x`` as ``sum_q Lambda**(q-1) (Phi_1 x_q)``. ``x`` has shape (..., M)."""
    x = check_complex_array(x, "x", d.M, ndim=(1, 2, 3))
    return _apply(d, x)


def apply_adjoint(d: Dictionary, r) -> np.ndarray:
    """``Phi^H @ r``; block ``q`` is ``Phi_1^H conj(Lambda**(q-1)) r``."""
    r = check_complex_array(r, "r", d.N, ndim=(1, 2, 3))
    return _adjoint(d, r)


def _apply(d: Dictionary, x: np.ndarray) -> np.ndarray:
    lead = x.shape[:-1]
    # x[b, q, p] -> (b, p, q) so the sum over blocks is a single GEMM with the powers of Lambda
    xt = x.reshape(-1, d.Q, d.P).transpose(0, 2, 1).reshape(-1, d.Q)
    t = (xt @ d.lambda_powers).reshape(-1, d.P, d.N)
    return np.einsum("bpn,np->bn", t, d.phi1).reshape(lead + (d.N,))


def _adjoint(d: Dictionary, r: np.ndarray) -> np.ndarray:
    lead = r.shape[:-1]
    rb = r.reshape(-1, 1, d.N) * np.conj(d.phi1.T)[None]  # (b, p, n)
    out = rb.reshape(-1, d.N) @ np.conj(d.lambda_powers).T  # (b*p, q)
    return out.reshape(-1, d.P, d.Q).transpose(0, 2, 1).reshape(lead + (d.M,))


def sample_pattern(grid: GridSpec, n: int, rng: np.random.Generator) -> SamplingPattern:
    """Draw ``n`` distinct rows uniformly without replacement, sorted."""
    n = check_positive_int(n, "n")
    if n > grid.M:
        raise ValidationError(f"sample count N={n} exceeds M={grid.M}")
    rows = np.sort(rng.choice(grid.M, size=n, replace=False)) + 1
    return SamplingPattern(tuple(int(i) for i in rows), grid.M)


@dataclass(frozen=True, eq=False)
class BlockSparseSignal:
    """Ground truth with 1-based ``support`` blocks; zero everywhere else."""

    grid: GridSpec
    support: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        support = tuple(sorted(int(q) for q in self.support))
        object.__setattr__(self, "support", support)
        if len(set(support)) != len(support):
            raise ValidationError(f"support has repeated blocks: {support}")
        for q in support:
            if not 1 <= q <= self.grid.Q:
                raise ValidationError(f"support block {q} outside 1..{self.grid.Q}")
        values = check_complex_array(self.values, "values", self.grid.M, ndim=(1,))
        mask = np.ones(self.grid.Q, dtype=bool)
        mask[[q - 1 for q in support]] = False
        blocks = values.reshape(self.grid.Q, self.grid.P)
        if np.any(blocks[mask] != 0):
            raise ValidationError("values are nonzero outside the declared support")
        object.__setattr__(self, "values", frozen(values))

    @property
    def K(self) -> int:
        return len(self.support)

    def scaled(self, factor: float) -> "BlockSparseSignal":
        return BlockSparseSignal(self.grid, self.support, self.values * factor)


def sample_signal(grid: GridSpec, k: int, rng: np.random.Generator) -> BlockSparseSignal:
    """``k`` uniformly chosen active blocks with i.i.d. CN(0, 1) entries."""
    k = check_positive_int(k, "k")
    if k > grid.Q:
        raise ValidationError(f"K={k} exceeds the number of blocks Q={grid.Q}")
    support = np.sort(rng.choice(grid.Q, size=k, replace=False))
    z = rng.standard_normal((k, grid.P)) + 1j * rng.standard_normal((k, grid.P))
    values = np.zeros((grid.Q, grid.P), dtype=np.complex128)
    values[support] = z / math.sqrt(2.0)
    return BlockSparseSignal(grid, tuple(int(q) + 1 for q in support), values.ravel())


def snr_to_sigma(snr_db: float) -> float:
    """Noise standard deviation for unit signal power: ``10 ** (-snr_db / 20)``."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return 10.0 ** (-float(snr_db) / 20.0)


@dataclass(frozen=True, eq=False)
class Instance:
    """One measurement problem ``y = Phi x + w``.

    ``truth`` is already rescaled so that ``Phi @ truth.values`` has unit
    average power per sample. ``seed`` and ``stream`` identify the generator
    that produced the draw (``None``/``()`` when it was not seed-derived).
    """

    y: np.ndarray
    truth: BlockSparseSignal
    sigma: float
    snr_db: float
    seed: int | None = None
    stream: tuple[int, ...] = ()
    rng_algorithm: str = field(default=RNG_ALGORITHM)

    @property
    def K(self) -> int:
        return self.truth.K


def synthesize(
    d: Dictionary,
    truth: BlockSparseSignal,
    snr_db: float,
    rng: np.random.Generator,
) -> Instance:
    """Scale ``truth`` to unit clean measurement power and add CN(0, sigma^2) noise.

    ``snr_db = inf`` gives noiseless measurements and draws nothing from ``rng``.
    """
    if truth.grid != d.grid:
        raise ValidationError(f"signal grid {truth.grid} does not match dictionary {d.grid}")
    snr_db = float(snr_db)
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValidationError(f"invalid snr_db {snr_db}")
    clean = _apply(d, truth.values)
    power = float(np.mean(np.abs(clean) ** 2))
    if power <= 0.0:
        raise ValidationError("clean measurement has zero power; cannot normalize")
    factor = 1.0 / math.sqrt(power)
    scaled = truth.scaled(factor)
    clean = _apply(d, scaled.values)
    sigma = snr_to_sigma(snr_db)
    if sigma > 0.0:
        w = rng.standard_normal(d.N) + 1j * rng.standard_normal(d.N)
        y = clean + sigma * w / math.sqrt(2.0)
    else:
        y = clean
    seed, stream = _rng_provenance(rng)
    return Instance(frozen(y), scaled, sigma, snr_db, seed, stream)


def draw_instance(
    d: Dictionary, k: int, snr_db: float, seed: int, stream=()
) -> Instance:
    """Signal plus measurement from a single seeded stream."""
    rng = make_rng(seed, stream)
    truth = sample_signal(d.grid, k, rng)
    return synthesize(d, truth, snr_db, rng)


def stack_instances(instances) -> tuple[np.ndarray, np.ndarray]:
    """Return measurements (B, N) and truths (B, M) as stacked arrays."""
    instances = list(instances)
    if not instances:
        raise ValidationError("no instances to stack")
    Y = np.stack([inst.y for inst in instances])
    X = np.stack([inst.truth.values for inst in instances])
    return Y, X
