"""Block-sparse recovery on a subsampled 2D-DFT dictionary with unrolled ISTA networks."""

from ._validation import CapabilityError, NumericalError, ValidationError
from .estimators import AdaBlistaCP, AdaBlockLISTA, AdaLISTA, BlockFISTA, BlockISTA
from .model import (
    BlockSparseSignal,
    Dictionary,
    GridSpec,
    Instance,
    SamplingPattern,
    apply_adjoint,
    apply_dictionary,
    build_dictionary,
    draw_instance,
    make_rng,
    sample_pattern,
    sample_signal,
    synthesize,
)
from .networks import (
    AdaBlistaCpParams,
    AdaBlockListaParams,
    AdaListaParams,
    LayerSchedule,
    block_coherence_residual,
    couple_weights,
    mutual_coherence,
    param_count,
    unrolled_forward,
)
from .solvers import SolverConfig, block_fista, block_ista, block_soft_threshold, lipschitz_constant
from .training import TrainConfig, backward, loss_nmse, train

__version__ = "0.1.0"
