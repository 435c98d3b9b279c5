"""Invertible butterfly layers and normalizing flows built on them, in NumPy."""

from .blockwise import (
    BlockwiseFactor,
    blockwise_invert_apply,
    blockwise_log_det,
    blockwise_matvec,
    blockwise_new,
    blockwise_to_dense,
    onebyone_equivalent,
)
from .butterfly import (
    ButterflyFactor,
    ButterflyLayer,
    PairIndexing,
    SegmentedLayer,
    factor_invert,
    factor_log_det,
    factor_matvec,
    factor_new,
    factor_to_dense,
    layer_apply,
    layer_invert,
    layer_invert_apply,
    layer_new,
    layer_to_dense,
    segmented_apply,
    segmented_invert_apply,
    segmented_new,
)
from .checkpoint import checkpoint_load, checkpoint_load_into, checkpoint_save
from .circulant import circulant_matrix, circulant_to_butterfly
from .config import ConfigError, RunConfig
from .data import Dataset, make_dataset
from .errors import (
    CorruptCheckpointError,
    InvalidArgumentError,
    NonFiniteGradientError,
    NonFiniteLossError,
    ShapeMismatchError,
    SingularFactorError,
)
from .flow import FlowModel, bits_per_dim, build_model
from .permutation import perm_decompose, permutation_matrix
from .train import train_loop

__version__ = "0.1.0"
