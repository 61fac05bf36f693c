"""Post-processing of tensors in low-rank formats through Hadamard-algebra operations."""
from .core import (
    AlgebraElement,
    DegenerateIterateError,
    DenseCapError,
    DivergenceError,
    HadalgError,
    IterationReport,
    NumericalError,
    Shape,
    ShapeMismatchError,
    StoppingRule,
    TruncationInfo,
    TruncationPolicy,
    state_functional,
    truncated_fixed_point,
)
from .cp import CpTensor, cp_truncate_als
from .dense import DenseTensor
from .postproc import (
    EmptyLevelSetError,
    ExtremeResult,
    Interval,
    characteristic,
    closest_to,
    conditional_mean,
    find_extreme,
    hadamard_inverse,
    hadamard_sign,
    hadamard_sqrt,
    kb_bound,
    level_set,
    mean_variance,
    probability,
    support_cardinality,
)
from .tt import TtTensor, tt_from_cp, tt_round

__version__ = "0.1.0"
