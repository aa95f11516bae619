"""Invariant measures of interval maps via normalized Birkhoff sums.

The pipeline discretizes a piecewise-monotone map on a grid of cells
(:mod:`acim.dynamics`), forms the ratio-normalized sums ``Q_n`` of
pushforwards of a seed measure (:mod:`acim.ratio_limit`), checks the
distortion/recurrence hypotheses that make their limits invariant
(:mod:`acim.hypotheses`), and ships a catalog of maps with known answers
(:mod:`acim.maps`).
"""

from .dynamics import (
    BranchMap,
    TransferMatrix,
    build_transfer_matrix,
    load_transfer_matrix,
    make_branch,
    preimage_mass,
    pushforward,
    save_transfer_matrix,
)
from .errors import (
    AcimError,
    ConfigError,
    DegenerateMeasureError,
    EscapeOverflowError,
    InputError,
    IrreducibilityError,
    NonsingularityError,
    NormalizationError,
)
from .hypotheses import (
    check_irreducibility,
    check_ratio_bounds,
    check_m2,
    check_m3,
    check_m4,
    check_uniform,
    classify,
    reachability_constants,
    ratio_bound,
    lemma23_constants,
    lemma24_bound,
)
from .maps import CATALOG, instantiate, markov_map
from .measure import (
    CellMeasure,
    Grid,
    LambdaPartition,
    ReferenceMeasure,
    SubsetFamily,
    distortion_bound,
    measure_of,
    validate_partition,
)
from .ratio_limit import invariance_residual, omega_limit, ratio_normalize

__version__ = "0.1.0"
