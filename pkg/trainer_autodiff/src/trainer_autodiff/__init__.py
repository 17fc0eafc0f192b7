"""Exact-gradient trainer for unfolded ADMM JCDD receiver parameters.

Consumes frame datasets and alist code files produced by the simulator
package and writes parameter tables in the shared JSON schema; the two
packages share no code.
"""

from .codes import Code, Polytope, build_parity_polytope, load_alist, \
    parse_alist, syndrome_ok
from .dataset import common_sigma2, load_dataset
from .stacks import DifferentiableLayerStack, beamspace_dft, clip01, \
    map_word, power_iter_lmax, shrinkage
from .tables import DEFAULT_TAU_SCALE, GAUSSIAN_DEFAULTS, LOG_NAMES, \
    PARAM_NAMES, SPARSE_DEFAULTS, columns_from_table, default_columns, \
    default_tau, export_table, import_table, table_from_columns, \
    validate_table
from .training import TrainResult, TrainSettings, evaluate_loss, \
    frames_to_tensors, train_multistage, unfolded_loss

__all__ = [
    "Code", "Polytope", "build_parity_polytope", "load_alist", "parse_alist",
    "syndrome_ok", "common_sigma2", "load_dataset",
    "DifferentiableLayerStack", "beamspace_dft", "clip01", "map_word",
    "power_iter_lmax", "shrinkage", "DEFAULT_TAU_SCALE", "GAUSSIAN_DEFAULTS",
    "LOG_NAMES", "PARAM_NAMES", "SPARSE_DEFAULTS", "columns_from_table",
    "default_columns", "default_tau", "export_table", "import_table",
    "table_from_columns", "validate_table", "TrainResult", "TrainSettings",
    "evaluate_loss", "frames_to_tensors", "train_multistage", "unfolded_loss",
]
