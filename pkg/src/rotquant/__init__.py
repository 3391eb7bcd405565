"""Rotation-aware post-training quantization toolkit."""

__version__ = "0.1.0"

from .archive import read_archive, write_archive
from .calibration import (
    CalibrationSet,
    SpectrumSpec,
    accumulate_hessian,
    bounds_experiment,
    build_spectrum_hessian,
    damp,
    synthetic_calibration,
)
from .linalg import (
    ConstrainedLdl,
    ConvergenceError,
    EigenDecomposition,
    FactorizationError,
    LdlFactors,
    NumericalError,
    constrained_ldl,
    fwht_in_place,
    hadamard_orthonormal,
    jacobi_eigh,
    ldl_upper,
    random_orthogonal,
    randomized_hadamard,
)
from .metrics import (
    BoundReport,
    build_bound_report,
    correction_max,
    gptq_error_bounds,
    hessian_incoherence,
    kl_proxy,
    layerwise_error,
    rtn_error_bound,
    snr_db,
    ub_bound,
    weight_incoherence,
)
from .model import (
    ToyModel,
    ToyModelSpec,
    apply_fused_rotations,
    build_toy_model,
    forward,
    load_model,
    model_layers,
    quantize_model,
    save_model,
)
from .quantize import (
    QuantConfig,
    QuantizedWeight,
    brute_force_optimal,
    gptq_quantize,
    gptqs_quantize,
    rtn_quantize,
)
from .rotations import (
    LayerRecord,
    ObjectiveSpec,
    RotationSet,
    TrainConfig,
    cayley_sgd_step,
    identity_rotation_set,
    initial_rotation_set,
    learn_rotations,
    load_rotations,
    objective_gradient,
    objective_value,
    rotated_weight,
    save_rotations,
    select_top_k,
)
