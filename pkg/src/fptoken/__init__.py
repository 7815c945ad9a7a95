"""Hardware-fingerprint token authentication for simulated MCU fleets."""

from .mapping import (
    Feature,
    MappingVariant,
    TaskSpec,
    HardwareTask,
    Request,
    MappingConfig,
    EmptyPayloads,
    ap_hash,
    divide_arguments,
    map_message,
    task_space_size,
)
from .hwsim import (
    Model,
    Analog,
    Bits32,
    FingerprintValue,
    TrainingPair,
    DeviceProfile,
    spawn_fleet,
    execute_task,
    expected_response,
    collect_pairs,
    default_task_specs,
    evaluation_task_specs,
    ideal_dac_adc,
    save_fleet,
    load_fleet,
)
from .client import (
    AuthConfig,
    Token,
    TokenEntry,
    TokenClient,
    NonceRegression,
    MalformedToken,
    poison_value,
    encode_token,
    decode_token,
)
from .backend import (
    BackendConfig,
    BackendState,
    PredictorKind,
    VerifierKind,
    Decision,
    AuthResult,
    new_backend,
    enroll_device,
    authenticate,
    verify_one,
    fit_linear_least_squares,
    save_backend,
    load_backend,
)
from .attacks import (
    AttackStrategy,
    ALL_STRATEGIES,
    closed_form_tamper_prob,
    run_tamper_attack,
    run_replay_attack,
    run_hw_mimic,
    eavesdrop_traffic,
    train_sw_mimic,
    run_sw_mimic,
    identify_poison,
)
from .service import (
    Kind,
    ErrorCode,
    encode_frame,
    decode_frame,
    BackendService,
    BackendServer,
    BackendClient,
)
from .experiments import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    compute_tpr_fpr,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "Feature",
    "MappingVariant",
    "TaskSpec",
    "HardwareTask",
    "Request",
    "MappingConfig",
    "EmptyPayloads",
    "ap_hash",
    "divide_arguments",
    "map_message",
    "task_space_size",
    "Model",
    "Analog",
    "Bits32",
    "FingerprintValue",
    "TrainingPair",
    "DeviceProfile",
    "spawn_fleet",
    "execute_task",
    "expected_response",
    "collect_pairs",
    "default_task_specs",
    "evaluation_task_specs",
    "ideal_dac_adc",
    "save_fleet",
    "load_fleet",
    "AuthConfig",
    "Token",
    "TokenEntry",
    "TokenClient",
    "NonceRegression",
    "MalformedToken",
    "poison_value",
    "encode_token",
    "decode_token",
    "BackendConfig",
    "BackendState",
    "PredictorKind",
    "VerifierKind",
    "Decision",
    "AuthResult",
    "new_backend",
    "enroll_device",
    "authenticate",
    "verify_one",
    "fit_linear_least_squares",
    "save_backend",
    "load_backend",
    "AttackStrategy",
    "ALL_STRATEGIES",
    "closed_form_tamper_prob",
    "run_tamper_attack",
    "run_replay_attack",
    "run_hw_mimic",
    "eavesdrop_traffic",
    "train_sw_mimic",
    "run_sw_mimic",
    "identify_poison",
    "Kind",
    "ErrorCode",
    "encode_frame",
    "decode_frame",
    "BackendService",
    "BackendServer",
    "BackendClient",
    "EXPERIMENT_NAMES",
    "ExperimentSpec",
    "compute_tpr_fpr",
    "run_experiment",
]
