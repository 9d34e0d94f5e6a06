"""White-box neural network testing toolkit.

Identifies excitable neurons via Shapley attribution of loss changes under
input perturbation, generates error-revealing test examples with particle
swarm search, plants defects for evaluation, and measures robustness.
"""

__version__ = "0.1.0"

from .engine import (  # noqa: E402
    EngineError,
    LayerSpec,
    NetworkModel,
    NeuronId,
    forward,
    forward_batch,
    gradients,
    init_weights,
    loss,
    neuron_count,
    neuron_ids,
    predict_batch,
    sgd_step,
)
from .store import (  # noqa: E402
    Dataset,
    DefectSpec,
    StoreError,
    digits_dataset,
    load_dataset,
    load_model,
    mlp_arch,
    convnet_arch,
    overfit_regime,
    pollute_dataset,
    save_model,
    synthetic_blobs,
    train_model,
    underfit_regime,
    well_trained_regime,
)
from .attribution import (  # noqa: E402
    AttributionError,
    ExcitableSet,
    ShapleyReport,
    UtilityContext,
    marginal_contribution,
    select_excitable,
    shapley_exact,
    shapley_sampled,
    utility,
)
from .fuzzer import (  # noqa: E402
    FuzzConfig,
    FuzzError,
    SuiteResult,
    TestCase,
    fitness_coverage,
    fitness_excitable,
    generate,
    generate_suite,
    pso_step,
    random_baseline_suite,
)
from .metrics import (  # noqa: E402
    CleverEstimate,
    CoverageProfile,
    MetricsError,
    SuiteReport,
    accuracy,
    asr,
    attack_fgsm,
    attack_pgd,
    clever_l2,
    coverage_profile,
    suite_report,
)

__all__ = [
    "__version__",
    "EngineError",
    "LayerSpec",
    "NetworkModel",
    "NeuronId",
    "forward",
    "forward_batch",
    "gradients",
    "init_weights",
    "loss",
    "neuron_count",
    "neuron_ids",
    "predict_batch",
    "sgd_step",
    "Dataset",
    "DefectSpec",
    "StoreError",
    "digits_dataset",
    "load_dataset",
    "load_model",
    "mlp_arch",
    "convnet_arch",
    "overfit_regime",
    "pollute_dataset",
    "save_model",
    "synthetic_blobs",
    "train_model",
    "underfit_regime",
    "well_trained_regime",
    "AttributionError",
    "ExcitableSet",
    "ShapleyReport",
    "UtilityContext",
    "marginal_contribution",
    "select_excitable",
    "shapley_exact",
    "shapley_sampled",
    "utility",
    "FuzzConfig",
    "FuzzError",
    "SuiteResult",
    "TestCase",
    "fitness_coverage",
    "fitness_excitable",
    "generate",
    "generate_suite",
    "pso_step",
    "random_baseline_suite",
    "CleverEstimate",
    "CoverageProfile",
    "MetricsError",
    "SuiteReport",
    "accuracy",
    "asr",
    "attack_fgsm",
    "attack_pgd",
    "clever_l2",
    "coverage_profile",
    "suite_report",
]
