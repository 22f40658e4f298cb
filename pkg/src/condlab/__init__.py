"""Layer-wise conditioning analysis of MLP training dynamics."""
from .conditioning import FimConfig, GradMode, LabelMode, LayerConditioning, kappa_p, kfac_spectrum, layer_conditioning
from .diagnostics import detect_weight_domination, neuron_activity, verify_theorem1, verify_theorem2
from .errors import CondlabError, ConfigError
from .linalg import Spectrum, kron, spectral_norm, sym_eig
from .nn import Init, Loss, Network, build_network, mlp_specs, residual_mlp_specs
from .runner import ExperimentConfig, ProbeRecord, emit_report, load_config, run_experiment

__version__ = "0.1.0"

__all__ = [
    "CondlabError", "ConfigError", "ExperimentConfig", "FimConfig", "GradMode", "Init", "LabelMode",
    "LayerConditioning", "Loss", "Network", "ProbeRecord", "Spectrum", "build_network",
    "detect_weight_domination", "emit_report", "kappa_p", "kfac_spectrum", "kron", "layer_conditioning",
    "load_config", "mlp_specs", "neuron_activity", "residual_mlp_specs", "run_experiment",
    "spectral_norm", "sym_eig", "verify_theorem1", "verify_theorem2",
]
