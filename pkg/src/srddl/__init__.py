"""Deep sparse-regularized dynamic dictionary learning for connectomes.

Dynamic functional correlation matrices are factored onto a shared basis of
subnetworks with time-varying nonnegative loadings, weighted by each
subject's structural graph, while an attention LSTM maps the loadings to
clinical scores. The two parts are optimized jointly.
"""
__version__ = "0.1.0"

from .connectome import RawSubject, Subject, WindowSpec, correlation_sequence
from .dictionary import HyperParams
from .estimator import BetweennessFeatures, DeepSRDDL, SlidingWindowCorrelation
from .evaluation import MetricReport, mae, nmi, run_cv
from .exceptions import ContractViolation, DataWarning, NumericalFailure
from .io import load_checkpoint, load_manifest, save_checkpoint
from .optimizer import TrainState, fit, fit_variant, infer_new
from .synthetic import SynthConfig, generate, similarity

__all__ = [
    "__version__", "Subject", "RawSubject", "WindowSpec", "correlation_sequence", "HyperParams",
    "DeepSRDDL", "SlidingWindowCorrelation", "BetweennessFeatures", "MetricReport", "mae", "nmi",
    "run_cv", "ContractViolation", "DataWarning", "NumericalFailure", "load_checkpoint",
    "load_manifest", "save_checkpoint", "TrainState", "fit", "fit_variant", "infer_new",
    "SynthConfig", "generate", "similarity",
]
