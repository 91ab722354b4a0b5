"""Audio-visual source separation with dynamic gating fusion.

Core library (autodiff engine, DSP, synthetic data, model, metrics,
training harness) plus a FastAPI job service and a thin-client CLI.
"""

__version__ = "0.1.0"

from dgfnet.errors import ContractError, NumericError, CheckpointFormatError

__all__ = ["ContractError", "NumericError", "CheckpointFormatError", "__version__"]
