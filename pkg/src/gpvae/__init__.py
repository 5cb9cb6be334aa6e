"""Variational autoencoders whose encoder weights carry a Gaussian-process-style posterior."""
from .errors import CheckpointError, ConfigError, ContractError, DomainError, FormatError, NumericError
from .prob import DiagGaussian, RngStream

__all__ = ["CheckpointError", "ConfigError", "ContractError", "DiagGaussian", "DomainError", "FormatError",
           "NumericError", "RngStream"]
__version__ = "0.1.0"
