"""Confidential ML-as-a-service over simulated attested enclaves.

A data holder's training data and a provider's model configuration meet only
inside an attested enclave; each party verifies the enclave's measurement
before sending anything, and an egress monitor keeps secret-labelled bytes
from leaving.
"""

from .enclave import Measurement, Platform, measure
from .runtime import RUNTIME_VERSION, runtime_image
from .sandbox import ModelConfig, encode_config, validate_config
from .taint import Label, TaintedBytes

__version__ = "0.1.0"

__all__ = [
    "Label",
    "Measurement",
    "ModelConfig",
    "Platform",
    "RUNTIME_VERSION",
    "TaintedBytes",
    "encode_config",
    "measure",
    "runtime_image",
    "validate_config",
]
