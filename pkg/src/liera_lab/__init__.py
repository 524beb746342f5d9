"""Low-rank adaptation with additive, Lie-exact and Lie-Taylor weight lifting."""
from . import autograd, data, liegroup, nn, optim, peft, tensor, verify
from .peft import AdapterConfig, LiftMode

__all__ = ["autograd", "data", "liegroup", "nn", "optim", "peft", "tensor", "verify", "AdapterConfig", "LiftMode"]
__version__ = "0.1.0"
