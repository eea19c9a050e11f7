"""Transaction-level simulation of int8 GEMM accelerators and their host driver."""
from .config import AccelConfig, HostConfig, SaConfig, VmConfig
from .quant import QuantTensor, RequantParams, reference_gemm, requantize, requantize_matrix
from .sim import BusModel, CycleCounters, Engine

__version__ = "0.1.0"
