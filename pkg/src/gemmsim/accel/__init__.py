from .base import (Accelerator, AccelError, BufferOverflow, MalformedBuffer,
                   OutputCrossbar, crossbar_collect, ppu_process, stripe_banks)
from .sa import SystolicArray, SystolicArrayAccelerator, run_tile, tile_latency
from .vm import VectorMacAccelerator, gemm_unit_compute


def make_accelerator(config):
    """Accelerator instance for config.kind."""
    if config.kind == "vm":
        return VectorMacAccelerator(config)
    return SystolicArrayAccelerator(config)


__all__ = [
    "Accelerator", "AccelError", "BufferOverflow", "MalformedBuffer", "OutputCrossbar",
    "SystolicArray", "SystolicArrayAccelerator", "VectorMacAccelerator",
    "crossbar_collect", "gemm_unit_compute", "make_accelerator", "ppu_process",
    "run_tile", "stripe_banks", "tile_latency",
]
