import numpy as np
import pytest

from gemmsim.driver import GemmTask
from gemmsim.quant import QuantTensor, RequantParams, reference_gemm, requantize_matrix


def random_task(rng, M, N, K, clamp=True) -> GemmTask:
    """GemmTask with random operands, zero points, bias and output scale."""
    lhs = QuantTensor(rng.integers(0, 256, (M, K), dtype=np.uint8), 0.02,
                      int(rng.integers(0, 256)))
    rhs = QuantTensor(rng.integers(0, 256, (K, N), dtype=np.uint8), 0.01,
                      int(rng.integers(0, 256)))
    zp = int(rng.integers(0, 256))
    lo, hi = (int(rng.integers(0, zp + 1)), int(rng.integers(zp, 256))) if clamp else (0, 255)
    real = float(rng.uniform(1e-5, 0.02))
    bias = rng.integers(-50_000, 50_000, N)
    return GemmTask(lhs, rhs, RequantParams.from_scale(real, bias, zp, lo, hi))


def oracle(task: GemmTask) -> np.ndarray:
    return requantize_matrix(reference_gemm(task.lhs, task.rhs), task.requant).data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
