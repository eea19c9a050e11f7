"""8-bit affine quantized tensors, reference GEMM and fixed-point requantization.

All integer arithmetic here is exact. The requantization pipeline is the one the
accelerators' post-processing units implement, so every backend agrees
bit-for-bit with these functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


class QuantError(ValueError):
    """Invalid quantized operand or parameter."""


@dataclass(frozen=True)
class QuantTensor:
    """uint8 tensor with a per-tensor scale and zero point.

    Shapes are NHWC for activations and (rows, cols) for GEMM operands.
    """

    data: np.ndarray
    scale: float = 1.0
    zero_point: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise QuantError("tensor values outside uint8 range")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", data)
        if not self.scale > 0:
            raise QuantError(f"scale must be positive, got {self.scale}")
        if not 0 <= int(self.zero_point) <= 255:
            raise QuantError(f"zero_point {self.zero_point} outside [0, 255]")
        object.__setattr__(self, "zero_point", int(self.zero_point))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def adjusted(self) -> np.ndarray:
        """Values minus the zero point, as int32."""
        return self.data.astype(np.int32) - self.zero_point

    def dequantize(self) -> np.ndarray:
        return self.scale * self.adjusted().astype(np.float64)


@dataclass(frozen=True)
class RequantParams:
    """Post-processing parameters: per-channel bias, shared fixed-point scale, clamp."""

    bias: np.ndarray
    multiplier: int
    right_shift: int
    output_zero_point: int = 0
    clamp_min: int = 0
    clamp_max: int = 255
    # kept for bookkeeping only; the datapath uses multiplier/right_shift
    output_scale: float = field(default=1.0, compare=False)

    def __post_init__(self):
        bias = np.asarray(self.bias, dtype=np.int64).reshape(-1)
        if bias.size and (bias.min() < INT32_MIN or bias.max() > INT32_MAX):
            raise QuantError("bias values must fit in int32")
        object.__setattr__(self, "bias", bias.astype(np.int32))
        m = int(self.multiplier)
        if m != 0 and not (1 << 30) <= m < (1 << 31):
            raise QuantError(f"multiplier {m} outside [2^30, 2^31)")
        if int(self.right_shift) < 0:
            raise QuantError("right_shift must be non-negative")
        if not 0 <= self.clamp_min <= self.output_zero_point <= self.clamp_max <= 255:
            raise QuantError(
                "need 0 <= clamp_min <= output_zero_point <= clamp_max <= 255, got "
                f"{self.clamp_min}, {self.output_zero_point}, {self.clamp_max}"
            )
        object.__setattr__(self, "multiplier", m)
        object.__setattr__(self, "right_shift", int(self.right_shift))

    @property
    def real_scale(self) -> float:
        return self.multiplier * 2.0 ** (-31 - self.right_shift)

    @classmethod
    def from_scale(cls, real_scale, bias, output_zero_point=0, clamp_min=0,
                   clamp_max=255, output_scale=1.0):
        m, s = quantize_multiplier(real_scale)
        return cls(bias, m, s, output_zero_point, clamp_min, clamp_max, output_scale)

    def with_bias(self, bias) -> "RequantParams":
        return RequantParams(bias, self.multiplier, self.right_shift,
                             self.output_zero_point, self.clamp_min, self.clamp_max,
                             self.output_scale)


def saturating_doubling_high_mul(a: int, b: int) -> int:
    """High 32 bits of 2*a*b for int32 a, b; saturates the single overflow case."""
    if a == INT32_MIN and b == INT32_MIN:
        return INT32_MAX
    return (2 * a * b) >> 32


def rounding_right_shift(x: int, shift: int) -> int:
    """Arithmetic right shift rounding half away from zero."""
    if shift == 0:
        return x
    half = 1 << (shift - 1)
    if x >= 0:
        return (x + half) >> shift
    return -((-x + half) >> shift)


def _saturate32(x):
    return max(INT32_MIN, min(INT32_MAX, x))


def quantize_multiplier(real_scale: float) -> tuple[int, int]:
    """Encode a real scale in (0, 1) as (Q0.31 multiplier, right shift)."""
    if not 0.0 < real_scale < 1.0:
        raise QuantError(f"real_scale must lie in (0, 1), got {real_scale}")
    q, exp = math.frexp(real_scale)
    m = round(q * (1 << 31))
    if m == 1 << 31:
        m //= 2
        exp += 1
    if exp > 0:
        # real_scale within 2^-32 of 1
        m, exp = INT32_MAX, 0
    return m, -exp


def requantize(acc: int, channel: int, p: RequantParams) -> int:
    """Map one int32 accumulator of output channel `channel` to uint8."""
    x = _saturate32(int(acc) + int(p.bias[channel]))
    x = saturating_doubling_high_mul(x, p.multiplier)
    x = rounding_right_shift(x, p.right_shift) + p.output_zero_point
    return min(p.clamp_max, max(p.clamp_min, x))


def requantize_array(acc: np.ndarray, bias: np.ndarray, p: RequantParams) -> np.ndarray:
    """Vectorized requantize; `bias` broadcasts against `acc`."""
    x = acc.astype(np.int64) + bias.astype(np.int64)
    np.clip(x, INT32_MIN, INT32_MAX, out=x)
    # 2*x*m fits in int64 for |x| <= 2^31, m < 2^31; floor shift == high word
    x = (x * (2 * p.multiplier)) >> 32
    s = p.right_shift
    if s:
        half = 1 << (s - 1)
        x = np.where(x >= 0, (x + half) >> s, -((-x + half) >> s))
    x = x + p.output_zero_point
    return np.clip(x, p.clamp_min, p.clamp_max).astype(np.uint8)


def reference_gemm(lhs: QuantTensor, rhs: QuantTensor) -> np.ndarray:
    """Exact zero-point-adjusted product of an (M, K) and a (K, N) operand, int32."""
    if lhs.data.ndim != 2 or rhs.data.ndim != 2:
        raise QuantError("reference_gemm expects 2-D operands")
    if lhs.shape[1] != rhs.shape[0]:
        raise QuantError(f"inner dimensions differ: {lhs.shape} x {rhs.shape}")
    a = lhs.adjusted().astype(np.int64)
    b = rhs.adjusted().astype(np.int64)
    acc = a @ b
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise QuantError("accumulator overflows int32; K is too large for 8-bit operands")
    return acc.astype(np.int32)


def requantize_matrix(acc: np.ndarray, p: RequantParams, scale: float | None = None) -> QuantTensor:
    """Requantize an (M, N) accumulator matrix; bias is indexed by column."""
    acc = np.asarray(acc)
    if acc.ndim != 2:
        raise QuantError("accumulator matrix must be 2-D")
    if p.bias.shape[0] != acc.shape[1]:
        raise QuantError(f"bias length {p.bias.shape[0]} != N={acc.shape[1]}")
    out = requantize_array(acc, p.bias[None, :], p)
    return QuantTensor(out, scale if scale is not None else p.output_scale,
                       p.output_zero_point)


def activation_clamp(activation: str, output_scale: float, output_zero_point: int) -> tuple[int, int]:
    """Quantized clamp bounds for none / relu / relu6."""
    if activation in (None, "none"):
        return 0, 255
    if activation == "relu":
        return output_zero_point, 255
    if activation == "relu6":
        top = output_zero_point + int(round(6.0 / output_scale))
        return output_zero_point, min(255, top)
    raise QuantError(f"unsupported activation {activation!r}")
