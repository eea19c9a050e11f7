"""Seeded desk-scale quantized CNNs used by tests, the CLI and ``models/``."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .model import ModelSpec, build_model, save_model

# typical spread of a zero-point adjusted uint8 operand drawn uniformly
_OPERAND_STD = 74.0


class _Builder:
    def __init__(self, name, input_shape, seed, in_scale=0.02, in_zp=128):
        self.rng = np.random.default_rng(seed)
        self.d = {"format": "gemmsim-model/1", "name": name,
                  "input": {"name": "input", "shape": list(input_shape),
                            "scale": in_scale, "zero_point": in_zp},
                  "weights": [], "layers": []}
        self.blobs = []
        self.shapes = {"input": tuple(input_shape)}
        self.quant = {"input": (in_scale, in_zp)}

    def _weight(self, name, arr, scale=None, zp=None):
        entry = {"name": name, "dtype": "uint8" if arr.dtype == np.uint8 else "int32",
                 "shape": list(arr.shape)}
        if scale is not None:
            entry.update(scale=scale, zero_point=zp)
        self.d["weights"].append(entry)
        self.blobs.append(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        return name

    def _gemm_layer(self, name, kind, src, filt_shape, depth, extra, activation):
        rng = self.rng
        s_in, _ = self.quant[src]
        w_scale = 0.01
        w_zp = int(rng.integers(118, 138))
        filt = rng.integers(0, 256, size=filt_shape, dtype=np.uint8)
        n_out = filt_shape[0] if kind != "depthwise_conv2d" else filt_shape[3]
        bias = rng.integers(-2000, 2000, size=n_out).astype(np.int32)
        # aim accumulators at roughly +-40 output steps
        s_out = s_in * w_scale * math.sqrt(depth) * _OPERAND_STD ** 2 / 40.0
        zp_out = 0 if activation in ("relu", "relu6") else 128
        layer = {"name": name, "kind": kind, "inputs": [src],
                 "filter": self._weight(f"{name}.filter", filt, w_scale, w_zp),
                 "bias": self._weight(f"{name}.bias", bias),
                 "activation": activation,
                 "output": {"scale": s_out, "zero_point": zp_out}}
        layer.update(extra)
        self.d["layers"].append(layer)
        self.quant[name] = (s_out, zp_out)
        return name

    def conv(self, name, src, cout, k=3, stride=1, padding="same", activation="relu"):
        cin = self.shapes[src][3]
        self._gemm_layer(name, "conv2d", src, (cout, k, k, cin), k * k * cin,
                         {"stride": stride, "padding": padding}, activation)
        return self._track(name)

    def depthwise(self, name, src, k=3, stride=1, padding="same", activation="relu6"):
        c = self.shapes[src][3]
        self._gemm_layer(name, "depthwise_conv2d", src, (1, k, k, c), k * k,
                         {"stride": stride, "padding": padding}, activation)
        return self._track(name)

    def fc(self, name, src, n_out, activation="none"):
        feat = int(np.prod(self.shapes[src][1:]))
        self._gemm_layer(name, "fully_connected", src, (n_out, feat), feat, {}, activation)
        return self._track(name)

    def pool(self, name, src, kind, size=2):
        self.d["layers"].append({"name": name, "kind": kind, "inputs": [src],
                                 "pool": size, "stride": size})
        self.quant[name] = self.quant[src]
        return self._track(name)

    def add(self, name, a, b, activation="none"):
        s = 2 * max(self.quant[a][0], self.quant[b][0])
        self.d["layers"].append({"name": name, "kind": "add", "inputs": [a, b],
                                 "activation": activation,
                                 "output": {"scale": s, "zero_point": 128}})
        self.quant[name] = (s, 128)
        return self._track(name)

    def clamp(self, name, src, lo, hi):
        self.d["layers"].append({"name": name, "kind": "clamp", "inputs": [src],
                                 "min": lo, "max": hi})
        self.quant[name] = self.quant[src]
        return self._track(name)

    def _track(self, name):
        # shapes come from the validator, so a partial build doubles as a check
        model = self.build()
        self.shapes[name] = model.layers[-1].output.shape
        return name

    def build(self) -> ModelSpec:
        return build_model(self.d, b"".join(self.blobs))


def toy_cnn(seed: int = 0) -> ModelSpec:
    """Six layers: conv, depthwise, residual add, strided conv, avg pool, fc."""
    b = _Builder("toy_cnn", (1, 12, 12, 3), seed)
    b.conv("conv1", "input", 8)
    b.depthwise("dw", "conv1")
    b.add("add", "conv1", "dw")
    b.conv("conv2", "add", 16, stride=2)
    b.pool("pool", "conv2", "avg_pool")
    b.fc("fc", "pool", 10)
    return b.build()


def small_cnn(seed: int = 1) -> ModelSpec:
    """Four layers: conv, max pool, conv, fc."""
    b = _Builder("small_cnn", (1, 12, 12, 3), seed)
    b.conv("conv1", "input", 8, padding="valid")
    b.pool("pool", "conv1", "max_pool")
    b.conv("conv2", "pool", 16, padding="valid")
    b.fc("fc", "conv2", 10)
    return b.build()


def single_conv(seed: int = 2, shape=(1, 8, 8, 4), cout=8, k=3, stride=1,
                padding="same", activation="none") -> ModelSpec:
    b = _Builder("single_conv", shape, seed)
    b.conv("conv", "input", cout, k, stride, padding, activation)
    return b.build()


def single_clamp(shape=(1, 6, 6, 2), lo=40, hi=200) -> ModelSpec:
    b = _Builder("single_clamp", shape, 0)
    b.clamp("clamp", "input", lo, hi)
    return b.build()


def large_k_gemm_model(seed: int = 3, rows: int = 64, depth: int = 256, cols: int = 64) -> ModelSpec:
    """A single 1x1 convolution that lowers to a rows x depth x cols GEMM."""
    side = int(math.isqrt(rows))
    if side * side != rows:
        raise ValueError("rows must be a perfect square")
    b = _Builder("large_k_gemm", (1, side, side, depth), seed)
    b.conv("conv", "input", cols, k=1, padding="valid", activation="none")
    return b.build()


FIXTURES = {"toy_cnn": toy_cnn, "small_cnn": small_cnn, "single_conv": single_conv,
            "single_clamp": single_clamp, "large_k_gemm": large_k_gemm_model}


def write_fixtures(directory) -> list:
    """Write every fixture as <name>.json + <name>.bin; returns the paths written."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, make in FIXTURES.items():
        spec, weights = out / f"{name}.json", out / f"{name}.bin"
        save_model(make(), spec, weights)
        written += [spec, weights]
    return written


if __name__ == "__main__":
    import sys

    for p in write_fixtures(sys.argv[1] if len(sys.argv) > 1 else "models"):
        print(p)
