"""Small quantized CNN descriptions and end-to-end inference on cpu / vm / sa.

Model files are JSON (see ``schemas/model.schema.json``); weights are a raw
little-endian byte file holding the entries of the ``weights`` list back to
back, in declared order. Activations are NHWC uint8.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accel import make_accelerator
from .config import AccelConfig
from .driver import (GemmTask, conv_output_hw, dispatch_pipelined, im2col,
                     max_rows_per_task, normalize_padding, split_rows)
from .quant import (QuantError, QuantTensor, RequantParams, activation_clamp,
                    quantize_multiplier, requantize_array, rounding_right_shift,
                    saturating_doubling_high_mul)
from .sim import CycleCounters, Engine

MODEL_FORMAT = "gemmsim-model/1"
LAYER_KINDS = ("conv2d", "depthwise_conv2d", "fully_connected", "max_pool",
               "avg_pool", "add", "clamp")
CONV_KINDS = ("conv2d", "fully_connected")
DTYPES = {"uint8": np.dtype("u1"), "int32": np.dtype("<i4")}
WEIGHT_ROLES = {"conv2d": ("filter", "bias"), "depthwise_conv2d": ("filter", "bias"),
                "fully_connected": ("filter", "bias")}
ADD_LEFT_SHIFT = 20


class ModelError(ValueError):
    pass


@dataclass
class TensorSpec:
    name: str
    shape: tuple
    scale: float
    zero_point: int

    def to_dict(self):
        return {"name": self.name, "shape": list(self.shape), "scale": self.scale,
                "zero_point": self.zero_point}


@dataclass
class WeightSpec:
    name: str
    dtype: str
    shape: tuple
    scale: float = 1.0
    zero_point: int = 0

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * DTYPES[self.dtype].itemsize

    def to_dict(self):
        d = {"name": self.name, "dtype": self.dtype, "shape": list(self.shape)}
        if self.dtype == "uint8":
            d.update(scale=self.scale, zero_point=self.zero_point)
        return d


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list
    params: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)   # role -> weight name
    output: TensorSpec | None = None
    tensors: dict = field(default_factory=dict, repr=False)  # role -> QuantTensor/array

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "inputs": list(self.inputs)}
        d.update(self.weights)
        d.update(self.params)
        d["output"] = {"shape": list(self.output.shape), "scale": self.output.scale,
                       "zero_point": self.output.zero_point}
        return d


@dataclass
class ModelSpec:
    name: str
    input: TensorSpec
    layers: list
    weight_specs: list
    weights: dict
    output: str

    def to_dict(self) -> dict:
        return {"format": MODEL_FORMAT, "name": self.name, "input": self.input.to_dict(),
                "output": self.output, "weights": [w.to_dict() for w in self.weight_specs],
                "layers": [layer.to_dict() for layer in self.layers]}

    def weight_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.weights[w.name], dtype=DTYPES[w.dtype]).tobytes()
                        for w in self.weight_specs)


# -- loading / validation ------------------------------------------------------

_LAYER_KEYS = {"name", "kind", "inputs", "output", "filter", "bias", "stride", "padding",
               "activation", "pool", "min", "max"}


def _need(d, key, where):
    if key not in d:
        raise ModelError(f"{where}: missing field {key!r}")
    return d[key]


def _pair(v):
    return (int(v), int(v)) if isinstance(v, (int, float)) else tuple(int(x) for x in v)


def build_model(d: dict, weight_data: bytes) -> ModelSpec:
    """Validate a parsed model description against its weight bytes."""
    if not isinstance(d, dict):
        raise ModelError("model description must be a JSON object")
    if d.get("format", MODEL_FORMAT) != MODEL_FORMAT:
        raise ModelError(f"unsupported model format {d.get('format')!r}")
    inp = _need(d, "input", "model")
    input_spec = TensorSpec(_need(inp, "name", "input"), tuple(_need(inp, "shape", "input")),
                            float(_need(inp, "scale", "input")),
                            int(_need(inp, "zero_point", "input")))
    if len(input_spec.shape) != 4:
        raise ModelError("model input must be NHWC")

    wspecs = []
    for i, w in enumerate(d.get("weights", [])):
        where = f"weights[{i}]"
        dtype = _need(w, "dtype", where)
        if dtype not in DTYPES:
            raise ModelError(f"{where}: unknown dtype {dtype!r}")
        wspecs.append(WeightSpec(_need(w, "name", where), dtype, tuple(_need(w, "shape", where)),
                                 float(w.get("scale", 1.0)), int(w.get("zero_point", 0))))
    names = [w.name for w in wspecs]
    if len(set(names)) != len(names):
        raise ModelError("duplicate weight names")

    raw_layers = _need(d, "layers", "model")
    if not raw_layers:
        raise ModelError("model has no layers")
    owner = {}
    for layer in raw_layers:
        for role in ("filter", "bias"):
            if role in layer:
                owner.setdefault(layer[role], layer.get("name", "?"))

    weights = {}
    offset = 0
    for w in wspecs:
        end = offset + w.nbytes
        if end > len(weight_data):
            who = owner.get(w.name, "unreferenced")
            raise ModelError(
                f"layer {who!r}: weight {w.name!r} needs bytes [{offset}, {end}) but the "
                f"weights file holds {len(weight_data)} bytes")
        weights[w.name] = np.frombuffer(weight_data, DTYPES[w.dtype], int(np.prod(w.shape)),
                                        offset).reshape(w.shape).copy()
        offset = end
    if offset != len(weight_data):
        raise ModelError(f"weights file has {len(weight_data) - offset} trailing bytes")
    wmap = {w.name: w for w in wspecs}

    tensors = {input_spec.name: input_spec}
    layers = []
    for i, ld in enumerate(raw_layers):
        where = f"layers[{i}]"
        name = _need(ld, "name", where)
        kind = _need(ld, "kind", where)
        if kind not in LAYER_KINDS:
            raise ModelError(f"layer {name!r}: unsupported kind {kind!r}")
        if name in tensors:
            raise ModelError(f"layer {name!r}: name already used")
        bad = set(ld) - _LAYER_KEYS
        if bad:
            raise ModelError(f"layer {name!r}: unknown fields {sorted(bad)}")
        inputs = list(_need(ld, "inputs", name))
        for t in inputs:
            if t not in tensors:
                raise ModelError(f"layer {name!r}: unknown input tensor {t!r}")
        layer = LayerSpec(name, kind, inputs)
        for role in WEIGHT_ROLES.get(kind, ()):
            ref = _need(ld, role, f"layer {name!r}")
            if ref not in wmap:
                raise ModelError(f"layer {name!r}: dangling weight reference {ref!r}")
            layer.weights[role] = ref
            ws = wmap[ref]
            if role == "filter":
                if ws.dtype != "uint8":
                    raise ModelError(f"layer {name!r}: filter must be uint8")
                layer.tensors[role] = QuantTensor(weights[ref], ws.scale, ws.zero_point)
            else:
                if ws.dtype != "int32":
                    raise ModelError(f"layer {name!r}: bias must be int32")
                layer.tensors[role] = weights[ref]
        for key in ("stride", "padding", "activation", "pool", "min", "max"):
            if key in ld:
                layer.params[key] = ld[key]
        in_specs = [tensors[t] for t in inputs]
        out = ld.get("output", {})
        shape = _infer_shape(layer, in_specs)
        declared = out.get("shape")
        if declared is not None and tuple(declared) != shape:
            raise ModelError(f"layer {name!r}: declared output shape {tuple(declared)} != {shape}")
        if kind in ("max_pool", "avg_pool", "clamp"):
            scale, zp = in_specs[0].scale, in_specs[0].zero_point
            if ("scale" in out and float(out["scale"]) != scale) or \
                    ("zero_point" in out and int(out["zero_point"]) != zp):
                raise ModelError(f"layer {name!r}: {kind} must keep its input quantization")
        else:
            scale = float(_need(out, "scale", f"layer {name!r} output"))
            zp = int(_need(out, "zero_point", f"layer {name!r} output"))
        layer.output = TensorSpec(name, shape, scale, zp)
        _check_layer_quant(layer, in_specs)
        tensors[name] = layer.output
        layers.append(layer)

    output = d.get("output", layers[-1].name)
    if output not in tensors:
        raise ModelError(f"model output {output!r} is not a tensor")
    return ModelSpec(d.get("name", "model"), input_spec, layers, wspecs, weights, output)


def _infer_shape(layer: LayerSpec, ins: list) -> tuple:
    kind, p, name = layer.kind, layer.params, layer.name
    need = 2 if kind == "add" else 1
    if len(ins) != need:
        raise ModelError(f"layer {name!r}: {kind} takes {need} input(s), got {len(ins)}")
    x = ins[0].shape
    if kind in ("conv2d", "depthwise_conv2d"):
        if len(x) != 4:
            raise ModelError(f"layer {name!r}: expects NHWC input")
        f = layer.tensors["filter"].shape
        if len(f) != 4:
            raise ModelError(f"layer {name!r}: filter must be 4-D")
        stride = _pair(p.get("stride", 1))
        kernel = f[1:3]
        if kind == "conv2d":
            cout, cin = f[0], f[3]
        else:
            if f[0] != 1:
                raise ModelError(f"layer {name!r}: depthwise filter must be (1, kh, kw, C)")
            cout = cin = f[3]
        if cin != x[3]:
            raise ModelError(f"layer {name!r}: filter expects {cin} channels, input has {x[3]}")
        pads = normalize_padding(p.get("padding", "valid"), x[1:3], kernel, stride)
        try:
            ho, wo = conv_output_hw(x[1:3], kernel, stride, pads)
        except ValueError as e:
            raise ModelError(f"layer {name!r}: {e}") from e
        _check_bias(layer, cout)
        return (x[0], ho, wo, cout)
    if kind == "fully_connected":
        f = layer.tensors["filter"].shape
        feat = int(np.prod(x[1:]))
        if len(f) != 2 or f[1] != feat:
            raise ModelError(f"layer {name!r}: filter {f} does not match {feat} input features")
        _check_bias(layer, f[0])
        return (x[0], f[0])
    if kind in ("max_pool", "avg_pool"):
        pool = _pair(_need(p, "pool", f"layer {name!r}"))
        stride = _pair(p.get("stride", pool))
        if p.get("padding", "valid") != "valid":
            raise ModelError(f"layer {name!r}: pooling supports valid padding only")
        try:
            ho, wo = conv_output_hw(x[1:3], pool, stride, (0, 0, 0, 0))
        except ValueError as e:
            raise ModelError(f"layer {name!r}: {e}") from e
        return (x[0], ho, wo, x[3])
    if kind == "add":
        if ins[0].shape != ins[1].shape:
            raise ModelError(f"layer {name!r}: add operands differ in shape")
        return x
    if kind == "clamp":
        lo, hi = int(p.get("min", 0)), int(p.get("max", 255))
        if not 0 <= lo <= hi <= 255:
            raise ModelError(f"layer {name!r}: clamp bounds must satisfy 0 <= min <= max <= 255")
        return x
    raise ModelError(f"layer {name!r}: unsupported kind {kind!r}")


def _check_bias(layer, n):
    b = layer.tensors["bias"]
    if b.shape != (n,):
        raise ModelError(f"layer {layer.name!r}: bias shape {b.shape} != ({n},)")


def _check_layer_quant(layer: LayerSpec, ins: list):
    try:
        if layer.kind in CONV_KINDS or layer.kind == "depthwise_conv2d":
            layer_requant(layer, ins[0])
        elif layer.kind == "add":
            _add_params(layer, ins[0], ins[1])
    except QuantError as e:
        raise ModelError(f"layer {layer.name!r}: {e}") from e


def load_model(spec_file, weights_file) -> ModelSpec:
    spec_file, weights_file = Path(spec_file), Path(weights_file)
    try:
        d = json.loads(spec_file.read_text())
    except OSError as e:
        raise ModelError(f"cannot read model {spec_file}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ModelError(f"model {spec_file} is not valid JSON: {e}") from e
    try:
        data = weights_file.read_bytes()
    except OSError as e:
        raise ModelError(f"cannot read weights {weights_file}: {e.strerror}") from e
    return build_model(d, data)


def save_model(model: ModelSpec, spec_file, weights_file) -> None:
    Path(spec_file).write_text(json.dumps(model.to_dict(), indent=2) + "\n")
    Path(weights_file).write_bytes(model.weight_bytes())


# -- CPU reference layers ------------------------------------------------------

def layer_requant(layer: LayerSpec, x: TensorSpec | QuantTensor) -> RequantParams:
    f = layer.tensors["filter"]
    out = layer.output
    real = x.scale * f.scale / out.scale
    lo, hi = activation_clamp(layer.params.get("activation", "none"), out.scale, out.zero_point)
    return RequantParams.from_scale(real, layer.tensors["bias"], out.zero_point, lo, hi, out.scale)


def _direct_conv_acc(x: QuantTensor, f: QuantTensor, stride, pads, depthwise=False) -> np.ndarray:
    xa = x.adjusted().astype(np.int64)
    xa = np.pad(xa, ((0, 0), pads[:2], pads[2:], (0, 0)))
    fa = f.adjusted().astype(np.int64)
    kh, kw = f.shape[1:3]
    sh, sw = stride
    n = x.shape[0]
    ho = (xa.shape[1] - kh) // sh + 1
    wo = (xa.shape[2] - kw) // sw + 1
    cout = f.shape[3] if depthwise else f.shape[0]
    acc = np.zeros((n, ho, wo, cout), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            patch = xa[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
            if depthwise:
                acc += patch * fa[0, i, j, :]
            else:
                acc += patch @ fa[:, i, j, :].T
    return acc


def _add_params(layer, a, b):
    out = layer.output
    twice_max = 2 * max(a.scale, b.scale)
    m_a = quantize_multiplier(a.scale / twice_max)
    m_b = quantize_multiplier(b.scale / twice_max)
    m_out = quantize_multiplier(twice_max / ((1 << ADD_LEFT_SHIFT) * out.scale))
    return m_a, m_b, m_out


def _scale_by(x: np.ndarray, mult) -> np.ndarray:
    m, s = mult
    f = np.frompyfunc(lambda v: rounding_right_shift(saturating_doubling_high_mul(int(v), m), s), 1, 1)
    return f(x).astype(np.int64)


def cpu_reference_layer(layer: LayerSpec, inputs: list) -> QuantTensor:
    """Exact integer execution of one layer on the host."""
    kind, p = layer.kind, layer.params
    x = inputs[0]
    out = layer.output
    if kind in ("conv2d", "depthwise_conv2d"):
        f = layer.tensors["filter"]
        stride = _pair(p.get("stride", 1))
        pads = normalize_padding(p.get("padding", "valid"), x.shape[1:3], f.shape[1:3], stride)
        acc = _direct_conv_acc(x, f, stride, pads, depthwise=kind == "depthwise_conv2d")
        rq = layer_requant(layer, x)
        data = requantize_array(acc, rq.bias, rq)
        return QuantTensor(data, out.scale, out.zero_point)
    if kind == "fully_connected":
        f = layer.tensors["filter"]
        flat = x.adjusted().reshape(x.shape[0], -1).astype(np.int64)
        acc = flat @ f.adjusted().astype(np.int64).T
        rq = layer_requant(layer, x)
        return QuantTensor(requantize_array(acc, rq.bias[None, :], rq), out.scale, out.zero_point)
    if kind in ("max_pool", "avg_pool"):
        pool = _pair(p["pool"])
        stride = _pair(p.get("stride", pool))
        win = np.lib.stride_tricks.sliding_window_view(x.data, pool, axis=(1, 2))
        win = win[:, ::stride[0], ::stride[1]][:, :out.shape[1], :out.shape[2]]
        if kind == "max_pool":
            data = win.max(axis=(-2, -1))
        else:
            cnt = pool[0] * pool[1]
            total = win.astype(np.int64).sum(axis=(-2, -1))
            data = (total + cnt // 2) // cnt
        return QuantTensor(data.astype(np.uint8), x.scale, x.zero_point)
    if kind == "add":
        a, b = inputs
        m_a, m_b, m_out = _add_params(layer, a, b)
        sa = _scale_by(a.adjusted().astype(np.int64) << ADD_LEFT_SHIFT, m_a)
        sb = _scale_by(b.adjusted().astype(np.int64) << ADD_LEFT_SHIFT, m_b)
        res = _scale_by(sa + sb, m_out) + out.zero_point
        lo, hi = activation_clamp(p.get("activation", "none"), out.scale, out.zero_point)
        return QuantTensor(np.clip(res, lo, hi).astype(np.uint8), out.scale, out.zero_point)
    if kind == "clamp":
        lo, hi = int(p.get("min", 0)), int(p.get("max", 255))
        return QuantTensor(np.clip(x.data, lo, hi).astype(np.uint8), x.scale, x.zero_point)
    raise ModelError(f"unsupported layer kind {kind!r}")


# -- accelerated GEMM path -----------------------------------------------------

def layer_gemm_operands(layer: LayerSpec, x: QuantTensor):
    """Lower a conv2d / fully_connected layer to (lhs, rhs, requant, output shape)."""
    f = layer.tensors["filter"]
    rq = layer_requant(layer, x)
    if layer.kind == "conv2d":
        stride = _pair(layer.params.get("stride", 1))
        lhs = im2col(x, f.shape[1:3], stride, layer.params.get("padding", "valid"))
        rhs_data = f.data.reshape(f.shape[0], -1).T
    else:
        lhs = QuantTensor(x.data.reshape(x.shape[0], -1), x.scale, x.zero_point)
        rhs_data = f.data.T
    rhs = QuantTensor(np.ascontiguousarray(rhs_data), f.scale, f.zero_point)
    return lhs, rhs, rq, layer.output.shape


def gemm_layer_tasks(layer: LayerSpec, x: QuantTensor, config: AccelConfig):
    lhs, rhs, rq, shape = layer_gemm_operands(layer, x)
    task = GemmTask(lhs, rhs, rq)
    rows = max_rows_per_task(task.K, task.N, config)
    cap = config.host.max_batch_rows
    if cap:
        rows = min(rows, max(config.native_rows, cap // config.native_rows * config.native_rows))
    return lhs, split_rows(task, rows), shape


# -- inference -----------------------------------------------------------------

@dataclass
class InferenceReport:
    backend: str
    layers: list = field(default_factory=list)
    counters: CycleCounters = field(default_factory=CycleCounters)
    output_digest: str = ""
    output_shape: tuple = ()

    @property
    def conv_cycles(self) -> int:
        return sum(l["cycles"] for l in self.layers if l["category"] == "CONV")

    @property
    def non_conv_cycles(self) -> int:
        return sum(l["cycles"] for l in self.layers if l["category"] == "NON_CONV")

    @property
    def overall_cycles(self) -> int:
        return sum(l["cycles"] for l in self.layers)

    @property
    def accel_cycles(self) -> int:
        return sum(l["accel_cycles"] for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "output_digest": self.output_digest,
            "output_shape": list(self.output_shape),
            "overall_cycles": self.overall_cycles,
            "conv_cycles": self.conv_cycles,
            "non_conv_cycles": self.non_conv_cycles,
            "accel_cycles": self.accel_cycles,
            "layers": self.layers,
            "counters": self.counters.to_dict(),
        }


def tensor_digest(t: QuantTensor) -> str:
    return hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()


def _ceil_cycles(x: float) -> int:
    return int(math.ceil(x))


def run_inference(model: ModelSpec, x: QuantTensor, backend: str = "cpu",
                  config: AccelConfig | None = None) -> tuple:
    """Run the model; returns (output tensor, InferenceReport)."""
    if backend not in ("cpu", "vm", "sa"):
        raise ModelError(f"unknown backend {backend!r}")
    config = config or AccelConfig()
    if backend != "cpu" and config.kind != backend:
        config = config.replace(kind=backend)
    if tuple(x.shape) != tuple(model.input.shape):
        raise ModelError(f"input shape {tuple(x.shape)} != model input {model.input.shape}")
    if x.zero_point != model.input.zero_point or x.scale != model.input.scale:
        x = QuantTensor(x.data, model.input.scale, model.input.zero_point)
    host = config.host
    engine = accel = None
    if backend != "cpu":
        engine = Engine(config.bus)
        accel = make_accelerator(config)
        accel.bind(engine)
    values = {model.input.name: x}
    report = InferenceReport(backend)
    for layer in model.layers:
        ins = [values[t] for t in layer.inputs]
        category = "CONV" if layer.kind in CONV_KINDS else "NON_CONV"
        accel_cycles = 0
        if layer.kind in CONV_KINDS and backend != "cpu":
            lhs, tasks, shape = gemm_layer_tasks(layer, ins[0], config)
            prep = 0
            if layer.kind == "conv2d":
                prep = _ceil_cycles(lhs.data.size * host.im2col_cycles_per_byte)
            outs, rep = dispatch_pipelined(tasks, accel, engine)
            data = np.concatenate([o.data for o in outs], axis=0).reshape(shape)
            y = QuantTensor(data, layer.output.scale, layer.output.zero_point)
            accel_cycles = rep.accel_cycles
            cycles = prep + rep.elapsed_cycles
        else:
            y = cpu_reference_layer(layer, ins)
            if layer.kind in CONV_KINDS or layer.kind == "depthwise_conv2d":
                cycles = _ceil_cycles(_layer_macs(layer, ins[0]) * host.gemm_cycles_per_mac)
            else:
                cycles = _ceil_cycles(y.data.size * len(ins) * host.elementwise_cycles_per_element)
        values[layer.name] = y
        report.layers.append({"name": layer.name, "kind": layer.kind, "category": category,
                              "cycles": int(cycles), "accel_cycles": int(accel_cycles),
                              "cpu_cycles": int(cycles - accel_cycles)})
    out = values[model.output]
    if engine is not None:
        report.counters = engine.snapshot_counters()
    report.output_digest = tensor_digest(out)
    report.output_shape = tuple(out.shape)
    return out, report


def _layer_macs(layer: LayerSpec, x: QuantTensor) -> int:
    f = layer.tensors["filter"]
    out = layer.output.shape
    if layer.kind == "fully_connected":
        return out[0] * f.shape[0] * f.shape[1]
    if layer.kind == "depthwise_conv2d":
        return int(np.prod(out)) * f.shape[1] * f.shape[2]
    return int(np.prod(out)) * f.shape[1] * f.shape[2] * f.shape[3]


def random_input(model: ModelSpec, seed: int) -> QuantTensor:
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 256, size=model.input.shape, dtype=np.uint8)
    return QuantTensor(data, model.input.scale, model.input.zero_point)


def load_input(model: ModelSpec, path) -> QuantTensor:
    raw = Path(path).read_bytes()
    n = int(np.prod(model.input.shape))
    if len(raw) != n:
        raise ModelError(f"input file {path} holds {len(raw)} bytes, model needs {n}")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(model.input.shape)
    return QuantTensor(data.copy(), model.input.scale, model.input.zero_point)
