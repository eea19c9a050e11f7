"""Accelerator and host-cost configuration.

Config files are JSON objects mirroring these dataclasses; omitted fields take
the defaults below and unknown fields are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .sim import BusModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VmConfig:
    num_gemm_units: int = 4
    macs_per_output: int = 4
    tile_rows: int = 4
    tile_cols: int = 4
    global_weight_buffer_bytes: int = 64 * 1024
    local_input_buffer_bytes: int = 16 * 1024
    local_weight_tile_bytes: int = 4 * 1024
    num_banks: int = 4
    adder_tree_latency_cycles: int = 2
    ppu_latency_cycles: int = 4
    ppu_enabled: bool = True
    broadcast_enabled: bool = True

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int",) and v <= 0:
                raise ConfigError(f"vm.{f.name} must be positive, got {v}")
        if (self.tile_rows, self.tile_cols) != (4, 4):
            raise ConfigError("vm tile dims are fixed at 4x4")
        return self


@dataclass(frozen=True)
class SaConfig:
    rows: int = 16
    cols: int = 16
    queue_depth: int = 8
    global_input_buffer_bytes: int = 64 * 1024
    global_weight_buffer_bytes: int = 64 * 1024
    num_banks: int = 4
    ppu_latency_cycles: int = 4
    ppu_enabled: bool = True

    @property
    def num_queues(self) -> int:
        return self.rows + self.cols

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int",) and v <= 0:
                raise ConfigError(f"sa.{f.name} must be positive, got {v}")
        if self.rows != self.cols:
            raise ConfigError(f"systolic array must be square, got {self.rows}x{self.cols}")
        return self


@dataclass(frozen=True)
class HostConfig:
    """Modeled CPU costs, in accelerator clock cycles."""

    pack_cycles_per_byte: float = 0.25
    unpack_cycles_per_byte: float = 0.25
    im2col_cycles_per_byte: float = 0.25
    gemm_cycles_per_mac: float = 0.5
    elementwise_cycles_per_element: float = 1.0
    pipelined: bool = True
    in_flight_tasks: int = 2
    max_batch_rows: int = 64  # rows per GEMM task when lowering layers; 0 = buffer limit only

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and v < 0:
                raise ConfigError(f"host.{f.name} must be non-negative, got {v}")
        if self.in_flight_tasks < 1:
            raise ConfigError("host.in_flight_tasks must be >= 1")
        return self


@dataclass(frozen=True)
class AccelConfig:
    kind: str = "vm"
    bus: BusModel = field(default_factory=BusModel)
    host: HostConfig = field(default_factory=HostConfig)
    vm: VmConfig = field(default_factory=VmConfig)
    sa: SaConfig = field(default_factory=SaConfig)

    def __post_init__(self):
        if self.kind not in ("vm", "sa"):
            raise ConfigError(f"kind must be 'vm' or 'sa', got {self.kind!r}")
        self.vm.validate()
        self.sa.validate()
        self.host.validate()

    @property
    def native_width(self) -> int:
        """Output tile width along N (and input block height along M)."""
        return self.vm.tile_cols if self.kind == "vm" else self.sa.cols

    @property
    def native_rows(self) -> int:
        return self.vm.tile_rows if self.kind == "vm" else self.sa.rows

    @property
    def global_weight_buffer_bytes(self) -> int:
        return (self.vm if self.kind == "vm" else self.sa).global_weight_buffer_bytes

    @property
    def ppu_enabled(self) -> bool:
        return (self.vm if self.kind == "vm" else self.sa).ppu_enabled

    def replace(self, **changes) -> "AccelConfig":
        """Copy with top-level or dotted (``"sa.rows"``) field changes."""
        top = {}
        nested = {}
        for key, value in changes.items():
            if "." in key:
                section, name = key.split(".", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        for section, values in nested.items():
            top[section] = dataclasses.replace(getattr(self, section), **values)
        return dataclasses.replace(self, **top)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AccelConfig":
        sections = {"bus": BusModel, "host": HostConfig, "vm": VmConfig, "sa": SaConfig}
        unknown = set(d) - {"kind", *sections}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "kind" in d:
            kwargs["kind"] = d["kind"]
        for name, typ in sections.items():
            if name not in d:
                continue
            sub = d[name]
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            try:
                kwargs[name] = typ(**sub)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid {name!r} section: {e}") from e
        return cls(**kwargs)


def load_config(path) -> AccelConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    try:
        return AccelConfig.from_dict(d)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def save_config(config: AccelConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
