"""Model/architecture configuration, validation, and per-event energy derivation.

Configuration lives in a TOML file with exactly two tables, ``[model]`` and
``[arch]``.  Field names match the dataclasses below one-to-one; unknown keys
are rejected (fail fast) so typos never silently fall back to defaults.
"""

from __future__ import annotations

import math
import os
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

POSITIONAL_MODES = ("rope_like", "alibi_like", "uniform", "trace")

# One multiply-accumulate is counted as 2 ops when converting TOPS ratings
# into per-op energies (industry convention; the rating tables don't define it).
OPS_PER_MAC = 2


class ConfigError(Exception):
    """Base class for configuration problems."""


class ConfigFileError(ConfigError):
    """Config file missing or unreadable."""


class ConfigSchemaError(ConfigError):
    """Config file readable but structurally wrong (unknown/missing keys, bad types)."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 32
    num_q_heads: int = 32
    num_kv_heads: int = 8
    head_dim: int = 128
    max_seq_len: int = 8192
    positional_mode: str = "rope_like"
    causal: bool = True

    @property
    def gqa_group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads


@dataclass(frozen=True)
class ArchConfig:
    """Hardware profile.  Defaults are the 16-engine, 400 MHz, INT8 design point.

    Throughput/power ratings come straight from the silicon configuration
    table; the per-byte energies are documented placeholders (the source
    derives SRAM costs from external tooling without listing them) and are
    expected calibration knobs.
    """

    num_hes: int = 16
    gb_bytes: int = 1 << 20  # 1 MB shared global buffer
    ip_rows: int = 128
    ip_cols: int = 128
    op_rows: int = 128
    op_cols: int = 128
    sfu_units: int = 128
    freq_hz: float = 400e6
    bit_serial_width: int = 8  # must equal the operand width; INT8-only build
    cim_write_cycles_per_row: int = 1
    cim_write_energy_mult: float = 3.0
    ip_tops: float = 1.64
    op_tops: float = 1.64
    sfu_tops: float = 0.2
    ip_mw: float = 42.0
    op_mw: float = 53.6
    sfu_mw: float = 13.4
    system_mw: float = 2100.0
    dram_pj_per_byte: float = 40.0
    gb_pj_per_byte: float = 2.0
    cimsram_pj_per_byte: float = 0.5
    # None models perfect asynchronous prefetch (no DRAM stalls); a finite
    # value enables the bandwidth/stall model in the system simulator.
    dram_bw_gbps: float | None = None
    system_area_mm2: float = 26.2

    @property
    def tile_vectors(self) -> int:
        """KV tile size in vectors; tiles match the CIM array dimension."""
        return self.ip_cols

    def dram_bytes_per_cycle(self) -> float:
        if self.dram_bw_gbps is None:
            return math.inf
        return self.dram_bw_gbps * 1e9 / self.freq_hz


@dataclass(frozen=True)
class EnergyTable:
    """Per-event energies: J/op for compute, J/byte for data movement.

    Op energies follow the OPS_PER_MAC convention, so the per-MAC figure is
    twice the stored per-op value.
    """

    mac_ip: float
    mac_op: float
    sfu_op: float
    dram: float
    gb: float
    cim_read: float
    cim_write: float

    def scaled(self, c: float) -> "EnergyTable":
        return EnergyTable(*(getattr(self, f.name) * c for f in fields(self)))


@dataclass
class Violation:
    code: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str) -> None:
        self.violations.append(Violation(code, message))

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def validate_config(model: ModelConfig, arch: ArchConfig) -> ValidationReport:
    """Check both configs against the structural invariants; never mutates.

    Returns a report listing every violation found (empty report = valid).
    """
    rep = ValidationReport()

    for name in ("num_layers", "num_q_heads", "num_kv_heads", "head_dim", "max_seq_len"):
        if getattr(model, name) <= 0:
            rep.add("positive", f"model.{name} must be strictly positive")
    if model.num_kv_heads > 0 and model.num_q_heads % model.num_kv_heads != 0:
        rep.add(
            "GQA grouping",
            f"num_q_heads={model.num_q_heads} is not a positive multiple of "
            f"num_kv_heads={model.num_kv_heads}",
        )
    if model.positional_mode not in POSITIONAL_MODES:
        rep.add("positional_mode", f"unknown positional_mode {model.positional_mode!r}")
    if model.head_dim > arch.ip_rows:
        rep.add(
            "head_dim exceeds array depth",
            f"head_dim={model.head_dim} > ip_rows={arch.ip_rows}; tiling over the "
            "head dimension is not supported",
        )

    count_fields = (
        "num_hes", "gb_bytes", "ip_rows", "ip_cols", "op_rows", "op_cols",
        "sfu_units", "bit_serial_width", "cim_write_cycles_per_row",
    )
    for name in count_fields:
        if getattr(arch, name) <= 0:
            rep.add("positive", f"arch.{name} must be strictly positive")
    energy_fields = (
        "freq_hz", "cim_write_energy_mult", "ip_tops", "op_tops", "sfu_tops",
        "ip_mw", "op_mw", "sfu_mw", "system_mw", "dram_pj_per_byte",
        "gb_pj_per_byte", "cimsram_pj_per_byte", "system_area_mm2",
    )
    for name in energy_fields:
        if getattr(arch, name) <= 0:
            rep.add("positive", f"arch.{name} must be strictly positive")
    if arch.dram_bw_gbps is not None and arch.dram_bw_gbps <= 0:
        rep.add("positive", "arch.dram_bw_gbps must be strictly positive when set")
    if arch.bit_serial_width != 8:
        rep.add(
            "bit width",
            f"bit_serial_width={arch.bit_serial_width}; only the 8-bit operand "
            "mode is modelled",
        )
    if arch.cim_write_energy_mult <= 1.0:
        rep.add(
            "write energy",
            "cim_write_energy_mult must exceed 1 (array writes cost more than reads)",
        )
    return rep


def derive_energy_table(arch: ArchConfig) -> EnergyTable:
    """Turn the hardware profile into per-event energies.

    Compute: rated power / rated op throughput (TOPS, counting one MAC as
    OPS_PER_MAC ops).  Movement: the per-byte config fields.  Deterministic.
    """
    for name in ("ip_tops", "op_tops", "sfu_tops"):
        if getattr(arch, name) <= 0:
            raise ConfigError(f"arch.{name} must be nonzero to derive op energies")
    cim_read = arch.cimsram_pj_per_byte * 1e-12
    return EnergyTable(
        mac_ip=arch.ip_mw * 1e-3 / (arch.ip_tops * 1e12),
        mac_op=arch.op_mw * 1e-3 / (arch.op_tops * 1e12),
        sfu_op=arch.sfu_mw * 1e-3 / (arch.sfu_tops * 1e12),
        dram=arch.dram_pj_per_byte * 1e-12,
        gb=arch.gb_pj_per_byte * 1e-12,
        cim_read=cim_read,
        cim_write=cim_read * arch.cim_write_energy_mult,
    )


def _build(cls: type, table: dict[str, Any], section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigSchemaError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name in table:
            value = table[name]
        elif f.default is not MISSING:
            value = f.default
        else:
            raise ConfigSchemaError(f"[{section}] is missing required key {name!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigSchemaError(f"bad value in [{section}]: {exc}") from exc


def load_config(path: str | Path) -> tuple[ModelConfig, ArchConfig]:
    """Load and structurally check a config file; no semantic validation here."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigSchemaError(f"cannot parse config file {path}: {exc}") from exc

    extra = sorted(set(doc) - {"model", "arch"})
    if extra:
        raise ConfigSchemaError(f"unknown top-level tables: {', '.join(extra)}")
    for section in ("model", "arch"):
        if section not in doc or not isinstance(doc[section], dict):
            raise ConfigSchemaError(f"config file must contain a [{section}] table")

    model = _build(ModelConfig, doc["model"], "model")
    arch = _build(ArchConfig, doc["arch"], "arch")
    return model, arch


def find_config(name: str) -> Path:
    """Resolve a config name to a file.

    Plain paths are used as-is.  Bare names are searched in
    ``$FUSIONCIM_CONFIG_DIR`` (if set) and then in the packaged config
    directory, with a ``.toml`` suffix appended when missing.
    """
    candidate = Path(name)
    if candidate.suffix == ".toml" and candidate.exists():
        return candidate
    if candidate.exists() and candidate.is_file():
        return candidate
    stem = name if name.endswith(".toml") else name + ".toml"
    search: list[Path] = []
    env_dir = os.environ.get("FUSIONCIM_CONFIG_DIR")
    if env_dir:
        search.append(Path(env_dir) / stem)
    search.append(Path(__file__).parent / "configs" / stem)
    for p in search:
        if p.exists():
            return p
    raise ConfigFileError(f"config {name!r} not found (searched: {', '.join(map(str, search))})")


def default_config() -> tuple[ModelConfig, ArchConfig]:
    return load_config(find_config("default"))
