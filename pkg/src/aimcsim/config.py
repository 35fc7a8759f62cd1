"""Architecture configuration: the full hardware parameterization.

Defaults reproduce the 512-cluster platform (1 GHz, 256x256 crossbars,
quadrant factors (1, 8, 4, 4, 4)). Everything round-trips through JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class NocConfig:
    # index 0 is the HBM link, then wrapper, L3, L2, L1 (innermost last)
    quadrant_factors: list[int] = field(default_factory=lambda: [1, 8, 4, 4, 4])
    data_width_bytes: list[int] = field(default_factory=lambda: [64, 64, 64, 64, 64])
    hop_latency_cycles: list[int] = field(default_factory=lambda: [100, 4, 4, 4, 4])
    hbm_size_bytes: int = 3 * 2**29  # 1.5 GiB

    @property
    def num_clusters(self) -> int:
        return math.prod(self.quadrant_factors[1:])

    def violations(self) -> list[str]:
        out = []
        n = len(self.quadrant_factors)
        if n < 2:
            out.append("noc.quadrant_factors: need the HBM link plus at least one level")
        for name in ("data_width_bytes", "hop_latency_cycles"):
            vals = getattr(self, name)
            if len(vals) != n:
                out.append(f"noc.{name}: length {len(vals)} != {n} levels")
            if any(v <= 0 for v in vals):
                out.append(f"noc.{name}: all entries must be > 0")
        if any(f <= 0 for f in self.quadrant_factors):
            out.append("noc.quadrant_factors: all entries must be > 0")
        if self.quadrant_factors and self.quadrant_factors[0] != 1:
            out.append("noc.quadrant_factors[0]: a single HBM link is modeled")
        if self.hbm_size_bytes <= 0:
            out.append("noc.hbm_size_bytes must be > 0")
        return out


DEFAULT_CPE = {
    "residual_add": 1.0,
    "relu": 0.5,
    "maxpool": 2.5,  # per output element, 3x3 window
    "avgpool": 1.0,  # per input element
    "partial_sum_reduce": 1.0,
    "fully_connected": 1.0,  # per MAC
    "im2col_prep": 1.0,
}


@dataclass
class ClusterConfig:
    num_cores: int = 16
    l1_bytes: int = 2**20
    cycles_per_element: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_CPE))
    job_overhead_cycles: int = 0
    dma_setup_cycles: int = 10
    # master-core bookkeeping per firing (wait, configure DMA and IMA)
    sync_cycles: int = 50
    cluster_area_mm2: float = 480 / 512

    def violations(self) -> list[str]:
        out = []
        if self.num_cores < 1:
            out.append("cluster.num_cores must be >= 1")
        if self.l1_bytes <= 0:
            out.append("cluster.l1_bytes must be > 0")
        if any(v < 0 for v in self.cycles_per_element.values()):
            out.append("cluster.cycles_per_element: negative entry")
        missing = set(DEFAULT_CPE) - set(self.cycles_per_element)
        if missing:
            out.append(f"cluster.cycles_per_element: missing {sorted(missing)}")
        if self.dma_setup_cycles < 0 or self.sync_cycles < 0 or self.job_overhead_cycles < 0:
            out.append("cluster: overhead cycles must be >= 0")
        if self.cluster_area_mm2 < 0:
            out.append("cluster.cluster_area_mm2 must be >= 0")
        return out


@dataclass
class CrossbarConfig:
    rows: int = 256
    cols: int = 256
    mvm_latency_ns: float = 130.0
    streamer_ports: int = 16
    element_bytes: int = 1

    def violations(self) -> list[str]:
        out = []
        for name in ("rows", "cols", "streamer_ports", "element_bytes"):
            if getattr(self, name) <= 0:
                out.append(f"crossbar.{name} must be > 0")
        if self.mvm_latency_ns <= 0:
            out.append("crossbar.mvm_latency_ns must be > 0")
        return out


@dataclass
class CostCoefficients:
    """Energy/area coefficients. Values are fitted, not predicted."""

    energy_per_mvm_j: float = 0.0
    energy_per_byte_j: list[float] = field(default_factory=lambda: [0.0] * 5)
    energy_per_core_cycle_j: float = 0.0
    leakage_per_cluster_w: float = 0.0
    cluster_area_mm2: float = 480 / 512
    label: str = "uncalibrated"

    def violations(self) -> list[str]:
        vals = [self.energy_per_mvm_j, self.energy_per_core_cycle_j,
                self.leakage_per_cluster_w, self.cluster_area_mm2, *self.energy_per_byte_j]
        return ["costs: all coefficients must be >= 0"] if any(v < 0 for v in vals) else []

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CostCoefficients":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path: str | Path | None = None) -> "CostCoefficients":
        if path is None:
            text = resources.files("aimcsim.data").joinpath("calibrated_costs.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ArchConfig:
    noc: NocConfig = field(default_factory=NocConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    crossbar: CrossbarConfig = field(default_factory=CrossbarConfig)
    clock_ghz: float = 1.0
    num_clusters: int = 512
    partial_sum_bytes: int = 4
    channel_depth: int = 2

    @property
    def ps_per_cycle(self) -> int:
        return round(1000 / self.clock_ghz)

    @property
    def mvm_cycles(self) -> int:
        return math.ceil(self.crossbar.mvm_latency_ns * self.clock_ghz)

    def violations(self) -> list[str]:
        out = self.noc.violations() + self.cluster.violations() + self.crossbar.violations()
        if self.clock_ghz <= 0 or abs(1000 / self.clock_ghz - self.ps_per_cycle) > 1e-9:
            out.append("clock_ghz must give an integer picosecond period")
        if not out and self.noc.num_clusters != self.num_clusters:
            out.append(
                f"noc.quadrant_factors: product {self.noc.num_clusters} "
                f"!= num_clusters {self.num_clusters}")
        if self.partial_sum_bytes <= 0:
            out.append("partial_sum_bytes must be > 0")
        if self.channel_depth < 1:
            out.append("channel_depth must be >= 1")
        return out

    def validate(self) -> "ArchConfig":
        v = self.violations()
        if v:
            raise ConfigError("; ".join(v))
        return self

    def to_dict(self) -> dict[str, Any]:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported arch schema_version {version}")
        try:
            cluster = dict(d.pop("cluster", {}))
            cpe = dict(DEFAULT_CPE)
            cpe.update(cluster.pop("cycles_per_element", {}))
            return cls(
                noc=NocConfig(**d.pop("noc", {})),
                cluster=ClusterConfig(cycles_per_element=cpe, **cluster),
                crossbar=CrossbarConfig(**d.pop("crossbar", {})),
                **d,
            )
        except TypeError as e:
            raise ConfigError(f"bad arch config: {e}") from None

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ArchConfig":
        if path is None:
            text = resources.files("aimcsim.data").joinpath("table1_arch.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
