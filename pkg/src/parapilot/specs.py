"""Validated, immutable descriptions of the model, the cluster, and the cost profile.

Everything downstream (strategy enumeration, cost estimation, search) consumes
these types read-only, so they are frozen dataclasses built once by the
``load_*`` functions from plain JSON-shaped dicts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import SpecError, UnsupportedDeviceCountError

DEFAULT_MS_BYTES_PER_PARAM_BYTE = 4.0  # fp32 Adam: param + grad + two moments
DEFAULT_TP_ACT_REPLICATION_FRACTION = 0.25
DEFAULT_BWD_FWD_RATIO = 2.0
DEFAULT_OVERLAP_SLOWDOWN = 1.3


def is_power_of_two(n: int) -> bool:
    return isinstance(n, int) and n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class LayerSpec:
    """One model layer: parameter bytes plus per-sample activation footprints."""

    id: int
    kind: str
    param_bytes: int
    bnd_bytes_per_sample: int
    int_bytes_per_sample: int
    fwd_time_per_sample: float
    tp_act_replication_fraction: float = DEFAULT_TP_ACT_REPLICATION_FRACTION


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack plus the model-states multiplier."""

    name: str
    layers: tuple[LayerSpec, ...]
    ms_bytes_per_param_byte: float = DEFAULT_MS_BYTES_PER_PARAM_BYTE

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def to_document(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "ms_bytes_per_param_byte": self.ms_bytes_per_param_byte,
            "layers": [
                {
                    "kind": layer.kind,
                    "param_bytes": layer.param_bytes,
                    "bnd_bytes_per_sample": layer.bnd_bytes_per_sample,
                    "int_bytes_per_sample": layer.int_bytes_per_sample,
                    "fwd_time_per_sample": layer.fwd_time_per_sample,
                    "tp_act_replication_fraction": layer.tp_act_replication_fraction,
                }
                for layer in self.layers
            ],
        }


@dataclass(frozen=True)
class ClusterSpec:
    """Homogeneous device pool with a two-tier bandwidth hierarchy."""

    n_devices: int
    mem_budget_bytes: int
    island_size: int
    intra_island_bw: float
    inter_island_bw: float
    overlap_slowdown: float = DEFAULT_OVERLAP_SLOWDOWN

    def to_document(self) -> dict[str, Any]:
        return {
            "n_devices": self.n_devices,
            "mem_budget_bytes": self.mem_budget_bytes,
            "island_size": self.island_size,
            "intra_island_bw": self.intra_island_bw,
            "inter_island_bw": self.inter_island_bw,
            "overlap_slowdown": self.overlap_slowdown,
        }


@dataclass(frozen=True)
class CostProfile:
    """Measured timing knobs; per-layer forward-time overrides are optional."""

    bwd_fwd_ratio: float = DEFAULT_BWD_FWD_RATIO
    collective_efficiency: float = 1.0
    layer_overrides: Mapping[int, float] = field(default_factory=dict)

    def fwd_time(self, layer: LayerSpec) -> float:
        return self.layer_overrides.get(layer.id, layer.fwd_time_per_sample)

    def to_document(self) -> dict[str, Any]:
        return {
            "bwd_fwd_ratio": self.bwd_fwd_ratio,
            "collective_efficiency": self.collective_efficiency,
            "layer_overrides": {str(k): v for k, v in sorted(self.layer_overrides.items())},
        }


def _require(doc: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in doc:
        raise SpecError(f"{where}: missing required field '{key}'")
    return doc[key]


def _as_int(value: Any, where: str, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise SpecError(f"{where}: field '{key}' must be an integer, got {value!r}")
    return value


def _as_number(value: Any, where: str, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SpecError(f"{where}: field '{key}' must be a number, got {value!r}")
    return float(value)


def load_model_spec(document: Mapping[str, Any]) -> ModelSpec:
    """Validate a model document and return the immutable spec.

    Layer ids are assigned 0..L-1 in document order; every violation is
    reported with the offending layer id and field name.
    """
    if not isinstance(document, Mapping):
        raise SpecError("model spec: document must be a JSON object")
    name = str(document.get("name", "model"))
    ms_mult = _as_number(
        document.get("ms_bytes_per_param_byte", DEFAULT_MS_BYTES_PER_PARAM_BYTE),
        "model spec", "ms_bytes_per_param_byte",
    )
    if ms_mult < 1.0:
        raise SpecError("model spec: ms_bytes_per_param_byte must be >= 1")

    raw_layers = _require(document, "layers", "model spec")
    if not isinstance(raw_layers, (list, tuple)) or len(raw_layers) == 0:
        raise SpecError("model spec: 'layers' must be a non-empty list")

    layers = []
    for idx, raw in enumerate(raw_layers):
        where = f"model spec layer {idx}"
        if not isinstance(raw, Mapping):
            raise SpecError(f"{where}: must be a JSON object")
        param = _as_int(_require(raw, "param_bytes", where), where, "param_bytes")
        bnd = _as_int(_require(raw, "bnd_bytes_per_sample", where), where, "bnd_bytes_per_sample")
        intb = _as_int(_require(raw, "int_bytes_per_sample", where), where, "int_bytes_per_sample")
        fwd = _as_number(_require(raw, "fwd_time_per_sample", where), where, "fwd_time_per_sample")
        frac = _as_number(
            raw.get("tp_act_replication_fraction", DEFAULT_TP_ACT_REPLICATION_FRACTION),
            where, "tp_act_replication_fraction",
        )
        if param <= 0:
            raise SpecError(f"{where}: field 'param_bytes' must be positive, got {param}")
        if bnd <= 0:
            raise SpecError(f"{where}: field 'bnd_bytes_per_sample' must be positive, got {bnd}")
        if intb < 0:
            raise SpecError(f"{where}: field 'int_bytes_per_sample' must be non-negative, got {intb}")
        if fwd <= 0:
            raise SpecError(f"{where}: field 'fwd_time_per_sample' must be positive, got {fwd}")
        if not 0.0 <= frac <= 1.0:
            raise SpecError(f"{where}: field 'tp_act_replication_fraction' must be in [0, 1], got {frac}")
        layers.append(LayerSpec(
            id=idx,
            kind=str(raw.get("kind", "layer")),
            param_bytes=param,
            bnd_bytes_per_sample=bnd,
            int_bytes_per_sample=intb,
            fwd_time_per_sample=fwd,
            tp_act_replication_fraction=frac,
        ))
    return ModelSpec(name=name, layers=tuple(layers), ms_bytes_per_param_byte=ms_mult)


def load_cluster_spec(document: Mapping[str, Any]) -> ClusterSpec:
    """Validate a cluster document; rejects non-power-of-two device counts."""
    if not isinstance(document, Mapping):
        raise SpecError("cluster spec: document must be a JSON object")
    where = "cluster spec"
    n = _as_int(_require(document, "n_devices", where), where, "n_devices")
    if not is_power_of_two(n):
        raise UnsupportedDeviceCountError(
            f"{where}: n_devices must be a power of two (search explores power-of-two "
            f"pipeline degrees only), got {n}"
        )
    mem = _as_int(_require(document, "mem_budget_bytes", where), where, "mem_budget_bytes")
    if mem <= 0:
        raise SpecError(f"{where}: field 'mem_budget_bytes' must be positive, got {mem}")
    island = _as_int(_require(document, "island_size", where), where, "island_size")
    if not is_power_of_two(island):
        raise UnsupportedDeviceCountError(f"{where}: island_size must be a power of two, got {island}")
    if n % island != 0:
        raise SpecError(f"{where}: island_size {island} must divide n_devices {n}")
    intra = _as_number(_require(document, "intra_island_bw", where), where, "intra_island_bw")
    inter = _as_number(_require(document, "inter_island_bw", where), where, "inter_island_bw")
    if inter <= 0:
        raise SpecError(f"{where}: field 'inter_island_bw' must be positive, got {inter}")
    if intra < inter:
        raise SpecError(f"{where}: intra_island_bw must be >= inter_island_bw")
    slowdown = _as_number(
        document.get("overlap_slowdown", DEFAULT_OVERLAP_SLOWDOWN), where, "overlap_slowdown"
    )
    if slowdown < 1.0:
        raise SpecError(f"{where}: field 'overlap_slowdown' must be >= 1, got {slowdown}")
    return ClusterSpec(
        n_devices=n,
        mem_budget_bytes=mem,
        island_size=island,
        intra_island_bw=intra,
        inter_island_bw=inter,
        overlap_slowdown=slowdown,
    )


def load_cost_profile(document: Mapping[str, Any], model: ModelSpec) -> CostProfile:
    """Merge a (possibly empty) profile document with defaults.

    Overrides must reference existing layer ids and carry positive times.
    """
    if not isinstance(document, Mapping):
        raise SpecError("cost profile: document must be a JSON object")
    where = "cost profile"
    ratio = _as_number(document.get("bwd_fwd_ratio", DEFAULT_BWD_FWD_RATIO), where, "bwd_fwd_ratio")
    if ratio <= 0:
        raise SpecError(f"{where}: field 'bwd_fwd_ratio' must be positive, got {ratio}")
    eff = _as_number(document.get("collective_efficiency", 1.0), where, "collective_efficiency")
    if not 0.0 < eff <= 1.0:
        raise SpecError(f"{where}: field 'collective_efficiency' must be in (0, 1], got {eff}")
    overrides: dict[int, float] = {}
    raw_overrides = document.get("layer_overrides", {})
    if not isinstance(raw_overrides, Mapping):
        raise SpecError(f"{where}: 'layer_overrides' must be an object mapping layer id to time")
    for key, value in raw_overrides.items():
        try:
            layer_id = int(key)
        except (TypeError, ValueError):
            raise SpecError(f"{where}: layer override key {key!r} is not a layer id") from None
        if not 0 <= layer_id < model.num_layers:
            raise SpecError(
                f"{where}: layer override references unknown layer id {layer_id} "
                f"(model has {model.num_layers} layers)"
            )
        t = _as_number(value, where, f"layer_overrides[{layer_id}]")
        if t <= 0:
            raise SpecError(
                f"{where}: field 'layer_overrides[{layer_id}]' must be positive, got {t}"
            )
        overrides[layer_id] = t
    return CostProfile(bwd_fwd_ratio=ratio, collective_efficiency=eff, layer_overrides=overrides)


def read_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_model_spec_file(path: str | Path) -> ModelSpec:
    return load_model_spec(read_json(path))


def load_cluster_spec_file(path: str | Path) -> ClusterSpec:
    return load_cluster_spec(read_json(path))


def load_cost_profile_file(path: str | Path, model: ModelSpec) -> CostProfile:
    return load_cost_profile(read_json(path), model)
