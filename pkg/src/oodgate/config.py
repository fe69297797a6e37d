"""Run configuration: one JSON document drives every pipeline stage."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidSpec
from .evaluation import DEFAULT_GATES, GateSpec
from .registry import ALL_METHODS
from .confidence import DICE_KEEP, ODIN_EPSILONS, ODIN_TEMPERATURES, REACT_PERCENTILES
from .engine.layers import ModelSpec
from .engine.serialize import spec_from_dict
from .engine.zoo import tiny_conv
from .synth import SyntheticSpec


class ConfigError(InvalidSpec):
    """A run configuration that cannot be used."""


DEFAULTS: dict = {
    "dataset": {"synthetic": {}},
    # {"zoo": "tiny_conv", "args": {...}} or {"spec": <model description>}
    "model": {"zoo": "tiny_conv", "args": {}},
    "train": {"lr": 0.05, "epochs": 30, "batch_size": 32, "momentum": 0.9},
    "seeds": [0, 1, 2, 3, 4],
    "methods": list(ALL_METHODS),
    "gates": [{"name": g.name, "stages": [list(s) for s in g.stages]} for g in DEFAULT_GATES],
    "grids": {
        "odin": {"temperatures": list(ODIN_TEMPERATURES), "epsilons": list(ODIN_EPSILONS)},
        "react": {"percentiles": list(REACT_PERCENTILES)},
        "dice": {"keep": list(DICE_KEEP)},
    },
    "scoring": {
        "feature_layer": 1,
        "mbm_layers": [1, 2],
        "gram_layers": [2, 4],
        "gram_orders": 3,
        "holdout_fraction": 0.1,
        "mc_samples": 100,
        "mc_dropout": 0.3,
        "covariance_reg": None,
        "shared_covariance": False,
    },
    "out": "runs",
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        # tagged unions are replaced wholesale
        if isinstance(value, dict) and isinstance(base[key], dict) and key not in ("dataset", "model"):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    doc: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, doc: dict, *, seed: int | None = None, out: str | None = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        merged = _merge(DEFAULTS, doc)
        if seed is not None:
            merged["seeds"] = [seed]
        if out is not None:
            merged["out"] = out
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc.msg} at line {exc.lineno}") from None
        return cls.from_dict(doc, **overrides)

    def validate(self) -> None:
        d = self.doc
        seeds = d["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct")
        unknown = [m for m in d["methods"] if m not in ALL_METHODS]
        if unknown or not d["methods"]:
            raise ConfigError(f"unregistered methods: {unknown}" if unknown else "no methods selected")
        for g in self.gates:
            for method, q in g.stages:
                if method not in d["methods"]:
                    raise ConfigError(f"gate {g.name!r} uses method {method!r} which is not scored")
                if not 0 <= q <= 100:
                    raise ConfigError(f"gate {g.name!r}: percentile {q} outside [0, 100]")
        ds = d["dataset"]
        if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in ("synthetic", "dump"):
            raise ConfigError("dataset must be {'synthetic': {...}} or {'dump': '<directory>'}")
        if self.is_synthetic:
            data = self.synthetic_spec()
            try:
                data.validate()
            except ConfigError:
                raise
            except InvalidSpec as exc:
                raise ConfigError(f"bad synthetic spec: {exc}") from None
            self.model_spec(data)
        sc = d["scoring"]
        if not 0 < sc["holdout_fraction"] < 1:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if sc["mc_samples"] < 1 or not 0 <= sc["mc_dropout"] < 1:
            raise ConfigError("mc_samples must be >= 1 and mc_dropout in [0, 1)")
        for name, grid in d["grids"].items():
            if any(not v for v in grid.values()):
                raise ConfigError(f"grid for {name} is empty")

    # --- typed views -----------------------------------------------------

    @property
    def seeds(self) -> list[int]:
        return list(self.doc["seeds"])

    @property
    def methods(self) -> list[str]:
        return list(self.doc["methods"])

    @property
    def gates(self) -> list[GateSpec]:
        try:
            return [GateSpec(g["name"], tuple((str(m), float(q)) for m, q in g["stages"])) for g in self.doc["gates"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad gate definition: {exc}") from None

    @property
    def is_synthetic(self) -> bool:
        return "synthetic" in self.doc["dataset"]

    @property
    def dump_source(self) -> Path:
        return Path(self.doc["dataset"]["dump"])

    def synthetic_spec(self) -> SyntheticSpec:
        try:
            return SyntheticSpec.from_dict(self.doc["dataset"]["synthetic"])
        except (TypeError, KeyError, InvalidSpec) as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from None

    def model_spec(self, data: SyntheticSpec) -> ModelSpec:
        m = self.doc["model"]
        try:
            if "spec" in m:
                spec = spec_from_dict(m["spec"])
            elif m.get("zoo") == "tiny_conv":
                spec = tiny_conv(data.num_classes, data.image_size, 1, **m.get("args", {}))
            else:
                raise ConfigError(f"unknown model {m.get('zoo')!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad model: {exc}") from None
        if spec.input_shape != (data.image_size, data.image_size, 1) or spec.num_classes != data.num_classes:
            raise ConfigError("model input/output shape does not match the dataset")
        return spec

    def digest(self) -> str:
        """First 12 hex digits of the SHA-256 of the canonical config, output directory excluded."""
        body = {k: v for k, v in self.doc.items() if k != "out"}
        canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    @property
    def run_dir(self) -> Path:
        return Path(self.doc["out"]) / self.digest()
