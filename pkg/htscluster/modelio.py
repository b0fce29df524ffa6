"""Model and config files.

A model file is canonical JSON: the per-level labels, centers and traces, the config that
produced them and a manifest binding the model to the dataset it was fitted on. Equal
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .cluster import ClusterConfig, LevelClusterModel, MultiLevelClusterModel
from .errors import ManifestMismatchError, ParseError, SchemaError, UsageError
from .hierarchy import HtsDataset, TimeSeries, dataset_fingerprint
from .runs import to_jsonable, atomic_write_json, build_manifest
from .sdtw import OptimizerConfig, SdtwConfig
from .transport import BarycenterConfig, DiscreteMeasure, OtConfig

logger = logging.getLogger(__name__)

MODEL_FORMAT = "htscluster-model/1"

_NESTED = {
    "sdtw": SdtwConfig,
    "ot": OtConfig,
    "barycenter": BarycenterConfig,
    "optimizer": OptimizerConfig,
}


def config_to_dict(cfg: ClusterConfig) -> Dict[str, Any]:
    out = asdict(cfg)
    # worker count never changes results
    out.pop("threads")
    out["k_per_level"] = {str(l): k for l, k in sorted(cfg.k_per_level.items())}
    return to_jsonable(out)


def _build(cls, obj: Any, where: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"'{where}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise UsageError(f"unknown keys in '{where}': {unknown}", {"keys": unknown})
    return cls(**obj)


def config_from_dict(obj: Any) -> ClusterConfig:
    """Inverse of ``config_to_dict``; partial dicts fill in defaults."""
    if not isinstance(obj, dict):
        raise SchemaError("cluster config must be an object")
    body = dict(obj)
    for name, cls in _NESTED.items():
        if name in body:
            body[name] = _build(cls, body[name], name)
    if "k_per_level" in body:
        try:
            body["k_per_level"] = {int(l): int(k) for l, k in dict(body["k_per_level"]).items()}
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"malformed k_per_level: {exc}") from exc
    return _build(ClusterConfig, body, "cluster")


def _atom_to_dict(atom) -> Dict[str, Any]:
    if isinstance(atom, TimeSeries):
        return {"id": atom.id, "values": atom.values}
    return _measure_to_dict(atom)


def _measure_to_dict(m: DiscreteMeasure) -> Dict[str, Any]:
    return {"atoms": [_atom_to_dict(a) for a in m.atoms], "weights": m.weights}


def _atom_from_dict(obj):
    if "values" in obj:
        return TimeSeries(str(obj["id"]), obj["values"])
    return _measure_from_dict(obj)


def _measure_from_dict(obj) -> DiscreteMeasure:
    return DiscreteMeasure(tuple(_atom_from_dict(a) for a in obj["atoms"]), np.asarray(obj["weights"]))


def level_to_dict(m: LevelClusterModel) -> Dict[str, Any]:
    return {
        "level": m.level,
        "kind": m.kind,
        "representation": m.representation,
        "keys": list(m.keys),
        "labels": m.labels,
        "raw_means": [_atom_to_dict(s) for s in m.raw_means],
        "barycenters": [_measure_to_dict(b) for b in m.barycenters],
        "loss_trace": m.loss_trace,
        "events": m.events,
        "converged": m.converged,
        "iterations": m.iterations,
        "outer_trace": m.outer_trace,
    }


def level_from_dict(obj: Dict[str, Any]) -> LevelClusterModel:
    return LevelClusterModel(
        level=int(obj["level"]),
        kind=obj["kind"],
        keys=[str(k) for k in obj["keys"]],
        labels=np.asarray(obj["labels"], dtype=np.int64),
        raw_means=[_atom_from_dict(s) for s in obj["raw_means"]],
        barycenters=[_measure_from_dict(b) for b in obj["barycenters"]],
        loss_trace=[float(v) for v in obj["loss_trace"]],
        events=list(obj["events"]),
        representation=obj.get("representation", "series"),
        converged=bool(obj["converged"]),
        iterations=int(obj["iterations"]),
        outer_trace=[float(v) for v in obj.get("outer_trace", [])],
    )


def model_to_dict(model: MultiLevelClusterModel, manifest: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Timings stay out so that equal runs give equal bytes."""
    return to_jsonable({
        "format": MODEL_FORMAT,
        "method": model.method,
        "config": config_to_dict(model.config),
        "levels": {str(l): level_to_dict(m) for l, m in sorted(model.per_level.items())},
        "manifest": manifest or {},
    })


def model_from_dict(obj: Any) -> MultiLevelClusterModel:
    if not isinstance(obj, dict) or obj.get("format") != MODEL_FORMAT:
        raise SchemaError(f"not a model file (expected format {MODEL_FORMAT})")
    try:
        per_level = {int(l): level_from_dict(m) for l, m in obj["levels"].items()}
        return MultiLevelClusterModel(per_level, config_from_dict(obj["config"]), obj["method"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model file: {exc!r}") from exc


def save_model(
    model: MultiLevelClusterModel,
    path: Union[str, Path],
    ds: Optional[HtsDataset] = None,
    command: str = "cluster",
) -> Dict[str, Any]:
    """Write the model with a manifest; returns the manifest."""
    inputs = {"dataset": dataset_fingerprint(ds)} if ds is not None else {}
    manifest = build_manifest(command, config_to_dict(model.config), model.config.seed, inputs)
    atomic_write_json(path, model_to_dict(model, manifest))
    logger.info(f"Model written to {path} (manifest {manifest['hash'][:12]})")
    return manifest


def read_json(path: Union[str, Path]) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}", {"path": str(path)}) from exc
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}", {"path": str(path)}) from exc


def load_model(path: Union[str, Path], ds: Optional[HtsDataset] = None) -> MultiLevelClusterModel:
    """Read a model; with ``ds`` given, refuse a model fitted on another dataset."""
    obj = read_json(path)
    model = model_from_dict(obj)
    if ds is not None:
        expected = obj.get("manifest", {}).get("inputs", {}).get("dataset")
        actual = dataset_fingerprint(ds)
        if expected != actual:
            raise ManifestMismatchError(
                "model was fitted on a different dataset",
                {"model_dataset": expected, "dataset": actual},
            )
    return model
