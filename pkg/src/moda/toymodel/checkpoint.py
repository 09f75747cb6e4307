"""JSON checkpoints.

Layout (``schema_version`` 1)::

    {"schema_version": 1,
     "config": {...ModelConfig fields...},
     "params": {name: {"shape": [...], "data": [row-major floats]}}}

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces every float64 bit for bit.
"""
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import IoFailure
from ..modmask import MaskSpec
from .config import BlockConfig, ModelConfig
from .model import ModelState

SCHEMA_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "value"):
        return obj.value
    return obj


def config_to_dict(config):
    return _jsonable(asdict(config))


def config_from_dict(doc):
    block = dict(doc["block"])
    block["mask_spec"] = MaskSpec(**block["mask_spec"])
    return ModelConfig(block=BlockConfig(**block), n_blocks=doc["n_blocks"],
                       layout=tuple(tuple(x) for x in doc["layout"]),
                       n_classes=doc["n_classes"])


def dumps(state):
    params = {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
              for k, v in sorted(state.params.items())}
    return json.dumps({"schema_version": SCHEMA_VERSION,
                       "config": config_to_dict(state.config), "params": params})


def loads(text):
    doc = json.loads(text)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    return ModelState(config_from_dict(doc["config"]), params)


def save(state, path):
    try:
        Path(path).write_text(dumps(state))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load(path):
    try:
        return loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
