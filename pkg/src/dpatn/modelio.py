"""Structured-text files: network models, GMM models and dataset manifests.

Models are JSON documents. Python's float repr is the shortest string that
reads back to the same double, so coefficients round-trip bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gmm import GMMModel
from .network import NetworkParams, StageParams

MODEL_FORMAT = "dpatn-model"
MODEL_VERSION = 1


class ModelFileError(ValueError):
    """A model, GMM or manifest file is missing, malformed or of the wrong version."""


def model_to_dict(params, meta=None):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "shape": {
            "n_stages": params.n_stages,
            "n_filters": params.n_filters,
            "kernel_size": params.kernel_size,
            "n_controls": params.n_controls,
            "convention": params.convention,
            "tied": params.tied,
        },
        "stages": [
            {
                "alpha": s.alpha.tolist(),
                "alpha_check": None if s.tied else s.alpha_check.tolist(),
                "q": s.q.tolist(),
                "lambda_p": s.lambda_p,
            }
            for s in params.stages
        ],
        "meta": meta or {},
    }


def model_from_dict(d):
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ModelFileError("not a model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelFileError(f"unsupported model file version {d.get('version')!r}")
    try:
        shape = d["shape"]
        stages = [StageParams(np.array(s["alpha"], dtype=np.float64), np.array(s["q"], dtype=np.float64),
                              s["lambda_p"],
                              None if s["alpha_check"] is None else np.array(s["alpha_check"], dtype=np.float64))
                  for s in d["stages"]]
        params = NetworkParams(stages, shape["convention"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed model file: {exc}") from exc
    declared = (shape.get("n_stages"), shape.get("n_filters"), shape.get("kernel_size"),
                shape.get("n_controls"), shape.get("tied"))
    actual = (params.n_stages, params.n_filters, params.kernel_size, params.n_controls, params.tied)
    if declared != actual:
        raise ModelFileError(f"declared shape {declared} does not match coefficients {actual}")
    return params


def _read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ModelFileError(f"{path}: no such file") from exc
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: {exc}") from exc


def _write_json(obj, path):
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, allow_nan=False) + "\n")
    return path


def save_model(params, path, meta=None):
    return _write_json(model_to_dict(params, meta), path)


def load_model(path):
    return model_from_dict(_read_json(path))


def load_model_meta(path):
    return _read_json(path).get("meta", {})


def save_gmm(model, path):
    return _write_json(model.to_dict(), path)


def load_gmm(path):
    try:
        return GMMModel.from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- manifests

def write_manifest(rows, path):
    """One ``observation<TAB>target`` line per pair, paths relative to the manifest."""
    path = Path(path)
    lines = [f"{Path(o).as_posix()}\t{Path(t).as_posix()}" for o, t in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path):
    """Pairs of absolute paths; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelFileError(f"{path}: cannot read manifest: {exc}") from exc
    rows = []
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ModelFileError(f"{path}:{no}: expected two paths, found {len(parts)} fields")
        rows.append(tuple(path.parent / p for p in parts))
    if not rows:
        raise ModelFileError(f"{path}: manifest lists no pairs")
    return rows
