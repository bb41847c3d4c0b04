"""Image feature files: flat little-endian float32 [K x D] grids with a JSON
sidecar {k, d, checksum}. A seeded synthetic generator produces valid files
for tests and the desk-scale corpus."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np


class FeatureError(Exception):
    pass


def _sidecar_path(path):
    return path + ".json"


def save_features(grid, path):
    grid = np.ascontiguousarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise FeatureError("feature grid must be 2-D [K x D]")
    blob = grid.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    sidecar = {
        "k": grid.shape[0],
        "d": grid.shape[1],
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_features(path):
    with open(_sidecar_path(path), encoding="utf-8") as fh:
        sidecar = json.load(fh)
    with open(path, "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != sidecar["checksum"]:
        raise FeatureError(f"feature checksum mismatch for {path}")
    grid = np.frombuffer(blob, dtype="<f4").reshape(sidecar["k"], sidecar["d"])
    if not np.all(np.isfinite(grid)):
        raise FeatureError(f"non-finite feature values in {path}")
    return grid.astype(np.float32)


def synthetic_features(k, d, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=(k, d)).astype(np.float32)


class FeatureStore:
    """Caches feature grids by path, resolving relative refs against a root."""

    def __init__(self, root=""):
        self.root = root
        self._cache = {}

    def get(self, ref):
        if ref not in self._cache:
            path = ref if os.path.isabs(ref) else os.path.join(self.root, ref)
            self._cache[ref] = load_features(path)
        return self._cache[ref]
