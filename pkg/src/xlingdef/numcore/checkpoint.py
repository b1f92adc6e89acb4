"""Parameter checkpoint files.

A checkpoint is a pair of files sharing a prefix:

  <prefix>.json  manifest: format tag, meta dict, and one entry per
                 parameter with name, shape, and byte offset into the blob
  <prefix>.bin   all parameter arrays concatenated as little-endian f64,
                 row-major, in manifest order

Parameters are written in sorted-name order so identical parameter dicts
produce byte-identical files.
"""

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

FORMAT_TAG = "xlingdef-params-v1"


def _part(prefix: Path, suffix: str) -> Path:
    # append, never replace: a dotted prefix like model.best must not
    # collapse to model.json
    return prefix.parent / (prefix.name + suffix)


def save_checkpoint(prefix, params: dict[str, Tensor], meta: dict | None = None) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": FORMAT_TAG, "meta": meta or {}, "params": entries}
    with open(_part(prefix, ".json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(_part(prefix, ".bin"), "wb") as f:
        for c in chunks:
            f.write(c)


def load_checkpoint(prefix) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    with open(_part(prefix, ".json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"not a parameter checkpoint: {prefix}")
    blob = _part(prefix, ".bin").read_bytes()
    params: dict[str, np.ndarray] = {}
    for ent in manifest["params"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=ent["offset"])
        params[ent["name"]] = arr.reshape(shape).astype(np.float64)
    return params, manifest["meta"]


def restore_into(params: dict[str, Tensor], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter dict, validating names
    and shapes both ways."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={missing} extra={extra}")
    for name, t in params.items():
        if loaded[name].shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{loaded[name].shape} vs {t.data.shape}")
        t.data[...] = loaded[name]
