"""Self-describing binary container for datasets and checkpoints.

Layout (documented here; this is the on-disk interface):

* line 1: ``MCULORA-<KIND> v1`` in ASCII, newline-terminated
* line 2: one UTF-8 JSON object ``{"meta": {...}, "arrays": [name, ...]}``,
  newline-terminated
* then one standard ``.npy`` blob per listed array name, concatenated in
  order.

``.npy`` blobs carry dtype/shape/order themselves and contain no timestamps,
so serializing the same content twice yields byte-identical files and a
round-trip reproduces every array bitwise. Files are written atomically
(write to a temporary sibling, then rename).
"""

from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np

from .errors import ContractError

_PREFIX = "MCULORA-"
_VERSION = "v1"


def save_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    header = {"meta": meta, "arrays": list(arrays.keys())}
    buf = io.BytesIO()
    buf.write(f"{_PREFIX}{kind.upper()} {_VERSION}\n".encode("ascii"))
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    buf.write(b"\n")
    for name, arr in arrays.items():
        np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_container(path, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").strip()
        if not magic.startswith(_PREFIX) or not magic.endswith(_VERSION):
            raise ContractError(f"{path}: not a mculora container (magic line {magic!r})")
        kind = magic[len(_PREFIX):].split()[0].lower()
        if expected_kind is not None and kind != expected_kind.lower():
            raise ContractError(f"{path}: expected a {expected_kind} container, found {kind}")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {name: np.load(fh, allow_pickle=False) for name in header["arrays"]}
    return kind, header["meta"], arrays
