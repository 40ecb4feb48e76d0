"""Named-array container used for client checkpoints.

Layout::

    EVIFED-ARRAYS 1\\n
    <header: one line of JSON>\\n
    <payload: little-endian float64 values, arrays back to back>

The header is ``{"meta": {...}, "arrays": [{"name", "shape", "offset", "count"}]}``
with ``offset``/``count`` in values (not bytes) from the payload start.  Keys
are sorted and no timestamps are written, so equal content gives equal bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from evifed.errors import InvalidInputError

MAGIC = b"EVIFED-ARRAYS 1\n"


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, payload, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size)})
        payload.append(arr.ravel().tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for chunk in payload:
            fh.write(chunk)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise InvalidInputError(f"{path}: not an evifed array container")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    values = np.frombuffer(raw[end + 1:], dtype="<f8")
    out = {}
    for e in header["arrays"]:
        chunk = values[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise InvalidInputError(f"{path}: truncated payload for {e['name']}")
        out[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return out, header["meta"]


def save_client(path, client, backbone_seed: int) -> None:
    arrays = {f"prompt.{k}": v for k, v in client.prompts.named_arrays().items()}
    arrays.update(client.head.named_arrays())
    meta = {"client_id": client.client_id, "backbone_seed": backbone_seed,
            "prompt_len": client.prompts.prompt_len,
            "prompted_blocks": list(client.prompts.prompted_blocks)}
    write_arrays(path, arrays, meta)


def load_client_into(path, client) -> dict:
    """Overwrite a client's prompts and head from a checkpoint; returns the metadata."""
    arrays, meta = read_arrays(path)
    names = list(client.prompts.named_arrays())
    flat = np.concatenate([arrays[f"prompt.{n}"].ravel() for n in names]) if names else np.zeros(0)
    client.prompts = client.prompts.from_flat(flat)
    for t, key in zip(client.head.tensors(), ("head.w1", "head.b1", "head.w2", "head.b2")):
        t.data = arrays[key].reshape(t.shape).copy()
    return meta
