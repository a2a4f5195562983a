"""Parameter checkpoints: a text manifest followed by little-endian float32 data.

Layout::

    LRHE-CHECKPOINT 1
    meta <json object>
    param <name> <dim0>x<dim1>...
    ...
    end
    <raw float32 bytes, parameters in manifest order>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from latent_rhe.errors import UsageError

MAGIC = "LRHE-CHECKPOINT 1"


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    for name, arr in params.items():
        if " " in name:
            raise UsageError(f"parameter names may not contain spaces: {name!r}")
        lines.append(f"param {name} {'x'.join(str(d) for d in arr.shape) or 'scalar'}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise UsageError(f"{path} is not a checkpoint file")
    header = raw[:cut].decode("utf-8").splitlines()
    offset = cut + len(marker)
    meta: dict = {}
    params: dict[str, np.ndarray] = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "param":
            name, dims = rest.split(" ")
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            count = int(np.prod(shape))
            params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * count
        else:
            raise UsageError(f"bad manifest line {line!r}")
    if offset != len(raw):
        raise UsageError(f"{path}: {len(raw) - offset} trailing bytes after parameter data")
    return params, meta
