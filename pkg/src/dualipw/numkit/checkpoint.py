"""Versioned text checkpoints for named parameter arrays.

Format, one array per line after the header::

    dualipw-ckpt v1
    name<TAB>dim1,dim2<TAB>v1 v2 v3 ...

Values carry 17 significant digits, which round-trips float64 exactly.
Lines are sorted by name so identical parameters produce identical bytes.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "CHECKPOINT_HEADER"]

CHECKPOINT_HEADER = "dualipw-ckpt v1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    lines = [CHECKPOINT_HEADER]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        dims = ",".join(str(d) for d in arr.shape)
        values = " ".join("%.17g" % v for v in arr.reshape(-1))
        lines.append(f"{name}\t{dims}\t{values}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise CheckpointError(f"{path}: bad header {header!r}, expected {CHECKPOINT_HEADER!r}")
        params: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CheckpointError(f"{path}:{lineno}: expected 3 tab-separated fields")
            name, dims, values = parts
            if name in params:
                raise CheckpointError(f"{path}:{lineno}: duplicate parameter {name!r}")
            try:
                shape = tuple(int(d) for d in dims.split(","))
                arr = np.array(values.split(), dtype=np.float64)
            except ValueError as err:
                raise CheckpointError(f"{path}:{lineno}: {err}") from None
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(
                    f"{path}:{lineno}: {arr.size} values do not fill shape {shape}"
                )
            params[name] = arr.reshape(shape)
    return params
