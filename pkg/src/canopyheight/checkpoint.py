"""Parameter checkpoint file: text header + named little-endian float32 payloads.

Layout::

    CANOPYH-CKPT 1
    seed <int>
    step <int>
    params <count>
    param <name> <dim0> <dim1> ...
    ...
    END
    <concatenated '<f4' payloads in header order>
"""

from __future__ import annotations

import os

import numpy as np

MAGIC = "CANOPYH-CKPT"
VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], seed: int, step: int) -> None:
    lines = [f"{MAGIC} {VERSION}", f"seed {seed}", f"step {step}", f"params {len(arrays)}"]
    for name, arr in arrays.items():
        if " " in name:
            raise ValueError(f"parameter name {name!r} must not contain spaces")
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"param {name} {dims}".rstrip())
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header)
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, int]:
    """Returns (arrays, seed, step)."""
    with open(path, "rb") as f:
        first = f.readline().decode("ascii").split()
        if len(first) != 2 or first[0] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(first[1]) != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {first[1]}")
        seed = step = None
        shapes: list[tuple[str, tuple[int, ...]]] = []
        n_params = None
        while True:
            line = f.readline().decode("ascii").strip()
            if line == "END":
                break
            if not line:
                raise ValueError(f"{path}: truncated header")
            key, *rest = line.split()
            if key == "seed":
                seed = int(rest[0])
            elif key == "step":
                step = int(rest[0])
            elif key == "params":
                n_params = int(rest[0])
            elif key == "param":
                shapes.append((rest[0], tuple(int(d) for d in rest[1:])))
            else:
                raise ValueError(f"{path}: unknown header key {key!r}")
        if seed is None or step is None or n_params is None or len(shapes) != n_params:
            raise ValueError(f"{path}: incomplete header")
        arrays = {}
        for name, shape in shapes:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return arrays, seed, step
