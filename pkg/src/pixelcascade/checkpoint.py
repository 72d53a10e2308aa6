"""Parameter checkpoints: a plain-text manifest over raw float64 blobs.

Layout: a magic line, a tensor count, one `name dim,dim,...` line per
tensor (sorted by name so identical parameters always produce identical
bytes), a `data` line, then the little-endian float64 payloads in manifest
order.
"""

from __future__ import annotations

import numpy as np

MAGIC = "PIXELCASCADE-CKPT v1"


class CheckpointMismatch(Exception):
    """Checkpoint does not fit the model it is being loaded into."""


def _as_array(value) -> np.ndarray:
    data = getattr(value, "data", value)
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


def save_checkpoint(params: dict, path) -> None:
    arrays = {name: _as_array(v) for name, v in params.items()}
    for name in arrays:
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"bad tensor name {name!r}")
    names = sorted(arrays)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}\n".encode("ascii"))
        fh.write(f"tensors {len(names)}\n".encode("ascii"))
        for name in names:
            dims = ",".join(str(d) for d in arrays[name].shape)
            fh.write(f"{name} {dims}\n".encode("ascii"))
        fh.write(b"data\n")
        for name in names:
            fh.write(arrays[name].astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic line)")
        count_line = fh.readline().decode("ascii").rstrip("\n")
        kind, _, count_text = count_line.partition(" ")
        if kind != "tensors" or not count_text.isdigit():
            raise ValueError(f"{path}: malformed tensor count {count_line!r}")
        manifest = []
        for _ in range(int(count_text)):
            line = fh.readline().decode("ascii").rstrip("\n")
            name, _, dims_text = line.partition(" ")
            if not name or not dims_text:
                raise ValueError(f"{path}: malformed manifest line {line!r}")
            dims = tuple(int(d) for d in dims_text.split(","))
            manifest.append((name, dims))
        if fh.readline() != b"data\n":
            raise ValueError(f"{path}: missing data marker")
        out = {}
        for name, dims in manifest:
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            blob = fh.read(n * 8)
            if len(blob) != n * 8:
                raise ValueError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(blob, dtype="<f8").astype(
                np.float64).reshape(dims)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return out


def load_into_model(model, source) -> None:
    """Copy checkpoint tensors into the model's parameters in place.

    `source` is a path or an already-loaded name->array dict. Name or shape
    disagreements raise CheckpointMismatch listing every offender.
    """
    loaded = source if isinstance(source, dict) else load_checkpoint(source)
    problems = []
    for name in sorted(set(model.params) - set(loaded)):
        problems.append(f"missing tensor {name}")
    for name in sorted(set(loaded) - set(model.params)):
        problems.append(f"unexpected tensor {name}")
    for name in sorted(set(loaded) & set(model.params)):
        want = model.params[name].data.shape
        got = loaded[name].shape
        if want != got:
            problems.append(f"shape mismatch for {name}: "
                            f"checkpoint {got}, model {want}")
    if problems:
        raise CheckpointMismatch("; ".join(problems))
    for name, arr in loaded.items():
        model.params[name].data[...] = arr
