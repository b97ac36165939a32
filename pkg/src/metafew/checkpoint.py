"""Single-file checkpoint format.

Layout: a text header followed by one binary blob.

    METAFT-CKPT v1\n
    tensors <count>\n
    <name> f32 <d0xd1x...> <byte-offset>\n   (one line per tensor)
    END\n
    <raw little-endian float32 data, concatenated in manifest order>

Offsets are relative to the first byte after the END line. Tensor names
keep their insertion order, so saving the same values always produces the
same bytes.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

MAGIC = "METAFT-CKPT v1"


def _shape_token(shape: tuple) -> str:
    return "x".join(str(int(d)) for d in shape) if shape else "-"


def _parse_shape(token: str) -> tuple:
    return () if token == "-" else tuple(int(d) for d in token.split("x"))


def save_checkpoint(path, tensors: dict) -> None:
    """Write named tensors (Tensor or ndarray values) as float32."""
    arrays = {}
    for name, value in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"bad tensor name {name!r}: must be non-empty, no whitespace")
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.size == 0:
            raise ValueError(f"tensor {name!r} is empty")
        # keep the original shape: ascontiguousarray would turn 0-d into 1-d
        arrays[name] = (np.ascontiguousarray(arr, dtype="<f4"), arr.shape)
    lines = [MAGIC, f"tensors {len(arrays)}"]
    offset = 0
    for name, (arr, shape) in arrays.items():
        lines.append(f"{name} f32 {_shape_token(shape)} {offset}")
        offset += arr.nbytes
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        for arr, _ in arrays.values():
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as {name: float32 ndarray}, insertion-ordered."""
    with open(path, "rb") as f:
        raw = f.read()
    magic_line = MAGIC.encode("ascii") + b"\n"
    if not raw.startswith(magic_line):
        raise ValueError(f"{path}: not a {MAGIC} file")
    end_marker = b"\nEND\n"
    end = raw.find(end_marker)
    if end < 0:
        raise ValueError(f"{path}: truncated header, no END marker")
    header = raw[: end].decode("ascii").split("\n")
    blob = raw[end + len(end_marker):]
    count_line = header[1].split()
    if len(count_line) != 2 or count_line[0] != "tensors":
        raise ValueError(f"{path}: malformed count line {header[1]!r}")
    count = int(count_line[1])
    manifest = header[2:]
    if len(manifest) != count:
        raise ValueError(f"{path}: manifest has {len(manifest)} lines, header promises {count}")
    out = {}
    for line in manifest:
        fields = line.split()
        if len(fields) != 4 or fields[1] != "f32":
            raise ValueError(f"{path}: malformed manifest line {line!r}")
        name, _, shape_token, offset_token = fields
        shape = _parse_shape(shape_token)
        offset = int(offset_token)
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: tensor {name!r} runs past end of file")
        out[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
    return out
