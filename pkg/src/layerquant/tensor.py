"""Dense tensors, the named-tensor container format, and the in-repo RNG.

Tensors are plain numpy arrays restricted to float32/float16 for weights.
The container layout is the safetensors one:

    [u64 little-endian header length N][N bytes UTF-8 JSON header][payload]

where the header maps tensor name -> {"dtype", "shape", "data_offsets"} and
may carry a "__metadata__" string map.  Offsets are relative to the end of
the header.  Names are written in lexicographic order, the header JSON is
emitted with sorted keys and no whitespace, then space-padded to a multiple
of 8 bytes, so output bytes are a pure function of the map.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import FormatError, InvalidInput, IoError, UnsupportedDtype

WEIGHT_DTYPES = (np.dtype(np.float32), np.dtype(np.float16))

# Integer dtypes exist only for the auxiliary tensors of quantized containers.
_DTYPE_TAGS = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "U8": np.dtype("u1"),
    "I32": np.dtype("<i4"),
    "I64": np.dtype("<i8"),
}
_TAG_OF = {dt: tag for tag, dt in _DTYPE_TAGS.items()}


def dtype_tag(dtype: np.dtype) -> str:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    try:
        return _TAG_OF[dt]
    except KeyError:
        raise UnsupportedDtype(f"dtype {np.dtype(dtype)} is not supported") from None


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Copy ``data`` into a C-contiguous weight tensor, rejecting unsupported dtypes."""
    dtype = np.dtype(dtype)
    if dtype not in WEIGHT_DTYPES:
        raise UnsupportedDtype(f"weight tensors must be float32 or float16, got {dtype}")
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        raise InvalidInput("tensors need at least one dimension")
    arr = np.ascontiguousarray(arr)
    if any(d <= 0 for d in arr.shape):
        raise InvalidInput(f"shape {arr.shape} has a non-positive dimension")
    return arr


@dataclass
class NamedTensorMap:
    """Name -> tensor mapping plus a string metadata map, iterated in name order."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: self.tensors[k] for k in sorted(self.tensors)}
        self.metadata = {str(k): str(v) for k, v in sorted(self.metadata.items())}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def equals(self, other: "NamedTensorMap") -> bool:
        if list(self.tensors) != list(other.tensors) or self.metadata != other.metadata:
            return False
        for name, t in self.tensors.items():
            o = other.tensors[name]
            if t.dtype != o.dtype or t.shape != o.shape or t.tobytes() != o.tobytes():
                return False
        return True


def encode_container(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    header: dict[str, object] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = dtype_tag(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        header[name] = {"dtype": tag, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode_container(buf: bytes) -> NamedTensorMap:
    if len(buf) < 8:
        raise FormatError(f"file too short for header length field ({len(buf)} bytes)")
    (n,) = struct.unpack_from("<Q", buf, 0)
    if n > len(buf) - 8:
        raise FormatError(f"header length {n} at offset 0 exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header at offset 8 is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header at offset 8 is not a JSON object")

    payload = memoryview(buf)[8 + n :]
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise FormatError("__metadata__ must be a string-to-string map")

    extents = []
    tensors = {}
    for name, info in header.items():
        try:
            tag = info["dtype"]
            shape = [int(d) for d in info["shape"]]
            begin, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"tensor {name!r}: malformed header entry") from None
        if tag not in _DTYPE_TAGS:
            raise UnsupportedDtype(f"tensor {name!r}: unsupported dtype {tag!r}")
        dt = _DTYPE_TAGS[tag]
        if any(d < 0 for d in shape):
            raise FormatError(f"tensor {name!r}: negative dimension in {shape}")
        if not 0 <= begin <= end <= len(payload):
            raise FormatError(
                f"tensor {name!r}: extent [{begin},{end}) out of bounds at file offset {8 + n + begin}"
                f" (payload is {len(payload)} bytes)"
            )
        if end - begin != math.prod(shape) * dt.itemsize:
            raise FormatError(f"tensor {name!r}: extent size {end - begin} does not match shape {shape}")
        extents.append((begin, end, name))
        arr = np.frombuffer(payload[begin:end], dtype=dt).reshape(shape).copy()
        if dt in WEIGHT_DTYPES and not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name!r} contains non-finite values")
        tensors[name] = arr

    extents.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(extents, extents[1:]):
        if b1 < e0:
            raise FormatError(f"tensors {n0!r} and {n1!r} overlap at file offset {8 + n + b1}")
    return NamedTensorMap(tensors, metadata)


def save_container(tmap: NamedTensorMap, path) -> None:
    data = encode_container(tmap.tensors, tmap.metadata)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_container(path) -> NamedTensorMap:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return decode_container(buf)


# -- RNG ---------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class Rng:
    """SplitMix64 (Steele, Lea & Flood 2014).

    The i-th output (1-based) is ``mix(seed + i * 0x9E3779B97F4A7C15 mod 2**64)``,
    which makes the generator counter-based: blocks of draws are computed in
    one vectorized pass and equal the sequential stream exactly.  Uniform
    floats take the top 53 bits: ``(z >> 11) * 2**-53``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def spawn(self, worker: int) -> "Rng":
        return Rng(self.seed ^ int(worker))

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def next_uniform(self) -> float:
        return float(self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller, one normal per pair of uniforms."""
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def permutation(self, n: int) -> list[int]:
        perm = list(range(n))
        u = self.uniform(max(n - 1, 0))
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[step] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def rng_next_uniform(rng: Rng) -> float:
    return rng.next_uniform()
