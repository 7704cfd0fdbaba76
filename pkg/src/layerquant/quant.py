"""Round-to-nearest weight quantization kernels and bit packing.

Schemes
-------
group_affine
    Flatten row-major, split into groups of ``group_size`` consecutive
    elements (the last group may be short).  Each group stores
    ``shift = min`` and ``scale = (max - min) / (2**bits - 1)`` as float32 and
    codes ``round((x - shift) / scale)`` clamped to ``[0, 2**bits - 1]``.
    A constant group gets ``scale = 1`` and all-zero codes.
symmetric_per_tensor / symmetric_per_channel
    int8 only.  ``scale = max|x| / 127`` over the tensor or over each slice
    along ``axis``; codes ``clamp(round(x / scale), -127, 127)`` are stored
    offset by 128.  Shifts are zero.
outlier_affine
    The ``ceil(fraction * n)`` largest-magnitude elements (ties to the lower
    flat index) are kept as float16; the rest is group-affine quantized with
    the outlier positions excluded from the group min/max and given code 0.

Rounding is half away from zero everywhere.  Group statistics are taken in
float32 (exact for min/max); code and reconstruction arithmetic is float64,
then cast to float32, so a scalar Python loop reproduces the vectorized
kernels bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInput

SCHEMES = ("group_affine", "symmetric_per_tensor", "symmetric_per_channel", "outlier_affine")
AFFINE_BITS = (2, 4, 8)
DEFAULT_GROUP_SIZE = 128


@dataclass(frozen=True)
class GroupAffineParams:
    bits: int = 4
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self):
        if self.bits not in AFFINE_BITS:
            raise InvalidInput(f"bits must be one of {AFFINE_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise InvalidInput(f"group_size must be >= 1, got {self.group_size}")


@dataclass(frozen=True)
class SymmetricParams:
    bits: int = 8
    axis: int | None = None  # None: per tensor

    def __post_init__(self):
        if self.bits != 8:
            raise InvalidInput("symmetric quantization is int8 only")


@dataclass
class QuantizedTensor:
    packed: np.ndarray  # uint8, ceil(n * bits / 8) bytes
    bits: int
    group_size: int
    scales: np.ndarray  # float32, one per group (or channel)
    shifts: np.ndarray  # float32
    shape: tuple[int, ...]
    scheme: str
    outlier_idx: np.ndarray | None = None  # int32, strictly increasing
    outlier_val: np.ndarray | None = None  # float16
    axis: int | None = None

    @property
    def n_elems(self) -> int:
        return math.prod(self.shape)

    @property
    def n_outliers(self) -> int:
        return 0 if self.outlier_idx is None else len(self.outlier_idx)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.bits, self.n_elems)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def _check_finite(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.floating):
        raise InvalidInput(f"expected a floating tensor, got {t.dtype}")
    if np.isnan(t).any():
        raise InvalidInput("tensor contains NaN")
    if np.isinf(t).any():
        raise InvalidInput("tensor contains Inf")
    if t.size == 0:
        raise InvalidInput("cannot quantize an empty tensor")
    return t.astype(np.float32).ravel()


# -- packing -----------------------------------------------------------------


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack unsigned codes LSB-first into bytes, in flat order."""
    if bits not in AFFINE_BITS:
        raise InvalidInput(f"cannot pack {bits}-bit codes")
    c = np.asarray(codes, dtype=np.int64).ravel()
    if c.size and (c.min() < 0 or c.max() >= 1 << bits):
        raise InvalidInput(f"code out of range for {bits} bits")
    per = 8 // bits
    pad = -c.size % per
    c = np.concatenate([c, np.zeros(pad, np.int64)]).reshape(-1, per)
    shifts = np.arange(per, dtype=np.int64) * bits
    return (c << shifts).sum(axis=1).astype(np.uint8)


def unpack_codes(packed, bits: int, n: int) -> np.ndarray:
    if bits not in AFFINE_BITS:
        raise InvalidInput(f"cannot unpack {bits}-bit codes")
    b = np.frombuffer(bytes(packed), dtype=np.uint8) if isinstance(packed, (bytes, bytearray)) else np.asarray(packed, np.uint8)
    if b.size * 8 < n * bits:
        raise InvalidInput(f"{b.size} bytes cannot hold {n} {bits}-bit codes")
    per = 8 // bits
    shifts = np.arange(per, dtype=np.uint8) * bits
    out = (b[:, None] >> shifts) & np.uint8((1 << bits) - 1)
    return out.ravel()[:n].astype(np.int64)


# -- kernels -----------------------------------------------------------------


def _affine_codes(flat: np.ndarray, bits: int, group_size: int, keep: np.ndarray | None):
    n = flat.size
    starts = np.arange(0, n, group_size)
    if keep is None:
        lo = np.minimum.reduceat(flat, starts)
        hi = np.maximum.reduceat(flat, starts)
    else:
        lo = np.minimum.reduceat(np.where(keep, flat, np.float32(np.inf)), starts)
        hi = np.maximum.reduceat(np.where(keep, flat, np.float32(-np.inf)), starts)
        empty = ~np.isfinite(lo)
        lo[empty] = 0.0
        hi[empty] = 0.0
    levels = (1 << bits) - 1
    lo64, hi64 = lo.astype(np.float64), hi.astype(np.float64)
    scales = ((hi64 - lo64) / levels).astype(np.float32)
    scales[(hi == lo) | (scales == 0)] = 1.0
    gid = np.arange(n) // group_size
    v = (flat.astype(np.float64) - lo64[gid]) / scales.astype(np.float64)[gid]
    codes = np.clip(round_half_away(v), 0, levels).astype(np.int64)
    if keep is not None:
        codes[~keep] = 0
    return codes, scales, lo.astype(np.float32)


def quantize_group_affine(t, p: GroupAffineParams) -> QuantizedTensor:
    flat = _check_finite(t)
    codes, scales, shifts = _affine_codes(flat, p.bits, p.group_size, None)
    return QuantizedTensor(pack_codes(codes, p.bits), p.bits, p.group_size, scales, shifts,
                           tuple(np.shape(t)), "group_affine")


def quantize_symmetric_int8(t, p: SymmetricParams = SymmetricParams()) -> QuantizedTensor:
    flat = _check_finite(t)
    shape = tuple(np.shape(t))
    if p.axis is None:
        n_ch, axis = 1, None
        ch = np.zeros(flat.size, dtype=np.int64)
    else:
        axis = p.axis if p.axis >= 0 else p.axis + len(shape)
        if not 0 <= axis < len(shape):
            raise InvalidInput(f"axis {p.axis} invalid for shape {shape}")
        n_ch = shape[axis]
        ch = (np.arange(flat.size) // math.prod(shape[axis + 1 :])) % n_ch
    amax = np.zeros(n_ch, dtype=np.float32)
    np.maximum.at(amax, ch, np.abs(flat))
    scales = (amax.astype(np.float64) / 127.0).astype(np.float32)
    scales[(amax == 0) | (scales == 0)] = 1.0
    codes = np.clip(round_half_away(flat.astype(np.float64) / scales.astype(np.float64)[ch]), -127, 127)
    scheme = "symmetric_per_tensor" if axis is None else "symmetric_per_channel"
    return QuantizedTensor(pack_codes(codes.astype(np.int64) + 128, 8), 8, flat.size // n_ch, scales,
                           np.zeros(n_ch, np.float32), shape, scheme, axis=axis)


def select_outliers(flat: np.ndarray, fraction: float) -> np.ndarray:
    """Flat indices of the ceil(fraction*n) largest |x|, ties to the lower index; sorted."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInput(f"outlier fraction must be in [0, 1], got {fraction}")
    k = math.ceil(fraction * flat.size)
    order = np.lexsort((np.arange(flat.size), -np.abs(flat.astype(np.float64))))
    return np.sort(order[:k]).astype(np.int32)


def quantize_outlier_affine(t, p: GroupAffineParams, outlier_fraction: float) -> QuantizedTensor:
    flat = _check_finite(t)
    idx = select_outliers(flat, outlier_fraction)
    keep = np.ones(flat.size, dtype=bool)
    keep[idx] = False
    codes, scales, shifts = _affine_codes(flat, p.bits, p.group_size, keep)
    return QuantizedTensor(pack_codes(codes, p.bits), p.bits, p.group_size, scales, shifts,
                           tuple(np.shape(t)), "outlier_affine",
                           outlier_idx=idx, outlier_val=flat[idx].astype(np.float16))


def _scale_index(q: QuantizedTensor) -> np.ndarray:
    n = q.n_elems
    if q.scheme == "symmetric_per_tensor":
        return np.zeros(n, dtype=np.int64)
    if q.scheme == "symmetric_per_channel":
        return (np.arange(n) // math.prod(q.shape[q.axis + 1 :])) % q.shape[q.axis]
    return np.arange(n) // q.group_size


def dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = q.codes()
    if q.scheme.startswith("symmetric"):
        codes = codes - 128
    g = _scale_index(q)
    out = (codes * q.scales.astype(np.float64)[g] + q.shifts.astype(np.float64)[g]).astype(np.float32)
    if q.n_outliers:
        out[q.outlier_idx] = q.outlier_val.astype(np.float32)
    return out.reshape(q.shape)


# -- accounting --------------------------------------------------------------


def quantized_bytes(q: QuantizedTensor) -> int:
    """Exact storage: packed codes + float32 scale and shift per group + 6 bytes per outlier."""
    return int(q.packed.size) + 8 * int(q.scales.size) + 6 * q.n_outliers


def idealized_bytes(q: QuantizedTensor) -> float:
    return q.n_elems * q.bits / 8


# -- kernel selection --------------------------------------------------------

Quantizer = Callable[..., QuantizedTensor]


def rtn_kernel(w: np.ndarray, bits: int, group_size: int = DEFAULT_GROUP_SIZE,
               outlier_fraction: float = 0.0) -> QuantizedTensor:
    """Default per-layer quantizer.

    2/4-bit: group-wise affine (with outliers when a fraction is given).
    8-bit: symmetric per-channel over the output axis (last axis).
    """
    if outlier_fraction > 0:
        return quantize_outlier_affine(w, GroupAffineParams(bits, group_size), outlier_fraction)
    if bits == 8:
        return quantize_symmetric_int8(w, SymmetricParams(8, axis=np.ndim(w) - 1))
    return quantize_group_affine(w, GroupAffineParams(bits, group_size))


KERNELS: dict[str, Quantizer] = {"rtn": rtn_kernel}


def register_kernel(name: str, fn: Quantizer) -> None:
    """Plug in another backend (for example a Hessian-aware one) under ``name``."""
    KERNELS[name] = fn


def get_kernel(name: str) -> Quantizer:
    try:
        return KERNELS[name]
    except KeyError:
        raise InvalidInput(f"unknown quantization kernel {name!r}; known: {sorted(KERNELS)}") from None


# -- container encoding --------------------------------------------------------


def to_container_entries(name: str, q: QuantizedTensor) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    tensors = {f"{name}.qweight": q.packed.astype(np.uint8),
               f"{name}.scales": q.scales.astype(np.float32),
               f"{name}.shifts": q.shifts.astype(np.float32)}
    if q.n_outliers:
        tensors[f"{name}.outlier_idx"] = q.outlier_idx.astype(np.int32)
        tensors[f"{name}.outlier_val"] = q.outlier_val.astype(np.float16)
    meta = {f"{name}.bits": str(q.bits), f"{name}.group_size": str(q.group_size),
            f"{name}.scheme": q.scheme, f"{name}.shape": json.dumps(list(q.shape))}
    if q.axis is not None:
        meta[f"{name}.axis"] = str(q.axis)
    return tensors, meta


def from_container_entries(name: str, tensors, metadata) -> QuantizedTensor:
    has_out = f"{name}.outlier_idx" in tensors
    axis = metadata.get(f"{name}.axis")
    return QuantizedTensor(
        packed=tensors[f"{name}.qweight"],
        bits=int(metadata[f"{name}.bits"]),
        group_size=int(metadata[f"{name}.group_size"]),
        scales=tensors[f"{name}.scales"],
        shifts=tensors[f"{name}.shifts"],
        shape=tuple(json.loads(metadata[f"{name}.shape"])),
        scheme=metadata[f"{name}.scheme"],
        outlier_idx=tensors[f"{name}.outlier_idx"] if has_out else None,
        outlier_val=tensors[f"{name}.outlier_val"] if has_out else None,
        axis=None if axis is None else int(axis),
    )
