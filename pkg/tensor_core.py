# -*- coding: utf-8 -*-
# tensor_core.py: tensores 4-D (n, c, h, w), inicialización He y formato binario
from __future__ import annotations

import os
import zlib
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from config import resolve_dtype
from errors import (
    InvalidArgumentError,
    TensorFormatError,
    TensorLengthError,
    TensorOverflowError,
)

# Un Tensor4 es un np.ndarray row-major de 4 dimensiones (n, c, h, w).
Tensor4 = np.ndarray
Shape4 = Tuple[int, int, int, int]
PathLike = Union[str, os.PathLike]

# ========================= Formato binario =========================
MAGIC = b"ACUTNSR1"
DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
HEADER_SIZE = len(MAGIC) + 1 + 4 * 8
_U64_LIMIT = 2 ** 64


def _dtype_code(dtype: np.dtype) -> int:
    if dtype == np.float64:
        return 0
    if dtype == np.float32:
        return 1
    raise InvalidArgumentError(f"dtype no soportado para serializar: {dtype}")


def as_tensor4(a, dtype=None, name: str = "tensor", check_finite: bool = False) -> Tensor4:
    """Valida (y castea si hace falta) un array como Tensor4."""
    arr = np.asarray(a, dtype=dtype if dtype is not None else None)
    if arr.ndim != 4:
        raise InvalidArgumentError(f"{name}: se esperaban 4 dimensiones (n, c, h, w), llegó shape {arr.shape}")
    if min(arr.shape) < 1:
        raise InvalidArgumentError(f"{name}: todas las dimensiones deben ser >= 1, shape {arr.shape}")
    if arr.dtype not in (np.float64, np.float32):
        arr = arr.astype(resolve_dtype(None))
    if check_finite and not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name}: contiene NaN/Inf")
    return arr


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Stream PRNG determinístico por (seed, nombre de parámetro)."""
    if seed < 0:
        raise InvalidArgumentError(f"seed debe ser >= 0, llegó {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


def he_init(shape: Sequence[int], fan_in: int, seed: int, name: str = "weights", dtype=None) -> Tensor4:
    """N(0, 2/fan_in) i.i.d.; sólo depende de (shape, fan_in, seed, name)."""
    if fan_in <= 0:
        raise InvalidArgumentError(f"fan_in debe ser > 0, llegó {fan_in}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise InvalidArgumentError(f"shape inválido para he_init: {shape}")
    std = np.sqrt(2.0 / fan_in)
    values = rng_for(seed, name).normal(0.0, std, size=shape)
    return values.astype(resolve_dtype(None) if dtype is None else dtype)


# ========================= Lectura / escritura =========================
def write_tensor(path: PathLike, t: Tensor4) -> None:
    t = as_tensor4(t, name=str(path))
    code = _dtype_code(t.dtype)
    header = MAGIC + bytes([code]) + np.asarray(t.shape, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(t, dtype=DTYPE_CODES[code]).tobytes()
    p = Path(path)
    if p.parent and not p.parent.is_dir():
        p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(header + payload)


def read_tensor(path: PathLike) -> Tensor4:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise TensorFormatError(f"{path}: magic inválido {raw[:len(MAGIC)]!r}")
    if len(raw) < HEADER_SIZE:
        raise TensorLengthError(f"{path}: header truncado ({len(raw)} bytes)")
    code = raw[len(MAGIC)]
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"{path}: código de dtype desconocido {code}")
    dims = [int(d) for d in np.frombuffer(raw[len(MAGIC) + 1:HEADER_SIZE], dtype="<u8")]
    if min(dims) < 1:
        raise TensorFormatError(f"{path}: dimensiones nulas en el header {dims}")

    count = 1
    for d in dims:
        count *= d
    dtype = DTYPE_CODES[code]
    nbytes = count * dtype.itemsize
    if count >= _U64_LIMIT or nbytes >= _U64_LIMIT:
        raise TensorOverflowError(f"{path}: el producto de dims {dims} desborda 64 bits")

    payload = raw[HEADER_SIZE:]
    if len(payload) != nbytes:
        raise TensorLengthError(
            f"{path}: payload de {len(payload)} bytes, se esperaban {nbytes} para dims {dims}"
        )
    native = np.float64 if code == 0 else np.float32
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(native)
