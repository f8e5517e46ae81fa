"""Binary file formats for tensors, partitions and layers.

Tensor file ("EMOE"), all integers little-endian:

    magic   4 bytes  "EMOE"
    version u32      (= 1; unknown versions are rejected)
    count   u32      number of entries
    entry   repeated:
        name_len u16, name utf-8 bytes
        dtype    u8   0 = float32, 1 = float64
        ndim     u8   1 or 2
        dims     u32 each
        payload  row-major little-endian scalars

Partition file ("EMOP"):

    magic "EMOP", version u32 (= 1), d u32, n_experts u32,
    assignment d x u32 expert ids.

Readers validate everything (magic, version, lengths, finiteness,
balance) before constructing objects; errors cite the byte offset.
"""

from __future__ import annotations

import struct
from typing import Iterable, Mapping

import numpy as np

from .clustering import Partition
from .errors import ConstraintError, FormatError
from .ffn import FfnLayer
from .moe import EmoeLayer, GateMode, split
from .numerics import ActivationKind

TENSOR_MAGIC = b"EMOE"
PARTITION_MAGIC = b"EMOP"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {ActivationKind.RELU: 0, ActivationKind.GELU_TANH: 1}
_KIND_FOR_CODE = {v: k for k, v in _CODE_FOR_KIND.items()}
_GATE_MODE_CODES = {GateMode.AVG_K: 0, GateMode.LEARNED: 1}
_GATE_MODE_FOR_CODE = {v: k for k, v in _GATE_MODE_CODES.items()}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return 0
    if arr.dtype == np.float64:
        return 1
    raise ValueError(f"unsupported dtype {arr.dtype}; only float32/float64")


def write_tensors(
    path: str,
    tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
) -> None:
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    blob = bytearray()
    blob += TENSOR_MAGIC
    blob += struct.pack("<II", VERSION, len(items))
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.ndim not in (1, 2):
            raise ValueError(f"tensor {name!r} must be 1-D or 2-D, got {arr.ndim}-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        code = _dtype_code(arr)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        blob += struct.pack("<H", len(name_bytes)) + name_bytes
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


class _Cursor:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at offset {self.offset}"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    cur = _Cursor(data, path)
    magic = cur.take(4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    version, count = cur.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_start = cur.offset
        (name_len,) = cur.unpack("<H", "name length")
        name = cur.take(name_len, "name").decode("utf-8")
        code, ndim = cur.unpack("<BB", "dtype/ndim")
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: unknown dtype code {code} at offset {entry_start}")
        if ndim not in (1, 2):
            raise FormatError(f"{path}: bad ndim {ndim} at offset {entry_start}")
        dims = cur.unpack(f"<{ndim}I", "dims")
        dtype = _DTYPE_CODES[code]
        n_items = int(np.prod(dims))
        payload = cur.take(n_items * dtype.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
        if not np.all(np.isfinite(arr)):
            raise FormatError(
                f"{path}: tensor {name!r} at offset {entry_start} contains NaN/Inf"
            )
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr
    if cur.offset != len(data):
        raise FormatError(f"{path}: {len(data) - cur.offset} trailing bytes at offset {cur.offset}")
    return out


def write_partition(path: str, partition: Partition) -> None:
    blob = PARTITION_MAGIC + struct.pack(
        "<III", VERSION, partition.d, partition.n_experts
    )
    blob += partition.assignment.astype("<u4").tobytes()
    with open(path, "wb") as f:
        f.write(blob)


def read_partition(path: str) -> Partition:
    with open(path, "rb") as f:
        data = f.read()
    cur = _Cursor(data, path)
    magic = cur.take(4, "magic")
    if magic != PARTITION_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    version, d, n_experts = cur.unpack("<III", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    raw = cur.take(4 * d, "assignment")
    if cur.offset != len(data):
        raise FormatError(f"{path}: trailing bytes at offset {cur.offset}")
    assignment = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    try:
        return Partition(assignment=assignment, n_experts=n_experts)
    except (ConstraintError, ValueError) as exc:
        raise FormatError(f"{path}: invalid partition: {exc}") from exc


def write_ffn(path: str, layer: FfnLayer) -> None:
    meta = np.array(
        [layer.h, layer.d, _CODE_FOR_KIND[layer.activation]], dtype=np.float64
    )
    items: list[tuple[str, np.ndarray]] = [
        ("K", layer.k),
        ("V", layer.v),
        ("meta", meta),
    ]
    if np.any(layer.b_k != 0):
        items.append(("b_k", layer.b_k))
    if np.any(layer.b_v != 0):
        items.append(("b_v", layer.b_v))
    write_tensors(path, items)


def read_ffn(path: str) -> FfnLayer:
    tensors = read_tensors(path)
    for required in ("K", "V", "meta"):
        if required not in tensors:
            raise FormatError(f"{path}: missing tensor {required!r}")
    meta = tensors["meta"]
    if meta.shape != (3,):
        raise FormatError(f"{path}: meta must have 3 entries, got shape {meta.shape}")
    h, d, act_code = (int(v) for v in meta)
    if act_code not in _KIND_FOR_CODE:
        raise FormatError(f"{path}: unknown activation code {act_code}")
    k, v = tensors["K"], tensors["V"]
    if k.shape != (h, d) or v.shape != (d, h):
        raise FormatError(
            f"{path}: meta says h={h}, d={d} but K is {k.shape} and V is {v.shape}"
        )
    b_k = tensors.get("b_k")
    b_v = tensors.get("b_v")
    if b_k is not None:
        b_k = b_k.astype(k.dtype)
    if b_v is not None:
        b_v = b_v.astype(k.dtype)
    try:
        return FfnLayer(k=k, v=v, activation=_KIND_FOR_CODE[act_code], b_k=b_k, b_v=b_v)
    except Exception as exc:
        raise FormatError(f"{path}: invalid layer: {exc}") from exc


def partition_sidecar(path: str) -> str:
    return path + ".part"


def write_emoe(path: str, emoe: EmoeLayer) -> None:
    """Tensor file with per-expert blocks plus a partition side-car at
    ``path + '.part'`` recording which original neuron went where."""
    meta = np.array(
        [
            emoe.h,
            emoe.d,
            _CODE_FOR_KIND[emoe.activation],
            emoe.n_experts,
            emoe.top_k,
            _GATE_MODE_CODES[emoe.gate_mode],
        ],
        dtype=np.float64,
    )
    items: list[tuple[str, np.ndarray]] = [("meta", meta), ("G", emoe.gate)]
    for i, e in enumerate(emoe.experts):
        items.append((f"K_{i}", e.k_sub))
        items.append((f"V_{i}", e.v_sub))
        if np.any(e.b_k_sub != 0):
            items.append((f"b_k_{i}", e.b_k_sub))
    if np.any(emoe.gate_bias != 0):
        items.append(("gate_bias", emoe.gate_bias))
    if np.any(emoe.b_v != 0):
        items.append(("b_v", emoe.b_v))
    write_tensors(path, items)
    write_partition(partition_sidecar(path), emoe.partition())


def read_emoe(path: str) -> EmoeLayer:
    tensors = read_tensors(path)
    if "meta" not in tensors or tensors["meta"].shape != (6,):
        raise FormatError(f"{path}: missing or malformed meta tensor")
    h, d, act_code, n, top_k, mode_code = (int(v) for v in tensors["meta"])
    if act_code not in _KIND_FOR_CODE or mode_code not in _GATE_MODE_FOR_CODE:
        raise FormatError(f"{path}: unknown activation or gate-mode code")
    partition = read_partition(partition_sidecar(path))
    if partition.d != d or partition.n_experts != n:
        raise FormatError(f"{path}: partition side-car disagrees with meta")
    dense_k = np.empty((h, d), dtype=tensors["G"].dtype)
    dense_v = np.empty((d, h), dtype=tensors["G"].dtype)
    b_k = np.zeros(d, dtype=tensors["G"].dtype)
    for i in range(n):
        for part in (f"K_{i}", f"V_{i}"):
            if part not in tensors:
                raise FormatError(f"{path}: missing tensor {part!r}")
        idx = partition.members(i)
        if tensors[f"K_{i}"].shape != (h, d // n) or tensors[f"V_{i}"].shape != (d // n, h):
            raise FormatError(f"{path}: expert {i} block has wrong shape")
        dense_k[:, idx] = tensors[f"K_{i}"]
        dense_v[idx, :] = tensors[f"V_{i}"]
        if f"b_k_{i}" in tensors:
            b_k[idx] = tensors[f"b_k_{i}"]
    b_v = tensors.get("b_v")
    layer = FfnLayer(
        k=dense_k,
        v=dense_v,
        activation=_KIND_FOR_CODE[act_code],
        b_k=b_k,
        b_v=b_v.astype(dense_k.dtype) if b_v is not None else None,
    )
    try:
        emoe = split(layer, partition, top_k, _GATE_MODE_FOR_CODE[mode_code])
    except (ConstraintError, ValueError) as exc:
        raise FormatError(f"{path}: invalid expert layer: {exc}") from exc
    stored_gate = tensors["G"]
    if stored_gate.shape != emoe.gate.shape:
        raise FormatError(f"{path}: gate has shape {stored_gate.shape}, expected {emoe.gate.shape}")
    if emoe.gate_mode is GateMode.LEARNED:
        emoe.gate = stored_gate
        if "gate_bias" in tensors:
            emoe.gate_bias = tensors["gate_bias"].astype(stored_gate.dtype)
    else:
        # tied gate: the stored copy must match the expert keys
        rel = np.abs(stored_gate - emoe.gate)
        tol = 1e-5 * max(1.0, float(np.abs(emoe.gate).max()))
        if rel.max() > tol:
            raise FormatError(f"{path}: stored gate is not the mean of the expert keys")
    return emoe
