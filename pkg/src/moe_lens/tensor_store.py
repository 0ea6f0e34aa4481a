"""Single-file checkpoint container with a fixed binary layout.

File layout, all integers little-endian:

    bytes 0..3    magic ``MOEL``
    bytes 4..7    format version, u32 (currently 1)
    bytes 8..15   header length in bytes, u64
    next          UTF-8 JSON header, exactly ``header_len`` bytes
    rest          tensor data section

The JSON header holds the model config and a tensor directory::

    {"__config__": {...},
     "tensors": {"layers.0.gate.weight": {"dtype": "f32",
                                          "shape": [8, 64],
                                          "offsets": [0, 2048]}, ...}}

Tensor payloads are float32, little-endian, row-major.  ``offsets`` are byte
positions relative to the start of the data section; the range length must be
exactly ``4 * prod(shape)``.  Ranges of distinct tensors may not overlap and
the data section ends at the largest end offset.

Tensor names are derived from the config.  Every model has ``embed.weight``
of shape ``[vocab, d_hid]``.  Gated layer ``i`` contributes
``layers.{i}.gate.weight`` ``[N_i, d_hid]`` plus, per routed expert ``n``,
``layers.{i}.experts.{n}.w_up`` and ``.w_act`` ``[d_mid, d_hid]`` and
``.w_down`` ``[d_hid, d_mid]``; shared experts use the same three suffixes
under ``layers.{i}.shared.{m}``.  A dense layer stores a single
``layers.{i}.ffn.w_up`` / ``.w_act`` / ``.w_down`` triple and no gate.

The writer lays tensors out consecutively in sorted-name order and serializes
the header with sorted keys, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig

MAGIC = b"MOEL"
FORMAT_VERSION = 1

_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Raised for any malformed checkpoint file or tensor map."""


@dataclass(frozen=True)
class TensorMeta:
    name: str
    shape: tuple[int, ...]
    start: int
    end: int

    @property
    def nbytes(self) -> int:
        return 4 * math.prod(self.shape)


@dataclass
class Checkpoint:
    """Parsed checkpoint: config, tensor directory, and the raw data section."""

    config: ModelConfig
    tensors: dict[str, TensorMeta]
    data: bytes

    def get_tensor(self, name: str) -> np.ndarray:
        """Read-only float32 view of one tensor, reshaped row-major."""
        meta = self.tensors.get(name)
        if meta is None:
            raise CheckpointError(f"missing tensor: {name}")
        flat = np.frombuffer(self.data, dtype=_F32, count=math.prod(meta.shape),
                             offset=meta.start)
        return flat.reshape(meta.shape)


def required_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Exact tensor name -> shape map implied by a config."""
    up = (config.d_mid, config.d_hid)
    down = (config.d_hid, config.d_mid)
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (config.vocab, config.d_hid)}
    for i in range(config.num_layers):
        n = config.experts_per_layer[i]
        if config.is_dense(i):
            shapes[f"layers.{i}.ffn.w_up"] = up
            shapes[f"layers.{i}.ffn.w_act"] = up
            shapes[f"layers.{i}.ffn.w_down"] = down
            continue
        shapes[f"layers.{i}.gate.weight"] = (n, config.d_hid)
        for e in range(n):
            prefix = f"layers.{i}.experts.{e}"
            shapes[f"{prefix}.w_up"] = up
            shapes[f"{prefix}.w_act"] = up
            shapes[f"{prefix}.w_down"] = down
        for m in range(config.num_shared[i]):
            prefix = f"layers.{i}.shared.{m}"
            shapes[f"{prefix}.w_up"] = up
            shapes[f"{prefix}.w_act"] = up
            shapes[f"{prefix}.w_down"] = down
    return shapes


def build_checkpoint(config: ModelConfig, tensors: dict[str, np.ndarray]) -> Checkpoint:
    """Pack a complete tensor map into an in-memory checkpoint.

    The map must cover exactly the names the config requires, each with the
    exact shape; values are cast to float32.
    """
    required = required_tensor_shapes(config)
    for name in required:
        if name not in tensors:
            raise CheckpointError(f"missing tensor: {name}")
    for name in tensors:
        if name not in required:
            raise CheckpointError(f"unexpected tensor: {name}")

    metas: dict[str, TensorMeta] = {}
    chunks: list[bytes] = []
    cursor = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        want = required[name]
        if arr.shape != want:
            raise CheckpointError(
                f"shape mismatch for {name}: got {tuple(arr.shape)}, want {want}")
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        metas[name] = TensorMeta(name=name, shape=want, start=cursor, end=cursor + len(raw))
        chunks.append(raw)
        cursor += len(raw)
    return Checkpoint(config=config, tensors=metas, data=b"".join(chunks))


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    directory = {
        name: {"dtype": "f32", "shape": list(meta.shape),
               "offsets": [meta.start, meta.end]}
        for name, meta in ckpt.tensors.items()
    }
    header_obj = {"__config__": ckpt.config.to_dict(), "tensors": directory}
    header = json.dumps(header_obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC,
             FORMAT_VERSION.to_bytes(4, "little"),
             len(header).to_bytes(8, "little"),
             header,
             ckpt.data]
    return b"".join(parts)


def write_checkpoint(config: ModelConfig, tensors: dict[str, np.ndarray], path) -> Checkpoint:
    """Validate, pack, and atomically write a checkpoint file."""
    ckpt = build_checkpoint(config, tensors)
    dump_checkpoint(ckpt, path)
    return ckpt


def dump_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = serialize_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_checkpoint(blob)


def parse_checkpoint(blob: bytes) -> Checkpoint:
    """Parse and fully validate serialized checkpoint bytes."""
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version = int.from_bytes(blob[4:8], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version: {version}")
    header_len = int.from_bytes(blob[8:16], "little")
    if 16 + header_len > len(blob):
        raise CheckpointError("header/payload length mismatch")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict) or "__config__" not in header or "tensors" not in header:
        raise CheckpointError("malformed header: missing __config__ or tensors")
    try:
        config = ModelConfig.from_dict(header["__config__"])
    except ValueError as exc:
        raise CheckpointError(f"bad config: {exc}") from exc

    data = blob[16 + header_len:]
    directory = header["tensors"]
    if not isinstance(directory, dict):
        raise CheckpointError("malformed header: tensors must be an object")

    metas: dict[str, TensorMeta] = {}
    for name, entry in directory.items():
        if not isinstance(entry, dict):
            raise CheckpointError(f"malformed entry for {name}")
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"unsupported dtype for {name}: {entry.get('dtype')!r}")
        shape = entry.get("shape")
        if (not isinstance(shape, list) or
                not all(isinstance(d, int) and d > 0 for d in shape)):
            raise CheckpointError(f"bad shape for {name}")
        offsets = entry.get("offsets")
        if (not isinstance(offsets, list) or len(offsets) != 2 or
                not all(isinstance(o, int) and o >= 0 for o in offsets)):
            raise CheckpointError(f"bad offsets for {name}")
        start, end = offsets
        meta = TensorMeta(name=name, shape=tuple(shape), start=start, end=end)
        if end - start != meta.nbytes:
            raise CheckpointError(f"payload length mismatch for {name}")
        metas[name] = meta

    spans = sorted((m.start, m.end, m.name) for m in metas.values())
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise CheckpointError(f"overlapping tensor byte ranges: {n1} and {n2}")
    total = max((m.end for m in metas.values()), default=0)
    if len(data) != total:
        raise CheckpointError("header/payload length mismatch")

    required = required_tensor_shapes(config)
    for name, shape in required.items():
        if name not in metas:
            raise CheckpointError(f"missing tensor: {name}")
        if metas[name].shape != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: got {metas[name].shape}, want {shape}")

    return Checkpoint(config=config, tensors=metas, data=data)
