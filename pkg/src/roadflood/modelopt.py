"""Model compression: scheduled magnitude pruning, int8 quantization, model files.

Model container layout (all integers little-endian)::

    b"RFPM" | u32 version | u64 header_len | JSON header | payloads | u32 CRC32(payloads)

The header holds the model config and a tensor index whose ``offset`` and
``length`` fields are relative to the start of the payload region.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .segnet.model import ModelConfig, Params, is_prunable
from .segnet.train import TrainConfig, TrainReport, train

MAGIC = b"RFPM"
VERSION = 1
ENCODINGS = ("f32", "sparse", "q8")
REPORT_LABELS = ("dense_f32", "sparse_encoded", "quantized_i8")
_PREAMBLE = struct.Struct("<4sIQ")


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class PruneSchedule:
    initial_sparsity: float = 0.2
    final_sparsity: float = 0.8
    begin_step: int = 0
    end_step: int = 5000
    power: int = 3

    def __post_init__(self):
        if not 0 <= self.initial_sparsity <= self.final_sparsity < 1:
            raise ValueError("need 0 <= initial_sparsity <= final_sparsity < 1")
        if self.begin_step > self.end_step:
            raise ValueError("begin_step must not exceed end_step")

    @classmethod
    def from_dict(cls, d) -> "PruneSchedule":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def sparsity_at(step: int, sched: PruneSchedule = PruneSchedule()) -> float:
    """Polynomial-decay sparsity target for ``step``."""
    span = sched.end_step - sched.begin_step
    if span == 0:
        progress = 1.0 if step >= sched.end_step else 0.0
    else:
        progress = min(max((step - sched.begin_step) / span, 0.0), 1.0)
    s_i, s_f = sched.initial_sparsity, sched.final_sparsity
    # pin the endpoints: s_f + (s_i - s_f) rounds to 0.19999999999999996
    if progress <= 0.0:
        return s_i
    if progress >= 1.0:
        return s_f
    return s_f + (s_i - s_f) * (1.0 - progress) ** sched.power


def prune_to_sparsity(params: Params, target: float) -> tuple[Params, dict[str, np.ndarray]]:
    """Zero the ``ceil(target * n)`` smallest-magnitude weights of every kernel.

    Biases are left alone. Ties go to the lowest flat index; weights that are
    already zero count toward the quota. Masks are True at zeroed positions.
    """
    if not 0 <= target < 1:
        raise ValueError(f"target sparsity must lie in [0, 1), got {target}")
    out, masks = {}, {}
    for name, w in params.items():
        if not is_prunable(name):
            out[name] = w
            continue
        flat = w.reshape(-1)
        k = math.ceil(target * flat.size - 1e-9)
        pruned = np.zeros(flat.size, dtype=bool)
        if k > 0:
            order = np.argsort(np.abs(flat), kind="stable")
            pruned[order[:k]] = True
        masks[name] = pruned.reshape(w.shape)
        out[name] = np.where(masks[name], np.zeros((), w.dtype), w) if k else w
    return out, masks


def zero_fraction(w: np.ndarray) -> float:
    return float(np.count_nonzero(w == 0)) / w.size


def prune_finetune(
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    model_cfg: ModelConfig,
    sched: PruneSchedule = PruneSchedule(),
    train_cfg: TrainConfig = TrainConfig(epochs=2),
) -> tuple[Params, TrainReport]:
    """Fine-tune while ramping sparsity along ``sched``.

    After optimizer step ``t`` the kernels are pruned to ``sparsity_at(t)``.
    Positions pruned earlier stay zero: their gradients are dropped and the
    previous mask is applied before re-pruning.
    """
    masks: dict[str, np.ndarray] = {}

    def drop_masked_grads(grads, step):
        return {n: np.where(masks[n], 0, g).astype(g.dtype) if n in masks else g for n, g in grads.items()}

    def reprune(p, step):
        p = {n: np.where(masks[n], np.zeros((), w.dtype), w) if n in masks else w for n, w in p.items()}
        p, new = prune_to_sparsity(p, sparsity_at(step, sched))
        masks.update(new)
        return p

    return train(x, y, model_cfg, train_cfg, params=dict(params),
                 grad_hook=drop_masked_grads, step_hook=reprune)


@dataclass(frozen=True)
class QuantTensor:
    """Symmetric per-tensor int8 tensor (zero point 0)."""

    name: str
    shape: tuple
    scale: float
    values: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (
            self.name == other.name
            and tuple(self.shape) == tuple(other.shape)
            and np.float32(self.scale) == np.float32(other.scale)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def quantize_tensor(name: str, w: np.ndarray) -> QuantTensor:
    w = np.asarray(w)
    if not np.isfinite(w).all():
        raise ValueError(f"non-finite weight in {name}")
    peak = float(np.abs(w).max()) if w.size else 0.0
    scale = np.float32(peak / 127.0) if peak > 0 else np.float32(1.0)
    if scale == 0:  # denormal underflow
        scale = np.float32(np.finfo(np.float32).tiny)
    q = np.clip(np.round(w.astype(np.float64) / np.float64(scale)), -127, 127).astype(np.int8)
    return QuantTensor(name, tuple(w.shape), float(scale), q)


def quantize_params(params: Params) -> list[QuantTensor]:
    return [quantize_tensor(n, w) for n, w in params.items()]


def dequantize(qt: QuantTensor) -> np.ndarray:
    return (qt.values.astype(np.float32) * np.float32(qt.scale)).reshape(qt.shape)


def dequantize_params(qts) -> Params:
    return {qt.name: dequantize(qt) for qt in qts}


def _encode(name: str, tensor, encoding: str) -> tuple[bytes, dict]:
    entry = {"name": name, "encoding": encoding}
    if encoding == "q8":
        qt = tensor if isinstance(tensor, QuantTensor) else quantize_tensor(name, tensor)
        entry.update(shape=list(qt.shape), scale=qt.scale)
        return qt.values.astype(np.int8).tobytes(), entry
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    entry["shape"] = list(arr.shape)
    if encoding == "f32":
        return arr.tobytes(), entry
    bits = arr.reshape(-1).view("<u4")
    idx = np.flatnonzero(bits).astype("<u4")
    return idx.tobytes() + arr.reshape(-1)[idx].tobytes(), entry


def _decode(entry: Mapping, raw: bytes):
    shape = tuple(entry["shape"])
    n = int(np.prod(shape, dtype=np.int64))
    enc = entry["encoding"]
    if enc == "q8":
        if len(raw) != n:
            raise ModelFileError(f"tensor {entry['name']}: truncated q8 payload")
        values = np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
        return QuantTensor(entry["name"], shape, float(entry["scale"]), values)
    if enc == "f32":
        if len(raw) != 4 * n:
            raise ModelFileError(f"tensor {entry['name']}: truncated f32 payload")
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if enc == "sparse":
        if len(raw) % 8:
            raise ModelFileError(f"tensor {entry['name']}: malformed sparse payload")
        nnz = len(raw) // 8
        idx = np.frombuffer(raw[: 4 * nnz], dtype="<u4")
        vals = np.frombuffer(raw[4 * nnz :], dtype="<f4")
        if nnz and idx.max() >= n:
            raise ModelFileError(f"tensor {entry['name']}: sparse index out of range")
        out = np.zeros(n, dtype=np.float32)
        out[idx] = vals
        return out.reshape(shape)
    raise ModelFileError(f"unknown tensor encoding {enc!r}")


def model_to_bytes(cfg: ModelConfig, tensors, encoding: str = "f32") -> bytes:
    """Serialise ``tensors`` (a name->array mapping or a list of QuantTensor)."""
    if encoding not in ENCODINGS:
        raise ValueError(f"encoding must be one of {ENCODINGS}")
    if isinstance(tensors, Mapping):
        items = list(tensors.items())
    else:
        items = [(qt.name, qt) for qt in tensors]
    if any(isinstance(t, QuantTensor) for _, t in items) and encoding != "q8":
        raise ValueError("quantized tensors can only be stored with the q8 encoding")
    chunks, index, offset = [], [], 0
    for name, t in items:
        raw, entry = _encode(name, t, encoding)
        entry.update(offset=offset, length=len(raw))
        chunks.append(raw)
        index.append(entry)
        offset += len(raw)
    header = json.dumps({"config": cfg.to_dict(), "tensors": index}, sort_keys=True).encode()
    payload = b"".join(chunks)
    return (
        _PREAMBLE.pack(MAGIC, VERSION, len(header))
        + header
        + payload
        + struct.pack("<I", zlib.crc32(payload))
    )


def model_from_bytes(blob: bytes):
    """Parse a container; returns ``(config, tensors, encoding)``.

    ``tensors`` is a name->float32 array dict for f32/sparse files and a list
    of :class:`QuantTensor` for q8 files.
    """
    if len(blob) < _PREAMBLE.size + 4:
        raise ModelFileError("model file truncated")
    magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    start = _PREAMBLE.size + hlen
    if start + 4 > len(blob):
        raise ModelFileError("model file truncated inside header")
    try:
        header = json.loads(blob[_PREAMBLE.size : start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"unreadable model header: {exc}") from None
    payload = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    expected_len = sum(e["length"] for e in header["tensors"])
    if len(payload) != expected_len:
        raise ModelFileError("model payload truncated")
    if zlib.crc32(payload) != crc:
        raise ModelFileError("model payload checksum mismatch")
    cfg = ModelConfig.from_dict(header["config"])
    decoded = [(e, _decode(e, payload[e["offset"] : e["offset"] + e["length"]])) for e in header["tensors"]]
    encs = {e["encoding"] for e, _ in decoded}
    encoding = encs.pop() if len(encs) == 1 else "mixed"
    if encoding == "q8":
        return cfg, [t for _, t in decoded], encoding
    return cfg, {e["name"]: t for e, t in decoded}, encoding


def save_model(cfg: ModelConfig, tensors, path, encoding: str = "f32") -> None:
    blob = model_to_bytes(cfg, tensors, encoding)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


def load_inference_params(path) -> tuple[ModelConfig, Params]:
    """Float32 weights ready for :func:`forward`, dequantizing q8 files."""
    cfg, tensors, encoding = load_model(path)
    if encoding == "q8":
        return cfg, dequantize_params(tensors)
    return cfg, tensors


def payload_bytes(tensors, encoding: str) -> int:
    cfg = ModelConfig()
    blob = model_to_bytes(cfg, tensors, encoding)
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    return len(blob) - _PREAMBLE.size - hlen - 4


def size_report(cfg: ModelConfig, params: Params) -> dict:
    """Byte counts of ``params`` under every encoding, plus per-kernel sparsity.

    ``payload_bytes`` counts tensor data only, ``file_bytes`` the whole container.
    """
    out = {"n_weights": int(sum(v.size for v in params.values())), "payload_bytes": {}, "file_bytes": {}}
    quant = quantize_params(params)
    for enc, label in zip(ENCODINGS, REPORT_LABELS):
        tensors = quant if enc == "q8" else params
        out["file_bytes"][label] = len(model_to_bytes(cfg, tensors, enc))
        out["payload_bytes"][label] = payload_bytes(tensors, enc)
    prunable = {n: w for n, w in params.items() if is_prunable(n)}
    out["sparsity"] = {n: zero_fraction(w) for n, w in prunable.items()}
    n_prunable = sum(w.size for w in prunable.values())
    out["global_sparsity"] = (
        sum(int(np.count_nonzero(w == 0)) for w in prunable.values()) / n_prunable if n_prunable else 0.0
    )
    pb = out["payload_bytes"]
    out["ratios"] = {
        "sparse_vs_dense": pb["sparse_encoded"] / pb["dense_f32"],
        "q8_vs_dense": pb["quantized_i8"] / pb["dense_f32"],
    }
    return out
