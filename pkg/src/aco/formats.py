"""Little-endian binary formats for frames, action labels and checkpoints.

All three share a 12-byte preamble (4-byte magic, u32 version, u32 count).
Readers validate every size against the bytes actually present before
allocating, and report problems as `FormatError` with one of
`ERROR_CODES`. Floats are stored as f32; in memory they come back as f64.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

VERSION = 1
FRAME_MAGIC = b"ACOF"
LABEL_MAGIC = b"ACOL"
CHECKPOINT_MAGIC = b"ACOW"
PROVENANCE_KEY = "__provenance__"
MAX_RANK = 8

ERROR_CODES = ("bad_magic", "bad_version", "truncated", "trailing_data", "bad_header",
               "bad_value", "duplicate_name")

GROUND_TRUTH, PSEUDO = 0, 1


class FormatError(ValueError):
    def __init__(self, code: str, detail: str):
        assert code in ERROR_CODES, code
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


@dataclass
class FramePack:
    frames: np.ndarray  # (N, H, W, C)
    episode_ids: np.ndarray  # (N,) int
    time_index: np.ndarray  # (N,) int

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class LabelFile:
    episode_ids: np.ndarray
    time_index: np.ndarray
    actions: np.ndarray
    sources: np.ndarray  # 0 ground truth, 1 pseudo

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)


# --- shared -------------------------------------------------------------------------

_PREAMBLE = struct.Struct("<4sII")


def _preamble(buf: bytes, magic: bytes) -> int:
    if len(buf) < 4:
        raise FormatError("truncated", f"{len(buf)} bytes, no magic")
    if buf[:4] != magic:
        raise FormatError("bad_magic", f"expected {magic!r}, found {bytes(buf[:4])!r}")
    if len(buf) < _PREAMBLE.size:
        raise FormatError("truncated", "preamble cut short")
    _, version, count = _PREAMBLE.unpack_from(buf)
    if version != VERSION:
        raise FormatError("bad_version", f"version {version}, expected {VERSION}")
    return count


def _exact_size(buf: bytes, want: int) -> None:
    if len(buf) < want:
        raise FormatError("truncated", f"{len(buf)} bytes, declared layout needs {want}")
    if len(buf) > want:
        raise FormatError("trailing_data", f"{len(buf) - want} bytes past the declared payload")


def _finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise FormatError("bad_value", f"non-finite {what}")


def _widen(a: np.ndarray) -> np.ndarray:
    # signalling NaNs in corrupted payloads warn on the cast; _finite rejects them after
    with np.errstate(invalid="ignore"):
        return a.astype(np.float64)


def _u32(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.size and (a.min() < 0 or a.max() > 0xFFFFFFFF):
        raise ValueError(f"{what} outside u32 range")
    return a.astype("<u4")


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype("<f4")


def write_bytes(path, data: bytes) -> None:
    """Write via a sibling temporary file and an atomic rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# --- frame pack ------------------------------------------------------------------------

_FRAME_DIMS = struct.Struct("<HHH")


def _frame_dtype(pixels: int) -> np.dtype:
    return np.dtype([("ep", "<u4"), ("t", "<u4"), ("px", "<f4", (pixels,))])


def encode_frames(pack: FramePack) -> bytes:
    frames = np.asarray(pack.frames)
    if frames.ndim != 4:
        raise ValueError("frames must be (N, H, W, C)")
    n, h, w, c = frames.shape
    if max(h, w, c) > 0xFFFF or min(h, w, c) < 1:
        raise ValueError(f"frame dims {frames.shape[1:]} do not fit u16")
    if len(pack.episode_ids) != n or len(pack.time_index) != n:
        raise ValueError("episode_ids / time_index length differs from frame count")
    rec = np.empty(n, dtype=_frame_dtype(h * w * c))
    rec["ep"] = _u32(pack.episode_ids, "episode_id")
    rec["t"] = _u32(pack.time_index, "time_index")
    rec["px"] = _f32(frames).reshape(n, h * w * c)
    return _PREAMBLE.pack(FRAME_MAGIC, VERSION, n) + _FRAME_DIMS.pack(h, w, c) + rec.tobytes()


def decode_frames(buf: bytes) -> FramePack:
    n = _preamble(buf, FRAME_MAGIC)
    start = _PREAMBLE.size + _FRAME_DIMS.size
    if len(buf) < start:
        raise FormatError("truncated", "frame dimensions cut short")
    h, w, c = _FRAME_DIMS.unpack_from(buf, _PREAMBLE.size)
    if min(h, w, c) == 0:
        raise FormatError("bad_header", f"zero frame dimension ({h}, {w}, {c})")
    _exact_size(buf, start + n * (8 + 4 * h * w * c))
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return FramePack(np.zeros((0, h, w, c)), empty, empty.copy())
    dt = _frame_dtype(h * w * c)
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=start)
    frames = _widen(rec["px"]).reshape(n, h, w, c)
    _finite(frames, "pixel")
    return FramePack(frames, rec["ep"].astype(np.int64), rec["t"].astype(np.int64))


def write_frames(path, pack: FramePack) -> None:
    write_bytes(path, encode_frames(pack))


def read_frames(path) -> FramePack:
    return decode_frames(_read(path))


# --- label file -------------------------------------------------------------------------

_LABEL_DTYPE = np.dtype([("ep", "<u4"), ("t", "<u4"), ("a", "<f4"), ("src", "u1")])


def encode_labels(labels: LabelFile) -> bytes:
    n = len(labels.actions)
    if not (len(labels.episode_ids) == len(labels.time_index) == len(labels.sources) == n):
        raise ValueError("label columns differ in length")
    src = np.asarray(labels.sources)
    if not np.isin(src, (GROUND_TRUTH, PSEUDO)).all():
        raise ValueError("sources must be 0 (ground truth) or 1 (pseudo)")
    rec = np.empty(n, dtype=_LABEL_DTYPE)
    rec["ep"] = _u32(labels.episode_ids, "episode_id")
    rec["t"] = _u32(labels.time_index, "time_index")
    rec["a"] = _f32(labels.actions)
    rec["src"] = src
    return _PREAMBLE.pack(LABEL_MAGIC, VERSION, n) + rec.tobytes()


def decode_labels(buf: bytes) -> LabelFile:
    n = _preamble(buf, LABEL_MAGIC)
    _exact_size(buf, _PREAMBLE.size + n * _LABEL_DTYPE.itemsize)
    rec = np.frombuffer(buf, dtype=_LABEL_DTYPE, count=n, offset=_PREAMBLE.size)
    actions = _widen(rec["a"])
    _finite(actions, "action")
    if np.any((actions < 0) | (actions > 1)):
        raise FormatError("bad_value", "action outside [0, 1]")
    if np.any(rec["src"] > PSEUDO):
        raise FormatError("bad_value", "unknown label source")
    return LabelFile(rec["ep"].astype(np.int64), rec["t"].astype(np.int64), actions,
                     rec["src"].astype(np.int64))


def write_labels(path, labels: LabelFile) -> None:
    write_bytes(path, encode_labels(labels))


def read_labels(path) -> LabelFile:
    return decode_labels(_read(path))


# --- checkpoint -----------------------------------------------------------------------------

def _provenance_array(prov: dict) -> np.ndarray:
    raw = json.dumps(prov, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _provenance_from(arr: np.ndarray) -> dict:
    if arr.ndim != 1 or np.any(arr != np.round(arr)) or np.any((arr < 0) | (arr > 255)):
        raise FormatError("bad_value", "provenance entry is not a byte string")
    try:
        prov = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError("bad_value", "provenance entry is not valid JSON") from None
    if not isinstance(prov, dict):
        raise FormatError("bad_value", "provenance entry is not an object")
    return prov


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    items = list(ckpt.tensors.items())
    if PROVENANCE_KEY in ckpt.tensors:
        raise ValueError(f"{PROVENANCE_KEY} is reserved")
    items.append((PROVENANCE_KEY, _provenance_array(ckpt.provenance)))
    parts = [_PREAMBLE.pack(CHECKPOINT_MAGIC, VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if not 1 <= len(raw) <= 0xFFFF:
            raise ValueError(f"tensor name length {len(raw)} out of range")
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(np.asarray(arr.shape, dtype="<u4").tobytes())
        parts.append(_f32(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    count = _preamble(buf, CHECKPOINT_MAGIC)
    pos = _PREAMBLE.size
    tensors: dict[str, np.ndarray] = {}
    prov = None
    for i in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated", f"tensor {i}: name length cut short")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if nlen == 0:
            raise FormatError("bad_header", f"tensor {i}: empty name")
        if len(buf) < pos + nlen + 1:
            raise FormatError("truncated", f"tensor {i}: name cut short")
        try:
            name = bytes(buf[pos:pos + nlen]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("bad_value", f"tensor {i}: name is not UTF-8") from None
        pos += nlen
        rank = buf[pos]
        pos += 1
        if rank > MAX_RANK:
            raise FormatError("bad_header", f"tensor {name!r}: rank {rank} > {MAX_RANK}")
        if len(buf) < pos + 4 * rank:
            raise FormatError("truncated", f"tensor {name!r}: dims cut short")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = 1
        for d in dims:
            size *= d
        if len(buf) < pos + 4 * size:
            raise FormatError("truncated", f"tensor {name!r}: payload cut short")
        if name in tensors or (name == PROVENANCE_KEY and prov is not None):
            raise FormatError("duplicate_name", f"tensor {name!r} appears twice")
        arr = _widen(np.frombuffer(buf, dtype="<f4", count=size, offset=pos))
        pos += 4 * size
        arr = arr.reshape(dims)
        if name == PROVENANCE_KEY:
            prov = _provenance_from(arr)
        else:
            _finite(arr, f"value in {name!r}")
            tensors[name] = arr
    if len(buf) > pos:
        raise FormatError("trailing_data", f"{len(buf) - pos} bytes after the last tensor")
    if prov is None:
        raise FormatError("bad_header", "no provenance entry")
    return Checkpoint(tensors, prov)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    write_bytes(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(_read(path))
