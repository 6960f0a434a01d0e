"""Binary snapshot container and run-directory layout.

Snapshot file (all integers little-endian)::

    b"ECOV" | version u16 | element width u8 (4 or 8) | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | raw values
    CRC32 u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ecovnet.augment import AugmentRanges
from ecovnet.errors import (ChecksumError, ShapeMismatchError, SnapshotFormatError,
                            WidthMismatchError)
from ecovnet.model import ArchSpec, ModelParams, Stage, build_model
from ecovnet.train import Snapshot, SnapshotBundle, TrainConfig, format_log

MAGIC = b"ECOV"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def encode_tensors(tensors: dict[str, np.ndarray], width: int) -> bytes:
    if width not in _DTYPES:
        raise SnapshotFormatError(f"element width must be 4 or 8, got {width}")
    dt = _DTYPES[width]
    parts = [MAGIC, struct.pack("<HBI", VERSION, width, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a snapshot blob into (width, tensors). The CRC is checked before anything else."""
    if len(blob) < 4 + 7 + 4:
        raise SnapshotFormatError("snapshot file is too short")
    if blob[:4] != MAGIC:
        raise SnapshotFormatError("bad magic bytes; not a snapshot file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch; file is corrupt or truncated")
    version, width, count = struct.unpack_from("<HBI", body, 4)
    if version != VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    if width not in _DTYPES:
        raise SnapshotFormatError(f"invalid element width {width}")
    dt = _DTYPES[width]
    pos = 11
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * width
            if pos + nbytes > len(body):
                raise SnapshotFormatError(f"tensor {name} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype=dt, count=nbytes // width, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise SnapshotFormatError(f"malformed snapshot: {exc}") from exc
    if pos != len(body):
        raise SnapshotFormatError("trailing bytes after the last tensor")
    return width, tensors


def save_snapshot(model: ModelParams, path) -> None:
    width = model.dtype.itemsize
    Path(path).write_bytes(encode_tensors(model.tensors(), width))


def load_snapshot(path, spec: ArchSpec, dtype=np.float32) -> ModelParams:
    """Load into a model of ``spec``; the stored width must equal ``dtype``'s."""
    width, tensors = decode_tensors(Path(path).read_bytes())
    want = np.dtype(dtype).itemsize
    if width != want:
        raise WidthMismatchError(f"{path}: stored element width {width} bytes, build expects {want}")
    template = build_model(spec, seed=0, dtype=dtype)
    expected = template.tensors()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(expected))[:3]
        raise ShapeMismatchError(f"{path}: tensor names differ from the architecture (missing {missing}, extra {extra})")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {arr.shape}, architecture needs {expected[name].shape}")
    params = {k: tensors[k].astype(dtype, copy=False) for k in template.params}
    state = {k: tensors[k].astype(dtype, copy=False) for k in template.state}
    return ModelParams(spec, params, state, np.dtype(dtype))


# ---------------------------------------------------------------------------
# ArchSpec / run directory
# ---------------------------------------------------------------------------

def arch_to_dict(spec: ArchSpec) -> dict:
    d = asdict(spec)
    d["stages"] = [asdict(s) for s in spec.stages]
    return d


def arch_from_dict(d: dict) -> ArchSpec:
    d = dict(d)
    d["stages"] = tuple(Stage(**s) for s in d["stages"])
    return ArchSpec(**d)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["ranges"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["ranges"].items()}
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    r = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("ranges").items()}
    return TrainConfig(**d, ranges=AugmentRanges(**r))


def save_run(run_dir, bundle: SnapshotBundle, classes) -> None:
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = bundle.snapshots[0].model
    meta = {
        "arch": arch_to_dict(first.arch),
        "dtype": first.dtype.name,
        "classes": list(classes),
        "config": config_to_dict(bundle.config),
        "snapshots": [],
    }
    for s in bundle.snapshots:
        fname = f"snapshot_{s.cycle}.ecov"
        save_snapshot(s.model, out / fname)
        meta["snapshots"].append(dict(cycle=s.cycle, epoch=s.epoch, file=fname,
                                      train_loss=s.train_loss, val_acc=s.val_acc))
    (out / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (out / "train_log.csv").write_text(format_log(bundle.log))


def load_run(run_dir) -> tuple[SnapshotBundle, list[str]]:
    run = Path(run_dir)
    meta_path = run / "bundle.json"
    if not meta_path.is_file():
        raise SnapshotFormatError(f"{run} has no bundle.json")
    meta = json.loads(meta_path.read_text())
    spec = arch_from_dict(meta["arch"])
    dtype = np.dtype(meta["dtype"])
    snaps = [Snapshot(s["cycle"], s["epoch"], load_snapshot(run / s["file"], spec, dtype),
                      s["train_loss"], s["val_acc"]) for s in meta["snapshots"]]
    return SnapshotBundle(snaps, config_from_dict(meta["config"])), meta["classes"]
