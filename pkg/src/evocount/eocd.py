"""Binary tensor/checkpoint formats and dataset directory layout.

EOCD1 holds a single tensor: magic b"EOCD1", u32 rank, u32 extents, then the
payload as little-endian float64 in row-major order.  EOCM1 is a checkpoint
container: magic b"EOCM1", u32 format version, u32 stage, then named parameter
records (u32 name length, name bytes, u32 rank, u32 extents, payload as in
EOCD1).  Both formats are dependency-free to parse.

A dataset directory holds one folder per stage (stage_1, stage_2, ...), each
with train/val/test subfolders containing img_NNNN.eocd1 / den_NNNN.eocd1
pairs and an index.txt of comma-separated (class_id, dot count, seed) lines.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from . import scenegen as G
from .tensor import Tensor

TENSOR_MAGIC = b"EOCD1"
CKPT_MAGIC = b"EOCM1"
CKPT_VERSION = 1

_SPLITS = ("train", "val", "test")


def _pack_tensor(arr: np.ndarray) -> bytes:
    # ascontiguousarray would promote rank 0 to rank 1, losing the shape
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 0:
        arr = np.ascontiguousarray(arr)
    head = struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<I", e) for e in arr.shape)
    return head + arr.astype("<f8", copy=False).tobytes()


def _unpack_tensor(buf: bytes, off: int):
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    shape = []
    for _ in range(rank):
        (e,) = struct.unpack_from("<I", buf, off)
        shape.append(e)
        off += 4
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    nbytes = n * 8
    if off + nbytes > len(buf):
        raise ValueError("tensor payload truncated")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
    return arr, off + nbytes


def write_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(_pack_tensor(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:5]!r}")
    arr, off = _unpack_tensor(buf, 5)
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return arr


def write_checkpoint(path, stage: int, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, stage))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(_pack_tensor(np.asarray(arr)))


def read_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:5]!r}")
    version, stage = struct.unpack_from("<II", buf, 5)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 13
    arrays: dict[str, np.ndarray] = {}
    while off < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        if name in arrays:
            raise ValueError(f"{path}: duplicate parameter {name!r}")
        arrays[name], off = _unpack_tensor(buf, off)
    return stage, arrays


# ---------------------------------------------------------------------------
# dataset directories


def export_benchmark(benchmark, out_dir) -> list[str]:
    """Write every split of every stage; returns relative paths written."""
    written = []

    def put(rel, writer):
        path = os.path.join(out_dir, rel)
        writer(path)
        written.append(rel)

    for stage_idx, ds in enumerate(benchmark, start=1):
        for split in _SPLITS:
            samples = getattr(ds, split)
            d = os.path.join(out_dir, f"stage_{stage_idx}", split)
            os.makedirs(d, exist_ok=True)
            lines = []
            for i, s in enumerate(samples):
                rel = f"stage_{stage_idx}/{split}/img_{i:04d}.eocd1"
                put(rel, lambda p, s=s: write_tensor(p, s.image.data))
                rel = f"stage_{stage_idx}/{split}/den_{i:04d}.eocd1"
                put(rel, lambda p, s=s: write_tensor(p, s.density.data))
                lines.append(f"{s.class_id},{s.n_dots},{s.seed}\n")
            rel = f"stage_{stage_idx}/{split}/index.txt"
            put(rel, lambda p, lines=lines: open(p, "w").writelines(lines))
    return written


def _read_split(root, stage_idx, split, delta):
    d = os.path.join(root, f"stage_{stage_idx}", split)
    index = os.path.join(d, "index.txt")
    samples = []
    with open(index) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cid, n_dots, seed = (int(v) for v in line.split(","))
            img = read_tensor(os.path.join(d, f"img_{i:04d}.eocd1"))
            den = read_tensor(os.path.join(d, f"den_{i:04d}.eocd1"))
            density = Tensor(den)
            samples.append(G.Sample(image=Tensor(img), dots=None, class_id=cid,
                                    density=density,
                                    mask=G.binary_mask(density, delta),
                                    seed=seed, n_dots=n_dots))
    return samples


def import_benchmark(root, delta: float = G.DEFAULT_DELTA):
    """Rebuild StageDatasets from an exported directory tree."""
    stages = []
    stage_idx = 1
    while os.path.isdir(os.path.join(root, f"stage_{stage_idx}")):
        ds = G.StageDataset(class_id=stage_idx)
        for split in _SPLITS:
            setattr(ds, split, _read_split(root, stage_idx, split, delta))
        stages.append(ds)
        stage_idx += 1
    if not stages:
        raise ValueError(f"{root}: no stage_1 directory found")
    return stages


def parse_sample_id(sid: str):
    """Sample ids look like s2/test/07: stage, split, index within the split."""
    parts = sid.split("/")
    if len(parts) != 3 or not parts[0].startswith("s"):
        raise ValueError(f"bad sample id {sid!r} (expected s<stage>/<split>/<idx>)")
    stage = int(parts[0][1:])
    split = parts[1]
    if split not in _SPLITS:
        raise ValueError(f"bad split in sample id {sid!r}")
    return stage, split, int(parts[2])


def load_sample(root, sid: str, delta: float = G.DEFAULT_DELTA):
    stage, split, idx = parse_sample_id(sid)
    samples = _read_split(root, stage, split, delta)
    if not (0 <= idx < len(samples)):
        raise ValueError(f"sample id {sid!r} out of range ({len(samples)} in split)")
    return samples[idx]
