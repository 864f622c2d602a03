"""Binary persistence for datasets and checkpoints.

Both formats are a JSON manifest followed by raw little-endian float32 arrays
(int64 for integer arrays), so files are bit-reproducible across platforms.

Checkpoint layout::

    b"PWMC" | u32 version | u32 header_len | header JSON (utf-8) | array bytes

Dataset layout is the same with magic ``b"PWMD"``. The header lists every
array's name, dtype, shape and byte offset relative to the end of the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..data import TrajectoryDataset

CHECKPOINT_MAGIC = b"PWMC"
DATASET_MAGIC = b"PWMD"
FORMAT_VERSION = 1
COMPONENT_TAGS = ("wm", "actor", "critic")

_DTYPES = {"f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


class FormatError(ValueError):
    pass


def _encode_arrays(arrays: dict) -> tuple[list, bytes]:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if arr.dtype.kind in "iub" else "f4"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append(dict(name=name, dtype=code, shape=list(arr.shape), offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def _write(path, magic: bytes, header: dict, arrays: dict) -> None:
    entries, payload = _encode_arrays(arrays)
    header = dict(header, arrays=entries)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


def _read(path, magic: bytes) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    arrays = {}
    for e in header.pop("arrays"):
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header, arrays


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, tag: str, arrays: dict, config: dict | None = None, rng_state: dict | None = None) -> None:
    if tag not in COMPONENT_TAGS:
        raise ValueError(f"unknown component tag {tag!r}")
    header = dict(tag=tag, config=config or {}, rng_state=_jsonable(rng_state or {}))
    _write(path, CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path) -> tuple[str, dict, dict, dict]:
    """Returns (tag, arrays, config, rng_state)."""
    header, arrays = _read(path, CHECKPOINT_MAGIC)
    return header["tag"], arrays, header["config"], header["rng_state"]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def named_arrays(params, prefix: str = "p") -> dict:
    return {f"{prefix}.{i}": p.data for i, p in enumerate(params)}


def load_named(params, arrays: dict, prefix: str = "p") -> None:
    for i, p in enumerate(params):
        a = arrays[f"{prefix}.{i}"]
        if a.shape != p.data.shape:
            raise FormatError(f"shape mismatch for {prefix}.{i}: {a.shape} vs {p.data.shape}")
        p.data = a.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# datasets

def save_dataset(path, data: TrajectoryDataset) -> None:
    e, t1, n = data.obs.shape
    header = dict(
        format="trajectories",
        task_ids=sorted({int(t) for t in data.task}),
        obs_dim=int(n), act_dim=int(data.act.shape[2]),
        episodes=int(e), episode_length=int(t1 - 1),
        provenance=_jsonable(data.meta),
    )
    arrays = dict(obs=data.obs, act=data.act, rew=data.rew, done=data.done, task=data.task)
    _write(path, DATASET_MAGIC, header, arrays)


def load_dataset(path) -> TrajectoryDataset:
    header, arrays = _read(path, DATASET_MAGIC)
    ds = TrajectoryDataset(arrays["obs"], arrays["act"], arrays["rew"], arrays["done"], arrays["task"],
                           dict(header["provenance"]))
    if ds.num_episodes != header["episodes"] or ds.episode_length != header["episode_length"]:
        raise FormatError(f"{path}: arrays disagree with manifest")
    return ds
