"""File formats: checkpoint container, binary PLY, depth maps, PNG.

All writers are deterministic (no timestamps, fixed field order) and
atomic (temp file + rename), so identical state produces bit-identical
files. Byte layouts are documented in docs/formats.md.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

Array = np.ndarray

CONTAINER_MAGIC = b"WGSC"
CONTAINER_VERSION = 1
DEPTH_MAGIC = b"WGSD"
DEPTH_VERSION = 1


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, header: dict, arrays: dict[str, Array]) -> None:
    """Versioned binary container: header JSON + raw little-endian blobs.

    Layout: magic, u32 version, u64 header length, header JSON, then each
    array's bytes in the order listed in header["arrays"].
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    full_header = dict(header)
    full_header["arrays"] = entries
    header_bytes = _json_bytes(full_header)
    payload = bytearray()
    payload += CONTAINER_MAGIC
    payload += struct.pack("<I", CONTAINER_VERSION)
    payload += struct.pack("<Q", len(header_bytes))
    payload += header_bytes
    for blob in blobs:
        payload += blob
    atomic_write_bytes(Path(path), bytes(payload))


def read_container(path):
    """Inverse of write_container -> (header dict, arrays dict)."""
    data = Path(path).read_bytes()
    if data[:4] != CONTAINER_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def write_ply(path, points: Array, colors: Array | None = None) -> None:
    """Binary little-endian PLY with float x/y/z and optional uchar RGB."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.dtype != np.uint8:
            colors = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
        colors = colors.reshape(-1, 3)
        if len(colors) != len(points):
            raise ValueError("colors and points must have equal length")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    payload = bytearray(("\n".join(lines) + "\n").encode("ascii"))
    if colors is None:
        payload += points.tobytes()
    else:
        rec = np.zeros(
            len(points),
            dtype=[("xyz", np.float32, 3), ("rgb", np.uint8, 3)],
        )
        rec["xyz"] = points
        rec["rgb"] = colors
        payload += rec.tobytes()
    atomic_write_bytes(Path(path), bytes(payload))


def read_ply(path):
    """Read a binary or ascii PLY -> (points (n,3) float64, colors or None)."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if end < 0:
        raise ValueError(f"{path}: missing PLY header terminator")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n") :]
    fmt = None
    count = 0
    props: list[tuple[str, str]] = []
    for line in header:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property" and len(parts) == 3:
            props.append((parts[1], parts[2]))
    names = [name for _, name in props]
    if not {"x", "y", "z"}.issubset(names):
        raise ValueError(f"{path}: PLY must carry x, y, z")
    type_map = {
        "float": np.float32,
        "float32": np.float32,
        "double": np.float64,
        "uchar": np.uint8,
        "uint8": np.uint8,
        "int": np.int32,
        "int32": np.int32,
    }
    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, type_map[t]) for t, name in props])
        rec = np.frombuffer(body, dtype=dtype, count=count)
    elif fmt == "ascii":
        rows = np.loadtxt(body.decode("ascii").splitlines(), ndmin=2)
        rec = {name: rows[:, i] for i, name in enumerate(names)}
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    points = np.stack(
        [np.asarray(rec["x"]), np.asarray(rec["y"]), np.asarray(rec["z"])], axis=1
    ).astype(np.float64)
    colors = None
    if {"red", "green", "blue"}.issubset(names):
        colors = (
            np.stack(
                [np.asarray(rec["red"]), np.asarray(rec["green"]), np.asarray(rec["blue"])],
                axis=1,
            ).astype(np.float64)
            / 255.0
        )
    return points, colors


def write_depth(path, depth: Array) -> None:
    """Lossless float32 depth map: magic, u32 version, u32 h, u32 w, data."""
    depth = np.ascontiguousarray(np.asarray(depth, dtype=np.float32))
    if depth.ndim != 2:
        raise ValueError("depth must be 2-D")
    h, w = depth.shape
    payload = DEPTH_MAGIC + struct.pack("<III", DEPTH_VERSION, h, w) + depth.tobytes()
    atomic_write_bytes(Path(path), payload)


def read_depth(path) -> Array:
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth file")
    version, h, w = struct.unpack_from("<III", data, 4)
    if version != DEPTH_VERSION:
        raise ValueError(f"{path}: unsupported depth version {version}")
    return (
        np.frombuffer(data[16 : 16 + 4 * h * w], dtype=np.float32)
        .reshape(h, w)
        .astype(np.float64)
    )


def write_png(path, image: Array) -> None:
    """8-bit PNG from a float image in [0, 1], shape (h, w, 3) or (h, w)."""
    arr = quantize_image(image)
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path) -> Array:
    """PNG -> float64 image in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def quantize_image(image: Array) -> Array:
    """Float [0,1] -> uint8, round-half-away like image viewers expect."""
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_json(path, obj) -> None:
    atomic_write_bytes(Path(path), json.dumps(obj, sort_keys=True, indent=2).encode("utf-8"))


def read_json(path):
    return json.loads(Path(path).read_text())
