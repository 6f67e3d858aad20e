"""On-disk formats: weight files, PPM images, latent blobs, run configs.

The weight format is explicitly little-endian regardless of host:

    magic "LUA1" | version u32 | tensor count u32
    per tensor: name length u16, UTF-8 name, rank u8, extents u32 each,
                dtype tag u8 (0 = f32), raw payload

Round trips are bit-exact; unknown magic, version, or dtype tags are
rejected.  Decoded RGB images persist as binary PPM (P6, 8-bit); latents
as raw little-endian f32 blobs with a JSON sidecar manifest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

WEIGHT_MAGIC = b"LUA1"
WEIGHT_VERSION = 1
_DTYPE_F32 = 0


class FormatError(ValueError):
    """Malformed or unsupported on-disk data."""


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

def save_weights(path, named_arrays) -> None:
    """Write an ordered mapping/iterable of (name, float32 array)."""
    items = list(named_arrays.items() if hasattr(named_arrays, "items") else named_arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(arr)
            if arr.dtype != np.float32:
                raise FormatError(f"{name}: only f32 tensors are storable, got {arr.dtype}")
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise FormatError(f"tensor name too long ({len(nb)} bytes)")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(struct.pack("<B", _DTYPE_F32))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a weight file back into an ordered name → float32 array dict."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHT_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != WEIGHT_VERSION:
            raise FormatError(f"unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            (tag,) = struct.unpack("<B", f.read(1))
            if tag != _DTYPE_F32:
                raise FormatError(f"{name}: unknown dtype tag {tag}")
            n = int(np.prod(shape)) if shape else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise FormatError(f"{name}: truncated payload")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# PPM images
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """(3,H,W) float in [0,1] -> binary P6, 8-bit."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"write_ppm: expected (3,H,W), got {image.shape}")
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = image.shape[1], image.shape[2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> (3,H,W) float32 in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise FormatError("read_ppm: not a binary PPM (P6) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"read_ppm: unsupported maxval {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# Latent blobs
# ---------------------------------------------------------------------------

def write_latent_blob(path_base, arr: np.ndarray, seed: int | None = None,
                      extra: dict | None = None) -> None:
    """Raw little-endian f32 blob plus a JSON sidecar manifest."""
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr, dtype=np.float32)
    with open(base.with_suffix(".f32"), "wb") as f:
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {"shape": list(arr.shape), "dtype": "f32le"}
    if seed is not None:
        manifest["seed"] = seed
    if extra:
        manifest.update(extra)
    with open(base.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def read_latent_blob(path_base) -> tuple[np.ndarray, dict]:
    base = Path(path_base)
    with open(base.with_suffix(".json")) as f:
        manifest = json.load(f)
    if manifest.get("dtype") != "f32le":
        raise FormatError(f"unsupported latent dtype {manifest.get('dtype')!r}")
    shape = tuple(manifest["shape"])
    raw = np.fromfile(base.with_suffix(".f32"), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise FormatError("latent blob size does not match manifest shape")
    return raw.reshape(shape).astype(np.float32), manifest


# ---------------------------------------------------------------------------
# Run configuration (plain text, sectioned key = value)
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    """Parse `[section]` headers and `key = value` lines; '#' comments."""
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise FormatError(f"line {lineno}: empty section name")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise FormatError(f"line {lineno}: assignment before any [section]")
        key, value = line.split("=", 1)
        current[key.strip()] = value.strip()
    return sections


def format_config_text(sections: dict[str, dict[str, str]]) -> str:
    """Deterministic inverse of parse_config_text (sections/keys as given)."""
    lines = []
    for name, kv in sections.items():
        lines.append(f"[{name}]")
        for key, value in kv.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
